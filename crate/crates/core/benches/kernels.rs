//! Hot kernels on the default rayon pool versus a single thread. Build with
//! `--no-default-features` to time the plain-loop fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cgcd::metric_head::{pa_loss, ProjectionHead, ProxyBank};
use cgcd::par;
use cgcd::pseudo_label::{affinity_propagation, ApConfig};

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn compare<R: Send>(c: &mut Criterion, name: &str, f: impl Fn() -> R + Sync + Send) {
    let mut group = c.benchmark_group(name);
    let label = if par::is_parallel() { "rayon" } else { "sequential" };
    group.bench_function(label, |b| b.iter(|| black_box(f())));
    group.bench_function("one_thread", |b| b.iter(|| par::single_threaded(|| black_box(f()))));
    group.finish();
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let z = normal(&mut rng, (120, 128));
    let bank = ProxyBank::new(normal(&mut rng, (200, 128)), (0..200).collect()).unwrap();
    let labels: Vec<usize> = (0..120).map(|i| i % 200).collect();
    compare(c, "pa_loss_120x200x128", || pa_loss(&z, &labels, &bank, 32.0, 0.1).unwrap().loss);

    let head = ProjectionHead::new(normal(&mut rng, (128, 512))).unwrap();
    let x = normal(&mut rng, (2000, 512));
    compare(c, "embed_rows_2000x512", || head.embed_rows(&x).unwrap());

    let pts = normal(&mut rng, (300, 16));
    let cfg = ApConfig {
        max_iter: 100,
        ..ApConfig::default()
    };
    compare(c, "affinity_propagation_300", || affinity_propagation(&pts, &cfg).unwrap().exemplars.len());
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels
}
criterion_main!(benches);
