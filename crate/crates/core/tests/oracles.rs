mod common;

use approx::assert_abs_diff_eq;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cgcd::dataset::{generate_synthetic, EmbeddingDataset};
use cgcd::eval::cluster_accuracy;
use cgcd::metric_head::{nearest_proxy, to_f64, train_incremental, train_initial, IncrementalOptions, PaHyperparams};
use cgcd::pseudo_label::{label_new, label_old, ApConfig, PseudoLabeledSet};
use cgcd::replay::build_exemplar;
use cgcd::splitter::{fine_split, train_split_net, SplitConfig};

fn hp() -> PaHyperparams {
    common::packaged("synthetic.json", 1).head
}

fn five_classes() -> EmbeddingDataset {
    generate_synthetic(5, 40, 16, 10.0, 3).unwrap()
}

#[test]
fn initial_training_separates_classes() {
    let ds = five_classes();
    let out = train_initial(&ds, &hp(), 9).unwrap();
    let pred = nearest_proxy(&out.head, &out.bank, &to_f64(&ds)).unwrap();
    let labels = ds.labels().unwrap();
    let acc = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / ds.len() as f64;
    assert!(acc >= 0.99, "nearest-proxy accuracy {acc}");
    assert_eq!(out.bank.len(), 5);
    assert!(out.log.last().unwrap().loss < out.log[0].loss);
}

#[test]
fn initial_training_is_reproducible_and_zero_epochs_is_init() {
    let ds = five_classes();
    let mut short = hp();
    short.epochs = 3;
    let a = train_initial(&ds, &short, 4).unwrap();
    let b = train_initial(&ds, &short, 4).unwrap();
    assert_eq!(a.head, b.head);
    assert_eq!(a.bank.proxies(), b.bank.proxies());

    short.epochs = 0;
    let init = train_initial(&ds, &short, 4).unwrap();
    assert!(init.log.is_empty());
    assert_ne!(init.head, a.head);
    assert!(init.bank.proxies().iter().all(|v| v.abs() < 0.1));
    assert_eq!(init.head, train_initial(&ds, &short, 4).unwrap().head);
}

#[test]
fn incremental_losses_start_at_zero_without_novel_samples() {
    let ds = five_classes();
    let base = train_initial(&ds, &hp(), 2).unwrap();
    let x = to_f64(&ds);
    let z = base.head.embed_rows(&x).unwrap();
    let ex = build_exemplar(&base.bank, &z, ds.labels().unwrap()).unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let entries = label_old(&rows, &x, ds.ids(), &base.head, &base.bank).unwrap();
    let data = PseudoLabeledSet {
        entries,
        novel_class_count: 0,
        cluster_centroids: Array2::zeros((0, base.bank.dim())),
    };
    // One batch, one epoch: the logged terms are the values at the start.
    let mut one = hp();
    one.epochs = 1;
    one.batch_size = ds.len();
    let out = train_incremental(
        &base.head,
        &base.bank,
        &data,
        &ds.without_labels(),
        Some(&ex),
        &base.head,
        &one,
        IncrementalOptions::default(),
        5,
        1,
    )
    .unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].kd, 0.0);
    assert_eq!(out.log[0].ex, 0.0);
    assert!(out.log[0].pa > 0.0);
}

#[test]
fn split_net_learns_a_single_coordinate() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 200;
    let mut emb = Array2::from_shape_fn((n, 8), |_| rng.sample::<f64, _>(StandardNormal));
    for i in 0..n {
        emb[(i, 0)] = if i < n / 2 { -3.0 } else { 3.0 } + 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    let old: Vec<usize> = (0..n / 2).collect();
    let new: Vec<usize> = (n / 2..n).collect();
    let cfg = SplitConfig {
        lr: 1e-2,
        batch_size: 32,
        epochs: 3,
        ..SplitConfig::default()
    };
    let (net, history) = train_split_net(&old, &new, &emb, &cfg, 1, 1).unwrap();
    assert_eq!(history.len(), 3);
    let p = net.predict(&emb);
    let correct = p.iter().enumerate().filter(|(i, &m)| (m >= 0.5) == (*i >= n / 2)).count();
    assert!(correct as f64 / n as f64 >= 0.99, "{correct}/{n}");
}

#[test]
fn fine_split_keeps_old_only_data_old() {
    let cfg = common::packaged("synthetic.json", 1);
    for seed in 1..=4 {
        // Train on half of each class, split the other half.
        let all = generate_synthetic(5, 80, 16, 10.0, seed).unwrap();
        let (even, odd): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % 2 == 0);
        let base = train_initial(&all.subset(&even), &cfg.head, seed).unwrap();
        let held_out = all.subset(&odd);
        let emb = base.head.embed_rows(&to_f64(&held_out)).unwrap();
        let split = fine_split(&emb, held_out.ids(), &base.bank, &cfg.split, 1, 1).unwrap();
        let old = split.decisions.iter().filter(|d| d.final_label == 0).count();
        assert!(old as f64 >= 0.9 * held_out.len() as f64, "seed {seed}: {old}/{}", held_out.len());
        assert_eq!(split, fine_split(&emb, held_out.ids(), &base.bank, &cfg.split, 1, 1).unwrap());
    }
}

#[test]
fn novel_clusters_get_fresh_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let centers = [[0.0, 0.0], [20.0, 0.0], [10.0, 17.320508]];
    let mut pts = Array2::zeros((60, 2));
    for (i, mut row) in pts.axis_iter_mut(Axis(0)).enumerate() {
        let c = centers[i / 20];
        row[0] = c[0] + 0.1 * rng.sample::<f64, _>(StandardNormal);
        row[1] = c[1] + 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let rows: Vec<usize> = (0..60).collect();
    let ids: Vec<u64> = (0..60).collect();
    let c = label_new(&rows, &pts, &ids, &ApConfig::default(), 5).unwrap();
    assert_eq!(c.novel_class_count, 3);
    let mut labels: Vec<usize> = c.entries.iter().map(|e| e.label).collect();
    for blob in labels.chunks(20) {
        assert!(blob.iter().all(|&l| l == blob[0]));
    }
    labels.sort_unstable();
    labels.dedup();
    assert_eq!(labels, vec![5, 6, 7]);
    for row in c.centroids.rows() {
        assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-12);
    }
}

proptest! {
    #[test]
    fn accuracy_ignores_cluster_names(
        pairs in prop::collection::vec((0usize..5, 0usize..4), 1..60),
        shift in 1usize..50,
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let renamed: Vec<usize> = pred.iter().map(|p| (p * 7 + shift) % 1000).collect();
        let (a, _) = cluster_accuracy(&pred, &truth).unwrap();
        let (b, _) = cluster_accuracy(&renamed, &truth).unwrap();
        prop_assert_eq!(a, b);
        // At least as good as the best single cluster-to-class match.
        let best = (0..5)
            .flat_map(|k| (0..4).map(move |c| (k, c)))
            .map(|(k, c)| pairs.iter().filter(|&&p| p == (k, c)).count())
            .max()
            .unwrap();
        prop_assert!(a >= best as f64 / truth.len() as f64 - 1e-12);
    }
}
