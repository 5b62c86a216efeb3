use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

use cgcd::dataset::{build_scenario, read_emb1, write_emb1, EmbeddingDataset, Manifest, ManifestEntry, Role, SyntheticConfig};
use cgcd::error::{Error, Result};
use cgcd::eval::{step_metrics, table_csv, table_markdown, ClassLayout, StepReport};
use cgcd::metric_head::to_f64;
use cgcd::pipeline::{resume_pipeline, run_pipeline, write_reports, Checkpoint, RunConfig, RunSummary};
use cgcd::pseudo_label::{label_new, ApConfig};
use cgcd::splitter::{fine_split, histogram_csv};

#[derive(Parser)]
#[command(name = "cgcd", version, about = "Continual generalized category discovery on embedding files")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, its scenario step files and a manifest.
    Synth(SynthArgs),
    /// Run the full pipeline.
    Run {
        /// Continue from a step checkpoint of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        no_replay: bool,
        #[arg(long)]
        no_distill: bool,
    },
    /// Split an unlabeled file into old/new with a trained model and export the score histogram.
    Split {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Cluster a file with affinity propagation.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        /// Embed with this model first; otherwise rows are only L2-normalized.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cluster accuracy of a prediction file against a truth file.
    Eval {
        /// Whitespace-separated integer cluster ids.
        #[arg(long)]
        pred: PathBuf,
        /// Whitespace-separated integer class ids.
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated classes counted as old; the rest count as new.
        #[arg(long, value_delimiter = ',')]
        old_classes: Vec<usize>,
    },
    /// Render step reports as CSV and markdown tables.
    Report {
        /// Defaults to `<out>/reports.json`.
        #[arg(long)]
        reports: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 13)]
    n_classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    d_in: usize,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(Some(cfg))
}

fn json(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = out_dir(&cli);
    match &cli.command {
        Command::Synth(args) => synth(args, cfg.as_ref(), cli.seed, &out),
        Command::Run {
            resume,
            no_replay,
            no_distill,
        } => {
            let mut cfg = cfg.ok_or_else(|| Error::Config("run needs --config".into()))?;
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(out);
            }
            cfg.incremental.replay &= !no_replay;
            cfg.incremental.distill &= !no_distill;
            let output = match resume {
                Some(path) => resume_pipeline(&cfg, Checkpoint::read(path)?)?,
                None => run_pipeline(&cfg)?,
            };
            if let Some(s) = RunSummary::from_reports(&output.reports) {
                print!("{}", json(&s)?);
            }
            Ok(())
        }
        Command::Split { checkpoint, data } => {
            let ck = Checkpoint::read(checkpoint)?;
            let ds = read_emb1(data)?;
            let split_cfg = cfg.map(|c| c.split).unwrap_or_default();
            let emb = ck.head.embed_rows(&to_f64(&ds)).map_err(Error::at("embed"))?;
            let seed = cli.seed.unwrap_or(0);
            let split = fine_split(&emb, ds.ids(), &ck.bank, &split_cfg, seed, ck.step_index as u64 + 1)
                .map_err(Error::at("fine_split"))?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("split.csv"), histogram_csv(&split.decisions, None)?)?;
            let new = split.decisions.iter().filter(|d| d.final_label == 1).count();
            println!("{} old, {new} new", split.decisions.len() - new);
            Ok(())
        }
        Command::Cluster { data, checkpoint } => {
            let ds = read_emb1(data)?;
            let x = to_f64(&ds);
            let emb = match checkpoint {
                Some(p) => Checkpoint::read(p)?.head.embed_rows(&x)?,
                None => {
                    let mut x = x;
                    for mut row in x.axis_iter_mut(Axis(0)) {
                        let n = row.dot(&row).sqrt();
                        if n > 0.0 {
                            row /= n;
                        }
                    }
                    x
                }
            };
            let ap: ApConfig = cfg.map(|c| c.clustering).unwrap_or_default();
            let rows: Vec<usize> = (0..ds.len()).collect();
            let clusters = label_new(&rows, &emb, ds.ids(), &ap, 0).map_err(Error::at("cluster"))?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("clusters.json"), json(&clusters.report(ds.ids()))?)?;
            let mut csv = String::from("sample_id,cluster\n");
            for e in &clusters.entries {
                csv += &format!("{},{}\n", e.sample_id, e.label);
            }
            fs::write(out.join("assignments.csv"), csv)?;
            println!("{} clusters", clusters.novel_class_count);
            Ok(())
        }
        Command::Eval {
            pred,
            truth,
            old_classes,
        } => {
            let pred = read_ints(pred)?;
            let truth = read_ints(truth)?;
            let classes: BTreeSet<usize> = truth.iter().copied().collect();
            let old: BTreeSet<usize> = if old_classes.is_empty() {
                classes.clone()
            } else {
                old_classes.iter().copied().collect()
            };
            let layout = ClassLayout {
                novel_by_step: vec![classes.difference(&old).copied().collect()],
                old,
            };
            let n_pred = pred.iter().collect::<BTreeSet<_>>().len();
            let report = step_metrics(1, &pred, &truth, &layout, &[], n_pred.saturating_sub(layout.old.len()), n_pred)?;
            let text = json(&report)?;
            if cli.out.is_some() {
                fs::create_dir_all(&out)?;
                fs::write(out.join("eval.json"), &text)?;
            }
            print!("{text}");
            Ok(())
        }
        Command::Report { reports } => {
            let path = reports.clone().unwrap_or_else(|| out.join("reports.json"));
            let reports: Vec<StepReport> = serde_json::from_str(&fs::read_to_string(&path)?)?;
            if cli.out.is_some() {
                write_reports(&out, &reports)?;
            } else {
                print!("{}", table_csv(&reports));
            }
            print!("{}", table_markdown(&reports));
            Ok(())
        }
    }
}

fn read_ints(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::InvalidData(format!("{}: {s:?} is not a class id", path.display())))
        })
        .collect()
}

fn synth(args: &SynthArgs, cfg: Option<&RunConfig>, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.or(cfg.map(|c| c.seed)).unwrap_or(0);
    let data = SyntheticConfig {
        n_classes: args.n_classes,
        per_class: args.per_class,
        d_in: args.d_in,
        separation: args.separation,
        seed,
    }
    .generate()?;
    let mut scenario_cfg = cfg.map(|c| c.scenario.clone()).unwrap_or_default();
    scenario_cfg.seed = seed;
    let scenario = build_scenario(&data, &scenario_cfg)?;

    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut put = |name: String, ds: &EmbeddingDataset, role: Role, step: Option<usize>| -> Result<()> {
        write_emb1(ds, out.join(&name))?;
        files.push(ManifestEntry { path: name, role, step });
        Ok(())
    };
    put("source.emb1".into(), &data, Role::Source, None)?;
    for s in &scenario.steps {
        let t = s.step_index;
        put(format!("step{t}_train.emb1"), &s.train, Role::Train, Some(t))?;
        put(format!("step{t}_validation.emb1"), &s.validation, Role::Validation, Some(t))?;
        if let Some(truth) = &s.holdout_truth {
            let labeled = EmbeddingDataset::new(
                s.train.features().clone(),
                Some(truth.reveal().to_vec()),
                s.train.ids().to_vec(),
            )?;
            put(format!("step{t}_truth.emb1"), &labeled, Role::HiddenTruth, Some(t))?;
        }
    }
    let manifest = Manifest {
        files,
        class_map: scenario.class_map.iter().map(|(orig, dense)| (orig.to_string(), *dense)).collect(),
    };
    manifest.write(out.join("manifest.json"))?;
    println!("wrote {} samples, {} steps to {}", data.len(), scenario.steps.len(), out.display());
    Ok(())
}
