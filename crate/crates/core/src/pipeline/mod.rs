//! The step driver: initial training, then for every incremental step split
//! the unlabeled data, pseudo-label it, grow the proxy bank, train, refresh
//! the replay exemplar and evaluate.

mod checkpoint;
mod config;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::dataset::{build_scenario, Scenario, StepDataset};
use crate::error::{Error, Result};
use crate::eval::{step_metrics, table_csv, table_markdown, ClassLayout, StepReport};
use crate::metric_head::{
    nearest_proxy, to_f64, train_incremental, train_initial, EpochLog, ProjectionHead, ProxyBank,
};
use crate::pseudo_label::{grow_bank, label_new, label_old, ClusterReport, PseudoLabel, PseudoLabeledSet};
use crate::replay::{build_exemplar, rebuild_exemplar};
use crate::splitter::{fine_split, histogram_csv, SplitDecision, SplitEpoch};

pub use checkpoint::Checkpoint;
pub use config::{DataSource, RunConfig};

/// How well the split matched the hidden old/new truth. Computed by the
/// evaluation side after the step's decisions are final.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitTrace {
    pub initial_accuracy: f64,
    pub fine_accuracy: f64,
    pub fallback: Option<String>,
    pub history: Vec<SplitEpoch>,
    #[serde(skip)]
    pub decisions: Vec<SplitDecision>,
    /// 1 = sample of a class first seen at this step.
    #[serde(skip)]
    pub truth: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step_index: usize,
    pub train_log: Vec<EpochLog>,
    pub split: Option<SplitTrace>,
    pub clusters: Option<ClusterReport>,
    pub pseudo_labels: Vec<PseudoLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub m_all: f64,
    pub m_old: Option<f64>,
    pub m_new: Option<f64>,
    pub m_f: Option<f64>,
    pub m_d: Option<f64>,
    pub novel_class_count: usize,
}

impl RunSummary {
    pub fn from_reports(reports: &[StepReport]) -> Option<Self> {
        let last = reports.last()?;
        Some(Self {
            steps: reports.len(),
            m_all: last.m_all,
            m_old: last.m_old,
            m_new: last.m_new,
            m_f: last.m_f,
            m_d: last.m_d,
            novel_class_count: last.novel_class_count_estimate,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<StepReport>,
    /// Traces of the steps executed by this call (resumed steps are absent).
    pub traces: Vec<StepTrace>,
    pub final_state: Checkpoint,
}

/// Loads the data, builds the scenario and runs every step. Artifacts go to
/// `cfg.out_dir` when set.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let scenario = load_scenario(cfg)?;
    run_scenario(cfg, &scenario, None)
}

/// Continues a run from a step checkpoint written by an earlier run with the
/// same configuration.
pub fn resume_pipeline(cfg: &RunConfig, from: Checkpoint) -> Result<RunOutput> {
    cfg.validate()?;
    let scenario = load_scenario(cfg)?;
    run_scenario(cfg, &scenario, Some(from))
}

pub fn load_scenario(cfg: &RunConfig) -> Result<Scenario> {
    let src = cfg.data.load().map_err(Error::at("load data"))?;
    build_scenario(&src, &cfg.scenario).map_err(Error::at("build scenario"))
}

pub fn run_scenario(cfg: &RunConfig, scenario: &Scenario, resume: Option<Checkpoint>) -> Result<RunOutput> {
    let layout = ClassLayout::from_steps(&scenario.step_classes);
    let fingerprint = cfg.fingerprint()?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        // The copy omits its own location so runs into different directories match.
        let mut copy = cfg.clone();
        copy.out_dir = None;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&copy)? + "\n")?;
    }
    let n_steps = scenario.steps.len();
    let mut traces = Vec::new();

    let mut state = match resume {
        Some(ck) => {
            if ck.config != fingerprint {
                return Err(Error::Config("checkpoint was written under a different configuration".into()));
            }
            if ck.step_index + 1 > n_steps || ck.reports.len() != ck.step_index + 1 {
                return Err(Error::Config(format!(
                    "checkpoint step {} does not fit a {n_steps}-step scenario",
                    ck.step_index
                )));
            }
            log::info!("resuming after step {}", ck.step_index);
            ck
        }
        None => {
            let (state, trace) = initial_step(cfg, &scenario.steps[0], &layout, fingerprint)?;
            write_step(cfg, &state, &trace)?;
            traces.push(trace);
            state
        }
    };

    for t in state.step_index + 1..n_steps {
        let (next, trace) = incremental_step(cfg, scenario, t, &layout, state)?;
        write_step(cfg, &next, &trace)?;
        traces.push(trace);
        state = next;
    }

    if let Some(dir) = &cfg.out_dir {
        write_reports(dir, &state.reports)?;
    }
    Ok(RunOutput {
        reports: state.reports.clone(),
        traces,
        final_state: state,
    })
}

fn initial_step(
    cfg: &RunConfig,
    step: &StepDataset,
    layout: &ClassLayout,
    fingerprint: serde_json::Value,
) -> Result<(Checkpoint, StepTrace)> {
    log::info!("step 0: training on {} labeled samples", step.train.len());
    let out = train_initial(&step.train, &cfg.head, cfg.seed).map_err(Error::at("train_initial"))?;
    let labels = step.train.labels().ok_or(Error::MissingLabels)?;
    let emb = out.head.embed_rows(&to_f64(&step.train)).map_err(Error::at("build_exemplar"))?;
    let exemplar = build_exemplar(&out.bank, &emb, labels).map_err(Error::at("build_exemplar"))?;
    let report = evaluate(0, &out.head, &out.bank, step, layout, &[], 0).map_err(Error::at("evaluate"))?;
    log::info!("step 0: M_all {:.4}", report.m_all);
    let state = Checkpoint {
        step_index: 0,
        head: out.head,
        bank: out.bank,
        exemplar,
        head_state: out.head_state,
        proxy_state: out.proxy_state,
        hyperparams: cfg.head.clone(),
        reports: vec![report],
        config: fingerprint,
    };
    let trace = StepTrace {
        step_index: 0,
        train_log: out.log,
        split: None,
        clusters: None,
        pseudo_labels: Vec::new(),
    };
    Ok((state, trace))
}

fn incremental_step(
    cfg: &RunConfig,
    scenario: &Scenario,
    t: usize,
    layout: &ClassLayout,
    prev: Checkpoint,
) -> Result<(Checkpoint, StepTrace)> {
    let step = &scenario.steps[t];
    let x = to_f64(&step.train);
    let ids = step.train.ids();
    log::info!("step {t}: {} unlabeled samples", step.train.len());

    let emb = prev.head.embed_rows(&x).map_err(Error::at("embed"))?;
    let split = fine_split(&emb, ids, &prev.bank, &cfg.split, cfg.seed, t as u64).map_err(Error::at("fine_split"))?;
    let (new_rows, old_rows): (Vec<usize>, Vec<usize>) =
        (0..split.decisions.len()).partition(|&i| split.decisions[i].final_label == 1);
    log::info!("step {t}: split {} old / {} new", old_rows.len(), new_rows.len());

    let mut entries = label_old(&old_rows, &x, ids, &prev.head, &prev.bank).map_err(Error::at("label_old"))?;
    let (clusters, centroids) = if new_rows.is_empty() {
        (None, Array2::zeros((0, prev.bank.dim())))
    } else {
        let nc = label_new(&new_rows, &emb, ids, &cfg.clustering, prev.bank.next_class_id())
            .map_err(Error::at("label_new"))?;
        log::info!("step {t}: {} novel clusters", nc.novel_class_count);
        entries.extend(nc.entries.iter().cloned());
        (Some(nc.report(ids)), nc.centroids)
    };
    entries.sort_by_key(|e| e.index);
    let grown = if centroids.nrows() > 0 {
        grow_bank(&prev.bank, &centroids).map_err(Error::at("grow_bank"))?
    } else {
        prev.bank.clone()
    };
    let data = PseudoLabeledSet {
        novel_class_count: centroids.nrows(),
        cluster_centroids: centroids,
        entries,
    };

    let out = train_incremental(
        &prev.head,
        &grown,
        &data,
        &step.train,
        Some(&prev.exemplar),
        &prev.head,
        &cfg.head,
        cfg.incremental,
        cfg.seed,
        t as u64,
    )
    .map_err(Error::at("train_incremental"))?;

    let rows: Vec<usize> = data.entries.iter().map(|e| e.index).collect();
    let labels: Vec<usize> = data.entries.iter().map(|e| e.label).collect();
    let emb_new = out
        .head
        .embed_rows(&x.select(ndarray::Axis(0), &rows))
        .map_err(Error::at("rebuild_exemplar"))?;
    let exemplar =
        rebuild_exemplar(&out.bank, &emb_new, &labels, Some(&prev.exemplar)).map_err(Error::at("rebuild_exemplar"))?;

    let novel_total = out.bank.len() - layout.old.len();
    let report = evaluate(t, &out.head, &out.bank, step, layout, &prev.reports, novel_total).map_err(Error::at("evaluate"))?;
    log::info!(
        "step {t}: M_all {:.4} M_o {:?} M_n {:?} novel {novel_total}",
        report.m_all,
        report.m_old,
        report.m_new
    );
    let split_trace = split_trace(split, step, layout, t)?;

    let mut reports = prev.reports;
    reports.push(report);
    let state = Checkpoint {
        step_index: t,
        head: out.head,
        bank: out.bank,
        exemplar,
        head_state: out.head_state,
        proxy_state: out.proxy_state,
        hyperparams: cfg.head.clone(),
        reports,
        config: prev.config,
    };
    let trace = StepTrace {
        step_index: t,
        train_log: out.log,
        split: Some(split_trace),
        clusters,
        pseudo_labels: data.entries,
    };
    Ok((state, trace))
}

fn evaluate(
    t: usize,
    head: &ProjectionHead,
    bank: &ProxyBank,
    step: &StepDataset,
    layout: &ClassLayout,
    prior: &[StepReport],
    novel: usize,
) -> Result<StepReport> {
    let truth = step.validation.labels().ok_or(Error::MissingLabels)?;
    let pred = nearest_proxy(head, bank, &to_f64(&step.validation))?;
    step_metrics(t, &pred, truth, layout, prior, novel, bank.len())
}

fn split_trace(split: crate::splitter::FineSplit, step: &StepDataset, layout: &ClassLayout, t: usize) -> Result<SplitTrace> {
    let hidden = step
        .holdout_truth
        .as_ref()
        .ok_or(Error::InvalidData(format!("step {t} has no held-out truth")))?;
    let novel = &layout.novel_by_step[t - 1];
    let truth: Vec<u8> = hidden.reveal().iter().map(|c| u8::from(novel.contains(c))).collect();
    let n = truth.len().max(1) as f64;
    let acc = |f: fn(&SplitDecision) -> u8| {
        split.decisions.iter().zip(&truth).filter(|(d, &y)| f(d) == y).count() as f64 / n
    };
    Ok(SplitTrace {
        initial_accuracy: acc(|d| d.initial_label),
        fine_accuracy: acc(|d| d.final_label),
        fallback: split.fallback,
        history: split.history,
        decisions: split.decisions,
        truth,
    })
}

fn json(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn write_step(cfg: &RunConfig, state: &Checkpoint, trace: &StepTrace) -> Result<()> {
    let Some(root) = &cfg.out_dir else {
        return Ok(());
    };
    let dir = root.join(format!("step{}", trace.step_index));
    fs::create_dir_all(&dir)?;
    state.write(dir.join("model.ckpt"))?;
    fs::write(dir.join("train_log.json"), json(&trace.train_log)?)?;
    if let Some(split) = &trace.split {
        fs::write(dir.join("split.csv"), histogram_csv(&split.decisions, Some(&split.truth))?)?;
        fs::write(dir.join("split.json"), json(split)?)?;
    }
    if let Some(c) = &trace.clusters {
        fs::write(dir.join("clusters.json"), json(c)?)?;
    }
    if !trace.pseudo_labels.is_empty() {
        fs::write(dir.join("pseudo_labels.json"), json(&trace.pseudo_labels)?)?;
    }
    if let Some(r) = state.reports.last() {
        fs::write(dir.join("report.json"), json(r)?)?;
    }
    Ok(())
}

/// `reports.json`, `summary.json`, `table.csv`, `table.md`.
pub fn write_reports(dir: &Path, reports: &[StepReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("reports.json"), json(&reports)?)?;
    if let Some(s) = RunSummary::from_reports(reports) {
        fs::write(dir.join("summary.json"), json(&s)?)?;
    }
    fs::write(dir.join("table.csv"), table_csv(reports))?;
    fs::write(dir.join("table.md"), table_markdown(reports))?;
    Ok(())
}
