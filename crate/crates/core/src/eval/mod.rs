//! Cluster accuracy under the optimal cluster-to-class matching, and the
//! continual metrics built on it.

mod hungarian;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use hungarian::{hungarian, Assignment};

/// Fraction of samples whose predicted cluster maps to their true class under
/// the best one-to-one matching, plus that matching (cluster -> class).
pub fn cluster_accuracy(pred: &[usize], truth: &[usize]) -> Result<(f64, BTreeMap<usize, usize>)> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let clusters: Vec<usize> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let classes: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let ci: BTreeMap<usize, usize> = clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ki: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut counts = Array2::<f64>::zeros((clusters.len(), classes.len()));
    for (p, t) in pred.iter().zip(truth) {
        counts[[ci[p], ki[t]]] += 1.0;
    }
    let a = hungarian(&counts.mapv(|c| -c))?;
    let mut mapping = BTreeMap::new();
    for (r, c) in a.row_to_col.iter().enumerate() {
        if let Some(c) = c {
            mapping.insert(clusters[r], classes[*c]);
        }
    }
    Ok((-a.cost / pred.len() as f64, mapping))
}

/// Accuracy over the samples whose true class is in `subset`, judged with a
/// fixed mapping. `None` when no sample qualifies.
pub fn subset_accuracy(pred: &[usize], truth: &[usize], mapping: &BTreeMap<usize, usize>, subset: &BTreeSet<usize>) -> Option<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if subset.contains(t) {
            total += 1;
            if mapping.get(p) == Some(t) {
                hit += 1;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Largest drop of old-class accuracy relative to the initial step.
pub fn max_forgetting(initial_old: f64, later_old: &[f64]) -> Option<f64> {
    later_old.iter().map(|m| initial_old - m).reduce(f64::max)
}

/// Mean novel-class accuracy across incremental steps.
pub fn mean_discovery(novel: &[f64]) -> Option<f64> {
    (!novel.is_empty()).then(|| novel.iter().sum::<f64>() / novel.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_index: usize,
    pub m_all: f64,
    /// Accuracy on classes of the initial step.
    pub m_old: Option<f64>,
    /// Accuracy on every class introduced after the initial step.
    pub m_new: Option<f64>,
    /// Accuracy on the classes introduced at each incremental step 1..=t,
    /// evaluated with this step's model.
    pub m_new_by_step: Vec<Option<f64>>,
    /// Initial old-class accuracy minus this step's.
    pub forgetting: Option<f64>,
    /// Maximum of `forgetting` over incremental steps so far.
    pub m_f: Option<f64>,
    /// Mean of `m_new_by_step`.
    pub m_d: Option<f64>,
    pub novel_class_count_estimate: usize,
    pub n_proxies: usize,
    /// Predicted cluster id to ground-truth class.
    pub assignment: BTreeMap<usize, usize>,
}

/// Inputs describing which true classes count as old and which step
/// introduced each novel class.
#[derive(Debug, Clone, Default)]
pub struct ClassLayout {
    pub old: BTreeSet<usize>,
    /// Novel classes per incremental step, step 1 first.
    pub novel_by_step: Vec<BTreeSet<usize>>,
}

impl ClassLayout {
    pub fn from_steps(step_classes: &[Vec<usize>]) -> Self {
        Self {
            old: step_classes[0].iter().copied().collect(),
            novel_by_step: step_classes[1..].iter().map(|c| c.iter().copied().collect()).collect(),
        }
    }
}

/// Metrics for one step. The assignment is solved once on the whole
/// validation set and reused for the old/new subsets.
pub fn step_metrics(
    step_index: usize,
    pred: &[usize],
    truth: &[usize],
    layout: &ClassLayout,
    prior: &[StepReport],
    novel_class_count_estimate: usize,
    n_proxies: usize,
) -> Result<StepReport> {
    let (m_all, assignment) = cluster_accuracy(pred, truth)?;
    let m_old = subset_accuracy(pred, truth, &assignment, &layout.old);
    let introduced: Vec<&BTreeSet<usize>> = layout.novel_by_step.iter().take(step_index).collect();
    let all_novel: BTreeSet<usize> = introduced.iter().flat_map(|s| s.iter().copied()).collect();
    let m_new = subset_accuracy(pred, truth, &assignment, &all_novel);
    let m_new_by_step: Vec<Option<f64>> = introduced
        .iter()
        .map(|s| subset_accuracy(pred, truth, &assignment, s))
        .collect();

    let initial_old = prior.iter().find(|r| r.step_index == 0).and_then(|r| r.m_old);
    let (forgetting, m_f) = match (step_index, initial_old, m_old) {
        (1.., Some(m0), Some(mt)) => {
            let mut drops: Vec<f64> = prior
                .iter()
                .filter(|r| r.step_index >= 1)
                .filter_map(|r| r.m_old)
                .collect();
            drops.push(mt);
            (Some(m0 - mt), max_forgetting(m0, &drops))
        }
        _ => (None, None),
    };
    let present: Vec<f64> = m_new_by_step.iter().flatten().copied().collect();
    let m_d = if step_index == 0 { None } else { mean_discovery(&present) };

    Ok(StepReport {
        step_index,
        m_all,
        m_old,
        m_new,
        m_new_by_step,
        forgetting,
        m_f,
        m_d,
        novel_class_count_estimate,
        n_proxies,
        assignment,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

fn raw(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// CSV with the columns M_all, M_o, M_f, M_d per step, raw fractions.
pub fn table_csv(reports: &[StepReport]) -> String {
    let mut s = String::from("step,m_all,m_old,m_f,m_d,m_new,novel_classes\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step_index,
            r.m_all,
            raw(r.m_old),
            raw(r.m_f),
            raw(r.m_d),
            raw(r.m_new),
            r.novel_class_count_estimate
        )
        .expect("string write");
    }
    s
}

/// Markdown table in percent with two decimals.
pub fn table_markdown(reports: &[StepReport]) -> String {
    let mut s = String::from("| Step | M_all | M_o | M_f | M_d | M_n | novel classes |\n|---|---|---|---|---|---|---|\n");
    for r in reports {
        writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.step_index,
            pct(Some(r.m_all)),
            pct(r.m_old),
            pct(r.m_f),
            pct(r.m_d),
            pct(r.m_new),
            r.novel_class_count_estimate
        )
        .expect("string write");
    }
    s
}
