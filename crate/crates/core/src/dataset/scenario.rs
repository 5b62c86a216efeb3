//! Partitioning a labeled source into an initial labeled step and unlabeled
//! joint steps. The class and sample ratios used here are hidden from the
//! learner: unlabeled steps carry no labels, and their truth is wrapped in
//! [`HiddenTruth`] for the evaluation harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Fraction of classes labeled in step 0.
    pub old_class_fraction: f64,
    /// Fraction of each old class's training samples moved to later unlabeled steps.
    pub old_sample_carryover: f64,
    /// Class fraction introduced at each incremental step. Empty means one
    /// step holding every remaining class.
    pub step_class_fractions: Vec<f64>,
    /// Per-class fraction held out for validation. Zero evaluates on every
    /// sample of the seen classes instead.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            old_class_fraction: 0.8,
            old_sample_carryover: 0.2,
            step_class_fractions: Vec::new(),
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn incremental_fractions(&self) -> Vec<f64> {
        if self.step_class_fractions.is_empty() {
            vec![1.0 - self.old_class_fraction]
        } else {
            self.step_class_fractions.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.old_class_fraction) {
            return Err(Error::Config(format!(
                "old_class_fraction must be in (0,1), got {}",
                self.old_class_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.old_sample_carryover) {
            return Err(Error::Config(format!(
                "old_sample_carryover must be in [0,1), got {}",
                self.old_sample_carryover
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0,1), got {}",
                self.validation_fraction
            )));
        }
        let steps = self.incremental_fractions();
        if let Some(f) = steps.iter().find(|f| !open(**f)) {
            return Err(Error::Config(format!("step class fraction {f} not in (0,1)")));
        }
        let total = self.old_class_fraction + steps.iter().sum::<f64>();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("class fractions sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Classes per step: step 0 and all but the last incremental step take
    /// `floor(fraction * C)`, the last step takes the remainder.
    pub fn class_counts(&self, n_classes: usize) -> Result<Vec<usize>> {
        let mut fractions = vec![self.old_class_fraction];
        fractions.extend(self.incremental_fractions());
        let mut counts: Vec<usize> = fractions[..fractions.len() - 1]
            .iter()
            .map(|f| (f * n_classes as f64 + 1e-9).floor() as usize)
            .collect();
        let used: usize = counts.iter().sum();
        if used >= n_classes {
            return Err(Error::Config(format!(
                "{n_classes} classes cannot be split as {fractions:?}"
            )));
        }
        counts.push(n_classes - used);
        if counts[0] < 2 || counts.contains(&0) {
            return Err(Error::Config(format!(
                "{n_classes} classes give step sizes {counts:?}; need >= 2 initial and >= 1 per step"
            )));
        }
        Ok(counts)
    }
}

/// `floor(x + 0.5)` for non-negative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Ground truth for an unlabeled step. Only the evaluation harness reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth(Vec<usize>);

impl HiddenTruth {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn reveal(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct StepDataset {
    pub step_index: usize,
    /// Labeled for step 0, unlabeled afterwards.
    pub train: EmbeddingDataset,
    /// Truth for `train` on unlabeled steps.
    pub holdout_truth: Option<HiddenTruth>,
    /// Labeled samples of every class seen up to and including this step.
    pub validation: EmbeddingDataset,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub steps: Vec<StepDataset>,
    /// Dense class ids introduced at each step.
    pub step_classes: Vec<Vec<usize>>,
    /// Source label to dense class id.
    pub class_map: BTreeMap<usize, usize>,
}

impl Scenario {
    pub fn initial_classes(&self) -> &[usize] {
        &self.step_classes[0]
    }
}

pub fn build_scenario(src: &EmbeddingDataset, cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let raw = src.labels().ok_or(Error::MissingLabels)?;

    let class_map: BTreeMap<usize, usize> = src
        .classes()?
        .into_iter()
        .enumerate()
        .map(|(dense, orig)| (orig, dense))
        .collect();
    let labels: Vec<usize> = raw.iter().map(|l| class_map[l]).collect();
    let n_classes = class_map.len();

    let mut members = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if m.len() < 2 {
            return Err(Error::TooFewSamples {
                class: c,
                count: m.len(),
                needed: 2,
            });
        }
    }

    let counts = cfg.class_counts(n_classes)?;
    let n_steps = counts.len();
    let mut step_classes = Vec::with_capacity(n_steps);
    let mut next = 0;
    for &k in &counts {
        step_classes.push((next..next + k).collect::<Vec<_>>());
        next += k;
    }
    let mut class_step = vec![0usize; n_classes];
    for (s, cls) in step_classes.iter().enumerate() {
        for &c in cls {
            class_step[c] = s;
        }
    }

    let mut rng = rng::stream(cfg.seed, Stream::Scenario, 0);
    let mut in_validation = vec![false; src.len()];
    let mut train_step = vec![usize::MAX; src.len()];
    for (c, m) in members.iter().enumerate() {
        let mut order = m.clone();
        order.shuffle(&mut rng);
        let n_val = if cfg.validation_fraction > 0.0 {
            round_half_up(cfg.validation_fraction * m.len() as f64).clamp(1, m.len() - 1)
        } else {
            0
        };
        for &i in &order[..n_val] {
            in_validation[i] = true;
        }
        let pool = &order[n_val..];

        if class_step[c] > 0 {
            for &i in pool {
                train_step[i] = class_step[c];
            }
            continue;
        }
        let carry = round_half_up(cfg.old_sample_carryover * pool.len() as f64);
        if cfg.old_sample_carryover > 0.0 && (carry == 0 || carry >= pool.len()) {
            return Err(Error::TooFewSamples {
                class: c,
                count: pool.len(),
                needed: 2,
            });
        }
        let (stay, moved) = pool.split_at(pool.len() - carry);
        for &i in stay {
            train_step[i] = 0;
        }
        for (k, &i) in moved.iter().enumerate() {
            train_step[i] = 1 + k % (n_steps - 1);
        }
    }

    let labeled = src_with_dense_labels(src, labels)?;
    let dense = labeled.labels().expect("labels attached");
    let mut steps = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        let train_idx: Vec<usize> = (0..src.len())
            .filter(|&i| !in_validation[i] && train_step[i] == s)
            .collect();
        let val_idx: Vec<usize> = (0..src.len())
            .filter(|&i| class_step[dense[i]] <= s && (in_validation[i] || cfg.validation_fraction == 0.0))
            .collect();
        let full = labeled.subset(&train_idx);
        let (train, holdout_truth) = if s == 0 {
            (full, None)
        } else {
            let truth = HiddenTruth::new(full.labels().unwrap().to_vec());
            (full.without_labels(), Some(truth))
        };
        steps.push(StepDataset {
            step_index: s,
            train,
            holdout_truth,
            validation: labeled.subset(&val_idx),
        });
    }

    Ok(Scenario {
        steps,
        step_classes,
        class_map,
    })
}

fn src_with_dense_labels(src: &EmbeddingDataset, labels: Vec<usize>) -> Result<EmbeddingDataset> {
    EmbeddingDataset::new(src.features().clone(), Some(labels), src.ids().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use std::collections::BTreeSet;

    fn cfg(old: f64, carry: f64, val: f64) -> ScenarioConfig {
        ScenarioConfig {
            old_class_fraction: old,
            old_sample_carryover: carry,
            step_class_fractions: vec![],
            validation_fraction: val,
            seed: 11,
        }
    }

    #[test]
    fn two_hundred_class_counts() {
        let c = cfg(0.8, 0.2, 0.2);
        assert_eq!(c.class_counts(200).unwrap(), vec![160, 40]);
        assert_eq!(c.class_counts(67).unwrap(), vec![53, 14]);
        assert_eq!(c.class_counts(120).unwrap(), vec![96, 24]);
        assert_eq!(c.class_counts(100).unwrap(), vec![80, 20]);
        let multi = ScenarioConfig {
            step_class_fractions: vec![0.1, 0.1],
            ..c
        };
        assert_eq!(multi.class_counts(200).unwrap(), vec![160, 20, 20]);
        assert_eq!(multi.class_counts(10).unwrap(), vec![8, 1, 1]);
    }

    #[test]
    fn step_one_size_by_enumeration() {
        let src = generate_synthetic(10, 30, 4, 5.0, 1).unwrap();
        let sc = build_scenario(&src, &cfg(0.8, 0.2, 0.0)).unwrap();
        let step1 = &sc.steps[1];
        let truth = step1.holdout_truth.as_ref().unwrap().reveal();
        let mut per_class = BTreeMap::new();
        for &l in truth {
            *per_class.entry(l).or_insert(0) += 1;
        }
        for c in 0..8 {
            assert_eq!(per_class[&c], 6);
        }
        assert_eq!(per_class[&8], 30);
        assert_eq!(per_class[&9], 30);
        assert_eq!(step1.train.len(), 8 * 6 + 2 * 30);
        assert_eq!(step1.train.len(), 108);
    }

    #[test]
    fn zero_carryover_leaves_only_novel_samples() {
        let src = generate_synthetic(5, 20, 4, 5.0, 1).unwrap();
        let sc = build_scenario(&src, &cfg(0.6, 0.0, 0.2)).unwrap();
        let truth = sc.steps[1].holdout_truth.as_ref().unwrap().reveal();
        assert!(truth.iter().all(|&l| l >= 3));
        assert!(sc.steps[1].train.labels().is_none());
        assert!(sc.steps[0].train.labels().is_some());
    }

    #[test]
    fn partitions_are_disjoint_and_validation_covers_seen_classes() {
        let src = generate_synthetic(10, 25, 4, 5.0, 2).unwrap();
        let c = ScenarioConfig {
            step_class_fractions: vec![0.1, 0.1],
            ..cfg(0.8, 0.2, 0.2)
        };
        let sc = build_scenario(&src, &c).unwrap();
        let mut seen = BTreeSet::new();
        let mut val_ids = BTreeSet::new();
        for st in &sc.steps {
            for id in st.train.ids() {
                assert!(seen.insert(*id), "sample {id} in two train sets");
            }
            let expected: BTreeSet<usize> = sc.step_classes[..=st.step_index].iter().flatten().copied().collect();
            let got: BTreeSet<usize> = st.validation.classes().unwrap().into_iter().collect();
            assert_eq!(got, expected);
            val_ids.extend(st.validation.ids().iter().copied());
        }
        assert!(seen.is_disjoint(&val_ids));
        assert_eq!(seen.len() + val_ids.len(), src.len());
    }

    #[test]
    fn pure_function_of_inputs() {
        let src = generate_synthetic(6, 20, 4, 5.0, 2).unwrap();
        let a = build_scenario(&src, &cfg(0.5, 0.2, 0.2)).unwrap();
        let b = build_scenario(&src, &cfg(0.5, 0.2, 0.2)).unwrap();
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.validation, y.validation);
            assert_eq!(x.holdout_truth, y.holdout_truth);
        }
    }

    #[test]
    fn errors() {
        let src = generate_synthetic(5, 20, 4, 5.0, 1).unwrap();
        assert!(matches!(
            build_scenario(&src.without_labels(), &cfg(0.8, 0.2, 0.2)),
            Err(Error::MissingLabels)
        ));
        // Two samples per class, one held out: the carryover split is impossible.
        let tiny = generate_synthetic(5, 2, 4, 5.0, 1).unwrap();
        assert!(matches!(
            build_scenario(&tiny, &cfg(0.8, 0.2, 0.2)),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(build_scenario(&src, &cfg(1.2, 0.2, 0.2)).is_err());
    }

    #[test]
    fn dense_remapping_is_recorded() {
        let mut src = generate_synthetic(4, 10, 3, 5.0, 1).unwrap();
        let relabeled: Vec<usize> = src.labels().unwrap().iter().map(|l| l * 10 + 5).collect();
        src = EmbeddingDataset::new(src.features().clone(), Some(relabeled), src.ids().to_vec()).unwrap();
        let sc = build_scenario(&src, &cfg(0.5, 0.2, 0.2)).unwrap();
        assert_eq!(sc.class_map.get(&5), Some(&0));
        assert_eq!(sc.class_map.get(&35), Some(&3));
    }
}
