mod common;

use std::fs;

use cgcd::dataset::HiddenTruth;
use cgcd::error::Error;
use cgcd::par;
use cgcd::pipeline::{load_scenario, resume_pipeline, run_pipeline, run_scenario, Checkpoint, DataSource};

use common::packaged;

#[test]
fn one_step_run_produces_two_reports() {
    let out = run_pipeline(&packaged("synthetic.json", 1)).unwrap();
    assert_eq!(out.reports.len(), 2);
    assert_eq!(out.traces.len(), 2);
    let last = &out.reports[1];
    assert_eq!(last.n_proxies, 10 + last.novel_class_count_estimate);
    assert!(last.m_f.is_some() && last.m_d.is_some());
    assert!(out.reports[0].m_f.is_none());
    assert_eq!(out.final_state.step_index, 1);
    assert_eq!(out.final_state.reports, out.reports);
}

#[test]
fn hidden_labels_do_not_reach_training() {
    let cfg = packaged("synthetic.json", 2);
    let scenario = load_scenario(&cfg).unwrap();
    let mut tampered = scenario.clone();
    let n = tampered.steps[1].train.len();
    tampered.steps[1].holdout_truth = Some(HiddenTruth::new((0..n).map(|i| (i * 7919) % 97).collect()));

    let a = run_scenario(&cfg, &scenario, None).unwrap();
    let b = run_scenario(&cfg, &tampered, None).unwrap();
    assert_eq!(a.final_state.head, b.final_state.head);
    assert_eq!(a.final_state.bank.proxies(), b.final_state.bank.proxies());
    assert_eq!(a.traces[1].pseudo_labels, b.traces[1].pseudo_labels);
    let (sa, sb) = (a.traces[1].split.as_ref().unwrap(), b.traces[1].split.as_ref().unwrap());
    assert_eq!(sa.decisions, sb.decisions);
    // Only the evaluation of the split sees the truth.
    assert_ne!(sa.fine_accuracy, sb.fine_accuracy);
    assert_eq!(a.reports, b.reports);
}

#[test]
fn resume_from_step_checkpoint_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = packaged("two_step.json", 1);
    cfg.out_dir = Some(tmp.path().join("full"));
    let full = run_pipeline(&cfg).unwrap();
    assert_eq!(full.reports.len(), 3);

    let ck = Checkpoint::read(tmp.path().join("full/step1/model.ckpt")).unwrap();
    assert_eq!(ck.step_index, 1);
    cfg.out_dir = Some(tmp.path().join("resumed"));
    let resumed = resume_pipeline(&cfg, ck).unwrap();
    assert_eq!(resumed.traces.len(), 1);
    assert_eq!(resumed.reports, full.reports);
    for file in ["reports.json", "summary.json", "table.csv", "step2/model.ckpt"] {
        let a = fs::read(tmp.path().join("full").join(file)).unwrap();
        let b = fs::read(tmp.path().join("resumed").join(file)).unwrap();
        assert!(a == b, "{file} differs after resume");
    }
}

#[test]
fn resume_rejects_other_configuration() {
    let cfg = packaged("two_step.json", 1);
    let mut short = cfg.clone();
    short.head.epochs = 2;
    short.split.epochs = 1;
    let out = run_pipeline(&short).unwrap();
    let err = resume_pipeline(&cfg, out.final_state).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn thread_count_does_not_change_results() {
    let cfg = packaged("synthetic.json", 3);
    let a = run_pipeline(&cfg).unwrap();
    let b = par::single_threaded(|| run_pipeline(&cfg).unwrap());
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.final_state.encode().unwrap(), b.final_state.encode().unwrap());
}

#[test]
fn failures_name_their_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("data.emb1");
    fs::write(&path, b"XXXX not an embedding file").unwrap();
    let mut cfg = packaged("synthetic.json", 1);
    cfg.data = DataSource::Emb1 { path };
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().starts_with("load data"), "{err}");
    assert_eq!(err.exit_code(), 3);
}
