#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cgcd::pipeline::RunConfig;

pub fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// A packaged config from `configs/` with every seed set to `seed`.
pub fn packaged(name: &str, seed: u64) -> RunConfig {
    RunConfig::from_file(repo_file(&format!("configs/{name}")))
        .expect("packaged config")
        .with_seed(seed)
}
