#![allow(dead_code)]

use std::path::{Path, PathBuf};

use seqrec::config::{self, RunConfig};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// The fixture run configuration with its workdir moved to `workdir`.
pub fn fixture_config(workdir: &Path, overrides: &[&str]) -> RunConfig {
    let sets: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let mut cfg = config::load(&fixtures().join("config.toml"), &sets).unwrap();
    cfg.paths.workdir = workdir.to_path_buf();
    cfg
}
