use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{Context, Result};
use serde::Serialize;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct BuildInfo {
    pub version: &'static str,
    pub git: &'static str,
}

pub fn build_info() -> BuildInfo {
    BuildInfo {
        version: env!("CARGO_PKG_VERSION"),
        git: option_env!("REGDA_GIT_REV").unwrap_or("unknown"),
    }
}

/// What ran, with which inputs, and what it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved config, defaults included.
    pub config: serde_json::Value,
    pub build: BuildInfo,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<PathBuf>,
}

pub fn timestamp(t: SystemTime) -> String {
    chrono::DateTime::<chrono::Utc>::from(t).to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>, threads: usize, started: SystemTime) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            build: build_info(),
            seeds,
            threads,
            started: timestamp(started),
            finished: String::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.finished = timestamp(SystemTime::now());
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, serde_json::to_vec_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
