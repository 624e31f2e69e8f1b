//! Config-driven experiment runner: one config in, one result directory out.
//!
//! A run produces `results/*.csv`, `summary.txt` and `manifest.json`. The
//! CSV files depend only on the config (seed included), never on the number
//! of worker threads.

mod config;
mod kinds;
mod scenarios;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{ConfigError, ExperimentConfig, GeneratorSpec, Kind, ModelSpec, NetSpec, Params, Setup, TerminalSpec, Tolerances};
pub use scenarios::{scenario, scenarios, Scenario};

use crate::error::Result;

/// A CSV table; cells are already formatted.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Shortest round-trip form of a float.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    /// `key: value` lines for the summary.
    pub facts: Vec<(String, String)>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn fact(&self, key: &str) -> Option<&str> {
        self.facts.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub(crate) fn note(&mut self, key: &str, value: impl ToString) {
        self.facts.push((key.into(), value.to_string()));
    }

    pub fn summary(&self, config: &ExperimentConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", config.name);
        let _ = writeln!(s, "kind: {}", config.kind);
        let _ = writeln!(s, "seed: {}", config.seed);
        if let Some(d) = &config.description {
            let _ = writeln!(s, "description: {d}");
        }
        for (k, v) in &self.facts {
            let _ = writeln!(s, "{k}: {v}");
        }
        let _ = writeln!(s);
        for c in &self.checks {
            let _ = writeln!(s, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "\n{} checks, {} failed", self.checks.len(), failed);
        s
    }
}

/// Runs the experiment on the current rayon pool.
pub fn run(config: &ExperimentConfig, verbose: bool) -> Result<RunOutcome> {
    kinds::run(config, verbose)
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub crate_name: String,
    pub crate_version: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub checks_passed: bool,
    pub outputs: Vec<OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes `results/<table>.csv`, `summary.txt` and `manifest.json` under `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, outcome: &RunOutcome) -> Result<Manifest> {
    let results = dir.join("results");
    fs::create_dir_all(&results)?;
    let mut outputs = Vec::new();
    let mut put = |rel: PathBuf, text: String| -> Result<()> {
        fs::write(dir.join(&rel), text.as_bytes())?;
        outputs.push(OutputEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(text.as_bytes()),
            bytes: text.len(),
        });
        Ok(())
    };
    for t in &outcome.tables {
        put(PathBuf::from("results").join(format!("{}.csv", t.name)), t.to_csv())?;
    }
    put(PathBuf::from("summary.txt"), outcome.summary(config))?;
    let text = config.to_json();
    let manifest = Manifest {
        name: config.name.clone(),
        kind: config.kind.to_string(),
        seed: config.seed,
        crate_name: env!("CARGO_PKG_NAME").into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(text.as_bytes()),
        config: serde_json::from_str(&text)?,
        checks_passed: outcome.passed(),
        outputs,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
