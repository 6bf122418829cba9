//! Experiment runner: scenarios, verdicts and report artifacts.
//!
//! A scenario records named checks and named error indicators with their
//! limits. The verdict is INCONCLUSIVE when any indicator exceeds its limit,
//! PASS when every check holds and FAIL otherwise.

pub mod config;
mod plot;
mod scenarios;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use config::{BodyLiteral, BodySpec, ExperimentConfig, GridConfig, ReplaySettings, Scenario, SolverSettings, Thresholds};

use crate::{Error, Result};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => EXIT_PASS,
            Verdict::Fail => EXIT_FAIL,
            Verdict::Inconclusive => EXIT_INCONCLUSIVE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridProvenance {
    pub dim: usize,
    /// In units of each body's circumradius.
    pub half_width: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical JSON of the effective configuration.
    pub config_sha: String,
    pub grid: GridProvenance,
    pub tolerances: BTreeMap<String, f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub verdict: Verdict,
    pub metrics: BTreeMap<String, Value>,
    pub provenance: Provenance,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// A CSV artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub name: String,
    pub svg: String,
}

/// Report plus artifacts of one scenario run.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: ScenarioReport,
    pub tables: Vec<Table>,
    pub plots: Vec<Plot>,
}

impl Outcome {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes `report.json`, every table and, when `plots` is set, every SVG.
    pub fn write(&self, dir: &Path, plots: bool) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let path = dir.join("report.json");
        std::fs::write(&path, self.report.to_json())?;
        written.push(path);
        for t in &self.tables {
            let path = dir.join(&t.name);
            std::fs::write(&path, t.to_csv()?)?;
            written.push(path);
        }
        if plots {
            for p in &self.plots {
                let path = dir.join(&p.name);
                std::fs::write(&path, &p.svg)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

/// Checks, error indicators and metrics collected by a scenario.
#[derive(Debug, Default)]
pub(crate) struct Tally {
    metrics: BTreeMap<String, Value>,
    checks: BTreeMap<String, bool>,
    indicators: BTreeMap<String, (f64, f64)>,
}

pub(crate) fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}

impl Tally {
    pub fn metric(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.metrics.insert(key.into(), value.into());
    }

    pub fn num(&mut self, key: impl Into<String>, x: f64) {
        self.metrics.insert(key.into(), num(x));
    }

    pub fn check(&mut self, key: impl Into<String>, ok: bool) {
        self.checks.insert(key.into(), ok);
    }

    /// Exceeded unless `value <= limit`; a NaN value counts as exceeded.
    pub fn indicator(&mut self, key: impl Into<String>, value: f64, limit: f64) {
        self.indicators.insert(key.into(), (value, limit));
    }

    pub fn absorb(&mut self, other: Tally) {
        self.metrics.extend(other.metrics);
        self.checks.extend(other.checks);
        self.indicators.extend(other.indicators);
    }

    pub fn verdict(&self) -> Verdict {
        if self.indicators.values().any(|(v, l)| !(v <= l)) {
            Verdict::Inconclusive
        } else if self.checks.values().all(|&ok| ok) {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    fn into_metrics(self) -> (BTreeMap<String, Value>, BTreeMap<String, f64>) {
        let mut metrics = self.metrics;
        let checks: serde_json::Map<String, Value> =
            self.checks.iter().map(|(k, v)| (k.clone(), Value::Bool(*v))).collect();
        metrics.insert("checks".into(), Value::Object(checks));
        let mut limits = BTreeMap::new();
        let mut indicators = serde_json::Map::new();
        for (k, (v, l)) in self.indicators {
            let mut entry = serde_json::Map::new();
            entry.insert("value".into(), num(v));
            entry.insert("limit".into(), num(l));
            entry.insert("exceeded".into(), Value::Bool(!(v <= l)));
            indicators.insert(k.clone(), Value::Object(entry));
            limits.insert(format!("indicator.{k}"), l);
        }
        metrics.insert("indicators".into(), Value::Object(indicators));
        (metrics, limits)
    }
}

fn provenance(cfg: &ExperimentConfig, indicator_limits: BTreeMap<String, f64>) -> Provenance {
    let config_sha = hex::encode(Sha256::digest(cfg.canonical_json().as_bytes()));
    let mut tolerances = indicator_limits;
    if let Value::Object(map) = serde_json::to_value(&cfg.thresholds).expect("thresholds serialize") {
        for (k, v) in map {
            if let Some(x) = v.as_f64() {
                tolerances.insert(k, x);
            }
        }
    }
    tolerances.insert("solver.tol".into(), cfg.solver.tol);
    tolerances.insert("solver.epsilon_reg".into(), cfg.solver.epsilon_reg);
    Provenance {
        config_sha,
        grid: GridProvenance { dim: cfg.n, half_width: cfg.grid.half_width, cells: cfg.cells() },
        tolerances,
        seed: cfg.seed,
    }
}

/// Runs the configured scenario on the current rayon pool. Configuration
/// errors are returned; any other failure yields a FAIL report carrying the
/// error message.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate().map_err(|(key, msg)| Error::Config(format!("{key}: {msg}")))?;
    let (tally, tables, plots) = match scenarios::dispatch(cfg) {
        Ok(parts) => parts,
        Err(e @ Error::Config(_)) => return Err(e),
        Err(e) => {
            let mut t = Tally::default();
            t.metric("error", e.to_string());
            t.check("completed", false);
            (t, Vec::new(), Vec::new())
        }
    };
    let verdict = tally.verdict();
    let (metrics, limits) = tally.into_metrics();
    let report = ScenarioReport {
        scenario: cfg.scenario.name().to_string(),
        verdict,
        metrics,
        provenance: provenance(cfg, limits),
    };
    Ok(Outcome { report, tables, plots })
}

/// [`run`] on a dedicated pool of `workers` threads.
pub fn run_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| run(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_precedence() {
        let mut t = Tally::default();
        t.check("a", true);
        assert_eq!(t.verdict(), Verdict::Pass);
        t.check("b", false);
        assert_eq!(t.verdict(), Verdict::Fail);
        t.indicator("i", 0.5, 1.0);
        assert_eq!(t.verdict(), Verdict::Fail);
        t.indicator("j", f64::NAN, 1.0);
        assert_eq!(t.verdict(), Verdict::Inconclusive);
        assert_eq!(Verdict::Inconclusive.exit_code(), 2);
    }

    #[test]
    fn csv_quotes_fields() {
        let mut t = Table::new("x.csv", &["body", "value"]);
        t.rows.push(vec!["ball(center=[0.0, 0.0],r=1)".into(), "1.5".into()]);
        let csv = t.to_csv().unwrap();
        assert_eq!(csv, "body,value\n\"ball(center=[0.0, 0.0],r=1)\",1.5\n");
    }
}
