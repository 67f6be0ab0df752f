//! Schema-versioned JSON reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub threads: usize,
    pub dtype: String,
    pub os: String,
    pub arch: String,
    pub version: String,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            threads: 1,
            dtype: "f32".into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// Everything but `timing` is a pure function of the command, its
/// configuration and its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub schema_version: u32,
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Digests of the input files, by role.
    pub inputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    /// Structured, deterministic results (per-variant entries, pass lists).
    pub details: BTreeMap<String, serde_json::Value>,
    pub environment: Environment,
    /// Wall-clock measurements; excluded from run-to-run comparisons.
    pub timing: BTreeMap<String, serde_json::Value>,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl MetricReport {
    pub fn new(command: &str, cfg: &RunConfig, inputs: BTreeMap<String, String>) -> Self {
        let config_hash = cfg.hash();
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(config_hash.as_bytes());
        for (k, v) in &inputs {
            h.update([0]);
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
        }
        let run_id = hex::encode(&h.finalize()[..8]);
        MetricReport {
            schema_version: REPORT_SCHEMA,
            command: command.into(),
            run_id,
            config_hash,
            config: cfg.to_value(),
            inputs,
            metrics: BTreeMap::new(),
            details: BTreeMap::new(),
            environment: Environment::current(),
            timing: BTreeMap::new(),
        }
    }

    pub fn metric(&mut self, name: &str, v: f64) -> &mut Self {
        self.metrics.insert(name.into(), v);
        self
    }

    pub fn detail(&mut self, name: &str, v: impl Serialize) -> &mut Self {
        self.details.insert(
            name.into(),
            serde_json::to_value(v).expect("report detail serializes"),
        );
        self
    }

    pub fn timing(&mut self, name: &str, v: impl Serialize) -> &mut Self {
        self.timing.insert(
            name.into(),
            serde_json::to_value(v).expect("timing serializes"),
        );
        self
    }

    /// The report with wall-clock fields cleared.
    pub fn without_timing(&self) -> Self {
        MetricReport {
            timing: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
