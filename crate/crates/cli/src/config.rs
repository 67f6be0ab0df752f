//! The single declarative document describing a run.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nfdistill::data::SynthParams;
use nfdistill::flow::FlowConfig;
use nfdistill::fusion::{BenchConfig, FusionCheck};
use nfdistill::spectral::LossConfig;
use nfdistill::student::{capacity_matched, StudentConfig};
use nfdistill::train::{AblationConfig, OptimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub params: SynthParams,
    pub train_examples: usize,
    pub validation_examples: usize,
    pub held_out_examples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            params: SynthParams::default(),
            train_examples: 2048,
            validation_examples: 64,
            held_out_examples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out conditions evaluated, from the start of the split.
    pub conditions: usize,
    /// Samples per condition for the diversity score.
    pub diversity_k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conditions: 32,
            diversity_k: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Initialization seed of every model built by a run.
    pub seed: u64,
    pub data: DataConfig,
    pub teacher: FlowConfig,
    pub teacher_train: OptimConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub ablation: AblationConfig,
    pub fusion: FusionCheck,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reduced profile that trains on a single CPU core in minutes: a
    /// 4-step teacher and 18k-parameter ablation students.
    pub fn desk() -> Self {
        let optim = OptimConfig {
            steps: 2000,
            warmup_steps: 200,
            batch: 16,
            segment: 1024,
            ..OptimConfig::default()
        };
        let mut cfg = RunConfig {
            data: DataConfig {
                train_examples: 512,
                validation_examples: 16,
                held_out_examples: 32,
                ..DataConfig::default()
            },
            teacher: FlowConfig {
                steps: 4,
                coupling_layers: 2,
                coupling_hidden: 32,
                ..FlowConfig::default()
            },
            teacher_train: optim.clone(),
            student: StudentConfig::default(),
            distill: DistillConfig {
                loss: LossConfig::default(),
                optim: OptimConfig {
                    val_every: 250,
                    ..optim
                },
            },
            ablation: AblationConfig {
                flow_shaped: StudentConfig {
                    blocks: 4,
                    layers: 2,
                    hidden: 16,
                    ..AblationConfig::default().flow_shaped
                },
                ..AblationConfig::default()
            },
            bench: BenchConfig {
                batch: 4,
                ..BenchConfig::default()
            },
            ..RunConfig::default()
        };
        // The distilled student is the ablation's feed-forward arm.
        let a = &cfg.ablation;
        let flow_shaped = StudentConfig {
            inner_width: cfg.teacher.squeeze,
            ..a.flow_shaped.clone()
        };
        let [_, _, ff] = capacity_matched(
            &cfg.teacher,
            &flow_shaped,
            a.wide_width,
            a.feed_forward_blocks,
            a.tolerance,
        )
        .expect("the desk ablation students match in capacity");
        cfg.student = ff;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate `path`; `None` gives the validated defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("in {}", p.display()))
            }
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    /// Replace every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.teacher_train.seed = seed;
        self.distill.optim.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.data.params;
        p.validate()?;
        self.teacher.validate()?;
        self.teacher_train.validate()?;
        self.student.validate(&self.teacher)?;
        self.distill.loss.validate()?;
        self.distill.optim.validate()?;
        self.bench.validate()?;
        ensure!(
            self.teacher.cond_hop == p.hop,
            "teacher.cond_hop {} differs from data.params.hop {}",
            self.teacher.cond_hop,
            p.hop
        );
        ensure!(
            self.teacher.cond_channels == 2,
            "the synthetic conditioning has 2 channels, teacher.cond_channels is {}",
            self.teacher.cond_channels
        );
        for (name, o) in [
            ("teacher_train", &self.teacher_train),
            ("distill.optim", &self.distill.optim),
        ] {
            ensure!(
                o.segment % p.hop == 0 && o.segment <= p.length,
                "{name}.segment {} must be a multiple of the hop {} and at most the example length {}",
                o.segment,
                p.hop,
                p.length
            );
        }
        ensure!(
            self.distill.optim.segment >= self.distill.loss.min_length(),
            "distill.optim.segment {} is shorter than the longest STFT window {}",
            self.distill.optim.segment,
            self.distill.loss.min_length()
        );
        ensure!(
            self.bench.len % p.hop == 0,
            "bench.len {} must be a multiple of the hop {}",
            self.bench.len,
            p.hop
        );
        ensure!(
            p.length >= self.distill.loss.min_length(),
            "examples of {} samples are shorter than the longest STFT window",
            p.length
        );
        let d = &self.data;
        ensure!(d.train_examples > 0, "data.train_examples must be positive");
        ensure!(
            d.validation_examples >= self.distill.optim.val_examples,
            "distill.optim.val_examples {} exceeds data.validation_examples {}",
            self.distill.optim.val_examples,
            d.validation_examples
        );
        ensure!(
            self.eval.conditions > 0 && self.eval.conditions <= d.held_out_examples,
            "eval.conditions {} must be in 1..={}",
            self.eval.conditions,
            d.held_out_examples
        );
        if self.eval.diversity_k < 2 {
            bail!("eval.diversity_k must be at least 2");
        }
        Ok(())
    }

    /// Canonical JSON: keys sorted, shortest round-trip floats.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .and_then(|v| serde_json::to_string(&v))
            .expect("configuration serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json()))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}
