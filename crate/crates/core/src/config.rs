//! The JSON run configuration.
//!
//! One document with two optional sections, `theory` and `experiment`. Every
//! key is optional and unknown keys are rejected. Defaults:
//!
//! | key | default |
//! |---|---|
//! | `theory.protocol.ranks` | `[4, 16, 64, 256, 1024]` |
//! | `theory.protocol.n_steps` | `8` |
//! | `theory.protocol.n_seeds` | `64` |
//! | `theory.protocol.n_fresh` | `256` |
//! | `theory.protocol.d1`, `d2` | `2`, `8` |
//! | `theory.protocol.eta` | `0.01` |
//! | `theory.protocol.sigma_a` | `1/d1` |
//! | `theory.protocol.init_scale` | `"standard"` |
//! | `theory.protocol.seed` | `0` |
//! | `theory.rules` | rsLoRA, LoRA, `ν=1/4`, `ν=2`, all with `α = 1` |
//! | `theory.moments` | `[2]` |
//! | `theory.steep_rank_cap` | `64` (ranks used for rules with `ν > 1`) |
//! | `theory.trajectory` | rank 8, `d1 = d2 = 8`, `η = 0.05`, 10 steps, rsLoRA `α = 1`, seed 0 |
//! | `experiment.task` | `"char-lm"` |
//! | `experiment.ranks` | `[4, 8, 32, 128, 512]` |
//! | `experiment.rules` | rsLoRA and LoRA with `α = 16` |
//! | `experiment.optimizer` | AdamW, `η = 1e-4`, `β = (0.9, 0.999)`, `ε = 1e-8`, no decay |
//! | `experiment.steps` / `batch_size` / `seeds` | `2000` / `32` / `3` |
//! | `experiment.probe_every` | `100` |
//! | `experiment.placement` | every hidden layer |
//! | `experiment.init_scale` | `"standard"` |
//! | `experiment.sigma_a` | `1/d_model` |
//! | `experiment.model` | `d_model 64`, 2 hidden layers, context 3, tanh, LayerNorm, residual |
//! | `experiment.sgd_eta` | `1e-4` |
//! | `experiment.lr_grid` | `[1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2]` |
//! | `experiment.lr_low_rank` / `reference` | `4` / rsLoRA `α = 16` at rank 512 |
//! | `experiment.comparison_rank` / `comparison_nus` | `512` / `[0.25, 0.5, 1, 2]` |
//! | `experiment.divergence_factor` | `1000` |
//! | `experiment.seed` / `threads` | `0` / `0` (all cores) |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::ExperimentConfig;
use crate::scaling::RuleSpec;
use crate::theory::MomentProtocol;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub rank: usize,
    pub d1: usize,
    pub d2: usize,
    pub eta: f64,
    pub steps: usize,
    pub rule: RuleSpec,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            d1: 8,
            d2: 8,
            eta: 0.05,
            steps: 10,
            rule: RuleSpec::new("rslora", 1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub protocol: MomentProtocol,
    pub rules: Vec<RuleSpec>,
    pub moments: Vec<u32>,
    pub steep_rank_cap: usize,
    pub trajectory: TrajectoryConfig,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            protocol: MomentProtocol::default(),
            rules: vec![
                RuleSpec::new("rslora", 1.0),
                RuleSpec::new("lora", 1.0),
                RuleSpec::power(0.25, 1.0),
                RuleSpec::power(2.0, 1.0),
            ],
            moments: vec![2],
            steep_rank_cap: 64,
            trajectory: TrajectoryConfig::default(),
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol
            .validate()
            .map_err(|e| Error::config("theory.protocol", e.to_string()))?;
        for (i, r) in self.rules.iter().enumerate() {
            r.resolve()
                .map_err(|e| Error::config(format!("theory.rules[{i}]"), e.to_string()))?;
        }
        if let Some(m) = self.moments.iter().find(|&&m| m == 0 || m % 2 == 1) {
            return Err(Error::config(
                "theory.moments",
                format!("moment orders must be even and positive, got {m}"),
            ));
        }
        let t = &self.trajectory;
        if t.rank == 0 || t.d1 == 0 || t.d2 == 0 {
            return Err(Error::config("theory.trajectory", "rank, d1 and d2 must be positive"));
        }
        t.rule
            .resolve()
            .map_err(|e| Error::config("theory.trajectory.rule", e.to_string()))?;
        Ok(())
    }

    /// Ranks used for a rule: rules with `ν > 1` are capped at `steep_rank_cap`.
    pub fn ranks_for(&self, nu: f64) -> Vec<usize> {
        if nu > 1.0 {
            self.protocol
                .ranks
                .iter()
                .copied()
                .filter(|&r| r <= self.steep_rank_cap)
                .collect()
        } else {
            self.protocol.ranks.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub theory: TheoryConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(
                if key == "." { "<root>".to_string() } else { key },
                e.inner().to_string(),
            )
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.theory.validate()?;
        self.experiment.validate()
    }
}
