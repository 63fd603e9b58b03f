use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{PenaltyVariant, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, DEFAULT_MARGIN};
use crate::memory::DEFAULT_CAPACITY;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Mas,
    Kd,
    Rmas,
    Rkd,
    Airloop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distillation {
    Descriptor,
    Relational,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Finetune,
        Method::Mas,
        Method::Kd,
        Method::Rmas,
        Method::Rkd,
        Method::Airloop,
    ];

    pub fn penalty(self) -> Option<PenaltyVariant> {
        match self {
            Method::Mas => Some(PenaltyVariant::Mas),
            Method::Rmas | Method::Airloop => Some(PenaltyVariant::Rmas),
            _ => None,
        }
    }

    pub fn distillation(self) -> Option<Distillation> {
        match self {
            Method::Kd => Some(Distillation::Descriptor),
            Method::Rkd | Method::Airloop => Some(Distillation::Relational),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Mas => "mas",
            Method::Kd => "kd",
            Method::Rmas => "rmas",
            Method::Rkd => "rkd",
            Method::Airloop => "airloop",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub triplets_per_step: usize,
    pub epochs_per_env: usize,
    /// Zero the momentum buffer at environment boundaries.
    pub reset_momentum: bool,
    /// Write `step_{n}.ckpt` every this many optimizer steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            momentum: 0.9,
            triplets_per_step: 1,
            epochs_per_env: 1,
            reset_momentum: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub capacity: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceSection {
    /// Blend finished environments with equal weight instead of keeping
    /// only the latest one.
    pub cumulative: bool,
}

impl Default for ImportanceSection {
    fn default() -> Self {
        Self { cumulative: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Count a query as recalled when any of its true matches is accepted,
    /// instead of scoring every pair.
    pub per_query: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub method: Method,
    pub train: OptimSection,
    pub memory: MemorySection,
    pub loss: LossSection,
    pub rmas: ImportanceSection,
    pub eval: EvalSection,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Airloop,
            train: OptimSection::default(),
            memory: MemorySection::default(),
            loss: LossSection::default(),
            rmas: ImportanceSection::default(),
            eval: EvalSection::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                t.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                t.momentum
            )));
        }
        if t.triplets_per_step == 0 || t.epochs_per_env == 0 {
            return Err(Error::Config(
                "triplets_per_step and epochs_per_env must be positive".into(),
            ));
        }
        if self.memory.capacity < 3 {
            return Err(Error::Config(format!(
                "memory capacity must be at least 3, got {}",
                self.memory.capacity
            )));
        }
        let l = &self.loss;
        if !(l.margin >= 0.0 && l.lambda1 >= 0.0 && l.lambda2 >= 0.0) {
            return Err(Error::Config(
                "margin, lambda1 and lambda2 must be non-negative".into(),
            ));
        }
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
