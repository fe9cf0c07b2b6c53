//! The single TOML file that drives synthesis, training and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::reloc::RelocConfig;
use crate::synth::{DatasetSpec, SceneSpec};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds dataset generation, training and evaluation sampling. When
    /// absent, each section keeps its own seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub scene: SceneSpec,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub reloc: RelocConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
            Error::parse(path, line, e.message().trim())
        })?;
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    /// Seed used for dataset generation.
    pub fn dataset_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.shape.validate()?;
        self.dataset.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.reloc.validate()
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1
}
