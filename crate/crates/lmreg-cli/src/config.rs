//! Run configuration file: a TOML document with `[model]`, `[train]`,
//! `[loss]` and `[synth]` sections. Every section is optional and falls back
//! to defaults; unknown keys are rejected with the offending path. The
//! regularization weight lives in `[loss]` (`lambda`) and is copied into the
//! runtime training configuration after parsing, so it is configured in one
//! place.

use serde::{Deserialize, Serialize};

use lmreg_core::model::ModelConfig;
use lmreg_core::objective::LossConfig;
use lmreg_core::synth::SynthConfig;
use lmreg_core::train::TrainConfig;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.train.lambda = cfg.loss.lambda;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}
