//! TOML experiment configuration. Every section and field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn of(schedule: &NoiseSchedule) -> Self {
        let (beta_start, beta_end) = schedule.endpoints();
        Self { steps: schedule.steps(), beta_start, beta_end }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub synth: SynthConfig,
    pub schedule: ScheduleConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" (line {})", text[..s.start].matches('\n').count() + 1));
            Error::Config(format!("{}{}", e.message().trim(), at.unwrap_or_default()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.sampler.validate(&self.schedule.build()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml("[train]\nlr = 0.001\n[sampler]\nalpha = 0.5\n").unwrap();
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.sampler.alpha, 0.5);
        assert_eq!(c.sampler.beta, 0.2);
        assert_eq!(c.model, DenoiserConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
