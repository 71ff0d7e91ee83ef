use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cpe::ThresholdSchedule;
use crate::dynamics::SamplerConfig;
use crate::error::{AfmError, Result};
use crate::flow_path::{Scheduler, SourceKind};
use crate::landscape::LandscapeParams;
use crate::objectives::AfmConfig;
use crate::proposal::MixtureSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub pool_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { pool_size: 1000, steps: 500, learning_rate: 0.5, batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub source: SourceKind,
    /// Unmasked data tokens are copied through instead of predicted.
    pub carry_unmasked: bool,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { source: SourceKind::Mask, carry_unmasked: true, init_scale: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerBlock {
    pub steps: usize,
    pub scheduler: Scheduler,
    pub force_terminal_unmask: bool,
    /// Edits allowed away from the incumbent; `None` runs the unconstrained sampler.
    pub mutation_budget: Option<usize>,
}

impl Default for SamplerBlock {
    fn default() -> Self {
        Self { steps: 16, scheduler: Scheduler::Quadratic, force_terminal_unmask: true, mutation_budget: None }
    }
}

impl SamplerBlock {
    pub fn to_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            scheduler: self.scheduler,
            force_terminal_unmask: self.force_terminal_unmask,
            mutation_budget: None,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for CpeConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferConfig {
    pub capacity: usize,
    pub gamma: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self { capacity: 256, gamma: 0.3 }
    }
}

/// Everything a run needs. Parsed from TOML; every block is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: usize,
    pub batch_size: usize,
    pub initial_size: usize,
    pub noise_sd: f64,
    pub output_dir: Option<PathBuf>,
    /// Write per-step training logs (steps.csv).
    pub step_log: bool,
    pub landscape: LandscapeParams,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub sampler: SamplerBlock,
    pub afm: AfmConfig,
    pub mixture: MixtureSchedule,
    pub threshold: ThresholdSchedule,
    pub cpe: CpeConfig,
    pub buffer: BufferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 15,
            batch_size: 64,
            initial_size: 64,
            noise_sd: 0.0,
            output_dir: None,
            step_log: false,
            landscape: LandscapeParams::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            sampler: SamplerBlock::default(),
            afm: AfmConfig::default(),
            mixture: MixtureSchedule::default(),
            threshold: ThresholdSchedule::default(),
            cpe: CpeConfig::default(),
            buffer: BufferConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(s).map_err(|e| AfmError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| AfmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AfmError::Config(e.to_string()))
    }

    /// Total oracle calls: N₀ + R·B.
    pub fn budget(&self) -> usize {
        self.initial_size + self.rounds * self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AfmError::Config("batch_size must be >= 1".into()));
        }
        if self.initial_size == 0 {
            return Err(AfmError::Config("initial_size must be >= 1".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(AfmError::Config(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd)));
        }
        if self.pretrain.steps > 0 && (self.pretrain.pool_size == 0 || self.pretrain.batch_size == 0) {
            return Err(AfmError::Config("pretraining needs a non-empty pool and batch".into()));
        }
        if self.model.carry_unmasked && self.model.source != SourceKind::Mask {
            return Err(AfmError::Config("carry_unmasked requires the mask source".into()));
        }
        if self.sampler.mutation_budget.is_some() && self.model.source == SourceKind::Mask {
            log::debug!("constrained sampling ignores the mask source; edits start from the incumbent");
        }
        self.to_sampler_checked()?;
        self.afm.validate()?;
        self.threshold.validate()?;
        self.mixture.coefficients(0, 0, self.batch_size)?;
        if !(self.buffer.gamma > 0.0) || self.buffer.capacity == 0 {
            return Err(AfmError::Config("buffer needs capacity >= 1 and gamma > 0".into()));
        }
        Ok(())
    }

    fn to_sampler_checked(&self) -> Result<SamplerConfig> {
        let s = self.sampler.to_sampler();
        s.validate()?;
        Ok(s)
    }
}
