//! Training hyper-parameters, the λ ramp and the mini-batch budget.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StftConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

/// Every training knob, loadable from a flat TOML document whose keys are
/// the field names. Missing keys take the full-size defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub segment_frames: usize,
    pub pre_recon_steps: u64,
    pub pre_clf_steps: u64,
    pub stepback_cycles: u64,
    pub ministage1_per_cycle: u64,
    pub ministage2_per_cycle: u64,
    pub gan_gen_steps: u64,
    pub disc_per_gen: u64,
    pub lambda_max: f64,
    pub lambda_ramp_steps: u64,
    pub gp_weight: f64,
    pub seed: u64,
    /// Network size preset: `paper`, `desk` or `tiny`.
    pub model: String,
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    /// Manifest to train on (needed by the CLI, not by the library).
    pub manifest: Option<PathBuf>,
    /// Where checkpoints and the metric log go; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    /// Save `checkpoint.ckpt` every this many mini-batches (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainingConfig {
    /// The full published schedule.
    pub fn paper() -> Self {
        let stft = StftConfig::default();
        TrainingConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            batch_size: 32,
            segment_frames: 128,
            pre_recon_steps: 8000,
            pre_clf_steps: 40_000,
            stepback_cycles: 40_000,
            ministage1_per_cycle: 4,
            ministage2_per_cycle: 1,
            gan_gen_steps: 50_000,
            disc_per_gen: 5,
            lambda_max: 0.001,
            lambda_ramp_steps: 36_000,
            gp_weight: 10.0,
            seed: 0,
            model: "paper".into(),
            sample_rate: stft.sample_rate,
            n_fft: stft.n_fft,
            hop: stft.hop,
            manifest: None,
            run_dir: None,
            checkpoint_every: 1000,
        }
    }

    /// A few hundred mini-batches with narrow networks; runs on a laptop CPU.
    pub fn desk() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            pre_recon_steps: 80,
            pre_clf_steps: 400,
            stepback_cycles: 20,
            gan_gen_steps: 10,
            lambda_ramp_steps: 18,
            model: "desk".into(),
            checkpoint_every: 0,
            ..Self::paper()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainingConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("training config: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        match self.model.as_str() {
            "paper" => Ok(ModelConfig::paper()),
            "desk" => Ok(ModelConfig::desk()),
            "tiny" => Ok(ModelConfig::tiny()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            n_fft: self.n_fft,
            hop: self.hop,
            sample_rate: self.sample_rate,
            ..StftConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size as u64),
            ("segment_frames", self.segment_frames as u64),
            ("pre_recon_steps", self.pre_recon_steps),
            ("pre_clf_steps", self.pre_clf_steps),
            ("stepback_cycles", self.stepback_cycles),
            ("ministage1_per_cycle", self.ministage1_per_cycle),
            ("ministage2_per_cycle", self.ministage2_per_cycle),
            ("gan_gen_steps", self.gan_gen_steps),
            ("disc_per_gen", self.disc_per_gen),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.lambda_ramp_steps > self.stepback_cycles * self.ministage2_per_cycle {
            return Err(Error::Config(
                "lambda_ramp_steps exceeds the number of stepback updates".into(),
            ));
        }
        if !(self.lambda_max >= 0.0 && self.gp_weight >= 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Config(
                "lambda_max and gp_weight must be non-negative, learning_rate positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.segment_frames % crate::model::TIME_REDUCTION != 0 {
            return Err(Error::Config(format!(
                "segment_frames must be a multiple of {}",
                crate::model::TIME_REDUCTION
            )));
        }
        self.stft().validate()?;
        self.model_config()?.validate()
    }
}

/// `min(iteration / ramp, 1) · λ_max`. The trainer passes the 1-based stepback update number.
pub fn lambda_schedule(iteration: u64, cfg: &TrainingConfig) -> f64 {
    if cfg.lambda_ramp_steps == 0 {
        return cfg.lambda_max;
    }
    (iteration as f64 / cfg.lambda_ramp_steps as f64).min(1.0) * cfg.lambda_max
}

/// Total mini-batches over all three stages.
pub fn training_budget(cfg: &TrainingConfig) -> u64 {
    cfg.pre_recon_steps
        + cfg.pre_clf_steps
        + cfg.stepback_cycles * (cfg.ministage1_per_cycle + cfg.ministage2_per_cycle)
        + cfg.gan_gen_steps * (1 + cfg.disc_per_gen)
}
