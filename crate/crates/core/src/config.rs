//! Experiment description shared by training, sampling and checkpoints.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attenuation::AttenuationFamily;
use crate::datasets::{DatasetName, DatasetSpec};
use crate::error::{DdmError, Result};
use crate::mlp::{Architecture, HeadVariant, LrSchedule, DEFAULT_EMA_DECAY, DEFAULT_LR_POWER};
use crate::objective::{LossConfig, LossType, WeightScheme, DEFAULT_T_CLIP};
use crate::sampler::DEFAULT_SMALLEST_T;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Two heads: `φ` and `ε`.
    Ddm,
    /// Variance-preserving baseline with an `ε` head.
    Ddpm,
    /// Baseline with an extra `x₀` head.
    #[serde(rename = "ddpm_x0head")]
    DdpmX0Head,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ddm => "ddm",
            ModelKind::Ddpm => "ddpm",
            ModelKind::DdpmX0Head => "ddpm_x0head",
        })
    }
}

impl FromStr for ModelKind {
    type Err = DdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddm" => Ok(ModelKind::Ddm),
            "ddpm" => Ok(ModelKind::Ddpm),
            "ddpm_x0head" => Ok(ModelKind::DdpmX0Head),
            other => Err(DdmError::Config(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub family: AttenuationFamily,
    pub weight_scheme: WeightScheme,
    pub loss_type: LossType,
    pub dataset: DatasetSpec,
    pub hidden_width: usize,
    pub depth: usize,
    pub head_variant: HeadVariant,
    pub time_embed_dim: usize,
    pub batch_size: usize,
    pub iters: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub t_clip: f64,
    pub smallest_t: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Ddm,
            family: AttenuationFamily::Constant,
            weight_scheme: WeightScheme::Adaptive,
            loss_type: LossType::L2,
            dataset: DatasetSpec::new(DatasetName::TwoMoons, 10_000, 0),
            hidden_width: 256,
            depth: 4,
            head_variant: HeadVariant::SharedTrunkDeepHeads,
            time_embed_dim: 16,
            batch_size: 256,
            iters: 30_000,
            lr0: 1e-3,
            lr_min: 1e-5,
            lr_power: DEFAULT_LR_POWER,
            weight_decay: 0.0,
            ema_decay: DEFAULT_EMA_DECAY,
            t_clip: DEFAULT_T_CLIP,
            smallest_t: DEFAULT_SMALLEST_T,
            beta_min: 0.1,
            beta_max: 20.0,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| DdmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DdmError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.dataset.n == 0 {
            return bad("dataset.n must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return bad(format!(
                "need 0 <= lr_min <= lr0 and lr0 > 0, got {} / {}",
                self.lr_min, self.lr0
            ));
        }
        if !(self.lr_power > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr_power must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if !(self.smallest_t > 0.0 && self.smallest_t < 1.0) {
            return bad(format!("smallest_t {} outside (0, 1)", self.smallest_t));
        }
        if !(self.beta_min > 0.0 && self.beta_max >= self.beta_min) {
            return bad("need 0 < beta_min <= beta_max".into());
        }
        LossConfig::new(self.weight_scheme, self.loss_type, self.t_clip)?;
        self.architecture(2)?;
        Ok(())
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        LossConfig::new(self.weight_scheme, self.loss_type, self.t_clip)
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr0,
            lr_min: self.lr_min,
            power: self.lr_power,
            total: self.iters,
        }
    }

    /// Network shape for data of dimension `dim`.
    pub fn architecture(&self, dim: usize) -> Result<Architecture> {
        let head_dims = match self.model {
            ModelKind::Ddm => vec![self.family.phi_dim(dim), dim],
            ModelKind::Ddpm => vec![dim],
            ModelKind::DdpmX0Head => vec![dim, dim],
        };
        let arch = Architecture {
            input_dim: dim,
            time_embed_dim: self.time_embed_dim,
            hidden_width: self.hidden_width,
            depth: self.depth,
            head_variant: self.head_variant,
            head_dims,
        };
        arch.validate()?;
        Ok(arch)
    }
}
