//! Trained networks as samplers.

use crate::attenuation::{AttenuationFamily, Phi};
use crate::checkpoint::Checkpoint;
use crate::config::ModelKind;
use crate::ddpm::{sample_ddpm, VpDenoiser, VpOutput, VpSchedule};
use crate::error::{DdmError, Result};
use crate::mlp::MlpParams;
use crate::numerics::{Matrix, RngStream};
use crate::oracle::{GaussianMixture, OracleDenoiser};
use crate::sampler::{sample, Denoiser, DenoiserOutput, SampleTrace, StepSchedule};

/// Two-head network predicting `(φ, ε)`.
#[derive(Debug, Clone)]
pub struct DdmNet {
    pub params: MlpParams,
    pub family: AttenuationFamily,
}

impl Denoiser for DdmNet {
    fn dim(&self) -> usize {
        self.params.arch.input_dim
    }

    fn family(&self) -> AttenuationFamily {
        self.family
    }

    fn predict(&self, x_t: &Matrix, t: f64) -> Result<DenoiserOutput> {
        let mut outs = self.params.predict(x_t, t)?.into_iter();
        let phi = outs.next().expect("phi head");
        let eps = outs.next().expect("eps head");
        Ok(DenoiserOutput {
            phi: Phi::new(self.family, phi)?,
            eps,
        })
    }
}

/// Baseline network predicting `ε` and optionally `x₀`.
#[derive(Debug, Clone)]
pub struct DdpmNet {
    pub params: MlpParams,
}

impl VpDenoiser for DdpmNet {
    fn dim(&self) -> usize {
        self.params.arch.input_dim
    }

    fn predict(&self, x_t: &Matrix, t: f64) -> Result<VpOutput> {
        let mut outs = self.params.predict(x_t, t)?.into_iter();
        Ok(VpOutput {
            eps: outs.next().expect("eps head"),
            x0: outs.next(),
        })
    }
}

/// Anything `sample` can draw from.
#[derive(Debug, Clone)]
pub enum Generator {
    Ddm(DdmNet),
    Ddpm(DdpmNet, VpSchedule),
    Oracle(OracleDenoiser),
}

impl Generator {
    /// EMA weights unless `use_ema` is false.
    pub fn from_checkpoint(ckpt: &Checkpoint, use_ema: bool) -> Result<Self> {
        let params = if use_ema {
            ckpt.ema.clone()
        } else {
            ckpt.live.clone()
        };
        let cfg = &ckpt.config;
        Ok(match cfg.model {
            ModelKind::Ddm => Generator::Ddm(DdmNet {
                params,
                family: cfg.family,
            }),
            ModelKind::Ddpm | ModelKind::DdpmX0Head => Generator::Ddpm(
                DdpmNet { params },
                VpSchedule::new(cfg.beta_min, cfg.beta_max)?,
            ),
        })
    }

    pub fn oracle(gmm: GaussianMixture) -> Result<Self> {
        gmm.validate()?;
        Ok(Generator::Oracle(OracleDenoiser { gmm }))
    }

    pub fn dim(&self) -> usize {
        match self {
            Generator::Ddm(n) => Denoiser::dim(n),
            Generator::Ddpm(n, _) => VpDenoiser::dim(n),
            Generator::Oracle(o) => Denoiser::dim(o),
        }
    }

    /// `nfe` network calls per sample, ending at `smallest_t`.
    pub fn generate(
        &self,
        nfe: usize,
        n_samples: usize,
        smallest_t: f64,
        rng: &RngStream,
    ) -> Result<SampleTrace> {
        if nfe == 0 {
            return Err(DdmError::InvalidArgument("NFE must be at least 1".into()));
        }
        match self {
            Generator::Ddm(net) => sample(
                net,
                &StepSchedule::new(nfe, smallest_t)?,
                n_samples,
                self.dim(),
                rng,
            ),
            Generator::Oracle(o) => sample(
                o,
                &StepSchedule::new(nfe, smallest_t)?,
                n_samples,
                self.dim(),
                rng,
            ),
            Generator::Ddpm(net, sched) => sample_ddpm(net, sched, nfe, smallest_t, n_samples, rng),
        }
    }
}
