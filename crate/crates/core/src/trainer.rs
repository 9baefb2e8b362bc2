//! Minibatch training loop shared by the decoupled model and the baseline.
//!
//! Each iteration draws a minibatch with replacement, one time per row from
//! `U(t_clip, 1)`, fresh noise, and (for the decoupled model) the `φ` that
//! drives each row to zero. It then takes one Adam step at the scheduled
//! learning rate and updates the EMA copy.

use ndarray::Axis;

use crate::attenuation::solve_phi;
use crate::checkpoint::Checkpoint;
use crate::config::{ModelKind, TrainConfig};
use crate::ddpm::{vp_marginal_rows, DdpmLoss, VpSchedule};
use crate::error::{DdmError, Result};
use crate::forward::sample_xt_rows;
use crate::mlp::{backprop, lr_at, AdamState, EmaState, HeadLoss, MlpParams};
use crate::numerics::{gaussian, Matrix, RngStream};
use crate::objective::{DdmLoss, LossConfig};

/// One line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    /// Completed iterations.
    pub iter: usize,
    pub loss: f64,
    /// Unweighted first-head term (`φ`, or `x₀` for the baseline).
    pub loss_phi: f64,
    /// Unweighted `ε` term.
    pub loss_eps: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("iter,loss,loss_phi,loss_eps,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter, r.loss, r.loss_phi, r.loss_eps, r.lr
        ));
    }
    s
}

pub struct Trainer {
    config: TrainConfig,
    loss_cfg: LossConfig,
    vp: VpSchedule,
    data: Matrix,
    params: MlpParams,
    adam: AdamState,
    ema: EmaState,
    iteration: usize,
    rng: RngStream,
}

impl Trainer {
    /// Fresh weights from `rng.child(0)`; the loop draws from `rng.child(1)`.
    pub fn new(config: TrainConfig, data: Matrix, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        if data.rows() == 0 {
            return Err(DdmError::InvalidArgument("training data is empty".into()));
        }
        let arch = config.architecture(data.cols())?;
        let params = MlpParams::init(arch, &mut rng.child(0))?;
        let adam = AdamState::new(&params, config.weight_decay);
        let ema = EmaState::new(&params, config.ema_decay)?;
        Ok(Trainer {
            loss_cfg: config.loss_config()?,
            vp: VpSchedule::new(config.beta_min, config.beta_max)?,
            config,
            data,
            params,
            adam,
            ema,
            iteration: 0,
            rng: rng.child(1),
        })
    }

    /// Continues exactly where `ckpt` stopped.
    pub fn resume(ckpt: Checkpoint, data: Matrix) -> Result<Self> {
        let config = ckpt.config;
        if config.architecture(data.cols())? != ckpt.live.arch {
            return Err(DdmError::Checkpoint(
                "data dimension does not match checkpoint".into(),
            ));
        }
        let mut ema = EmaState::new(&ckpt.ema, config.ema_decay)?;
        ema.shadow = ckpt.ema;
        Ok(Trainer {
            loss_cfg: config.loss_config()?,
            vp: VpSchedule::new(config.beta_min, config.beta_max)?,
            adam: AdamState {
                m: ckpt.adam_m,
                v: ckpt.adam_v,
                step: ckpt.adam_step,
                weight_decay: config.weight_decay,
            },
            config,
            data,
            params: ckpt.live,
            ema,
            iteration: ckpt.iteration,
            rng: ckpt.rng,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            live: self.params.clone(),
            ema: self.ema.shadow.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            adam_step: self.adam.step,
            rng: self.rng.clone(),
        }
    }

    /// Builds the network input and loss for one minibatch.
    fn batch(&mut self) -> Result<(Matrix, Vec<f64>, Box<dyn HeadLoss>)> {
        let b = self.config.batch_size;
        let d = self.data.cols();
        let rng = &mut self.rng;
        let idx: Vec<usize> = (0..b).map(|_| rng.index(self.data.rows())).collect();
        let x0 = Matrix::from_array_unchecked(self.data.select(Axis(0), &idx));
        let ts: Vec<f64> = (0..b)
            .map(|_| rng.uniform_in(self.loss_cfg.t_clip, 1.0))
            .collect();
        let eps = gaussian(rng, b, d)?;
        Ok(match self.config.model {
            ModelKind::Ddm => {
                let phi = solve_phi(self.config.family, &x0, rng)?;
                let x_t = sample_xt_rows(&x0, &phi, &ts, &eps)?;
                let loss = DdmLoss {
                    phi: phi.params,
                    eps,
                    ts: ts.clone(),
                    cfg: self.loss_cfg,
                };
                (x_t, ts, Box::new(loss))
            }
            ModelKind::Ddpm | ModelKind::DdpmX0Head => {
                let x_t = vp_marginal_rows(&x0, &ts, &eps, &self.vp)?;
                let x0 = (self.config.model == ModelKind::DdpmX0Head).then_some(x0);
                (x_t, ts, Box::new(DdpmLoss { eps, x0 }))
            }
        })
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<MetricRow> {
        let (x_t, ts, loss) = self.batch()?;
        let (value, grads) =
            backprop(&self.params, &x_t, &ts, loss.as_ref()).map_err(|e| match e {
                DdmError::NonFinite(_) => DdmError::NonFiniteLoss {
                    iter: self.iteration,
                },
                other => other,
            })?;
        if !value.total.is_finite() || !grads.is_finite() {
            return Err(DdmError::NonFiniteLoss {
                iter: self.iteration,
            });
        }
        let lr = lr_at(self.iteration, &self.config.lr_schedule());
        self.adam.step(&mut self.params, &grads, lr);
        self.ema.update(&self.params);
        self.iteration += 1;
        Ok(MetricRow {
            iter: self.iteration,
            loss: value.total,
            loss_phi: value.first,
            loss_eps: value.second,
            lr,
        })
    }

    /// Trains until `stop` iterations are complete, returning every
    /// `log_every`-th row.
    pub fn run_until(&mut self, stop: usize) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        while self.iteration < stop {
            let row = self.step()?;
            if row.iter % self.config.log_every == 0 {
                log::debug!("iter {} loss {:.6}", row.iter, row.loss);
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

/// Runs `config.iters` iterations from scratch.
pub fn train(
    config: TrainConfig,
    data: Matrix,
    rng: &RngStream,
) -> Result<(Checkpoint, Vec<MetricRow>)> {
    let iters = config.iters;
    let mut trainer = Trainer::new(config, data, rng)?;
    let rows = trainer.run_until(iters)?;
    Ok((trainer.checkpoint(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attenuation::AttenuationFamily;
    use crate::mlp::HeadVariant;
    use crate::numerics::derive_stream;
    use crate::objective::{LossType, WeightScheme};

    fn small(model: ModelKind, iters: usize) -> TrainConfig {
        TrainConfig {
            model,
            hidden_width: 32,
            depth: 2,
            head_variant: HeadVariant::SharedTrunkLinearHeads,
            time_embed_dim: 8,
            batch_size: 32,
            iters,
            log_every: 10,
            ..TrainConfig::default()
        }
    }

    fn data() -> Matrix {
        gaussian(&mut derive_stream(5, 5), 64, 2).unwrap()
    }

    #[test]
    fn logs_every_n_iterations() {
        let (ck, rows) = train(small(ModelKind::Ddm, 100), data(), &derive_stream(0, 0)).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[9].iter, 100);
        assert_eq!(ck.iteration, 100);
        assert_eq!(ck.adam_step, 100);
        assert!(rows.iter().all(|r| r.loss.is_finite()));
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("iter,loss,loss_phi,loss_eps,lr\n10,"));
    }

    #[test]
    fn training_is_deterministic() {
        for model in [ModelKind::Ddm, ModelKind::Ddpm, ModelKind::DdpmX0Head] {
            let a = train(small(model, 30), data(), &derive_stream(1, 0))
                .unwrap()
                .0;
            let b = train(small(model, 30), data(), &derive_stream(1, 0))
                .unwrap()
                .0;
            assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
            let c = train(small(model, 30), data(), &derive_stream(2, 0))
                .unwrap()
                .0;
            assert_ne!(a.live, c.live);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small(ModelKind::Ddm, 40);
        let full = train(cfg.clone(), data(), &derive_stream(3, 0)).unwrap().0;
        let mut first = Trainer::new(cfg, data(), &derive_stream(3, 0)).unwrap();
        first.run_until(17).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), data()).unwrap();
        second.run_until(40).unwrap();
        assert_eq!(
            second.checkpoint().to_bytes().unwrap(),
            full.to_bytes().unwrap()
        );
    }

    #[test]
    fn nan_data_aborts_with_iteration() {
        let mut x = data().into_array();
        x[[0, 0]] = 1e300;
        let x = Matrix::from_array(x).unwrap();
        let mut cfg = small(ModelKind::Ddm, 50);
        cfg.batch_size = 64;
        match train(cfg, x, &derive_stream(0, 0)) {
            Err(DdmError::NonFiniteLoss { iter }) => assert!(iter < 50),
            other => panic!(
                "expected non-finite loss, got {:?}",
                other.map(|r| r.1.len())
            ),
        }
    }

    fn two_points() -> Matrix {
        Matrix::from_rows(&[vec![-1.0, 0.5], vec![1.0, -0.5]]).unwrap()
    }

    /// Unit-weight L2 loss of `net` minus that of the Bayes predictor for
    /// the two-point set, over a grid of times.
    fn excess_over_bayes(net: &crate::model::DdmNet, rng: &mut RngStream) -> f64 {
        use crate::oracle::GaussianMixture;
        use crate::sampler::Denoiser;
        let pts = two_points();
        let bayes = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![pts.row_vec(0), pts.row_vec(1)],
            vec![vec![1e-12; 2]; 2],
        )
        .unwrap();
        let cfg = LossConfig::new(WeightScheme::Unit, LossType::L2, 1e-3).unwrap();
        let n = 2000;
        let mut total = 0.0;
        let grid: Vec<f64> = (0..20).map(|k| 0.025 + 0.05 * k as f64).collect();
        for &t in &grid {
            let idx: Vec<usize> = (0..n).map(|_| rng.index(2)).collect();
            let x0 = Matrix::from_array(pts.select(Axis(0), &idx)).unwrap();
            let eps = gaussian(rng, n, 2).unwrap();
            let phi = solve_phi(AttenuationFamily::Constant, &x0, rng).unwrap();
            let x_t = crate::forward::sample_xt(&x0, &phi, t, &eps).unwrap();
            let ours = net.predict(&x_t, t).unwrap();
            let best = bayes.oracle_predict(&x_t, t).unwrap();
            total += crate::objective::ddm_loss(&ours, &phi, &eps, t, &cfg).unwrap()
                - crate::objective::ddm_loss(&best, &phi, &eps, t, &cfg).unwrap();
        }
        total / grid.len() as f64
    }

    #[test]
    fn overfits_two_points() {
        let mut cfg = small(ModelKind::Ddm, 5000);
        cfg.hidden_width = 128;
        cfg.depth = 3;
        cfg.batch_size = 256;
        cfg.weight_scheme = WeightScheme::Unit;
        cfg.loss_type = LossType::L2;
        cfg.lr0 = 5e-3;
        cfg.log_every = 100;
        // The raw loss cannot fall below the Bayes floor (about 0.43 here, since
        // x₀ is ambiguous near t = 1), so memorization is measured as the
        // excess over the exact two-point predictor.
        let (ck, _) = train(cfg, two_points(), &derive_stream(5, 0)).unwrap();
        let net = crate::model::DdmNet {
            params: ck.ema,
            family: AttenuationFamily::Constant,
        };
        let excess = excess_over_bayes(&net, &mut derive_stream(4, 1));
        assert!(excess < 1e-3, "{excess}");
    }
}
