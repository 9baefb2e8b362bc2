//! Fully connected multi-head network with hand-written backpropagation.
//!
//! `Net(x_t, t)` embeds `t` sinusoidally, concatenates it with `x_t`, runs a
//! SiLU trunk, and feeds the trunk features to one or more output heads.
//! Parameters live in a flat list of 2-D tensors (biases are `1 × out`) in
//! declaration order, which is also the checkpoint order.

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};
use crate::numerics::{Matrix, RngStream};

/// Frequencies of the time embedding span `[1, TIME_EMBED_MAX_FREQ]`.
pub const TIME_EMBED_MAX_FREQ: f64 = 1000.0;
/// Width of the hidden layers inside a deep head.
pub const DEEP_HEAD_WIDTH: usize = 128;

/// How the output heads hang off the shared trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// One linear map per head.
    SharedTrunkLinearHeads,
    /// Two SiLU layers of [`DEEP_HEAD_WIDTH`] then a linear map, per head.
    SharedTrunkDeepHeads,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub time_embed_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub head_variant: HeadVariant,
    pub head_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSpec {
    name: String,
    fan_in: usize,
    fan_out: usize,
    silu: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.depth == 0 {
            return Err(DdmError::Config(
                "input_dim, hidden_width and depth must be positive".into(),
            ));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(DdmError::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if self.head_dims.is_empty() || self.head_dims.contains(&0) {
            return Err(DdmError::Config("every head needs a positive width".into()));
        }
        Ok(())
    }

    fn trunk_layers(&self) -> Vec<LayerSpec> {
        (0..self.depth)
            .map(|l| LayerSpec {
                name: format!("trunk.{l}"),
                fan_in: if l == 0 {
                    self.input_dim + self.time_embed_dim
                } else {
                    self.hidden_width
                },
                fan_out: self.hidden_width,
                silu: true,
            })
            .collect()
    }

    fn head_layers(&self, head: usize) -> Vec<LayerSpec> {
        let out = self.head_dims[head];
        match self.head_variant {
            HeadVariant::SharedTrunkLinearHeads => vec![LayerSpec {
                name: format!("head{head}.0"),
                fan_in: self.hidden_width,
                fan_out: out,
                silu: false,
            }],
            HeadVariant::SharedTrunkDeepHeads => vec![
                LayerSpec {
                    name: format!("head{head}.0"),
                    fan_in: self.hidden_width,
                    fan_out: DEEP_HEAD_WIDTH,
                    silu: true,
                },
                LayerSpec {
                    name: format!("head{head}.1"),
                    fan_in: DEEP_HEAD_WIDTH,
                    fan_out: DEEP_HEAD_WIDTH,
                    silu: true,
                },
                LayerSpec {
                    name: format!("head{head}.2"),
                    fan_in: DEEP_HEAD_WIDTH,
                    fan_out: out,
                    silu: false,
                },
            ],
        }
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let mut all = self.trunk_layers();
        for h in 0..self.head_dims.len() {
            all.extend(self.head_layers(h));
        }
        all
    }

    /// `(name, [rows, cols])` for every tensor in declaration order.
    pub fn manifest(&self) -> Vec<(String, [usize; 2])> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), [l.fan_in, l.fan_out]),
                    (format!("{}.bias", l.name), [1, l.fan_out]),
                ]
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.manifest().iter().map(|(_, [r, c])| r * c).sum()
    }
}

/// Sinusoidal embedding `[sin ω₁t, cos ω₁t, sin ω₂t, …]`, geometric `ω` in `[1, 1000]`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(DdmError::InvalidArgument(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let k = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..k {
        let frac = if k == 1 {
            0.0
        } else {
            i as f64 / (k - 1) as f64
        };
        let w = TIME_EMBED_MAX_FREQ.powf(frac);
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    Ok(out)
}

/// Network weights. Also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: Architecture,
    pub tensors: Vec<Array2<f64>>,
}

impl MlpParams {
    /// LeCun-normal weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .manifest()
            .into_iter()
            .map(|(name, [r, c])| {
                if name.ends_with(".bias") {
                    Array2::zeros((r, c))
                } else {
                    let scale = (1.0 / r as f64).sqrt();
                    Array2::from_shape_simple_fn((r, c), || scale * rng.normal())
                }
            })
            .collect();
        Ok(MlpParams { arch, tensors })
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.arch.manifest().into_iter().map(|(n, _)| n).collect()
    }

    /// All values in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn from_flat(arch: Architecture, values: &[f64]) -> Result<Self> {
        arch.validate()?;
        let manifest = arch.manifest();
        let total: usize = manifest.iter().map(|(_, [r, c])| r * c).sum();
        if values.len() != total {
            return Err(DdmError::Shape(format!(
                "architecture needs {total} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DdmError::NonFinite("parameter blob".into()));
        }
        let mut offset = 0;
        let tensors = manifest
            .iter()
            .map(|(_, [r, c])| {
                let t = Array2::from_shape_vec((*r, *c), values[offset..offset + r * c].to_vec())
                    .expect("sizes match manifest");
                offset += r * c;
                t
            })
            .collect();
        Ok(MlpParams { arch, tensors })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn layer(&self, idx: usize) -> (&Array2<f64>, &Array2<f64>) {
        (&self.tensors[2 * idx], &self.tensors[2 * idx + 1])
    }

    /// Head outputs for a batch with one time per row.
    pub fn forward(&self, x: &Matrix, ts: &[f64]) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward_cached(x, ts)?.outputs)
    }

    /// Head outputs at a common time `t`.
    pub fn predict(&self, x: &Matrix, t: f64) -> Result<Vec<Matrix>> {
        let outs = self.forward(x, &vec![t; x.rows()])?;
        Ok(outs.into_iter().map(Matrix::from_array_unchecked).collect())
    }

    fn input(&self, x: &Matrix, ts: &[f64]) -> Result<Array2<f64>> {
        if x.cols() != self.arch.input_dim {
            return Err(DdmError::Shape(format!(
                "network takes {} inputs, got {}",
                self.arch.input_dim,
                x.cols()
            )));
        }
        if ts.len() != x.rows() {
            return Err(DdmError::Shape(format!(
                "{} times for {} rows",
                ts.len(),
                x.rows()
            )));
        }
        let e = self.arch.time_embed_dim;
        let mut emb = Array2::zeros((x.rows(), e));
        for (i, &t) in ts.iter().enumerate() {
            let v = time_embed(t, e)?;
            emb.row_mut(i).assign(&Array1::from(v));
        }
        Ok(concatenate(Axis(1), &[x.view(), emb.view()]).expect("row counts match"))
    }

    pub(crate) fn forward_cached(&self, x: &Matrix, ts: &[f64]) -> Result<ForwardCache> {
        let specs = self.arch.layers();
        let input = self.input(x, ts)?;
        let mut layers = Vec::with_capacity(specs.len());

        let run =
            |idx: usize, a: Array2<f64>, layers: &mut Vec<LayerCache>| -> Result<Array2<f64>> {
                let (w, b) = self.layer(idx);
                let mut z = a.dot(w);
                z += &b.row(0);
                let y = if specs[idx].silu {
                    z.mapv(silu)
                } else {
                    z.clone()
                };
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(DdmError::NonFinite(format!(
                        "activation of layer {idx} ({})",
                        specs[idx].name
                    )));
                }
                layers.push(LayerCache { input: a, pre: z });
                Ok(y)
            };

        let mut h = input;
        for l in 0..self.arch.depth {
            h = run(l, h, &mut layers)?;
        }
        let trunk_out = h;
        let mut outputs = Vec::with_capacity(self.arch.head_dims.len());
        let mut idx = self.arch.depth;
        for head in 0..self.arch.head_dims.len() {
            let mut a = trunk_out.clone();
            for _ in 0..self.arch.head_layers(head).len() {
                a = run(idx, a, &mut layers)?;
                idx += 1;
            }
            outputs.push(a);
        }
        Ok(ForwardCache { layers, outputs })
    }

    /// Gradients of a loss with respect to every tensor, given the loss
    /// gradient with respect to each head output.
    pub(crate) fn backward(&self, cache: &ForwardCache, head_grads: &[Array2<f64>]) -> MlpParams {
        let specs = self.arch.layers();
        let mut grads = self.zeros_like();
        let mut trunk_grad: Option<Array2<f64>> = None;

        // Heads are laid out after the trunk, one contiguous run each.
        let mut head_start = self.arch.depth;
        let mut head_ranges = Vec::new();
        for head in 0..self.arch.head_dims.len() {
            let len = self.arch.head_layers(head).len();
            head_ranges.push(head_start..head_start + len);
            head_start += len;
        }

        let layer_back =
            |idx: usize, upstream: Array2<f64>, grads: &mut MlpParams| -> Array2<f64> {
                let lc = &cache.layers[idx];
                let dz = if specs[idx].silu {
                    let mut d = upstream;
                    ndarray::Zip::from(&mut d)
                        .and(&lc.pre)
                        .for_each(|g, &z| *g *= silu_grad(z));
                    d
                } else {
                    upstream
                };
                grads.tensors[2 * idx] = lc.input.t().dot(&dz);
                grads.tensors[2 * idx + 1] = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
                dz.dot(&self.layer(idx).0.t())
            };

        for (head, range) in head_ranges.into_iter().enumerate() {
            let mut g = head_grads[head].clone();
            for idx in range.rev() {
                g = layer_back(idx, g, &mut grads);
            }
            trunk_grad = Some(match trunk_grad {
                Some(acc) => acc + &g,
                None => g,
            });
        }
        let mut g = trunk_grad.expect("at least one head");
        for idx in (0..self.arch.depth).rev() {
            g = layer_back(idx, g, &mut grads);
        }
        grads
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &MlpParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(scale, b);
        }
    }
}

pub(crate) struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    pub(crate) outputs: Vec<Array2<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Loss on head outputs, reporting its value and the gradient per head.
pub trait HeadLoss {
    fn evaluate(&self, outputs: &[Array2<f64>]) -> Result<(LossBreakdown, Vec<Array2<f64>>)>;
}

/// Total loss and its two unweighted parts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub first: f64,
    pub second: f64,
}

/// Runs forward and backward passes for `loss`.
pub fn backprop(
    params: &MlpParams,
    x: &Matrix,
    ts: &[f64],
    loss: &dyn HeadLoss,
) -> Result<(LossBreakdown, MlpParams)> {
    let cache = params.forward_cached(x, ts)?;
    let (value, head_grads) = loss.evaluate(&cache.outputs)?;
    Ok((value, params.backward(&cache, &head_grads)))
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: MlpParams,
    pub v: MlpParams,
    pub step: u64,
    pub weight_decay: f64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &MlpParams, weight_decay: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let wd = self.weight_decay;
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut())
            .zip(self.v.tensors.iter_mut())
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    *p -= lr * (update + wd * *p);
                });
        }
    }
}

/// Polynomial decay `max(lr0 · (1 − iter/total)^power, lr_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub power: f64,
    pub total: usize,
}

pub const DEFAULT_LR_POWER: f64 = 0.96;

pub fn lr_at(iter: usize, cfg: &LrSchedule) -> f64 {
    let frac = if cfg.total == 0 {
        1.0
    } else {
        (iter.min(cfg.total) as f64) / cfg.total as f64
    };
    (cfg.lr0 * (1.0 - frac).powf(cfg.power)).max(cfg.lr_min)
}

/// Exponential moving average of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: MlpParams,
    pub decay: f64,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

impl EmaState {
    pub fn new(params: &MlpParams, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(DdmError::InvalidArgument(format!(
                "EMA decay {decay} outside [0, 1)"
            )));
        }
        Ok(EmaState {
            shadow: params.clone(),
            decay,
        })
    }

    /// `shadow ← decay · shadow + (1 − decay) · params`.
    pub fn update(&mut self, params: &MlpParams) {
        let d = self.decay;
        for (s, p) in self.shadow.tensors.iter_mut().zip(&params.tensors) {
            ndarray::Zip::from(s)
                .and(p)
                .for_each(|s, &p| *s = d * *s + (1.0 - d) * p);
        }
    }
}
