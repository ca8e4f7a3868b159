//! Conditional masked autoregressive normalizing flow.
//!
//! The forward direction maps data `x` to latent `z`; each block applies a
//! permutation, an LU-parameterised linear map and a masked affine
//! autoregressive transform. The base density is a diagonal Gaussian whose
//! mean and log-scale may depend on the context embedding.

mod made;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::rng;
use made::Made;

pub use made::hidden_degrees;

const LOG_2PI: f64 = 1.8378770664093453;
const CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub data_dim: usize,
    pub hidden_features: usize,
    /// Width of the context embedding; 0 builds an unconditional flow.
    pub context_features: usize,
    /// Hidden width of the base-parameter head; 0 keeps a standard normal base.
    pub base_hidden: usize,
    /// Soft bound on the affine log-scales.
    pub log_scale_bound: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            n_layers: 10,
            data_dim: 2,
            hidden_features: 4,
            context_features: 4,
            base_hidden: 32,
            log_scale_bound: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct LuLinear {
    d: usize,
    lower: ParamId,
    upper: ParamId,
    log_diag: ParamId,
    bias: ParamId,
    strict_lower: Tensor,
    strict_upper: Tensor,
}

impl LuLinear {
    fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        let tri = |keep: fn(usize, usize) -> bool| {
            let data = (0..d * d).map(|k| if keep(k / d, k % d) { 1.0 } else { 0.0 }).collect();
            Tensor::new(vec![d, d], data).expect("square")
        };
        LuLinear {
            d,
            lower: params.add(format!("{name}.lower"), Tensor::zeros(vec![d, d])),
            upper: params.add(format!("{name}.upper"), Tensor::zeros(vec![d, d])),
            log_diag: params.add(format!("{name}.log_diag"), Tensor::zeros(vec![d])),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(vec![d])),
            strict_lower: tri(|i, j| i > j),
            strict_upper: tri(|i, j| i < j),
        }
    }

    /// `M = L·U` on the tape.
    fn matrix<'t>(&self, tape: &'t Tape, params: &ParamSet) -> std::result::Result<Var<'t>, DiffError> {
        let eye = tape.constant(Tensor::eye(self.d));
        let l = tape
            .param(params, self.lower)
            .mul(tape.constant(self.strict_lower.clone()))?
            .add(eye)?;
        let diag = eye.mul(tape.param(params, self.log_diag).exp())?;
        let u = tape
            .param(params, self.upper)
            .mul(tape.constant(self.strict_upper.clone()))?
            .add(diag)?;
        l.matmul(u)
    }

    fn log_det(&self, params: &ParamSet) -> f64 {
        params.value(self.log_diag).data().iter().sum()
    }

    /// Solve `x·L·U = y − b` row by row.
    fn inverse_rows(&self, params: &ParamSet, y: &mut [f64], layer: usize) -> Result<()> {
        let d = self.d;
        let det = self.log_det(params).exp();
        if !(det.abs() > 1e-12) || !det.is_finite() {
            return Err(Error::SingularLayer { layer, det });
        }
        let lower = params.value(self.lower).data();
        let upper = params.value(self.upper).data();
        let diag: Vec<f64> = params.value(self.log_diag).data().iter().map(|v| v.exp()).collect();
        let bias = params.value(self.bias).data();
        let mut w = vec![0.0; d];
        for row in y.chunks_mut(d) {
            // w·U = y − b
            for j in 0..d {
                let mut acc = row[j] - bias[j];
                for i in 0..j {
                    acc -= w[i] * upper[i * d + j];
                }
                w[j] = acc / diag[j];
            }
            // x·L = w
            for j in (0..d).rev() {
                let mut acc = w[j];
                for i in j + 1..d {
                    acc -= row[i] * lower[i * d + j];
                }
                row[j] = acc;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    perm: Vec<usize>,
    lu: LuLinear,
    made: Made,
}

/// One flow layer. Blocks are learnable; the other kinds are fixed maps used for
/// analysis and fixtures.
#[derive(Clone, Debug)]
pub enum Layer {
    Block(Block),
    /// Output column `j` is input column `perm[j]`.
    Permute(Vec<usize>),
    /// `z = x·exp(log_scale) + shift`.
    Affine { log_scale: Vec<f64>, shift: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Base {
    Standard,
    Conditional { hidden: Linear, out: Linear },
}

/// Values recorded by one forward pass on a tape.
pub struct FlowPass<'t> {
    pub z: Var<'t>,
    /// `[B, 1]`.
    pub log_det: Var<'t>,
    /// Output of every layer, `f_1(x) … f_L(x)`.
    pub per_layer: Vec<Var<'t>>,
}

/// Log-density with the quantities the training objective needs.
pub struct DensityPass<'t> {
    /// `[B, 1]`.
    pub log_prob: Var<'t>,
    pub per_layer: Vec<Var<'t>>,
    pub mu: Var<'t>,
    pub log_sigma: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Flow {
    config: FlowConfig,
    layers: Vec<Layer>,
    base: Base,
}

fn permutation(d: usize, layer: usize, seed: u64) -> Vec<usize> {
    match d {
        0 | 1 => (0..d).collect(),
        2 => vec![1, 0],
        _ => {
            let mut p: Vec<usize> = (0..d).collect();
            p.shuffle(&mut rng::stream(seed, 1000 + layer as u64));
            p
        }
    }
}

/// Diagonal Gaussian log-density per row, `[B, 1]`.
pub fn gaussian_log_prob<'t>(
    z: Var<'t>,
    mu: Var<'t>,
    log_sigma: Var<'t>,
) -> std::result::Result<Var<'t>, DiffError> {
    let d = z.shape()[1] as f64;
    let white = z.sub(mu)?.mul(log_sigma.neg().exp())?;
    Ok(white
        .square()
        .sum_last()
        .scale(-0.5)
        .sub(log_sigma.sum_last())?
        .add_scalar(-0.5 * d * LOG_2PI))
}

fn chunks(rows: usize) -> usize {
    rows.div_ceil(CHUNK)
}

fn slice_rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let w = t.last_dim();
    Tensor::new(vec![end - start, w], t.data()[start * w..end * w].to_vec()).expect("rows")
}

impl Flow {
    pub fn new(config: &FlowConfig, params: &mut ParamSet) -> Result<Self> {
        if config.data_dim == 0 || config.hidden_features == 0 {
            return Err(Error::Config("flow data_dim and hidden_features must be >= 1".into()));
        }
        if !(config.log_scale_bound > 0.0) {
            return Err(Error::Config("log_scale_bound must be positive".into()));
        }
        let d = config.data_dim;
        let mut init = rng::stream(config.seed, 0);
        let layers = (0..config.n_layers)
            .map(|l| {
                let name = format!("flow.layer{l}");
                Layer::Block(Block {
                    perm: permutation(d, l, config.seed),
                    lu: LuLinear::new(params, &format!("{name}.lu"), d),
                    made: Made::new(
                        params,
                        &format!("{name}.made"),
                        d,
                        config.hidden_features,
                        config.context_features,
                        config.log_scale_bound,
                        &mut init,
                    ),
                })
            })
            .collect();
        let base = if config.context_features > 0 && config.base_hidden > 0 {
            Base::Conditional {
                hidden: Linear::new(
                    params,
                    "flow.base.hidden",
                    config.context_features,
                    config.base_hidden,
                    true,
                    Init::FanIn,
                    &mut init,
                ),
                out: Linear::new(params, "flow.base.out", config.base_hidden, 2 * d, true, Init::Zeros, &mut init),
            }
        } else {
            Base::Standard
        };
        Ok(Flow {
            config: config.clone(),
            layers,
            base,
        })
    }

    /// Flow built from fixed layers over a standard normal base.
    pub fn from_layers(data_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        for layer in &layers {
            let ok = match layer {
                Layer::Block(_) => false,
                Layer::Permute(p) => {
                    let mut s = p.clone();
                    s.sort_unstable();
                    s == (0..data_dim).collect::<Vec<_>>()
                }
                Layer::Affine { log_scale, shift } => log_scale.len() == data_dim && shift.len() == data_dim,
            };
            if !ok {
                return Err(Error::Config("fixed layer does not match the data dimension".into()));
            }
        }
        Ok(Flow {
            config: FlowConfig {
                n_layers: layers.len(),
                data_dim,
                context_features: 0,
                base_hidden: 0,
                ..Default::default()
            },
            layers,
            base: Base::Standard,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn is_conditional(&self) -> bool {
        self.config.context_features > 0
    }

    fn check_inputs(&self, x: &[usize], ctx: Option<&[usize]>) -> Result<()> {
        if x.len() != 2 || x[1] != self.config.data_dim {
            return Err(Error::Dimension {
                context: "flow input",
                expected: self.config.data_dim,
                actual: x.last().copied().unwrap_or(0),
            });
        }
        match (ctx, self.is_conditional()) {
            (None, false) => Ok(()),
            (Some(c), true) if c.len() == 2 && c[1] == self.config.context_features && c[0] == x[0] => Ok(()),
            (c, _) => Err(Error::Dimension {
                context: "flow context",
                expected: self.config.context_features,
                actual: c.and_then(|c| c.last().copied()).unwrap_or(0),
            }),
        }
    }

    /// Data → latent with per-layer outputs and accumulated `log|det ∂z/∂x|`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        x: Var<'t>,
        ctx: Option<Var<'t>>,
    ) -> Result<FlowPass<'t>> {
        self.check_inputs(&x.shape(), ctx.map(|c| c.shape()).as_deref())?;
        let rows = x.shape()[0];
        let mut h = x;
        let mut log_det = tape.constant(Tensor::zeros(vec![rows, 1]));
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Block(b) => {
                    let y = h.gather_last(&b.perm)?;
                    let y = y.matmul(b.lu.matrix(tape, params)?)?.add(tape.param(params, b.lu.bias))?;
                    let (shift, log_scale) = b.made.forward(tape, params, y, ctx)?;
                    h = y.mul(log_scale.exp())?.add(shift)?;
                    let lu_det = tape.param(params, b.lu.log_diag).sum();
                    log_det = log_det.add(log_scale.sum_last())?.add(lu_det)?;
                }
                Layer::Permute(p) => h = h.gather_last(p)?,
                Layer::Affine { log_scale, shift } => {
                    h = h
                        .mul(tape.constant(Tensor::vector(log_scale.iter().map(|v| v.exp()).collect())))?
                        .add(tape.constant(Tensor::vector(shift.clone())))?;
                    log_det = log_det.add_scalar(log_scale.iter().sum());
                }
            }
            if !h.with_value(Tensor::all_finite) {
                return Err(Error::NonFinite {
                    stage: format!("flow layer {l}"),
                });
            }
            per_layer.push(h);
        }
        Ok(FlowPass {
            z: h,
            log_det,
            per_layer,
        })
    }

    /// Mean and clamped log standard deviation of the base Gaussian, each `[B, d]`.
    pub fn base_params<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        ctx: Option<Var<'t>>,
        rows: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let d = self.config.data_dim;
        match (&self.base, ctx) {
            (Base::Conditional { hidden, out }, Some(c)) => {
                let h = hidden.forward(tape, params, c)?.tanh();
                let o = out.forward(tape, params, h)?;
                let mu = o.narrow(1, 0, d)?;
                let log_sigma = o.narrow(1, d, d)?.clamp(-7.0, 7.0);
                Ok((mu, log_sigma))
            }
            _ => {
                let zeros = tape.constant(Tensor::zeros(vec![rows, d]));
                Ok((zeros, zeros))
            }
        }
    }

    /// `log p_X(x | ctx)` on the tape.
    pub fn log_prob<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        x: Var<'t>,
        ctx: Option<Var<'t>>,
    ) -> Result<DensityPass<'t>> {
        let pass = self.forward(tape, params, x, ctx)?;
        let (mu, log_sigma) = self.base_params(tape, params, ctx, x.shape()[0])?;
        let log_prob = gaussian_log_prob(pass.z, mu, log_sigma)?.add(pass.log_det)?;
        Ok(DensityPass {
            log_prob,
            per_layer: pass.per_layer,
            mu,
            log_sigma,
        })
    }

    /// Log-densities of each row of `x` (no gradients), evaluated in parallel chunks.
    pub fn log_prob_values(&self, params: &ParamSet, x: &Tensor, ctx: Option<&Tensor>) -> Result<Vec<f64>> {
        self.check_inputs(x.shape(), ctx.map(Tensor::shape))?;
        let rows = x.shape()[0];
        let parts = crate::par::try_map_indexed(chunks(rows), |c| {
            let (s, e) = (c * CHUNK, ((c + 1) * CHUNK).min(rows));
            let tape = Tape::new();
            let xv = tape.constant(slice_rows(x, s, e));
            let cv = ctx.map(|t| tape.constant(slice_rows(t, s, e)));
            let lp = self.log_prob(&tape, params, xv, cv)?.log_prob;
            Ok::<_, Error>(lp.value().into_data())
        })?;
        Ok(parts.concat())
    }

    /// Latent values and log-determinants of each row (no gradients).
    pub fn forward_values(&self, params: &ParamSet, x: &Tensor, ctx: Option<&Tensor>) -> Result<(Tensor, Vec<f64>)> {
        self.check_inputs(x.shape(), ctx.map(Tensor::shape))?;
        let rows = x.shape()[0];
        let parts = crate::par::try_map_indexed(chunks(rows), |c| {
            let (s, e) = (c * CHUNK, ((c + 1) * CHUNK).min(rows));
            let tape = Tape::new();
            let xv = tape.constant(slice_rows(x, s, e));
            let cv = ctx.map(|t| tape.constant(slice_rows(t, s, e)));
            let pass = self.forward(&tape, params, xv, cv)?;
            Ok::<_, Error>((pass.z.value().into_data(), pass.log_det.value().into_data()))
        })?;
        let (z, ld): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        Ok((Tensor::new(vec![rows, self.data_dim()], z.concat())?, ld.concat()))
    }

    /// Latent → data, inverting the layers in reverse order.
    pub fn inverse(&self, params: &ParamSet, z: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        self.check_inputs(z.shape(), ctx.map(Tensor::shape))?;
        let rows = z.shape()[0];
        let parts = crate::par::try_map_indexed(chunks(rows), |c| {
            let (s, e) = (c * CHUNK, ((c + 1) * CHUNK).min(rows));
            let cz = slice_rows(z, s, e);
            let cc = ctx.map(|t| slice_rows(t, s, e));
            self.inverse_chunk(params, cz, cc.as_ref())
        })?;
        Ok(Tensor::new(vec![rows, self.data_dim()], parts.concat())?)
    }

    fn inverse_chunk(&self, params: &ParamSet, z: Tensor, ctx: Option<&Tensor>) -> Result<Vec<f64>> {
        let d = self.data_dim();
        let rows = z.shape()[0];
        let mut h = z.into_data();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Block(b) => {
                    // autoregressive inverse: one conditioner pass per dimension
                    let mut y = vec![0.0; rows * d];
                    for i in 0..d {
                        let tape = Tape::new();
                        let yv = tape.constant(Tensor::new(vec![rows, d], y.clone())?);
                        let cv = ctx.map(|t| tape.constant(t.clone()));
                        let (shift, log_scale) = b.made.forward(&tape, params, yv, cv)?;
                        let (shift, log_scale) = (shift.value(), log_scale.value());
                        for r in 0..rows {
                            let k = r * d + i;
                            y[k] = (h[k] - shift.data()[k]) * (-log_scale.data()[k]).exp();
                        }
                    }
                    b.lu.inverse_rows(params, &mut y, l)?;
                    for r in 0..rows {
                        for (j, &p) in b.perm.iter().enumerate() {
                            h[r * d + p] = y[r * d + j];
                        }
                    }
                }
                Layer::Permute(p) => {
                    let prev = h.clone();
                    for r in 0..rows {
                        for (j, &src) in p.iter().enumerate() {
                            h[r * d + src] = prev[r * d + j];
                        }
                    }
                }
                Layer::Affine { log_scale, shift } => {
                    for (k, v) in h.iter_mut().enumerate() {
                        let j = k % d;
                        *v = (*v - shift[j]) * (-log_scale[j]).exp();
                    }
                }
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: format!("inverse of flow layer {l}"),
                });
            }
        }
        Ok(h)
    }

    /// Base parameters for a single context row (or the unconditional base).
    pub fn base_values(&self, params: &ParamSet, ctx: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let cv = match ctx {
            Some(c) => Some(tape.constant(Tensor::new(vec![1, c.len()], c.to_vec())?)),
            None => None,
        };
        let (mu, ls) = self.base_params(&tape, params, cv, 1)?;
        Ok((mu.value().into_data(), ls.value().into_data()))
    }

    fn repeat_context(&self, ctx: Option<&[f64]>, n: usize) -> Result<Option<Tensor>> {
        match ctx {
            Some(c) => Ok(Some(Tensor::new(vec![n, c.len()], c.repeat(n))?)),
            None => Ok(None),
        }
    }

    /// Draw `n` samples given one context; returns the samples and their log-densities.
    pub fn sample(
        &self,
        params: &ParamSet,
        n: usize,
        ctx: Option<&[f64]>,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InsufficientSamples("sample count must be >= 1".into()));
        }
        let d = self.data_dim();
        let (mu, ls) = self.base_values(params, ctx)?;
        let z: Vec<f64> = (0..n * d)
            .map(|k| {
                let e: f64 = rng.sample(StandardNormal);
                mu[k % d] + ls[k % d].exp() * e
            })
            .collect();
        let ctx_t = self.repeat_context(ctx, n)?;
        let x = self.inverse(params, &Tensor::new(vec![n, d], z)?, ctx_t.as_ref())?;
        let lp = self.log_prob_values(params, &x, ctx_t.as_ref())?;
        Ok((x, lp))
    }

    /// Closed polylines: circles of radius `k` in whitened base coordinates mapped to data space.
    pub fn confidence_contours(
        &self,
        params: &ParamSet,
        ctx: Option<&[f64]>,
        levels: &[f64],
    ) -> Result<Vec<Vec<[f64; 2]>>> {
        if self.data_dim() != 2 {
            return Err(Error::Dimension {
                context: "confidence contours",
                expected: 2,
                actual: self.data_dim(),
            });
        }
        const POINTS: usize = 256;
        let (mu, ls) = self.base_values(params, ctx)?;
        let ctx_t = self.repeat_context(ctx, POINTS)?;
        levels
            .iter()
            .map(|&k| {
                let mut z = Vec::with_capacity(2 * POINTS);
                for p in 0..POINTS - 1 {
                    let a = 2.0 * std::f64::consts::PI * p as f64 / (POINTS - 1) as f64;
                    z.push(mu[0] + ls[0].exp() * k * a.cos());
                    z.push(mu[1] + ls[1].exp() * k * a.sin());
                }
                z.extend_from_within(0..2);
                let x = self.inverse(params, &Tensor::new(vec![POINTS, 2], z)?, ctx_t.as_ref())?;
                Ok(x.data().chunks(2).map(|c| [c[0], c[1]]).collect())
            })
            .collect()
    }

    /// Conditioner outputs `[shift | log_scale]` of block `layer` for its (already permuted and mixed) input.
    pub fn conditioner_values(
        &self,
        params: &ParamSet,
        layer: usize,
        y: &Tensor,
        ctx: Option<&Tensor>,
    ) -> Result<Tensor> {
        let Some(Layer::Block(b)) = self.layers.get(layer) else {
            return Err(Error::Config(format!("layer {layer} is not a learnable block")));
        };
        let tape = Tape::new();
        let (shift, ls) = b.made.forward(
            &tape,
            params,
            tape.constant(y.clone()),
            ctx.map(|c| tape.constant(c.clone())),
        )?;
        Ok(crate::diffcore::concat(&[shift, ls], 1)?.value())
    }
}
