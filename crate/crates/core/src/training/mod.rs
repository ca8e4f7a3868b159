//! Maximum-likelihood training with kinetic-energy and intermediate-prior
//! regularizers, Adam, and seeded with-replacement mini-batches.
//!
//! Each batch is split into fixed-size chunks evaluated on separate tapes
//! (in parallel when enabled); chunk gradients are summed in chunk order so
//! a run is reproducible regardless of the worker count.

mod log;
mod loss;

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor};
use crate::dynamics::WindowedDataset;
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::flow::Flow;
use crate::model::Model;
use crate::rng;

pub use log::{TrainLog, TrainRecord};
pub use loss::{kinetic_term, nll_term, prior_term, total_loss, LossTerms, LossVars, LossWeights};

/// Rows per gradient chunk.
pub const GRAD_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch_size: 2048,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            loss_weights: LossWeights::default(),
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.loss_weights.validate()
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.value(id).numel()]).collect();
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            clip: config.grad_clip,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update `params` from their stored gradients; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet) -> f64 {
        let norm = params.grad_norm();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let (value, grad) = params.value_and_grad_mut(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for k in 0..value.len() {
                let g = grad[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                value[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }
}

/// Gather dataset rows into context `[B, R, m]` and target `[B, d]` tensors.
pub fn gather_batch(data: &WindowedDataset, rows: &[usize]) -> Result<(Option<Tensor>, Tensor)> {
    let mut targets = Vec::with_capacity(rows.len() * data.d);
    for &i in rows {
        targets.extend_from_slice(data.target(i));
    }
    let targets = Tensor::new(vec![rows.len(), data.d], targets)?;
    if !data.is_conditional() {
        return Ok((None, targets));
    }
    let mut ctx = Vec::with_capacity(rows.len() * data.spec.r * data.m);
    for &i in rows {
        ctx.extend_from_slice(data.context(i));
    }
    Ok((Some(Tensor::new(vec![rows.len(), data.spec.r, data.m], ctx)?), targets))
}

struct ChunkResult {
    grads: Vec<Option<Vec<f64>>>,
    terms: LossTerms,
}

fn chunk_gradients(
    flow: &Flow,
    encoder: Option<&Encoder>,
    params: &ParamSet,
    data: &WindowedDataset,
    rows: &[usize],
    weight: f64,
    weights: &LossWeights,
) -> Result<ChunkResult> {
    let (ctx, tgt) = gather_batch(data, rows)?;
    let tape = Tape::new();
    let vars = match total_loss(flow, encoder, &tape, params, ctx.as_ref(), &tgt, weights) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) | Err(Error::Diff(_)) => {
            return Err(Error::NonFiniteLoss {
                rows: offending_rows(flow, encoder, params, data, rows),
            })
        }
        Err(e) => return Err(e),
    };
    let terms = vars.terms();
    if !terms.is_finite() {
        return Err(Error::NonFiniteLoss {
            rows: offending_rows(flow, encoder, params, data, rows),
        });
    }
    let grads = tape.param_gradients(vars.total.scale(weight), params.len())?;
    Ok(ChunkResult {
        grads,
        terms: LossTerms {
            total: terms.total * weight,
            nll: terms.nll * weight,
            kinetic: terms.kinetic * weight,
            prior: terms.prior * weight,
        },
    })
}

/// Dataset rows whose individual loss is non-finite; all of `rows` if none is on its own.
fn offending_rows(
    flow: &Flow,
    encoder: Option<&Encoder>,
    params: &ParamSet,
    data: &WindowedDataset,
    rows: &[usize],
) -> Vec<usize> {
    let mut bad: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&i| {
            let Ok((ctx, tgt)) = gather_batch(data, &[i]) else { return true };
            let tape = Tape::new();
            match total_loss(flow, encoder, &tape, params, ctx.as_ref(), &tgt, &LossWeights::default()) {
                Ok(v) => !v.terms().is_finite(),
                Err(_) => true,
            }
        })
        .collect();
    if bad.is_empty() {
        bad = rows.to_vec();
    }
    bad.sort_unstable();
    bad.dedup();
    bad
}

/// Loss and accumulated parameter gradients for a batch of dataset rows.
///
/// Gradients are written into `params`' buffers (after zeroing them).
pub fn batch_gradients(model: &mut Model, data: &WindowedDataset, rows: &[usize], weights: &LossWeights) -> Result<LossTerms> {
    if rows.is_empty() {
        return Err(Error::InsufficientSamples("empty batch".into()));
    }
    let (flow, encoder) = (&model.flow, model.encoder.as_ref());
    let params = &model.params;
    let n = rows.len();
    let chunks: Vec<&[usize]> = rows.chunks(GRAD_CHUNK).collect();
    let results = crate::par::try_map_indexed(chunks.len(), |c| {
        let weight = chunks[c].len() as f64 / n as f64;
        chunk_gradients(flow, encoder, params, data, chunks[c], weight, weights)
    })?;
    model.params.zero_grad();
    let mut terms = LossTerms::default();
    let ids: Vec<_> = model.params.ids().collect();
    for r in results {
        terms.total += r.terms.total;
        terms.nll += r.terms.nll;
        terms.kinetic += r.terms.kinetic;
        terms.prior += r.terms.prior;
        for (id, g) in ids.iter().zip(r.grads) {
            if let Some(g) = g {
                for (dst, src) in model.params.grad_mut(*id).iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }
    if !model.params.grad_norm().is_finite() {
        return Err(Error::NonFiniteLoss { rows: rows.to_vec() });
    }
    Ok(terms)
}

/// Loss terms of `rows` without computing gradients.
pub fn evaluate_loss(model: &Model, data: &WindowedDataset, rows: &[usize], weights: &LossWeights) -> Result<LossTerms> {
    if rows.is_empty() {
        return Err(Error::InsufficientSamples("empty batch".into()));
    }
    let n = rows.len();
    let chunks: Vec<&[usize]> = rows.chunks(GRAD_CHUNK).collect();
    let parts = crate::par::try_map_indexed(chunks.len(), |c| {
        let (ctx, tgt) = gather_batch(data, chunks[c])?;
        let tape = Tape::new();
        let v = total_loss(&model.flow, model.encoder.as_ref(), &tape, &model.params, ctx.as_ref(), &tgt, weights)?;
        let w = chunks[c].len() as f64 / n as f64;
        let t = v.terms();
        Ok::<_, Error>([t.total * w, t.nll * w, t.kinetic * w, t.prior * w])
    })?;
    let mut s = [0.0; 4];
    for p in parts {
        for k in 0..4 {
            s[k] += p[k];
        }
    }
    Ok(LossTerms {
        total: s[0],
        nll: s[1],
        kinetic: s[2],
        prior: s[3],
    })
}

/// Train `model` in place; returns the per-iteration log.
pub fn train(data: &WindowedDataset, model: &mut Model, config: &TrainConfig) -> Result<TrainLog> {
    train_with(data, model, config, |_| {})
}

/// [`train`] with a callback invoked after every iteration.
pub fn train_with(
    data: &WindowedDataset,
    model: &mut Model,
    config: &TrainConfig,
    mut on_iter: impl FnMut(&TrainRecord),
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientSamples("training dataset is empty".into()));
    }
    model.check_dataset(data)?;
    let mut log = TrainLog::new(config.loss_weights);
    let mut adam = Adam::new(&model.params, config);
    let mut sampler = rng::stream(config.seed, 0);
    let start = Instant::now();
    let mut rows = vec![0usize; config.batch_size];
    for iter in 0..config.iterations {
        for r in rows.iter_mut() {
            *r = sampler.random_range(0..data.len());
        }
        let terms = batch_gradients(model, data, &rows, &config.loss_weights)?;
        adam.step(&mut model.params);
        let record = TrainRecord {
            iter,
            terms,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
            param_norm: model.params.value_norm(),
        };
        on_iter(&record);
        log.records.push(record);
    }
    model.meta.insert("train.iterations".into(), config.iterations.to_string());
    model.meta.insert("train.seed".into(), config.seed.to_string());
    model.meta.insert("train.batch_size".into(), config.batch_size.to_string());
    model.meta.insert("train.learning_rate".into(), config.learning_rate.to_string());
    let w = config.loss_weights;
    model.meta.insert("train.lambdas".into(), format!("{},{},{}", w.lambda1, w.lambda2, w.lambda3));
    Ok(log)
}
