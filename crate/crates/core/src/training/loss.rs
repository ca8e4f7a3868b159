use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::flow::{gaussian_log_prob, Flow};
use crate::model::Model;

/// Weights of the likelihood, kinetic-energy and intermediate-prior terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.01,
        }
    }
}

impl LossWeights {
    pub fn nll_only() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 > 0.0
            && self.lambda2 >= 0.0
            && self.lambda3 >= 0.0
            && [self.lambda1, self.lambda2, self.lambda3].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights need lambda1 > 0 and lambda2, lambda3 >= 0, got {self:?}"
            )))
        }
    }
}

/// Scalar loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub nll: f64,
    pub kinetic: f64,
    pub prior: f64,
}

impl LossTerms {
    /// `λ₁·nll + λ₂·kinetic + λ₃·prior`.
    pub fn combine(nll: f64, kinetic: f64, prior: f64, w: &LossWeights) -> Self {
        LossTerms {
            total: w.lambda1 * nll + w.lambda2 * kinetic + w.lambda3 * prior,
            nll,
            kinetic,
            prior,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.nll.is_finite() && self.kinetic.is_finite() && self.prior.is_finite()
    }
}

/// Loss terms recorded on a tape.
pub struct LossVars<'t> {
    pub total: Var<'t>,
    pub nll: Var<'t>,
    pub kinetic: Var<'t>,
    pub prior: Var<'t>,
    /// Per-row `log p(target | context)`, `[B, 1]`.
    pub log_prob: Var<'t>,
}

impl LossVars<'_> {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            total: self.total.item(),
            nll: self.nll.item(),
            kinetic: self.kinetic.item(),
            prior: self.prior.item(),
        }
    }
}

/// Batch mean of `−log p`.
pub fn nll_term<'t>(log_prob: Var<'t>) -> Var<'t> {
    log_prob.mean().neg()
}

/// Batch mean of `(1/(L−1)) Σ_ℓ ‖f_{ℓ+1}(x) − f_ℓ(x)‖₂`; zero when there is a single layer.
pub fn kinetic_term<'t>(tape: &'t Tape, per_layer: &[Var<'t>]) -> Result<Var<'t>> {
    let l = per_layer.len();
    if l < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var<'t>> = None;
    for w in per_layer.windows(2) {
        // the clamp keeps the gradient finite where consecutive outputs coincide
        let step = w[1].sub(w[0])?.square().sum_last().clamp(1e-30, f64::INFINITY).sqrt();
        acc = Some(match acc {
            Some(a) => a.add(step)?,
            None => step,
        });
    }
    Ok(acc.expect("two or more layers").mean().scale(1.0 / (l - 1) as f64))
}

/// Batch mean of `(1/(L−1)) Σ_{ℓ<L} −log p_Z(f_ℓ(x))` under the (context-conditioned) base.
pub fn prior_term<'t>(tape: &'t Tape, per_layer: &[Var<'t>], mu: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>> {
    let l = per_layer.len();
    if l < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var<'t>> = None;
    for f in &per_layer[..l - 1] {
        let lp = gaussian_log_prob(*f, mu, log_sigma)?;
        acc = Some(match acc {
            Some(a) => a.add(lp)?,
            None => lp,
        });
    }
    Ok(acc.expect("one or more layers").mean().scale(-1.0 / (l - 1) as f64))
}

/// Full objective for normalized `targets` `[B, d]` and optional windows `[B, R, m]`.
pub fn total_loss<'t>(
    flow: &Flow,
    encoder: Option<&Encoder>,
    tape: &'t Tape,
    params: &ParamSet,
    contexts: Option<&Tensor>,
    targets: &Tensor,
    weights: &LossWeights,
) -> Result<LossVars<'t>> {
    let ctx = Model::embed_on(encoder, tape, params, contexts)?;
    let pass = flow.log_prob(tape, params, tape.constant(targets.clone()), ctx)?;
    let nll = nll_term(pass.log_prob);
    let kinetic = kinetic_term(tape, &pass.per_layer)?;
    let prior = prior_term(tape, &pass.per_layer, pass.mu, pass.log_sigma)?;
    let mut total = nll.scale(weights.lambda1);
    if weights.lambda2 != 0.0 {
        total = total.add(kinetic.scale(weights.lambda2))?;
    }
    if weights.lambda3 != 0.0 {
        total = total.add(prior.scale(weights.lambda3))?;
    }
    Ok(LossVars {
        total,
        nll,
        kinetic,
        prior,
        log_prob: pass.log_prob,
    })
}
