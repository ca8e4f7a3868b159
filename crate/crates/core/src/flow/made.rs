use rand::Rng;

use crate::diffcore::{DiffError, ParamSet, Tape, Tensor, Var};
use crate::nn::{Init, Linear};

/// Masked autoencoder conditioner: output `i` (shift and log-scale) depends
/// only on inputs `< i` and on the context.
#[derive(Clone, Debug)]
pub(crate) struct Made {
    d: usize,
    input: Linear,
    context: Option<Linear>,
    hidden: Linear,
    output: Linear,
    mask_in: Tensor,
    mask_hidden: Tensor,
    mask_out: Tensor,
    bound: f64,
}

/// Degrees of the hidden units: inputs carry degrees `1..=d`, context degree 0.
pub fn hidden_degrees(d: usize, hidden: usize, has_context: bool) -> Vec<usize> {
    let min_deg = if has_context || d == 1 { 0 } else { 1 };
    let span = d - min_deg;
    (0..hidden).map(|k| min_deg + k % span).collect()
}

fn mask(rows: usize, cols: usize, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| if keep(i / cols, i % cols) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("mask shape")
}

impl Made {
    pub(crate) fn new(
        params: &mut ParamSet,
        name: &str,
        d: usize,
        hidden: usize,
        context: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let deg = hidden_degrees(d, hidden, context > 0);
        let input = Linear::new(params, &format!("{name}.in"), d, hidden, true, Init::FanIn, rng);
        let context = (context > 0)
            .then(|| Linear::new(params, &format!("{name}.ctx"), context, hidden, false, Init::FanIn, rng));
        Made {
            d,
            input,
            context,
            hidden: Linear::new(params, &format!("{name}.hidden"), hidden, hidden, true, Init::FanIn, rng),
            output: Linear::new(params, &format!("{name}.out"), hidden, 2 * d, true, Init::Zeros, rng),
            mask_in: mask(d, hidden, |i, k| i < deg[k]),
            mask_hidden: mask(hidden, hidden, |a, b| deg[a] <= deg[b]),
            mask_out: mask(hidden, 2 * d, |k, j| deg[k] < j % d + 1),
            bound,
        }
    }

    /// `(shift, log_scale)`, each `[B, d]`; the log-scale is soft-bounded by `bound·tanh(raw/bound)`.
    pub(crate) fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        y: Var<'t>,
        ctx: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>), DiffError> {
        let mut h = self
            .input
            .forward_masked(tape, params, y, tape.constant(self.mask_in.clone()))?;
        if let (Some(layer), Some(c)) = (&self.context, ctx) {
            h = h.add(layer.forward(tape, params, c)?)?;
        }
        let h = h.tanh();
        let h = self
            .hidden
            .forward_masked(tape, params, h, tape.constant(self.mask_hidden.clone()))?
            .tanh();
        let out = self
            .output
            .forward_masked(tape, params, h, tape.constant(self.mask_out.clone()))?;
        let shift = out.narrow(1, 0, self.d)?;
        let raw = out.narrow(1, self.d, self.d)?;
        let log_scale = raw.scale(1.0 / self.bound).tanh().scale(self.bound);
        Ok((shift, log_scale))
    }
}
