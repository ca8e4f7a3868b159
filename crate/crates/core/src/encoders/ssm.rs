use rand::Rng;

use crate::diffcore::{selective_scan, zoh_phi, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{Init, Linear, RmsNorm};

/// Zero-order-hold discretisation of one diagonal entry:
/// `Ā = exp(Δ·a)`, `B̄ = (Δ·a)⁻¹(exp(Δ·a) − 1)·Δ·b`, with the `Δ·b` limit as `Δ·a → 0`.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let u = delta * a;
    (u.exp(), delta * zoh_phi(u) * b)
}

/// Selective state-space block: projection, causal convolution, SiLU, scan,
/// SiLU gate, output projection, residual and RMS normalisation.
#[derive(Clone, Debug)]
pub struct SsmEncoder {
    expanded: usize,
    input: Linear,
    in_proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    dt_proj: Linear,
    b_proj: Linear,
    c_proj: Linear,
    a_log: ParamId,
    skip: ParamId,
    out_proj: Linear,
    norm: RmsNorm,
    output: Linear,
}

impl SsmEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        input_dim: usize,
        dim: usize,
        expansion: usize,
        state_dim: usize,
        kernel: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let e = dim * expansion;
        let mut dt_proj = Linear::new(params, "encoder.ssm.dt", e, e, true, Init::FanIn, rng);
        // softplus(bias) ≈ 0.1 at initialisation
        let dt_bias = dt_proj.b.take().expect("bias");
        *params.value_mut(dt_bias) = Tensor::full(vec![e], (0.1f64.exp() - 1.0).ln());
        dt_proj.b = Some(dt_bias);
        let a_log = (0..e * state_dim).map(|k| ((k % state_dim) as f64 + 1.0).ln()).collect();
        SsmEncoder {
            expanded: e,
            input: Linear::new(params, "encoder.ssm.input", input_dim, dim, true, Init::FanIn, rng),
            in_proj: Linear::new(params, "encoder.ssm.in_proj", dim, 2 * e, true, Init::FanIn, rng),
            conv_w: params.add(
                "encoder.ssm.conv.w",
                crate::nn::init_tensor(vec![e, kernel], kernel, Init::FanIn, rng),
            ),
            conv_b: params.add("encoder.ssm.conv.b", Tensor::zeros(vec![e])),
            dt_proj,
            b_proj: Linear::new(params, "encoder.ssm.b", e, state_dim, false, Init::FanIn, rng),
            c_proj: Linear::new(params, "encoder.ssm.c", e, state_dim, false, Init::FanIn, rng),
            a_log: params.add("encoder.ssm.a_log", Tensor::new(vec![e, state_dim], a_log).expect("shape")),
            skip: params.add("encoder.ssm.skip", Tensor::full(vec![e], 1.0)),
            out_proj: Linear::new(params, "encoder.ssm.out_proj", e, dim, true, Init::FanIn, rng),
            norm: RmsNorm::new(params, "encoder.ssm.norm", dim),
            output: Linear::new(params, "encoder.ssm.output", dim, embed_dim, true, Init::FanIn, rng),
        }
    }

    /// Normalised per-token representation `[B, R, D]` before pooling.
    pub fn tokens<'t>(&self, tape: &'t Tape, params: &ParamSet, obs: Var<'t>) -> Result<Var<'t>> {
        let e = self.expanded;
        let x = self.input.forward(tape, params, obs)?;
        let both = self.in_proj.forward(tape, params, x)?;
        let main = both.narrow(2, 0, e)?;
        let gate = both.narrow(2, e, e)?.silu();
        let u = main
            .causal_conv(tape.param(params, self.conv_w), tape.param(params, self.conv_b))?
            .silu();
        let delta = self.dt_proj.forward(tape, params, u)?.softplus();
        let b = self.b_proj.forward(tape, params, u)?;
        let c = self.c_proj.forward(tape, params, u)?;
        let a = tape.param(params, self.a_log).exp().neg();
        let y = selective_scan(u, delta, a, b, c)?.add(u.mul(tape.param(params, self.skip))?)?;
        let out = self.out_proj.forward(tape, params, y.mul(gate)?)?;
        Ok(self.norm.forward(tape, params, out.add(x)?)?)
    }

    pub fn embed<'t>(&self, tape: &'t Tape, params: &ParamSet, obs: Var<'t>) -> Result<Var<'t>> {
        let tokens = self.tokens(tape, params, obs)?;
        let s = tokens.shape();
        let last = tokens.narrow(1, s[1] - 1, 1)?.reshape(vec![s[0], s[2]])?;
        Ok(self.output.forward(tape, params, last)?)
    }
}
