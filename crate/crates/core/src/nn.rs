//! Parameterised building blocks shared by the flow and the encoders.

use rand::Rng;

use crate::diffcore::{DiffError, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn,
    Zeros,
}

pub(crate) fn init_tensor(shape: Vec<usize>, fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::FanIn => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
        }
    }
}

/// Affine map over the last axis: `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.add(format!("{name}.w"), init_tensor(vec![inputs, outputs], inputs, init, rng));
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(vec![outputs])));
        Linear { w, b, inputs, outputs }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.apply(tape, params, x, tape.param(params, self.w))
    }

    /// Forward pass with the weight multiplied elementwise by a constant mask.
    pub fn forward_masked<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        x: Var<'t>,
        mask: Var<'t>,
    ) -> Result<Var<'t>, DiffError> {
        let w = tape.param(params, self.w).mul(mask)?;
        self.apply(tape, params, x, w)
    }

    fn apply<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>, w: Var<'t>) -> Result<Var<'t>, DiffError> {
        let shape = x.shape();
        let y = if shape.len() == 2 {
            x.matmul(w)?
        } else {
            let rows = shape.iter().product::<usize>() / shape[shape.len() - 1];
            let mut out_shape = shape.clone();
            *out_shape.last_mut().unwrap() = self.outputs;
            x.reshape(vec![rows, self.inputs])?.matmul(w)?.reshape(out_shape)?
        };
        match self.b {
            Some(b) => y.add(tape.param(params, b)),
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.gain"), Tensor::full(vec![dim], 1.0)),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        let centred = x.sub(x.mean_last())?;
        let std = centred.square().mean_last().add_scalar(1e-5).sqrt();
        centred
            .div(std)?
            .mul(tape.param(params, self.gain))?
            .add(tape.param(params, self.bias))
    }
}

/// Root-mean-square normalisation over the last axis with a learned gain.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    gain: ParamId,
}

impl RmsNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        RmsNorm {
            gain: params.add(format!("{name}.gain"), Tensor::full(vec![dim], 1.0)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        let rms = x.square().mean_last().add_scalar(1e-6).sqrt();
        x.div(rms)?.mul(tape.param(params, self.gain))
    }
}
