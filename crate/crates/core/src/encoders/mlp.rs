use rand::Rng;

use crate::diffcore::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};

/// Flatten the window and apply two SiLU hidden layers.
#[derive(Clone, Debug)]
pub struct MlpEncoder {
    window: usize,
    input_dim: usize,
    layers: [Linear; 3],
}

impl MlpEncoder {
    pub fn new(
        params: &mut ParamSet,
        window: usize,
        input_dim: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let flat = window * input_dim;
        MlpEncoder {
            window,
            input_dim,
            layers: [
                Linear::new(params, "encoder.mlp.l0", flat, hidden, true, Init::FanIn, rng),
                Linear::new(params, "encoder.mlp.l1", hidden, hidden, true, Init::FanIn, rng),
                Linear::new(params, "encoder.mlp.l2", hidden, embed_dim, true, Init::FanIn, rng),
            ],
        }
    }

    pub fn embed<'t>(&self, tape: &'t Tape, params: &ParamSet, obs: Var<'t>) -> Result<Var<'t>> {
        let shape = obs.shape();
        if shape[1] != self.window {
            return Err(Error::Dimension {
                context: "mlp encoder window length",
                expected: self.window,
                actual: shape[1],
            });
        }
        let flat = obs.reshape(vec![shape[0], self.window * self.input_dim])?;
        let h = self.layers[0].forward(tape, params, flat)?.silu();
        let h = self.layers[1].forward(tape, params, h)?.silu();
        Ok(self.layers[2].forward(tape, params, h)?)
    }
}
