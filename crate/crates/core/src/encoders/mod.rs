//! Sequence-to-vector context encoders.

mod mlp;
mod ssm;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub use mlp::MlpEncoder;
pub use ssm::{zoh_discretize, SsmEncoder};
pub use transformer::{positional_encoding, scaled_dot_attention, MultiHeadAttention, TransformerEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp,
    Transformer,
    Ssm,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EncoderKind::Mlp),
            "transformer" => Ok(EncoderKind::Transformer),
            "ssm" | "mamba" => Ok(EncoderKind::Ssm),
            other => Err(Error::Config(format!("encoder must be mlp|transformer|ssm, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub model_dim: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub ssm_state_dim: usize,
    pub conv_kernel_width: usize,
    pub expansion: usize,
    /// Window length R; fixed for the MLP, informational for the others.
    pub window: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Transformer,
            input_dim: 2,
            embed_dim: 4,
            model_dim: 32,
            n_encoder_layers: 4,
            n_decoder_layers: 4,
            n_heads: 2,
            ssm_state_dim: 8,
            conv_kernel_width: 4,
            expansion: 2,
            window: 5,
            mlp_hidden: 64,
            seed: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("ssm_state_dim", self.ssm_state_dim),
            ("conv_kernel_width", self.conv_kernel_width),
            ("expansion", self.expansion),
            ("window", self.window),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be >= 1")));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder.model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Mlp(MlpEncoder),
    Transformer(TransformerEncoder),
    Ssm(SsmEncoder),
}

const CHUNK: usize = 256;

impl Encoder {
    pub fn new(config: &EncoderConfig, params: &mut ParamSet) -> Result<Self> {
        config.validate()?;
        let mut init = rng::stream(config.seed, 1);
        let c = config;
        Ok(match c.kind {
            EncoderKind::Mlp => Encoder::Mlp(MlpEncoder::new(
                params,
                c.window,
                c.input_dim,
                c.mlp_hidden,
                c.embed_dim,
                &mut init,
            )),
            EncoderKind::Transformer => Encoder::Transformer(TransformerEncoder::new(
                params,
                c.input_dim,
                c.model_dim,
                c.n_heads,
                c.n_encoder_layers,
                c.n_decoder_layers,
                c.embed_dim,
                &mut init,
            )),
            EncoderKind::Ssm => Encoder::Ssm(SsmEncoder::new(
                params,
                c.input_dim,
                c.model_dim,
                c.expansion,
                c.ssm_state_dim,
                c.conv_kernel_width,
                c.embed_dim,
                &mut init,
            )),
        })
    }

    /// Embed observation windows `[B, R, m]` into `[B, embed_dim]`.
    pub fn embed<'t>(&self, tape: &'t Tape, params: &ParamSet, obs: Var<'t>) -> Result<Var<'t>> {
        if obs.shape().len() != 3 {
            return Err(Error::Dimension {
                context: "encoder input rank",
                expected: 3,
                actual: obs.shape().len(),
            });
        }
        match self {
            Encoder::Mlp(e) => e.embed(tape, params, obs),
            Encoder::Transformer(e) => e.embed(tape, params, obs),
            Encoder::Ssm(e) => e.embed(tape, params, obs),
        }
    }

    /// Embeddings without gradients, computed in parallel chunks.
    pub fn embed_values(&self, params: &ParamSet, obs: &Tensor) -> Result<Tensor> {
        let s = obs.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension {
                context: "encoder input rank",
                expected: 3,
                actual: s.len(),
            });
        }
        let (n, per) = (s[0], s[1] * s[2]);
        let parts = crate::par::try_map_indexed(n.div_ceil(CHUNK), |c| {
            let (a, b) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![b - a, s[1], s[2]], obs.data()[a * per..b * per].to_vec())?);
            Ok::<_, Error>(self.embed(&tape, params, x)?.value())
        })?;
        let width = parts[0].last_dim();
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Tensor::new(vec![n, width], data)?)
    }
}
