use rand::Rng;

use crate::diffcore::{concat, DiffError, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{Init, LayerNorm, Linear};

/// Sinusoidal encoding: channel `2i` is `sin(p / 10000^{2i/D})`, channel `2i+1` the cosine.
pub fn positional_encoding(seq_len: usize, model_dim: usize) -> Tensor {
    let mut data = vec![0.0; seq_len * model_dim];
    for p in 0..seq_len {
        for c in 0..model_dim {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / model_dim as f64);
            data[p * model_dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![seq_len, model_dim], data).expect("positive extents")
}

/// Scaled dot-product attention over `heads` slices of the channel axis, before
/// the output projection. `q: [B, Tq, D]`, `k, v: [B, Tk, D]`.
pub fn scaled_dot_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    causal: bool,
) -> std::result::Result<Var<'t>, DiffError> {
    let (qs, ks) = (q.shape(), k.shape());
    let (tq, tk, dim) = (qs[1], ks[1], qs[2]);
    let dh = dim / heads;
    let mask: Vec<bool> = (0..tq * tk).map(|i| !causal || i % tk <= i / tk).collect();
    let scale = 1.0 / (dh as f64).sqrt();
    let outs = (0..heads)
        .map(|h| {
            let qh = q.narrow(2, h * dh, dh)?;
            let kh = k.narrow(2, h * dh, dh)?;
            let vh = v.narrow(2, h * dh, dh)?;
            let w = qh.bmm(kh, true)?.scale(scale).softmax_masked(&mask, &[tq, tk])?;
            w.bmm(vh, false)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if heads == 1 {
        Ok(outs[0])
    } else {
        concat(&outs, 2)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl MultiHeadAttention {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let lin = |params: &mut ParamSet, tag: &str, rng: &mut _| {
            Linear::new(params, &format!("{name}.{tag}"), dim, dim, true, Init::FanIn, rng)
        };
        MultiHeadAttention {
            heads,
            q: lin(params, "q", rng),
            k: lin(params, "k", rng),
            v: lin(params, "v", rng),
            out: lin(params, "o", rng),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamSet,
        query: Var<'t>,
        memory: Var<'t>,
        causal: bool,
    ) -> std::result::Result<Var<'t>, DiffError> {
        let q = self.q.forward(tape, params, query)?;
        let k = self.k.forward(tape, params, memory)?;
        let v = self.v.forward(tape, params, memory)?;
        let att = scaled_dot_attention(q, k, v, self.heads, causal)?;
        self.out.forward(tape, params, att)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(params: &mut ParamSet, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(params, &format!("{name}.up"), dim, 2 * dim, true, Init::FanIn, rng),
            down: Linear::new(params, &format!("{name}.down"), 2 * dim, dim, true, Init::FanIn, rng),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, params: &ParamSet, x: Var<'t>) -> std::result::Result<Var<'t>, DiffError> {
        let h = self.up.forward(tape, params, x)?.silu();
        self.down.forward(tape, params, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// Encoder–decoder transformer summarising a window into one vector.
///
/// The decoder reads a learned start token followed by the encoder outputs
/// shifted by one position; its last token is projected to the embedding.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    dim: usize,
    input: Linear,
    encoder: Vec<EncoderLayer>,
    start: ParamId,
    dec_input: Linear,
    decoder: Vec<DecoderLayer>,
    output: Linear,
}

impl TransformerEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        input_dim: usize,
        dim: usize,
        heads: usize,
        n_encoder: usize,
        n_decoder: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let encoder = (0..n_encoder)
            .map(|l| {
                let name = format!("encoder.tf.enc{l}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads, rng),
                    norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
                    ff: FeedForward::new(params, &format!("{name}.ff"), dim, rng),
                    norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
                }
            })
            .collect();
        let decoder = (0..n_decoder)
            .map(|l| {
                let name = format!("encoder.tf.dec{l}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(params, &format!("{name}.self"), dim, heads, rng),
                    norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
                    cross_attn: MultiHeadAttention::new(params, &format!("{name}.cross"), dim, heads, rng),
                    norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
                    ff: FeedForward::new(params, &format!("{name}.ff"), dim, rng),
                    norm3: LayerNorm::new(params, &format!("{name}.norm3"), dim),
                }
            })
            .collect();
        let start = params.add(
            "encoder.tf.start",
            crate::nn::init_tensor(vec![1, dim], dim, Init::FanIn, rng),
        );
        TransformerEncoder {
            dim,
            input: Linear::new(params, "encoder.tf.input", input_dim, dim, true, Init::FanIn, rng),
            encoder,
            start,
            dec_input: Linear::new(params, "encoder.tf.dec_input", dim, dim, true, Init::FanIn, rng),
            decoder,
            output: Linear::new(params, "encoder.tf.output", dim, embed_dim, true, Init::FanIn, rng),
        }
    }

    /// Encoder stack output `[B, R, D]`.
    pub fn encode<'t>(&self, tape: &'t Tape, params: &ParamSet, obs: Var<'t>) -> Result<Var<'t>> {
        let r = obs.shape()[1];
        let mut x = self
            .input
            .forward(tape, params, obs)?
            .add(tape.constant(positional_encoding(r, self.dim)))?;
        for layer in &self.encoder {
            let a = layer.attn.forward(tape, params, x, x, true)?;
            x = layer.norm1.forward(tape, params, x.add(a)?)?;
            let f = layer.ff.forward(tape, params, x)?;
            x = layer.norm2.forward(tape, params, x.add(f)?)?;
        }
        Ok(x)
    }

    pub fn embed<'t>(&self, tape: &'t Tape, params: &ParamSet, obs: Var<'t>) -> Result<Var<'t>> {
        let shape = obs.shape();
        let (b, r) = (shape[0], shape[1]);
        let memory = self.encode(tape, params, obs)?;
        let start = tape
            .constant(Tensor::zeros(vec![b, 1, self.dim]))
            .add(tape.param(params, self.start))?;
        let dec_in = if r > 1 {
            concat(&[start, memory.narrow(1, 0, r - 1)?], 1)?
        } else {
            start
        };
        let mut y = self
            .dec_input
            .forward(tape, params, dec_in)?
            .add(tape.constant(positional_encoding(r, self.dim)))?;
        for layer in &self.decoder {
            let a = layer.self_attn.forward(tape, params, y, y, true)?;
            y = layer.norm1.forward(tape, params, y.add(a)?)?;
            let c = layer.cross_attn.forward(tape, params, y, memory, false)?;
            y = layer.norm2.forward(tape, params, y.add(c)?)?;
            let f = layer.ff.forward(tape, params, y)?;
            y = layer.norm3.forward(tape, params, y.add(f)?)?;
        }
        let last = y.narrow(1, r - 1, 1)?.reshape(vec![b, self.dim])?;
        Ok(self.output.forward(tape, params, last)?)
    }
}
