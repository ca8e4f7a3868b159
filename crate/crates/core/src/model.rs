//! A trained (or trainable) estimator: flow, optional encoder, normalizers and parameters,
//! plus the binary checkpoint format.
//!
//! Checkpoint layout: `b"FFCK"`, `u32` version, `u64` header length, a JSON header
//! (model spec, parameter names and shapes, free-form metadata), then every
//! parameter's values as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::dynamics::{Standardizer, WindowSpec, WindowedDataset};
use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowConfig};

const MAGIC: &[u8; 4] = b"FFCK";
const VERSION: u32 = 1;

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub flow: FlowConfig,
    pub encoder: Option<EncoderConfig>,
    pub window: WindowSpec,
    pub obs_norm: Standardizer,
    pub target_norm: Standardizer,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    params: Vec<(String, Vec<usize>)>,
    meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub flow: Flow,
    pub encoder: Option<Encoder>,
    pub params: ParamSet,
    /// Provenance strings stored with the checkpoint (seeds, loss weights, ...).
    pub meta: BTreeMap<String, String>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let conditional = spec.window.r > 0;
        match (&spec.encoder, conditional) {
            (Some(e), true) => {
                if e.embed_dim != spec.flow.context_features {
                    return Err(Error::Config(format!(
                        "encoder embed_dim {} differs from flow context_features {}",
                        e.embed_dim, spec.flow.context_features
                    )));
                }
                if e.input_dim != spec.obs_norm.dim() {
                    return Err(Error::Config(format!(
                        "encoder input_dim {} differs from observation width {}",
                        e.input_dim,
                        spec.obs_norm.dim()
                    )));
                }
            }
            (None, false) if spec.flow.context_features == 0 => {}
            _ => {
                return Err(Error::Config(
                    "a conditional model needs an encoder and context features; an unconditional one neither".into(),
                ))
            }
        }
        if spec.flow.data_dim != spec.target_norm.dim() {
            return Err(Error::Config(format!(
                "flow data_dim {} differs from target width {}",
                spec.flow.data_dim,
                spec.target_norm.dim()
            )));
        }
        let mut params = ParamSet::new();
        let flow = Flow::new(&spec.flow, &mut params)?;
        let encoder = spec.encoder.as_ref().map(|c| Encoder::new(c, &mut params)).transpose()?;
        Ok(Model {
            spec,
            flow,
            encoder,
            params,
            meta: BTreeMap::new(),
        })
    }

    /// Fit the configured architectures to a dataset's shapes and normalizers.
    pub fn for_dataset(data: &WindowedDataset, flow: &FlowConfig, encoder: &EncoderConfig) -> Result<Self> {
        let mut flow = flow.clone();
        flow.data_dim = data.d;
        let encoder = if data.is_conditional() {
            flow.context_features = encoder.embed_dim;
            Some(EncoderConfig {
                input_dim: data.m,
                window: data.spec.r,
                ..encoder.clone()
            })
        } else {
            flow.context_features = 0;
            None
        };
        Model::new(ModelSpec {
            flow,
            encoder,
            window: data.spec.clone(),
            obs_norm: data.obs_norm.clone(),
            target_norm: data.target_norm.clone(),
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn data_dim(&self) -> usize {
        self.flow.data_dim()
    }

    /// Reject datasets whose shapes or normalization differ from the model's.
    pub fn check_dataset(&self, data: &WindowedDataset) -> Result<()> {
        let s = &self.spec;
        let same = data.d == s.flow.data_dim
            && data.spec.r == s.window.r
            && (data.spec.r == 0 || data.m == s.obs_norm.dim())
            && data.target_norm == s.target_norm
            && data.spec.param_bounds == s.window.param_bounds
            && (data.spec.r == 0 || data.obs_norm == s.obs_norm);
        if same {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "model expects d={} r={} m={} target_norm={:?} obs_norm={:?}; data has d={} r={} m={} target_norm={:?} obs_norm={:?}",
                s.flow.data_dim,
                s.window.r,
                s.obs_norm.dim(),
                s.target_norm,
                s.obs_norm,
                data.d,
                data.spec.r,
                data.m,
                data.target_norm,
                data.obs_norm
            )))
        }
    }

    /// Context embeddings for normalized windows `[B, R, m]` (no gradients).
    pub fn embed_values(&self, contexts: Option<&Tensor>) -> Result<Option<Tensor>> {
        match (&self.encoder, contexts) {
            (Some(e), Some(c)) => Ok(Some(e.embed_values(&self.params, c)?)),
            (None, None) => Ok(None),
            (Some(_), None) => Err(Error::Config("conditional model needs a context".into())),
            (None, Some(_)) => Err(Error::Config("unconditional model takes no context".into())),
        }
    }

    /// Normalize one raw context window (rows of observations) into `[1, R, m]`.
    pub fn context_tensor(&self, window: &[Vec<f64>]) -> Result<Tensor> {
        let r = self.spec.window.r;
        let m = self.spec.obs_norm.dim();
        if window.len() != r {
            return Err(Error::Dimension {
                context: "context window length",
                expected: r,
                actual: window.len(),
            });
        }
        let mut data = Vec::with_capacity(r * m);
        for row in window {
            if row.len() != m {
                return Err(Error::Dimension {
                    context: "observation width",
                    expected: m,
                    actual: row.len(),
                });
            }
            data.extend(self.spec.obs_norm.normalize(row));
        }
        Ok(Tensor::new(vec![1, r, m], data)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        let mut word = [0u8; 4];
        let mut long = [0u8; 8];
        let bad = |what: &str| Error::Schema(format!("checkpoint: {what}"));
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        r.read_exact(&mut word).map_err(|_| bad("truncated"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        r.read_exact(&mut long).map_err(|_| bad("truncated"))?;
        let len = u64::from_le_bytes(long) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut model = Model::new(header.spec)?;
        model.meta = header.meta;
        if header.params.len() != model.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint stores {} tensors, architecture has {}",
                header.params.len(),
                model.params.len()
            )));
        }
        for (name, shape) in header.params {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Incompatible(format!("unknown parameter {name}")))?;
            let n: usize = shape.iter().product();
            if r.len() < 8 * n {
                return Err(bad("truncated parameter data"));
            }
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[8 * n..];
            model
                .params
                .set(id, Tensor::new(shape, data)?)
                .map_err(|e| Error::Incompatible(format!("{name}: {e}")))?;
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }

    /// Short content hash identifying the checkpoint in reports.
    pub fn id(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a(&self.to_bytes()?)))
    }

    /// Embedding of `contexts` on a tape, or `None` for unconditional models.
    pub fn embed_on<'t>(
        encoder: Option<&Encoder>,
        tape: &'t Tape,
        params: &ParamSet,
        contexts: Option<&Tensor>,
    ) -> Result<Option<Var<'t>>> {
        match (encoder, contexts) {
            (Some(e), Some(c)) => Ok(Some(e.embed(tape, params, tape.constant(c.clone()))?)),
            (None, None) => Ok(None),
            _ => Err(Error::Config("context presence does not match the model".into())),
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}
