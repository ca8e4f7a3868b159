use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Standardizer, Trajectory};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::Config(format!("direction must be forward|backward, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub r: usize,
    pub direction: Direction,
    pub horizon: usize,
    pub include_params: bool,
    /// Standard deviation of extra context noise, in standardized units.
    pub context_noise_sigma: f64,
    pub seed: u64,
    /// Known ranges `[lo, hi]` of β and γ. When set (with `include_params`) those
    /// entries are modelled as `logit((v - lo) / (hi - lo))`, so sampled
    /// parameters never leave their range.
    pub param_bounds: Option<[[f64; 2]; 2]>,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            r: 5,
            direction: Direction::Forward,
            horizon: 1,
            include_params: false,
            context_noise_sigma: 1.0,
            seed: 0,
            param_bounds: None,
        }
    }
}

impl WindowSpec {
    fn bounds(&self) -> Option<&[[f64; 2]; 2]> {
        self.param_bounds.as_ref().filter(|_| self.include_params)
    }

    /// Raw target row to the coordinates the flow models.
    pub fn encode_target(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut out = row.to_vec();
        if let Some(b) = self.bounds() {
            let off = row.len() - 2;
            for (j, [lo, hi]) in b.iter().enumerate() {
                let v = row[off + j];
                if !(v > *lo && v < *hi) {
                    return Err(Error::Schema(format!("parameter {v} outside its range ({lo}, {hi})")));
                }
                let u = (v - lo) / (hi - lo);
                out[off + j] = (u / (1.0 - u)).ln();
            }
        }
        Ok(out)
    }

    /// Inverse of [`WindowSpec::encode_target`].
    pub fn decode_target(&self, row: &[f64]) -> Vec<f64> {
        let mut out = row.to_vec();
        if let Some(b) = self.bounds() {
            let off = row.len() - 2;
            for (j, [lo, hi]) in b.iter().enumerate() {
                out[off + j] = lo + (hi - lo) / (1.0 + (-row[off + j]).exp());
            }
        }
        out
    }

    /// `ln |d encode / d raw|` at a raw row.
    pub fn target_log_jacobian(&self, row: &[f64]) -> f64 {
        self.bounds().map_or(0.0, |b| {
            let off = row.len() - 2;
            b.iter()
                .enumerate()
                .map(|(j, [lo, hi])| (hi - lo).ln() - (row[off + j] - lo).ln() - (hi - row[off + j]).ln())
                .sum()
        })
    }
}

/// Where a window came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowIndex {
    pub traj: usize,
    /// Step of the first context row (`o_n`).
    pub anchor: usize,
    pub target: usize,
}

/// (context, target) pairs in standardized units.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub spec: WindowSpec,
    /// Observation dimension per context row.
    pub m: usize,
    /// Target dimension.
    pub d: usize,
    /// `[n, r, m]` row-major.
    pub contexts: Vec<f64>,
    /// `[n, d]` row-major.
    pub targets: Vec<f64>,
    pub index: Vec<WindowIndex>,
    pub obs_norm: Standardizer,
    pub target_norm: Standardizer,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn context(&self, i: usize) -> &[f64] {
        let w = self.spec.r * self.m;
        &self.contexts[i * w..(i + 1) * w]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.d..(i + 1) * self.d]
    }

    pub fn is_conditional(&self) -> bool {
        self.spec.r > 0
    }

    /// Context-free dataset of target points, e.g. for density-estimation studies.
    pub fn unconditional(points: &[Vec<f64>], standardize: bool) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::InsufficientSamples("no points".into()));
        }
        let norm = if standardize {
            Standardizer::fit(points.iter().map(Vec::as_slice), d)
        } else {
            Standardizer::identity(d)
        };
        let targets = points.iter().flat_map(|p| norm.normalize(p)).collect();
        Ok(WindowedDataset {
            spec: WindowSpec {
                r: 0,
                context_noise_sigma: 0.0,
                ..Default::default()
            },
            m: 0,
            d,
            contexts: Vec::new(),
            targets,
            index: (0..points.len())
                .map(|i| WindowIndex {
                    traj: 0,
                    anchor: i,
                    target: i,
                })
                .collect(),
            obs_norm: Standardizer::identity(0),
            target_norm: norm,
        })
    }
}

/// Target vector of step `k` (state, optionally followed by β, γ).
pub fn target_row(traj: &Trajectory, k: usize, include_params: bool) -> Result<Vec<f64>> {
    let mut row = traj.states[k].clone();
    if include_params {
        let p = traj
            .params
            .ok_or_else(|| Error::Schema("include_params requires (beta, gamma)-tagged trajectories".into()))?;
        row.extend(p);
    }
    Ok(row)
}

/// Context row steps for a window anchored at `anchor`, in context order.
pub fn context_steps(anchor: usize, r: usize, direction: Direction) -> Vec<usize> {
    match direction {
        Direction::Forward => (anchor..anchor + r).collect(),
        Direction::Backward => (0..r).map(|j| anchor - j).collect(),
    }
}

/// Every valid (anchor, target) pair for a trajectory of `len` records.
pub fn window_positions(len: usize, r: usize, horizon: usize, direction: Direction) -> Vec<(usize, usize)> {
    if len + 1 < r + horizon + 1 || r == 0 {
        return Vec::new();
    }
    let count = len - r - horizon + 1;
    (0..count)
        .map(|k| match direction {
            Direction::Forward => (k, k + r - 1 + horizon),
            Direction::Backward => {
                let anchor = k + r - 1 + horizon;
                (anchor, anchor + 1 - r - horizon)
            }
        })
        .collect()
}

/// Build standardized windows. Normalizers are fitted on all records unless supplied.
pub fn make_windows(
    trajs: &[Trajectory],
    spec: &WindowSpec,
    norms: Option<(&Standardizer, &Standardizer)>,
) -> Result<WindowedDataset> {
    if spec.r == 0 || spec.horizon == 0 {
        return Err(Error::Config("window length and horizon must be >= 1".into()));
    }
    let first = trajs
        .first()
        .ok_or_else(|| Error::InsufficientSamples("no trajectories".into()))?;
    let m = first.observations[0].len();
    let d = target_row(first, 0, spec.include_params)?.len();
    if let Some(b) = spec.param_bounds.filter(|_| spec.include_params) {
        if b.iter().any(|[lo, hi]| !(lo < hi && lo.is_finite() && hi.is_finite())) {
            return Err(Error::Config(format!("parameter bounds must satisfy lo < hi, got {b:?}")));
        }
    }
    for t in trajs {
        if t.len() < spec.r + spec.horizon {
            return Err(Error::TrajectoryTooShort {
                length: t.len(),
                required: spec.r + spec.horizon,
            });
        }
    }
    let (obs_norm, target_norm) = match norms {
        Some((o, t)) => {
            if o.dim() != m || t.dim() != d {
                return Err(Error::Incompatible(format!(
                    "normalizer dims ({}, {}) vs data dims ({m}, {d})",
                    o.dim(),
                    t.dim()
                )));
            }
            (o.clone(), t.clone())
        }
        None => {
            let obs = Standardizer::fit(trajs.iter().flat_map(|t| t.observations.iter().map(Vec::as_slice)), m);
            let rows: Vec<Vec<f64>> = trajs
                .iter()
                .flat_map(|t| (0..t.len()).map(move |k| spec.encode_target(&target_row(t, k, spec.include_params)?)))
                .collect::<Result<_>>()?;
            let tgt = Standardizer::fit(rows.iter().map(Vec::as_slice), d);
            (obs, tgt)
        }
    };
    let mut noise = rng::stream(spec.seed, 1);
    let mut contexts = Vec::new();
    let mut targets = Vec::new();
    let mut index = Vec::new();
    for (ti, t) in trajs.iter().enumerate() {
        for (anchor, target) in window_positions(t.len(), spec.r, spec.horizon, spec.direction) {
            for k in context_steps(anchor, spec.r, spec.direction) {
                for z in obs_norm.normalize(&t.observations[k]) {
                    let eps: f64 = StandardNormal.sample(&mut noise);
                    contexts.push(z + spec.context_noise_sigma * eps);
                }
            }
            targets.extend(target_norm.normalize(&spec.encode_target(&target_row(t, target, spec.include_params)?)?));
            index.push(WindowIndex {
                traj: ti,
                anchor,
                target,
            });
        }
    }
    Ok(WindowedDataset {
        spec: spec.clone(),
        m,
        d,
        contexts,
        targets,
        index,
        obs_norm,
        target_norm,
    })
}
