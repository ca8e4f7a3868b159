//! Synthetic systems and windowed training data.

mod moons;
mod sir;
mod vehicle;
mod windows;

use serde::{Deserialize, Serialize};

pub use moons::{nearest_arc, two_moons};
pub use sir::{rk4_step, sir_ensemble, sir_nominal, sir_rhs, sir_simulate, SirParams, SirState};
pub use vehicle::{
    vehicle_continue, vehicle_ensemble, vehicle_simulate, vehicle_step, VehicleParams, VehicleRun, VehicleState,
};
pub use windows::{
    context_steps, make_windows, target_row, window_positions, Direction, WindowIndex, WindowSpec,
    WindowedDataset,
};

/// Time-indexed observations and true states of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    /// `(β, γ)` for SIR runs.
    pub params: Option<[f64; 2]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Per-dimension z-score transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit mean and population standard deviation; constant dimensions get std 1.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let rows: Vec<&[f64]> = rows.collect();
        for r in &rows {
            n += 1;
            for j in 0..dim {
                sum[j] += r[j];
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        for r in &rows {
            for j in 0..dim {
                sq[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let v = (s / nf).sqrt();
                if v > 1e-12 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// `Σ log std`: subtract from a standardized log-density to get raw units.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}
