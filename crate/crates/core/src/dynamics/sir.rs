use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirState {
    pub s: f64,
    pub i: f64,
    pub r: f64,
    pub t: f64,
}

impl SirState {
    pub fn new(s: f64, i: f64, r: f64) -> Self {
        SirState { s, i, r, t: 0.0 }
    }

    pub fn total(&self) -> f64 {
        self.s + self.i + self.r
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.s, self.i, self.r]
    }
}

impl Default for SirState {
    fn default() -> Self {
        SirState::new(0.99, 0.01, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirParams {
    pub beta: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub dt: f64,
}

impl Default for SirParams {
    fn default() -> Self {
        SirParams {
            beta: 0.03,
            gamma: 0.01,
            noise_sigma: 0.001,
            dt: 1.0,
        }
    }
}

/// `(dS/dt, dI/dt, dR/dt) = (−βIS, βIS − γI, γI)`.
pub fn sir_rhs(s: &SirState, p: &SirParams) -> [f64; 3] {
    let infection = p.beta * s.i * s.s;
    let recovery = p.gamma * s.i;
    [-infection, infection - recovery, recovery]
}

/// Classical fourth-order Runge–Kutta step.
pub fn rk4_step(s: &SirState, p: &SirParams, dt: f64) -> SirState {
    let shift = |k: &[f64; 3], h: f64| SirState {
        s: s.s + h * k[0],
        i: s.i + h * k[1],
        r: s.r + h * k[2],
        t: s.t + h,
    };
    let k1 = sir_rhs(s, p);
    let k2 = sir_rhs(&shift(&k1, dt / 2.0), p);
    let k3 = sir_rhs(&shift(&k2, dt / 2.0), p);
    let k4 = sir_rhs(&shift(&k3, dt), p);
    let inc = |j: usize| dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    SirState {
        s: s.s + inc(0),
        i: s.i + inc(1),
        r: s.r + inc(2),
        t: s.t + dt,
    }
}

/// Noise-free RK4 path of `n_steps` records starting at `initial`.
pub fn sir_nominal(p: &SirParams, initial: SirState, n_steps: usize) -> Vec<SirState> {
    let mut out = Vec::with_capacity(n_steps);
    let mut s = initial;
    for k in 0..n_steps {
        out.push(s);
        if k + 1 < n_steps {
            s = rk4_step(&s, p, p.dt);
        }
    }
    out
}

fn check_initial(initial: &SirState) -> Result<()> {
    if (initial.total() - 1.0).abs() > 1e-9 || !initial.total().is_finite() {
        return Err(Error::InitialCondition { sum: initial.total() });
    }
    Ok(())
}

/// Nominal RK4 trajectory with i.i.d. Gaussian observation noise.
pub fn sir_simulate(p: &SirParams, initial: SirState, n_steps: usize, seed: u64) -> Result<Trajectory> {
    check_initial(&initial)?;
    let nominal = sir_nominal(p, initial, n_steps);
    let mut rng = rng::stream(seed, 0);
    let observations = nominal
        .iter()
        .map(|s| {
            s.as_vec()
                .into_iter()
                .map(|x| x + p.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    Ok(Trajectory {
        times: nominal.iter().map(|s| s.t).collect(),
        observations,
        states: nominal.iter().map(SirState::as_vec).collect(),
        params: Some([p.beta, p.gamma]),
    })
}

/// `n_traj` noisy trajectories with (β, γ) drawn uniformly from the given ranges.
pub fn sir_ensemble(
    base: &SirParams,
    beta_range: (f64, f64),
    gamma_range: (f64, f64),
    n_traj: usize,
    initial: SirState,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    check_initial(&initial)?;
    for (lo, hi) in [beta_range, gamma_range] {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("invalid rate interval [{lo}, {hi}]")));
        }
    }
    crate::par::try_map_indexed(n_traj, |k| {
        let child = rng::child_seed(seed, k as u64);
        let mut draw = rng::stream(child, 1);
        let mut uniform = |(lo, hi): (f64, f64)| if hi > lo { draw.random_range(lo..=hi) } else { lo };
        let p = SirParams {
            beta: uniform(beta_range),
            gamma: uniform(gamma_range),
            ..base.clone()
        };
        sir_simulate(&p, initial, n_steps, child)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rhs_examples() {
        let p = SirParams::default();
        let d = sir_rhs(&SirState::new(0.99, 0.01, 0.0), &p);
        assert!((d[0] + 2.97e-4).abs() < 1e-15);
        assert!((d[1] - 1.97e-4).abs() < 1e-15);
        assert!((d[2] - 1.0e-4).abs() < 1e-15);
        assert_eq!(sir_rhs(&SirState::new(1.0, 0.0, 0.0), &p), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn disease_free_fixed_point() {
        let s = SirState::new(0.7, 0.0, 0.3);
        let n = rk4_step(&s, &SirParams::default(), 1.0);
        assert_eq!((n.s, n.i, n.r), (s.s, s.i, s.r));
    }

    #[test]
    fn rejects_bad_initial() {
        let err = sir_simulate(&SirParams::default(), SirState::new(0.5, 0.1, 0.0), 3, 0);
        assert!(matches!(err, Err(Error::InitialCondition { .. })));
    }
}
