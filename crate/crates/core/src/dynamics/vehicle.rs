use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub p_x: f64,
    pub p_y: f64,
    pub theta: f64,
    /// Angular acceleration control.
    pub phi: f64,
    pub v: f64,
    pub t: f64,
}

impl Default for VehicleState {
    fn default() -> Self {
        VehicleState {
            p_x: 0.0,
            p_y: 0.0,
            theta: 0.0,
            phi: 0.0,
            v: 1.0,
            t: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub c1: f64,
    pub c2: f64,
    pub sigma_v: f64,
    pub sigma_phi: f64,
    pub dt: f64,
    pub switch_time: f64,
    /// Force the switch value instead of drawing it from U[−1, 1].
    pub psi: Option<f64>,
    /// Per-step velocity schedule; the last entry holds afterwards. Empty keeps the initial v.
    pub velocity: Vec<f64>,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            c1: 0.1,
            c2: 0.5,
            sigma_v: 0.01,
            sigma_phi: 0.025,
            dt: 0.1,
            switch_time: 5.5,
            psi: None,
            velocity: Vec::new(),
        }
    }
}

impl VehicleParams {
    pub fn noiseless(mut self) -> Self {
        self.sigma_v = 0.0;
        self.sigma_phi = 0.0;
        self
    }

    fn switch_active(&self, t: f64) -> bool {
        t >= self.switch_time - 1e-9
    }
}

/// One kinematic update. `noise = (ε_v, ε_φ)` perturbs the velocity and
/// angular acceleration used in this step only.
pub fn vehicle_step(s: &VehicleState, p: &VehicleParams, psi: f64, noise: (f64, f64)) -> VehicleState {
    let v = s.v + noise.0;
    let phi = s.phi + noise.1;
    let psi = if p.switch_active(s.t) { psi } else { 0.0 };
    VehicleState {
        p_x: s.p_x + p.dt * v * s.theta.cos(),
        p_y: s.p_y + p.dt * v * s.theta.sin(),
        theta: s.theta + p.dt * v * phi,
        phi: s.phi + p.dt * psi * p.c1 * (p.c2 * s.t).cos(),
        v: s.v,
        t: s.t + p.dt,
    }
}

/// A simulated run: the noisy path, its noise-free counterpart, and the switch value.
#[derive(Clone, Debug)]
pub struct VehicleRun {
    pub noisy: Vec<VehicleState>,
    pub nominal: Vec<VehicleState>,
    pub psi: f64,
}

impl VehicleRun {
    /// Observations and targets are both the noisy positions.
    pub fn to_trajectory(&self) -> Trajectory {
        let pos: Vec<Vec<f64>> = self.noisy.iter().map(|s| vec![s.p_x, s.p_y]).collect();
        Trajectory {
            times: self.noisy.iter().map(|s| s.t).collect(),
            observations: pos.clone(),
            states: pos,
            params: None,
        }
    }
}

fn velocity_at(p: &VehicleParams, step: usize, fallback: f64) -> f64 {
    match p.velocity.len() {
        0 => fallback,
        n => p.velocity[step.min(n - 1)],
    }
}

fn draw_noise(p: &VehicleParams, rng: &mut impl Rng) -> (f64, f64) {
    let ev: f64 = rng.sample(StandardNormal);
    let ep: f64 = rng.sample(StandardNormal);
    (p.sigma_v * ev, p.sigma_phi * ep)
}

/// Simulate `n_steps` records (the first is `initial`). The switch value and
/// the process noise come from separate streams of `seed`.
pub fn vehicle_simulate(n_steps: usize, p: &VehicleParams, initial: VehicleState, seed: u64) -> VehicleRun {
    let psi = p
        .psi
        .unwrap_or_else(|| rng::stream(seed, 0).random_range(-1.0..=1.0));
    let mut noise_rng = rng::stream(seed, 1);
    let mut noisy = Vec::with_capacity(n_steps);
    let mut nominal = Vec::with_capacity(n_steps);
    let (mut s, mut s0) = (initial, initial);
    for k in 0..n_steps {
        noisy.push(s);
        nominal.push(s0);
        if k + 1 == n_steps {
            break;
        }
        let v = velocity_at(p, k, initial.v);
        s.v = v;
        s0.v = v;
        let noise = draw_noise(p, &mut noise_rng);
        s = vehicle_step(&s, p, psi, noise);
        s0 = vehicle_step(&s0, p, psi, (0.0, 0.0));
    }
    VehicleRun { noisy, nominal, psi }
}

/// Independent runs for trajectory indices `0..n_traj`, ordered by index.
pub fn vehicle_ensemble(n_traj: usize, n_steps: usize, p: &VehicleParams, initial: VehicleState, seed: u64) -> Vec<VehicleRun> {
    crate::par::map_indexed(n_traj, |i| vehicle_simulate(n_steps, p, initial, rng::child_seed(seed, i as u64)))
}

/// Continue from `state` (recorded at step `step`) for `steps` further updates.
/// `psi = None` draws a fresh switch value; the returned state is the endpoint.
pub fn vehicle_continue(
    state: &VehicleState,
    step: usize,
    steps: usize,
    p: &VehicleParams,
    psi: Option<f64>,
    rng: &mut impl Rng,
) -> VehicleState {
    let psi = psi.unwrap_or_else(|| rng.random_range(-1.0..=1.0));
    let mut s = *state;
    for k in step..step + steps {
        s.v = velocity_at(p, k, s.v);
        let noise = draw_noise(p, rng);
        s = vehicle_step(&s, p, psi, noise);
    }
    s
}
