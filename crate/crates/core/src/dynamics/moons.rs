use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

/// Two interleaving half circles of unit radius: the upper arc `(cos t, sin t)`
/// and the lower arc `(1 − cos t, 0.5 − sin t)`, `t ~ U[0, π]`, plus isotropic
/// Gaussian jitter. Returns points and their moon label (0 upper, 1 lower).
pub fn two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<(Vec<[f64; 2]>, Vec<u8>)> {
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("two_moons needs n >= 2, got {n}")));
    }
    let mut rng = rng::stream(seed, 0);
    let upper = n - n / 2;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let t = rng.random_range(0.0..=std::f64::consts::PI);
        let (x, y, label) = if k < upper {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        points.push([x + noise_sigma * ex, y + noise_sigma * ey]);
        labels.push(label);
    }
    Ok((points, labels))
}

/// Distance from `p` to the nearer of the two noise-free arcs, and that arc's label.
pub fn nearest_arc(p: [f64; 2]) -> (f64, u8) {
    let arc = |cx: f64, cy: f64, upper: bool| {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        let on_side = if upper { dy >= 0.0 } else { dy <= 0.0 };
        if on_side {
            ((dx * dx + dy * dy).sqrt() - 1.0).abs()
        } else {
            // nearest endpoint of the half circle
            let e1 = ((dx - 1.0).powi(2) + dy * dy).sqrt();
            let e2 = ((dx + 1.0).powi(2) + dy * dy).sqrt();
            e1.min(e2)
        }
    };
    let up = arc(0.0, 0.0, true);
    let low = arc(1.0, 0.5, false);
    if up <= low {
        (up, 0)
    } else {
        (low, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_points_on_arcs() {
        let (pts, labels) = two_moons(1000, 0.0, 3).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 500);
        for p in pts {
            assert!(nearest_arc(p).0 < 1e-12);
        }
    }
}
