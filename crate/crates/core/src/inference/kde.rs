/// Gaussian kernel density estimate in one dimension with Silverman's bandwidth.
#[derive(Clone, Debug)]
pub struct Kde1d {
    points: Vec<f64>,
    bandwidth: f64,
}

/// `0.9 · min(σ, IQR/1.34) · n^(−1/5)`, falling back to σ when the IQR is zero.
pub fn silverman_bandwidth(points: &[f64]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<f64>() / n;
    let var = points.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    let mut sorted = points.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let pos = f * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        // every point identical: a narrow kernel relative to their magnitude
        1e-6 * mean.abs().max(1.0)
    }
}

impl Kde1d {
    pub fn new(points: Vec<f64>) -> Self {
        assert!(!points.is_empty(), "KDE needs at least one point");
        let bandwidth = silverman_bandwidth(&points);
        Kde1d { points, bandwidth }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let terms: Vec<f64> = self.points.iter().map(|p| -0.5 * ((x - p) / h).powi(2)).collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
        lse - (self.points.len() as f64).ln() - h.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}
