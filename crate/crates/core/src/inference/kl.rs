use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlConfig {
    /// Neighbour rank.
    pub k: usize,
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig { k: 1 }
    }
}

const JITTER: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from `q` to its `k`-th nearest row of `pts` (rows `skip` excluded).
fn kth_sq(q: &[f64], pts: &[f64], d: usize, k: usize, skip: Option<usize>) -> f64 {
    let mut best = vec![f64::INFINITY; k];
    for (j, p) in pts.chunks_exact(d).enumerate() {
        if Some(j) == skip {
            continue;
        }
        let dist = sq_dist(q, p);
        if dist < best[k - 1] {
            let mut pos = k - 1;
            while pos > 0 && best[pos - 1] > dist {
                best[pos] = best[pos - 1];
                pos -= 1;
            }
            best[pos] = dist;
        }
    }
    best[k - 1]
}

fn rows_of(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::Dimension {
            context: "sample matrix rank",
            expected: 2,
            actual: s.len(),
        }),
    }
}

/// k-NN estimate of `KL(p̂ ‖ p)` from samples of each (rows of `[n, d]` and `[m, d]`).
///
/// `r_k` is the distance from each p̂-sample to its k-th neighbour among the other
/// p̂-samples and `s_k` the distance to its k-th neighbour among the p-samples:
/// `(d/n) Σ log(s_k / r_k) + log(m / (n − 1))`.
pub fn kl_knn(p_hat: &Tensor, p: &Tensor, k: usize) -> Result<f64> {
    let (n, d) = rows_of(p_hat)?;
    let (m, dp) = rows_of(p)?;
    if d != dp {
        return Err(Error::Dimension {
            context: "kl_knn sample width",
            expected: d,
            actual: dp,
        });
    }
    if k == 0 || n <= k || m < k || d == 0 {
        return Err(Error::InsufficientSamples(format!(
            "kl_knn needs k >= 1, n > k and m >= k (n={n}, m={m}, k={k})"
        )));
    }
    let mut own = p_hat.data().to_vec();
    let mut r = within(&own, d, k);
    if r.contains(&0.0) {
        // break exact ties between p̂-samples with a tiny deterministic offset
        for (i, row) in own.chunks_exact_mut(d).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let scale = v.abs().max(1.0);
                *v += JITTER * scale * (((i * d + j) % 997) as f64 + 1.0) / 997.0;
            }
        }
        r = within(&own, d, k);
        if let Some(i) = r.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateDistance { index: i });
        }
    }
    let other = p.data();
    let s = crate::par::map_indexed(n, |i| kth_sq(&own[i * d..(i + 1) * d], other, d, k, None));
    if let Some(i) = s.iter().position(|&v| v == 0.0) {
        return Err(Error::DegenerateDistance { index: i });
    }
    // squared distances: log(s/r) = ½ log(s²/r²)
    let sum: f64 = s.iter().zip(&r).map(|(s2, r2)| 0.5 * (s2 / r2).ln()).sum();
    Ok(d as f64 / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln())
}

fn within(pts: &[f64], d: usize, k: usize) -> Vec<f64> {
    let n = pts.len() / d;
    crate::par::map_indexed(n, |i| kth_sq(&pts[i * d..(i + 1) * d], pts, d, k, Some(i)))
}
