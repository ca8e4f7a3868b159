use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::{LossTerms, LossWeights};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iter: usize,
    pub terms: LossTerms,
    pub wallclock_ms: f64,
    pub param_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct Row {
    iter: usize,
    total: f64,
    nll: f64,
    kinetic: f64,
    prior: f64,
    wallclock_ms: f64,
    param_norm: f64,
}

/// Raw per-iteration losses (no smoothing).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub weights: LossWeights,
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn new(weights: LossWeights) -> Self {
        TrainLog {
            weights,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean of `field` over records `[start, end)`.
    pub fn mean_over(&self, start: usize, end: usize, field: impl Fn(&LossTerms) -> f64) -> f64 {
        let end = end.min(self.records.len());
        let start = start.min(end);
        if start == end {
            return f64::NAN;
        }
        self.records[start..end].iter().map(|r| field(&r.terms)).sum::<f64>() / (end - start) as f64
    }

    /// Mean of `field` over the last `n` records.
    pub fn tail_mean(&self, n: usize, field: impl Fn(&LossTerms) -> f64) -> f64 {
        let len = self.records.len();
        self.mean_over(len.saturating_sub(n), len, field)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(Row {
                iter: r.iter,
                total: r.terms.total,
                nll: r.terms.nll,
                kinetic: r.terms.kinetic,
                prior: r.terms.prior,
                wallclock_ms: r.wallclock_ms,
                param_norm: r.param_norm,
            })?;
        }
        if self.records.is_empty() {
            w.write_record(["iter", "total", "nll", "kinetic", "prior", "wallclock_ms", "param_norm"])?;
        }
        w.into_inner().map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, weights: LossWeights) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r
            .deserialize()
            .map(|row| {
                let row: Row = row?;
                Ok(TrainRecord {
                    iter: row.iter,
                    terms: LossTerms {
                        total: row.total,
                        nll: row.nll,
                        kinetic: row.kinetic,
                        prior: row.prior,
                    },
                    wallclock_ms: row.wallclock_ms,
                    param_norm: row.param_norm,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { weights, records })
    }
}
