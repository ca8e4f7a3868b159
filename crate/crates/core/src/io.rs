//! Dataset files and external SIR ingestion.
//!
//! A dataset is a CSV with one row per record,
//! `traj, step, time, o0…, s0…[, beta, gamma]`, plus a JSON sidecar
//! (`<stem>.meta.json`) describing the generator, dimensions and any stored
//! normalization.

use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Standardizer, Trajectory};
use crate::error::{Error, Result};
use crate::model::fnv1a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// `vehicle`, `sir`, `sir-ensemble`, `two-moons` or `ingested-sir`.
    pub system: String,
    pub seed: u64,
    pub n_trajectories: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub has_params: bool,
    /// Generator parameters as given.
    pub config: serde_json::Value,
    /// Present when stored values are standardized; raw = denormalize(stored).
    pub normalization: Option<Standardizer>,
    /// Calendar date of `time = 0` for ingested series.
    pub start_date: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

/// `data.csv` → `data.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn new(meta: DatasetMeta, trajectories: Vec<Trajectory>) -> Result<Self> {
        let ds = Dataset { meta, trajectories };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.n_trajectories != self.trajectories.len() {
            return Err(Error::Schema(format!(
                "sidecar lists {} trajectories, found {}",
                m.n_trajectories,
                self.trajectories.len()
            )));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            let bad = t.times.len() != t.observations.len()
                || t.states.len() != t.observations.len()
                || t.observations.iter().any(|o| o.len() != m.obs_dim)
                || t.states.iter().any(|s| s.len() != m.state_dim)
                || t.params.is_some() != m.has_params;
            if bad {
                return Err(Error::Schema(format!("trajectory {i} does not match the sidecar dimensions")));
            }
        }
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let m = &self.meta;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = vec!["traj".into(), "step".into(), "time".into()];
        header.extend((0..m.obs_dim).map(|j| format!("o{j}")));
        header.extend((0..m.state_dim).map(|j| format!("s{j}")));
        if m.has_params {
            header.extend(["beta".to_string(), "gamma".to_string()]);
        }
        w.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for (ti, t) in self.trajectories.iter().enumerate() {
            for k in 0..t.len() {
                rec.clear();
                rec.push(ti.to_string());
                rec.push(k.to_string());
                rec.push(t.times[k].to_string());
                rec.extend(t.observations[k].iter().map(f64::to_string));
                rec.extend(t.states[k].iter().map(f64::to_string));
                if let Some(p) = t.params {
                    rec.extend(p.iter().map(f64::to_string));
                }
                w.write_record(&rec)?;
            }
        }
        w.into_inner().map_err(|e| Error::Schema(e.to_string()))
    }

    /// Write the CSV and its sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv()?)?;
        let mut meta = serde_json::to_vec_pretty(&self.meta)?;
        meta.push(b'\n');
        write_file(&sidecar_path(path), &meta)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let meta_bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DatasetMeta = serde_json::from_slice(&meta_bytes)?;
        let width = 3 + meta.obs_dim + meta.state_dim + if meta.has_params { 2 } else { 0 };
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.len() != width {
            return Err(Error::Schema(format!(
                "{}: expected {width} columns from the sidecar, found {}",
                path.display(),
                r.headers()?.len()
            )));
        }
        let mut trajectories: Vec<Trajectory> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            let num = |j: usize| -> Result<f64> {
                rec[j]
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("{} row {row}: bad number {:?}", path.display(), &rec[j])))
            };
            let ti: usize = rec[0]
                .parse()
                .map_err(|_| Error::Schema(format!("{} row {row}: bad trajectory index", path.display())))?;
            if ti == trajectories.len() {
                trajectories.push(Trajectory {
                    times: Vec::new(),
                    observations: Vec::new(),
                    states: Vec::new(),
                    params: None,
                });
            } else if ti + 1 != trajectories.len() {
                return Err(Error::Schema(format!("{} row {row}: trajectories out of order", path.display())));
            }
            let t = trajectories.last_mut().expect("pushed above");
            t.times.push(num(2)?);
            let o0 = 3;
            let s0 = o0 + meta.obs_dim;
            let p0 = s0 + meta.state_dim;
            t.observations.push((o0..s0).map(num).collect::<Result<_>>()?);
            t.states.push((s0..p0).map(num).collect::<Result<_>>()?);
            if meta.has_params {
                t.params = Some([num(p0)?, num(p0 + 1)?]);
            }
        }
        Dataset::new(meta, trajectories)
    }

    /// Content hash of the CSV form, used in report provenance.
    pub fn id(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a(&self.to_csv()?)))
    }
}

/// Read `date, S, I, R` rows (fractions), validate, standardize and wrap as a dataset.
pub fn ingest_sir_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_ascii_lowercase).collect();
    if headers != ["date", "s", "i", "r"] {
        return Err(Error::Schema(format!(
            "{}: expected header date,S,I,R, found {}",
            path.display(),
            headers.join(",")
        )));
    }
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut raw: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 1;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|_| Error::Schema(format!("row {row}: bad date {:?} (want YYYY-MM-DD)", &rec[0])))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(Error::Schema(format!("row {row}: date {date} is not after {prev}")));
            }
        }
        let vals: Vec<f64> = (1..4)
            .map(|j| {
                rec[j]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Schema(format!("row {row}: bad value {:?}", &rec[j])))
            })
            .collect::<Result<_>>()?;
        let sum: f64 = vals.iter().sum();
        if !(0.98..=1.02).contains(&sum) {
            return Err(Error::Schema(format!("row {row}: S+I+R = {sum} outside [0.98, 1.02]")));
        }
        dates.push(date);
        raw.push(vals);
    }
    if raw.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }
    let norm = Standardizer::fit(raw.iter().map(Vec::as_slice), 3);
    let stored: Vec<Vec<f64>> = raw.iter().map(|v| norm.normalize(v)).collect();
    let start = dates[0];
    let traj = Trajectory {
        times: dates.iter().map(|d| (*d - start).num_days() as f64).collect(),
        observations: stored.clone(),
        states: stored,
        params: None,
    };
    Dataset::new(
        DatasetMeta {
            system: "ingested-sir".into(),
            seed: 0,
            n_trajectories: 1,
            obs_dim: 3,
            state_dim: 3,
            has_params: false,
            config: serde_json::json!({ "source": path.file_name().map(|f| f.to_string_lossy().into_owned()) }),
            normalization: Some(norm),
            start_date: Some(start.format("%Y-%m-%d").to_string()),
        },
        vec![traj],
    )
}

/// Inverse of [`ingest_sir_csv`]: raw `date, S, I, R` rows.
pub fn export_sir_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let (Some(norm), Some(start)) = (&ds.meta.normalization, &ds.meta.start_date) else {
        return Err(Error::Schema("export needs an ingested dataset (normalization and start date)".into()));
    };
    let start = NaiveDate::parse_from_str(start, "%Y-%m-%d")
        .map_err(|_| Error::Schema(format!("bad start date {start:?}")))?;
    let t = ds
        .trajectories
        .first()
        .ok_or_else(|| Error::Schema("dataset has no trajectory".into()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "S", "I", "R"])?;
    for (time, s) in t.times.iter().zip(&t.states) {
        let date = start + Duration::days(time.round() as i64);
        let v = norm.denormalize(s);
        w.write_record([date.format("%Y-%m-%d").to_string(), v[0].to_string(), v[1].to_string(), v[2].to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}
