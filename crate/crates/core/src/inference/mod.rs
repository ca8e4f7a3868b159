//! Evaluation and deployment: k-NN KL divergence, mean NLL, state estimation
//! at a trajectory location, recursive rollout, and joint state/parameter
//! estimation. Every user-facing number is in raw data units.

mod kde;
mod kl;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::dynamics::{sir_simulate, Direction, SirParams, SirState};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;

pub use kde::{silverman_bandwidth, Kde1d};
pub use kl::{kl_knn, KlConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub dataset: Option<String>,
    pub seed: u64,
    /// Free-form description of where the context came from.
    pub location: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    /// Radius in whitened base units.
    pub level: f64,
    pub points: Vec<[f64; 2]>,
}

/// Summary statistics are over `samples`, which are in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub kl: Option<f64>,
    pub nll: Option<f64>,
    pub contours: Vec<Contour>,
    pub provenance: Provenance,
}

#[derive(Serialize)]
struct Summary<'a> {
    n_samples: usize,
    mean: &'a [f64],
    std: &'a [f64],
    kl: Option<f64>,
    nll: Option<f64>,
    provenance: &'a Provenance,
}

impl EstimateReport {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Score the samples against ground-truth draws with [`kl_knn`]; stores and returns the estimate.
    pub fn score_against(&mut self, truth: &[Vec<f64>], k: usize) -> Result<f64> {
        let kl = kl_knn(&rows_tensor(&self.samples)?, &rows_tensor(truth)?, k)?;
        self.kl = Some(kl);
        Ok(kl)
    }

    pub fn summary_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(&Summary {
            n_samples: self.samples.len(),
            mean: &self.mean,
            std: &self.std,
            kl: self.kl,
            nll: self.nll,
            provenance: &self.provenance,
        })?;
        out.push(b'\n');
        Ok(out)
    }

    /// `sample, x0, x1, …`.
    pub fn samples_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sample".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(s.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Schema(e.to_string()))
    }

    /// `level, point, x, y`.
    pub fn contours_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["level", "point", "x", "y"])?;
        for c in &self.contours {
            for (i, p) in c.points.iter().enumerate() {
                w.write_record([c.level.to_string(), i.to_string(), p[0].to_string(), p[1].to_string()])?;
            }
        }
        w.into_inner().map_err(|e| Error::Schema(e.to_string()))
    }
}

pub(crate) fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension {
            context: "sample rows",
            expected: d,
            actual: rows.iter().map(Vec::len).find(|&l| l != d).unwrap_or(0),
        });
    }
    Ok(Tensor::new(vec![rows.len(), d], rows.concat())?)
}

/// Per-dimension mean and (population) standard deviation.
pub fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Contour radii in whitened base units; only used for 2-D targets.
    pub contour_levels: Vec<f64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            n_samples: 1000,
            seed: 0,
            contour_levels: vec![1.0, 2.0],
        }
    }
}

fn context_embedding(model: &Model, context: &[Vec<f64>]) -> Result<Option<Vec<f64>>> {
    if !model.is_conditional() {
        if !context.is_empty() {
            return Err(Error::Config("unconditional model takes no context".into()));
        }
        return Ok(None);
    }
    let t = model.context_tensor(context)?;
    Ok(model.embed_values(Some(&t))?.map(Tensor::into_data))
}

/// Sample the predicted state density for one context window of raw observations.
pub fn estimate_state(model: &Model, context: &[Vec<f64>], opts: &EstimateOptions) -> Result<EstimateReport> {
    let checkpoint = model.id()?;
    estimate_with_id(model, context, opts, checkpoint)
}

fn estimate_with_id(model: &Model, context: &[Vec<f64>], opts: &EstimateOptions, checkpoint: String) -> Result<EstimateReport> {
    if opts.n_samples == 0 {
        return Err(Error::InsufficientSamples("n_samples must be >= 1".into()));
    }
    let ctx = context_embedding(model, context)?;
    let norm = &model.spec.target_norm;
    let (x, _) = model
        .flow
        .sample(&model.params, opts.n_samples, ctx.as_deref(), &mut rng::stream(opts.seed, 0))?;
    let window = &model.spec.window;
    let samples: Vec<Vec<f64>> = x
        .data()
        .chunks(model.data_dim())
        .map(|r| window.decode_target(&norm.denormalize(r)))
        .collect();
    let (mean, std) = moments(&samples);
    if mean.iter().chain(&std).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "estimate summary".into(),
        });
    }
    let contours = if model.data_dim() == 2 && !opts.contour_levels.is_empty() {
        let lines = model.flow.confidence_contours(&model.params, ctx.as_deref(), &opts.contour_levels)?;
        opts.contour_levels
            .iter()
            .zip(lines)
            .map(|(&level, pts)| Contour {
                level,
                points: pts
                    .into_iter()
                    .map(|p| {
                        let r = window.decode_target(&norm.denormalize(&p));
                        [r[0], r[1]]
                    })
                    .collect(),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(EstimateReport {
        samples,
        mean,
        std,
        kl: None,
        nll: None,
        contours,
        provenance: Provenance {
            checkpoint,
            dataset: None,
            seed: opts.seed,
            location: None,
        },
    })
}

/// `−log p(state | context)` in raw units.
pub fn point_nll(model: &Model, context: &[Vec<f64>], state: &[f64]) -> Result<f64> {
    let r = mean_nll(model, &[(context.to_vec(), state.to_vec())], &NllOptions { kde_samples: 0, seed: 0 })?;
    Ok(r.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NllOptions {
    /// Flow samples per pair for the per-dimension KDE marginals; 0 skips them.
    pub kde_samples: usize,
    pub seed: u64,
}

impl Default for NllOptions {
    fn default() -> Self {
        NllOptions {
            kde_samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    /// Mean joint `−log p` over the pairs.
    pub total: f64,
    /// Mean `−log` of the KDE marginal along each dimension (empty when skipped).
    pub per_dim: Vec<f64>,
}

/// Mean negative log-likelihood of true states given their raw context windows.
pub fn mean_nll(model: &Model, pairs: &[(Vec<Vec<f64>>, Vec<f64>)], opts: &NllOptions) -> Result<NllReport> {
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples("mean_nll needs at least one pair".into()));
    }
    let d = model.data_dim();
    let norm = &model.spec.target_norm;
    let window = &model.spec.window;
    let mut targets = Vec::with_capacity(pairs.len() * d);
    let mut log_jac = 0.0;
    for (_, s) in pairs {
        if s.len() != d {
            return Err(Error::Dimension {
                context: "true state width",
                expected: d,
                actual: s.len(),
            });
        }
        targets.extend(norm.normalize(&window.encode_target(s)?));
        log_jac += window.target_log_jacobian(s);
    }
    let targets = Tensor::new(vec![pairs.len(), d], targets)?;
    let ctx = if model.is_conditional() {
        let mut data = Vec::new();
        for (c, _) in pairs {
            data.extend(model.context_tensor(c)?.into_data());
        }
        let t = Tensor::new(vec![pairs.len(), model.spec.window.r, model.spec.obs_norm.dim()], data)?;
        model.embed_values(Some(&t))?
    } else {
        model.embed_values(None)?
    };
    let lp = model.flow.log_prob_values(&model.params, &targets, ctx.as_ref())?;
    let total = -(lp.iter().sum::<f64>() + log_jac) / lp.len() as f64 + norm.log_scale();
    let per_dim = if opts.kde_samples > 0 {
        let per_pair = crate::par::try_map_indexed(pairs.len(), |p| {
            let row = ctx.as_ref().map(|c| c.row(p).to_vec());
            let mut rng = rng::stream(rng::child_seed(opts.seed, p as u64), 0);
            let (x, _) = model.flow.sample(&model.params, opts.kde_samples, row.as_deref(), &mut rng)?;
            let samples: Vec<Vec<f64>> = x.data().chunks(d).map(|r| window.decode_target(&norm.denormalize(r))).collect();
            Ok::<_, Error>(
                (0..d)
                    .map(|j| -Kde1d::new(samples.iter().map(|s| s[j]).collect()).log_density(pairs[p].1[j]))
                    .collect::<Vec<f64>>(),
            )
        })?;
        (0..d)
            .map(|j| per_pair.iter().map(|v| v[j]).sum::<f64>() / pairs.len() as f64)
            .collect()
    } else {
        Vec::new()
    };
    Ok(NllReport { total, per_dim })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Feed back the mean of the predicted samples.
    Mean,
    /// Feed back the first predicted sample.
    Sample,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sample" => Ok(Aggregation::Sample),
            other => Err(Error::Config(format!("aggregation must be mean|sample, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub direction: Direction,
    pub n_steps: usize,
    pub n_samples: usize,
    pub aggregation: Aggregation,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            direction: Direction::Forward,
            n_steps: 7,
            n_samples: 1000,
            aggregation: Aggregation::Mean,
        }
    }
}

/// One rollout step: the window that was conditioned on and the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub context: Vec<Vec<f64>>,
    pub fed_back: Vec<f64>,
    pub report: EstimateReport,
}

/// Drop the oldest row (forward) or the newest (backward, whose windows run newest first)
/// and append `next`.
pub fn shift_window(window: &mut Vec<Vec<f64>>, next: Vec<f64>) {
    window.remove(0);
    window.push(next);
}

/// Recursive prediction feeding each aggregate back as a pseudo-observation.
pub fn rollout(model: &Model, initial: &[Vec<f64>], config: &RolloutConfig, seed: u64) -> Result<Vec<RolloutStep>> {
    let spec = &model.spec.window;
    if config.n_steps == 0 {
        return Err(Error::Config("rollout needs n_steps >= 1".into()));
    }
    if !model.is_conditional() {
        return Err(Error::Config("rollout needs a conditional model".into()));
    }
    if config.direction != spec.direction {
        return Err(Error::Config(format!(
            "model was trained for {:?} estimation, rollout asked for {:?}",
            spec.direction, config.direction
        )));
    }
    let m = model.spec.obs_norm.dim();
    if model.data_dim() < m {
        return Err(Error::Dimension {
            context: "rollout feedback width",
            expected: m,
            actual: model.data_dim(),
        });
    }
    let checkpoint = model.id()?;
    let mut window = initial.to_vec();
    let mut steps = Vec::with_capacity(config.n_steps);
    for s in 0..config.n_steps {
        let opts = EstimateOptions {
            n_samples: config.n_samples,
            seed: if s == 0 { seed } else { rng::child_seed(seed, s as u64) },
            contour_levels: Vec::new(),
        };
        let mut report = estimate_with_id(model, &window, &opts, checkpoint.clone())?;
        report.provenance.location = Some(format!("rollout step {s}"));
        let agg = match config.aggregation {
            Aggregation::Mean => report.mean.clone(),
            Aggregation::Sample => report.samples[0].clone(),
        };
        let fed_back: Vec<f64> = agg[..m].to_vec();
        if fed_back.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: format!("rollout step {s}"),
            });
        }
        let context = window.clone();
        shift_window(&mut window, fed_back.clone());
        steps.push(RolloutStep {
            context,
            fed_back,
            report,
        });
    }
    Ok(steps)
}

/// `step, dim, mean, lo2sigma, hi2sigma` over the per-step sample sets.
pub fn rollout_bands_csv(steps: &[RolloutStep]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "dim", "mean", "lo2sigma", "hi2sigma"])?;
    for (s, st) in steps.iter().enumerate() {
        for (j, (m, sd)) in st.report.mean.iter().zip(&st.report.std).enumerate() {
            w.write_record([
                s.to_string(),
                j.to_string(),
                m.to_string(),
                (m - 2.0 * sd).to_string(),
                (m + 2.0 * sd).to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Schema(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub report: EstimateReport,
    pub beta_mean: f64,
    pub beta_std: f64,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    /// Noise-free SIR path under the mean parameters, `[S, I, R]` per step.
    pub overlay: Vec<[f64; 3]>,
}

/// Sample joint (state, β, γ) vectors and summarize the parameter marginals.
pub fn joint_state_param_estimate(
    model: &Model,
    context: &[Vec<f64>],
    opts: &EstimateOptions,
    overlay_from: SirState,
    overlay_steps: usize,
) -> Result<JointReport> {
    let d = model.data_dim();
    if !model.spec.window.include_params || d < 3 {
        return Err(Error::Dimension {
            context: "joint estimation needs (beta, gamma) targets",
            expected: d + 2,
            actual: d,
        });
    }
    let report = estimate_state(model, context, opts)?;
    let (beta_mean, beta_std) = (report.mean[d - 2], report.std[d - 2]);
    let (gamma_mean, gamma_std) = (report.mean[d - 1], report.std[d - 1]);
    let p = SirParams {
        beta: beta_mean,
        gamma: gamma_mean,
        noise_sigma: 0.0,
        ..Default::default()
    };
    let overlay = sir_simulate(&p, overlay_from, overlay_steps, opts.seed)?
        .states
        .into_iter()
        .map(|s| [s[0], s[1], s[2]])
        .collect();
    Ok(JointReport {
        report,
        beta_mean,
        beta_std,
        gamma_mean,
        gamma_std,
        overlay,
    })
}

/// Mean absolute percentage error, `100 · mean(|pred − actual| / |actual|)`.
pub fn mape(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Dimension {
            context: "mape sequence length",
            expected: actual.len(),
            actual: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::InsufficientSamples("mape of empty sequences".into()));
    }
    let zero: Vec<usize> = actual
        .iter()
        .enumerate()
        .filter(|(_, a)| !(a.abs() > 1e-9))
        .map(|(i, _)| i)
        .collect();
    if !zero.is_empty() {
        return Err(Error::ZeroDenominator { indices: zero });
    }
    let sum: f64 = predicted.iter().zip(actual).map(|(p, a)| ((p - a) / a).abs()).sum();
    Ok(100.0 * sum / actual.len() as f64)
}
