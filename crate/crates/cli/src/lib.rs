//! Command implementations and the run configuration behind the `flowfilter` binary.
//!
//! Every setting has one default, defined here or in the library config types.
//! A TOML file may override any of them; command-line flags override the file.
//! Unknown keys in the file are rejected.

use std::path::{Path, PathBuf};

use flowfilter::dynamics::{
    context_steps, make_windows, sir_ensemble, sir_simulate, target_row, two_moons, vehicle_continue,
    vehicle_ensemble, vehicle_simulate, window_positions, Direction, SirParams, SirState, Trajectory, VehicleParams,
    VehicleState, WindowSpec, WindowedDataset,
};
use flowfilter::encoders::EncoderConfig;
use flowfilter::flow::FlowConfig;
use flowfilter::inference::{
    estimate_state, mape, mean_nll, point_nll, rollout, rollout_bands_csv, EstimateOptions, EstimateReport, KlConfig,
    NllOptions, RolloutConfig,
};
use flowfilter::io::{ingest_sir_csv, Dataset, DatasetMeta};
use flowfilter::rng;
use flowfilter::training::{train, TrainConfig};
use flowfilter::Model;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "FLOWFILTER_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(flowfilter::Error),
}

impl From<flowfilter::Error> for CliError {
    fn from(e: flowfilter::Error) -> Self {
        match e {
            flowfilter::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Run(other),
        }
    }
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Vehicle,
    Sir,
    SirEnsemble,
    TwoMoons,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Vehicle => "vehicle",
            System::Sir => "sir",
            System::SirEnsemble => "sir-ensemble",
            System::TwoMoons => "two-moons",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub system: System,
    /// Trajectories for `vehicle` and `sir-ensemble`.
    pub trajectories: usize,
    /// Records per trajectory.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            system: System::Vehicle,
            trajectories: 10_000,
            steps: 150,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub beta: [f64; 2],
    pub gamma: [f64; 2],
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            beta: [0.02, 0.04],
            gamma: [0.005, 0.025],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoonsConfig {
    pub points: usize,
    pub noise: f64,
}

impl Default for MoonsConfig {
    fn default() -> Self {
        MoonsConfig {
            points: 2000,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Random window locations scored per checkpoint.
    pub locations: usize,
    /// Simulator continuations drawn as ground truth where the system allows it.
    pub truth_samples: usize,
    pub seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            locations: 100,
            truth_samples: 1000,
            seed: 0,
        }
    }
}

/// The full set of tunables. `Default` is the single defaults table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulate: SimulateConfig,
    pub vehicle: VehicleParams,
    pub sir: SirParams,
    pub ensemble: EnsembleConfig,
    pub moons: MoonsConfig,
    pub window: WindowSpec,
    pub flow: FlowConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub estimate: EstimateOptions,
    pub rollout: RolloutConfig,
    pub kl: KlConfig,
    pub nll: NllOptions,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    /// Parse a TOML file, rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                RunConfig::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Default output location under `$FLOWFILTER_OUT` (or `out/`).
pub fn out_path(rel: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_VAR).map_or_else(|| PathBuf::from("out"), PathBuf::from);
    root.join(rel)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Run(flowfilter::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize, Deserialize)]
struct VehicleSource {
    vehicle: VehicleParams,
    steps: usize,
    initial: VehicleState,
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let s = &cfg.simulate;
    let (trajectories, config, dims, has_params) = match s.system {
        System::Vehicle => {
            let init = VehicleState::default();
            let runs = vehicle_ensemble(s.trajectories, s.steps, &cfg.vehicle, init, s.seed);
            let source = VehicleSource {
                vehicle: cfg.vehicle.clone(),
                steps: s.steps,
                initial: init,
            };
            let trajs = runs.iter().map(|r| r.to_trajectory()).collect();
            (trajs, serde_json::to_value(&source).expect("plain data"), (2, 2), false)
        }
        System::Sir => {
            let t = sir_simulate(&cfg.sir, SirState::default(), s.steps, s.seed)?;
            let config = serde_json::json!({ "sir": cfg.sir, "steps": s.steps });
            (vec![t], config, (3, 3), true)
        }
        System::SirEnsemble => {
            let e = &cfg.ensemble;
            let trajs = sir_ensemble(
                &cfg.sir,
                (e.beta[0], e.beta[1]),
                (e.gamma[0], e.gamma[1]),
                s.trajectories,
                SirState::default(),
                s.steps,
                s.seed,
            )?;
            let config = serde_json::json!({ "sir": cfg.sir, "ensemble": e, "steps": s.steps });
            (trajs, config, (3, 3), true)
        }
        System::TwoMoons => {
            let (pts, _) = two_moons(cfg.moons.points, cfg.moons.noise, s.seed)?;
            let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
            let t = Trajectory {
                times: (0..rows.len()).map(|i| i as f64).collect(),
                observations: rows.clone(),
                states: rows,
                params: None,
            };
            (vec![t], serde_json::to_value(&cfg.moons).expect("plain data"), (2, 2), false)
        }
    };
    let ds = Dataset::new(
        DatasetMeta {
            system: s.system.name().into(),
            seed: s.seed,
            n_trajectories: trajectories.len(),
            obs_dim: dims.0,
            state_dim: dims.1,
            has_params,
            config,
            normalization: None,
            start_date: None,
        },
        trajectories,
    )?;
    ds.write(out)?;
    Ok(ds)
}

pub fn ingest(input: &Path, out: &Path) -> Result<Dataset> {
    let ds = ingest_sir_csv(input)?;
    ds.write(out)?;
    Ok(ds)
}

// ---------------------------------------------------------------- train

/// Window specification for a dataset, filling parameter bounds from an ensemble's sidecar.
pub fn window_for(cfg: &RunConfig, ds: &Dataset) -> Result<WindowSpec> {
    let mut spec = cfg.window.clone();
    if spec.include_params && !ds.meta.has_params {
        return Err(CliError::Config(format!(
            "window.include_params needs a dataset with (beta, gamma); {} has none",
            ds.meta.system
        )));
    }
    if spec.include_params && spec.param_bounds.is_none() && ds.meta.system == "sir-ensemble" {
        let e: EnsembleConfig = serde_json::from_value(ds.meta.config["ensemble"].clone())
            .map_err(|e| CliError::Run(flowfilter::Error::Schema(format!("sidecar ensemble ranges: {e}"))))?;
        if e.beta[1] > e.beta[0] && e.gamma[1] > e.gamma[0] {
            spec.param_bounds = Some([e.beta, e.gamma]);
        }
    }
    Ok(spec)
}

pub fn windows_for(cfg: &RunConfig, ds: &Dataset) -> Result<WindowedDataset> {
    if ds.meta.system == "two-moons" {
        let pts: Vec<Vec<f64>> = ds.trajectories.iter().flat_map(|t| t.states.clone()).collect();
        return Ok(WindowedDataset::unconditional(&pts, true)?);
    }
    Ok(make_windows(&ds.trajectories, &window_for(cfg, ds)?, None)?)
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: flowfilter::training::TrainLog,
}

/// Train and write the checkpoint and loss CSV. Wall-clock times are zeroed
/// unless `keep_wallclock`, so reruns produce identical files.
pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, log_path: &Path, keep_wallclock: bool) -> Result<TrainOutcome> {
    let ds = Dataset::read(data)?;
    let windows = windows_for(cfg, &ds)?;
    let mut model = Model::for_dataset(&windows, &cfg.flow, &cfg.encoder)?;
    model.meta.insert("dataset".into(), ds.id()?);
    model.meta.insert("dataset.system".into(), ds.meta.system.clone());
    let mut log = train(&windows, &mut model, &cfg.train)?;
    if !keep_wallclock {
        for r in &mut log.records {
            r.wallclock_ms = 0.0;
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    model.save(out)?;
    write(log_path, &log.to_csv()?)?;
    Ok(TrainOutcome { model, log })
}

// ---------------------------------------------------------------- locations

/// Where to condition: the context row closest to the target, by step or time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum At {
    Step(usize),
    Time(f64),
}

impl std::str::FromStr for At {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("expected step=N, t=T or N, got {s:?}");
        if let Some(v) = s.strip_prefix("t=") {
            v.parse().map(At::Time).map_err(|_| bad())
        } else {
            s.strip_prefix("step=").unwrap_or(s).parse().map(At::Step).map_err(|_| bad())
        }
    }
}

impl At {
    fn step(self, traj: &Trajectory) -> Result<usize> {
        match self {
            At::Step(k) if k < traj.len() => Ok(k),
            At::Step(k) => Err(CliError::Config(format!("step {k} beyond trajectory length {}", traj.len()))),
            At::Time(t) => traj
                .times
                .iter()
                .position(|&x| (x - t).abs() < 1e-6)
                .ok_or_else(|| CliError::Config(format!("no record at t = {t}"))),
        }
    }
}

/// A raw context window and the step it predicts.
pub struct Location {
    pub traj: usize,
    /// Context row nearest the target.
    pub at: usize,
    pub target: usize,
    pub context: Vec<Vec<f64>>,
}

fn locate(spec: &WindowSpec, ds: &Dataset, traj: usize, at: usize) -> Result<Location> {
    let t = ds
        .trajectories
        .get(traj)
        .ok_or_else(|| CliError::Config(format!("trajectory {traj} not in dataset ({})", ds.trajectories.len())))?;
    let (anchor, target) = match spec.direction {
        Direction::Forward => (at.checked_sub(spec.r - 1), Some(at + spec.horizon)),
        Direction::Backward => (Some(at + spec.r - 1), at.checked_sub(spec.horizon)),
    };
    match (anchor, target) {
        (Some(a), Some(tg)) if a < t.len() && tg < t.len() => Ok(Location {
            traj,
            at,
            target: tg,
            context: context_steps(a, spec.r, spec.direction)
                .into_iter()
                .map(|k| t.observations[k].clone())
                .collect(),
        }),
        _ => Err(CliError::Config(format!(
            "step {at} leaves no room for a {:?} window of {} rows and horizon {} in a trajectory of {} records",
            spec.direction,
            spec.r,
            spec.horizon,
            t.len()
        ))),
    }
}

fn check_schema(model: &Model, ds: &Dataset) -> Result<()> {
    let w = &model.spec.window;
    let want_d = ds.meta.state_dim + if w.include_params { 2 } else { 0 };
    let obs_ok = !model.is_conditional() || model.spec.obs_norm.dim() == ds.meta.obs_dim;
    if obs_ok && model.data_dim() == want_d && (!w.include_params || ds.meta.has_params) {
        return Ok(());
    }
    Err(CliError::Run(flowfilter::Error::Incompatible(format!(
        "checkpoint: observation width {}, target width {}, include_params {}; dataset {}: obs_dim {}, state_dim {}, has_params {}",
        model.spec.obs_norm.dim(),
        model.data_dim(),
        w.include_params,
        ds.meta.system,
        ds.meta.obs_dim,
        ds.meta.state_dim,
        ds.meta.has_params
    ))))
}

/// Ground-truth continuations for a vehicle dataset, rebuilt from its sidecar.
fn vehicle_truth(ds: &Dataset, loc: &Location, horizon: usize, n: usize, seed: u64) -> Result<Option<Vec<Vec<f64>>>> {
    if ds.meta.system != "vehicle" || loc.target < loc.at {
        return Ok(None);
    }
    let src: VehicleSource = serde_json::from_value(ds.meta.config.clone())
        .map_err(|e| CliError::Run(flowfilter::Error::Schema(format!("vehicle sidecar: {e}"))))?;
    let run = vehicle_simulate(src.steps, &src.vehicle, src.initial, rng::child_seed(ds.meta.seed, loc.traj as u64));
    let mut draw = rng::stream(seed, 1);
    let truth = (0..n)
        .map(|_| {
            let s = vehicle_continue(&run.noisy[loc.at], loc.at, horizon, &src.vehicle, None, &mut draw);
            vec![s.p_x, s.p_y]
        })
        .collect();
    Ok(Some(truth))
}

fn true_target(model: &Model, ds: &Dataset, loc: &Location) -> Result<Vec<f64>> {
    Ok(target_row(&ds.trajectories[loc.traj], loc.target, model.spec.window.include_params)?)
}

// ---------------------------------------------------------------- estimate

pub fn estimate_cmd(cfg: &RunConfig, model: &Path, data: &Path, traj: usize, at: At, out_dir: &Path) -> Result<EstimateReport> {
    let model = Model::load(model)?;
    let ds = Dataset::read(data)?;
    check_schema(&model, &ds)?;
    let opts = &cfg.estimate;
    let mut report = if model.is_conditional() {
        let t = ds
            .trajectories
            .get(traj)
            .ok_or_else(|| CliError::Config(format!("trajectory {traj} not in dataset ({})", ds.trajectories.len())))?;
        let step = at.step(t)?;
        let loc = locate(&model.spec.window, &ds, traj, step)?;
        let mut report = estimate_state(&model, &loc.context, opts)?;
        let truth_state = true_target(&model, &ds, &loc)?;
        report.nll = Some(point_nll(&model, &loc.context, &truth_state)?);
        if let Some(truth) = vehicle_truth(&ds, &loc, model.spec.window.horizon, cfg.evaluate.truth_samples, opts.seed)? {
            report.score_against(&truth, cfg.kl.k)?;
        }
        report.provenance.location = Some(format!(
            "trajectory {traj}, context ends at step {step} (t = {}), target step {}",
            t.times[step], loc.target
        ));
        report
    } else {
        estimate_state(&model, &[], opts)?
    };
    report.provenance.dataset = Some(ds.id()?);
    write(&out_dir.join("summary.json"), &report.summary_json()?)?;
    write(&out_dir.join("samples.csv"), &report.samples_csv()?)?;
    if !report.contours.is_empty() {
        write(&out_dir.join("contours.csv"), &report.contours_csv()?)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- rollout

#[derive(Serialize)]
struct RolloutSummary {
    checkpoint: String,
    dataset: String,
    trajectory: usize,
    start_step: usize,
    direction: Direction,
    steps: usize,
    seed: u64,
    /// Steps compared against the dataset's states.
    compared_steps: usize,
    mape: Option<f64>,
}

pub fn rollout_cmd(cfg: &RunConfig, model: &Path, data: &Path, traj: usize, at: At, seed: u64, out_dir: &Path) -> Result<f64> {
    let model = Model::load(model)?;
    let ds = Dataset::read(data)?;
    check_schema(&model, &ds)?;
    if model.spec.window.horizon != 1 {
        return Err(CliError::Config(format!(
            "rollout feeds predictions back as the next observation and needs a horizon-1 model (got {})",
            model.spec.window.horizon
        )));
    }
    let t = ds
        .trajectories
        .get(traj)
        .ok_or_else(|| CliError::Config(format!("trajectory {traj} not in dataset")))?;
    let step = at.step(t)?;
    let loc = locate(&model.spec.window, &ds, traj, step)?;
    let steps = rollout(&model, &loc.context, &cfg.rollout, seed)?;
    write(&out_dir.join("bands.csv"), &rollout_bands_csv(&steps)?)?;
    let m = ds.meta.state_dim;
    let (mut pred, mut actual) = (Vec::new(), Vec::new());
    for (k, s) in steps.iter().enumerate() {
        let target = match cfg.rollout.direction {
            Direction::Forward => Some(loc.target + k),
            Direction::Backward => loc.target.checked_sub(k),
        };
        if let Some(row) = target.and_then(|i| t.states.get(i)) {
            pred.extend_from_slice(&s.report.mean[..m]);
            actual.extend_from_slice(row);
        }
    }
    let score = if pred.is_empty() { None } else { mape(&pred, &actual).ok() };
    let summary = RolloutSummary {
        checkpoint: model.id()?,
        dataset: ds.id()?,
        trajectory: traj,
        start_step: step,
        direction: cfg.rollout.direction,
        steps: steps.len(),
        seed,
        compared_steps: pred.len() / m,
        mape: score,
    };
    let mut json = serde_json::to_vec_pretty(&summary).map_err(flowfilter::Error::from)?;
    json.push(b'\n');
    write(&out_dir.join("summary.json"), &json)?;
    Ok(score.unwrap_or(f64::NAN))
}

// ---------------------------------------------------------------- evaluate

/// One checkpoint's scores; `d_*` columns are differences from the first checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub checkpoint: String,
    pub nll: f64,
    pub mape: Option<f64>,
    pub kl: Option<f64>,
}

pub fn evaluate_cmd(cfg: &RunConfig, models: &[PathBuf], data: &Path, out: &Path) -> Result<Vec<EvalRow>> {
    let ds = Dataset::read(data)?;
    let loaded: Vec<(String, Model)> = models
        .iter()
        .map(|p| Ok((p.display().to_string(), Model::load(p)?)))
        .collect::<Result<_>>()?;
    let Some((_, first)) = loaded.first() else {
        return Err(CliError::Config("evaluate needs at least one --model".into()));
    };
    let spec = first.spec.window.clone();
    for (name, m) in &loaded {
        check_schema(m, &ds)?;
        let w = &m.spec.window;
        if (w.r, w.horizon, w.direction, w.include_params) != (spec.r, spec.horizon, spec.direction, spec.include_params) {
            return Err(CliError::Run(flowfilter::Error::Incompatible(format!(
                "{name}: window (r {}, horizon {}, {:?}, params {}) differs from the first checkpoint's (r {}, horizon {}, {:?}, params {})",
                w.r, w.horizon, w.direction, w.include_params, spec.r, spec.horizon, spec.direction, spec.include_params
            ))));
        }
    }
    let ev = &cfg.evaluate;
    let mut pick = rng::stream(ev.seed, 0);
    let candidates: Vec<(usize, usize)> = ds
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| {
            window_positions(t.len(), spec.r, spec.horizon, spec.direction)
                .into_iter()
                .map(move |(anchor, _)| (ti, anchor))
        })
        .collect();
    if candidates.is_empty() && first.is_conditional() {
        return Err(CliError::Run(flowfilter::Error::TrajectoryTooShort {
            length: ds.trajectories.iter().map(Trajectory::len).max().unwrap_or(0),
            required: spec.r + spec.horizon,
        }));
    }
    let locations: Vec<Location> = (0..ev.locations)
        .map(|_| {
            let (ti, anchor) = candidates[pick.random_range(0..candidates.len())];
            let at = match spec.direction {
                Direction::Forward => anchor + spec.r - 1,
                Direction::Backward => anchor + 1 - spec.r,
            };
            locate(&spec, &ds, ti, at)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (name, model) in &loaded {
        let pairs: Vec<(Vec<Vec<f64>>, Vec<f64>)> = locations
            .iter()
            .map(|l| Ok((l.context.clone(), true_target(model, &ds, l)?)))
            .collect::<Result<_>>()?;
        let nll = mean_nll(model, &pairs, &NllOptions { kde_samples: 0, ..cfg.nll.clone() })?.total;
        let (mut pred, mut actual, mut kls) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (l, (_, truth_state))) in locations.iter().zip(&pairs).enumerate() {
            let opts = EstimateOptions {
                seed: rng::child_seed(ev.seed, i as u64),
                contour_levels: Vec::new(),
                ..cfg.estimate.clone()
            };
            let mut report = estimate_state(model, &l.context, &opts)?;
            pred.extend_from_slice(&report.mean);
            actual.extend_from_slice(truth_state);
            if let Some(truth) = vehicle_truth(&ds, l, spec.horizon, ev.truth_samples, opts.seed)? {
                kls.push(report.score_against(&truth, cfg.kl.k)?);
            }
        }
        rows.push(EvalRow {
            checkpoint: format!("{name} ({})", model.id()?),
            nll,
            mape: mape(&pred, &actual).ok(),
            kl: (!kls.is_empty()).then(|| kls.iter().sum::<f64>() / kls.len() as f64),
        });
    }
    write(out, &eval_table(&rows)?)?;
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `checkpoint, nll, mape, kl, d_nll, d_mape, d_kl`.
pub fn eval_table(rows: &[EvalRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["checkpoint", "nll", "mape", "kl", "d_nll", "d_mape", "d_kl"])
        .map_err(flowfilter::Error::from)?;
    let base = &rows[0];
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    for r in rows {
        w.write_record([
            r.checkpoint.clone(),
            r.nll.to_string(),
            cell(r.mape),
            cell(r.kl),
            (r.nll - base.nll).to_string(),
            cell(diff(r.mape, base.mape)),
            cell(diff(r.kl, base.kl)),
        ])
        .map_err(flowfilter::Error::from)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Run(flowfilter::Error::Schema(e.to_string())))
}
