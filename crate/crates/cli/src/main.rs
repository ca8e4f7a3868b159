use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowfilter::dynamics::Direction;
use flowfilter::encoders::EncoderKind;
use flowfilter::inference::Aggregation;
use flowfilter_cli::{
    estimate_cmd, evaluate_cmd, ingest, out_path, rollout_cmd, simulate, train_cmd, At, Result, RunConfig,
    System,
};

#[derive(Parser)]
#[command(name = "flowfilter", version, about = "Conditional normalizing flows for state estimation")]
struct Cli {
    /// TOML file overriding the built-in defaults; flags override the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration for the command and exit.
    #[arg(long, global = true)]
    show_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (CSV plus metadata sidecar).
    Simulate(SimulateArgs),
    /// Validate and standardize an external `date,S,I,R` file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write the checkpoint and loss log.
    Train(TrainArgs),
    /// Sample the state density at one trajectory location.
    Estimate(EstimateArgs),
    /// Recursive multi-step prediction with uncertainty bands.
    Rollout(RolloutArgs),
    /// Score checkpoints on a dataset and write a comparison table.
    Evaluate(EvaluateArgs),
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    system: Option<System>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Vehicle velocity noise.
    #[arg(long)]
    sigma_v: Option<f64>,
    /// Vehicle angular-acceleration noise.
    #[arg(long)]
    sigma_phi: Option<f64>,
    /// Fix the vehicle switch value instead of drawing it.
    #[arg(long, allow_hyphen_values = true)]
    psi: Option<f64>,
    /// SIR observation noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Two-moons point count.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss CSV; defaults to the checkpoint path with a `.loss.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    nll_lambda: Option<f64>,
    #[arg(long)]
    kinetic_lambda: Option<f64>,
    #[arg(long)]
    prior_lambda: Option<f64>,
    /// Seeds training, initialization and context noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Context rows R.
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    direction: Option<Direction>,
    #[arg(long)]
    include_params: bool,
    #[arg(long)]
    context_noise: Option<f64>,
    #[arg(long)]
    flow_layers: Option<usize>,
    /// Record real wall-clock times in the loss log (makes it run-dependent).
    #[arg(long)]
    wallclock: bool,
}

#[derive(Args)]
struct Location {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    traj: usize,
    /// Context row nearest the target: `t=5.5`, `step=55` or `55`.
    #[arg(long)]
    at: At,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    loc: Location,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    loc: Location,
    /// Rollout length in steps (7 and 28 mirror the weekly and four-week views).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    direction: Option<Direction>,
    #[arg(long)]
    aggregation: Option<Aggregation>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    locations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_location(cfg: &mut RunConfig, loc: &Location) {
    set(&mut cfg.estimate.n_samples, loc.samples);
    set(&mut cfg.rollout.n_samples, loc.samples);
    set(&mut cfg.estimate.seed, loc.seed);
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Simulate(a) => {
            set(&mut cfg.simulate.system, a.system);
            set(&mut cfg.simulate.trajectories, a.trajectories);
            set(&mut cfg.simulate.steps, a.steps);
            set(&mut cfg.simulate.seed, a.seed);
            set(&mut cfg.vehicle.sigma_v, a.sigma_v);
            set(&mut cfg.vehicle.sigma_phi, a.sigma_phi);
            set(&mut cfg.vehicle.psi, a.psi.map(Some));
            set(&mut cfg.sir.noise_sigma, a.noise);
            set(&mut cfg.moons.points, a.points);
        }
        Command::Train(a) => {
            set(&mut cfg.encoder.kind, a.encoder);
            set(&mut cfg.train.iterations, a.iterations);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.learning_rate, a.lr);
            set(&mut cfg.train.loss_weights.lambda1, a.nll_lambda);
            set(&mut cfg.train.loss_weights.lambda2, a.kinetic_lambda);
            set(&mut cfg.train.loss_weights.lambda3, a.prior_lambda);
            if let Some(s) = a.seed {
                cfg.train.seed = s;
                cfg.flow.seed = s;
                cfg.encoder.seed = s;
                cfg.window.seed = s;
            }
            set(&mut cfg.window.r, a.context);
            set(&mut cfg.window.horizon, a.horizon);
            set(&mut cfg.window.direction, a.direction);
            cfg.window.include_params |= a.include_params;
            set(&mut cfg.window.context_noise_sigma, a.context_noise);
            set(&mut cfg.flow.n_layers, a.flow_layers);
        }
        Command::Estimate(a) => apply_location(&mut cfg, &a.loc),
        Command::Rollout(a) => {
            apply_location(&mut cfg, &a.loc);
            set(&mut cfg.rollout.n_steps, a.window);
            set(&mut cfg.rollout.direction, a.direction);
            set(&mut cfg.rollout.aggregation, a.aggregation);
        }
        Command::Evaluate(a) => {
            set(&mut cfg.evaluate.locations, a.locations);
            set(&mut cfg.evaluate.seed, a.seed);
        }
        Command::Ingest { .. } | Command::ShowConfig => {}
    }
    if cli.show_config || matches!(cli.command, Command::ShowConfig) {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    match cli.command {
        Command::Simulate(a) => {
            let out = a.out.unwrap_or_else(|| out_path(&format!("data/{}.csv", cfg.simulate.system.name())));
            let ds = simulate(&cfg, &out)?;
            println!("wrote {} ({} records)", out.display(), ds.n_records());
        }
        Command::Ingest { input, out } => {
            let out = out.unwrap_or_else(|| out_path("data/ingested.csv"));
            let ds = ingest(&input, &out)?;
            println!("wrote {} ({} records)", out.display(), ds.n_records());
        }
        Command::Train(a) => {
            let out = a.out.unwrap_or_else(|| out_path("model.ffck"));
            let log = a.log.unwrap_or_else(|| out.with_extension("loss.csv"));
            let t = train_cmd(&cfg, &a.data, &out, &log, a.wallclock)?;
            let last = t.log.records.last().map(|r| r.terms);
            match last {
                Some(x) => println!(
                    "final loss {:.6} (nll {:.6}, kinetic {:.6}, prior {:.6})",
                    x.total, x.nll, x.kinetic, x.prior
                ),
                None => println!("no iterations run; wrote untrained checkpoint"),
            }
            println!("wrote {} and {}", out.display(), log.display());
        }
        Command::Estimate(a) => {
            let dir = a.loc.out_dir.clone().unwrap_or_else(|| out_path("estimate"));
            let r = estimate_cmd(&cfg, &a.loc.model, &a.loc.data, a.loc.traj, a.loc.at, &dir)?;
            println!("mean {:?} std {:?}", r.mean, r.std);
            if let Some(kl) = r.kl {
                println!("kl {kl:.6}");
            }
            println!("wrote {}", dir.display());
        }
        Command::Rollout(a) => {
            let dir = a.loc.out_dir.clone().unwrap_or_else(|| out_path("rollout"));
            let seed = cfg.estimate.seed;
            let score = rollout_cmd(&cfg, &a.loc.model, &a.loc.data, a.loc.traj, a.loc.at, seed, &dir)?;
            if score.is_finite() {
                println!("mape {score:.4}%");
            }
            println!("wrote {}", dir.display());
        }
        Command::Evaluate(a) => {
            let out = a.out.unwrap_or_else(|| out_path("evaluation.csv"));
            let rows = evaluate_cmd(&cfg, &a.models, &a.data, &out)?;
            for r in rows {
                println!("{}: nll {:.6}", r.checkpoint, r.nll);
            }
            println!("wrote {}", out.display());
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
