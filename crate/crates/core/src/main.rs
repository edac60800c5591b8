use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aorl::env::{MazeSpec, ACT_DIM, OBS_DIM};
use aorl::experiment::{self, ExperimentConfig, Mode};
use aorl::offline::{self, DeterministicPolicy, OfflineConfig, Td3Bc};
use aorl::planner::WaypointPlanner;
use aorl::repr::{self, Aggregator, ReprConfig, RepresentationEnsemble};
use aorl::{data, eval, rng, Error, Result};

#[derive(Parser)]
#[command(name = "aorl", version, about = "Active trajectory collection for offline RL on a point-mass maze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a behavior dataset with the noisy waypoint planner.
    GenData(GenData),
    /// Remove every trajectory segment near a center point.
    Prune(Prune),
    /// Keep a random fraction of trajectories.
    Subsample(Subsample),
    /// Train a BC policy or a TD3+BC learner on a dataset.
    TrainOffline(TrainOffline),
    /// Train the contrastive representation ensemble on a dataset.
    TrainRepr(TrainRepr),
    /// Run the active collection loop (mode active or active-restricted).
    ActiveCollect {
        /// Start every trajectory from the reset distribution and travel
        /// to the chosen region.
        #[arg(long)]
        restricted: bool,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Fine-tune with data collected by the offline policy from resets.
    Finetune(ExpArgs),
    /// Run the ablation grid of initial-state and exploration arms.
    Ablate(ExpArgs),
    /// Learn from scratch with no offline data.
    Online(ExpArgs),
    /// Run any mode from a configuration file and flags.
    Run {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Roll out a policy or learner checkpoint and report normalized score.
    Evaluate(Evaluate),
    /// Render seed-averaged learning curves from a curves CSV.
    Plot(Plot),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "large")]
    layout: String,
    #[arg(long, default_value_t = 50_000)]
    n: usize,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Prune {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    /// Center as `x,y`; defaults to the layout's goal.
    #[arg(long)]
    center: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Subsample {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Bc,
    Td3bc,
}

#[derive(Args)]
struct TrainOffline {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "td3bc")]
    algo: Algo,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRepr {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// Learner or policy checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "large")]
    layout: String,
    #[arg(long, default_value_t = eval::EVAL_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reference-score cache; computed when missing.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    #[arg(long)]
    curves: PathBuf,
    #[arg(long, default_value = "large")]
    layout: String,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by the experiment verbs. Each one overrides the matching
/// configuration-file value.
#[derive(Args, Default)]
struct ExpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory (default `$AORL_OUT/<mode>-<layout>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[arg(long)]
    offline_checkpoint: Option<PathBuf>,
    #[arg(long)]
    repr_checkpoint: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    prune_radius: Option<f64>,
    #[arg(long)]
    offline_steps: Option<usize>,
    #[arg(long)]
    repr_steps: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    epoch_x: Option<usize>,
    #[arg(long)]
    epoch_y: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    m_samples: Option<usize>,
    #[arg(long)]
    threshold_quantile: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = parse_aggregator)]
    aggregator: Option<Aggregator>,
    /// Comma-separated aggregators compared in ablate mode.
    #[arg(long, value_delimiter = ',', value_parser = parse_aggregator)]
    aggregators: Option<Vec<Aggregator>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    edge_threshold: Option<f64>,
    #[arg(long)]
    switch_radius: Option<f64>,
    /// Comma-separated arm labels such as `A+U,I+P`.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    #[arg(long)]
    online_budget: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_aggregator(s: &str) -> std::result::Result<Aggregator, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ExpArgs {
    fn resolve(self, mode: Option<Mode>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        set(&mut cfg.run.mode, mode);
        set(&mut cfg.run.layout, self.layout);
        set(&mut cfg.run.seeds, self.seed.map(|s| vec![s]));
        set(&mut cfg.run.seeds, self.seeds);
        cfg.run.out_dir = self.out.or(cfg.run.out_dir);
        cfg.run.dataset = self.data.or(cfg.run.dataset);
        cfg.run.candidates = self.candidates.or(cfg.run.candidates);
        cfg.run.offline_checkpoint = self.offline_checkpoint.or(cfg.run.offline_checkpoint);
        cfg.run.repr_checkpoint = self.repr_checkpoint.or(cfg.run.repr_checkpoint);
        set(&mut cfg.run.arms, self.arms.clone());
        if cfg.run.mode == Mode::Online {
            set(&mut cfg.run.online_arms, self.arms);
        }
        set(&mut cfg.run.aggregators, self.aggregators);
        set(&mut cfg.data.n, self.n);
        if self.prune_radius.is_some() {
            cfg.data.prune_radius = self.prune_radius;
        }
        set(&mut cfg.offline.steps, self.offline_steps);
        set(&mut cfg.offline.alpha, self.alpha);
        set(&mut cfg.repr.train_steps, self.repr_steps);
        set(&mut cfg.schedule.budget, self.budget);
        set(&mut cfg.schedule.epoch_transitions, self.epoch_x);
        set(&mut cfg.schedule.epoch_updates, self.epoch_y);
        set(&mut cfg.schedule.eval_episodes, self.eval_episodes);
        set(&mut cfg.online.eval_episodes, self.eval_episodes);
        set(&mut cfg.online.budget, self.online_budget);
        set(&mut cfg.explore.epsilon, self.epsilon);
        set(&mut cfg.explore.noise_scale, self.noise_scale);
        set(&mut cfg.explore.n_action_samples, self.m_samples);
        set(&mut cfg.explore.threshold_quantile, self.threshold_quantile);
        if self.threshold.is_some() {
            cfg.explore.uncertainty_threshold = self.threshold;
        }
        set(&mut cfg.explore.aggregator, self.aggregator);
        set(&mut cfg.restricted.max_nodes, self.max_nodes);
        set(&mut cfg.restricted.edge_threshold, self.edge_threshold);
        set(&mut cfg.restricted.switch_radius, self.switch_radius);
        Ok(cfg)
    }
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn load_section<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>, pick: impl Fn(ExperimentConfig) -> T) -> Result<T> {
    match path {
        Some(p) => ExperimentConfig::load(p).map(pick),
        None => Ok(T::default()),
    }
}

fn layout_of(d: &data::Dataset) -> Result<MazeSpec> {
    MazeSpec::resolve(&d.layout_name)
}

fn run_experiment(exp: ExpArgs, mode: Option<Mode>) -> std::result::Result<(), Failure> {
    let quiet = exp.quiet;
    let cfg = exp.resolve(mode).map_err(Failure::Config)?;
    cfg.validate().map_err(Failure::Config)?;
    let mut progress = |msg: &str| {
        if !quiet {
            eprintln!("[{}] {msg}", cfg.run.mode.name());
        }
    };
    let summary = experiment::run_experiment(&cfg, &mut progress)?;
    print!("{}", experiment::report_csv(&summary.report));
    if !quiet {
        eprintln!("artifacts in {}", summary.out_dir.display());
    }
    Ok(())
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenData(a) => {
            let spec = MazeSpec::resolve(&a.layout).map_err(Failure::Config)?;
            let mut behavior = WaypointPlanner::behavior(&spec, a.sigma)?;
            let d = data::collect_behavior_dataset(&spec, &mut behavior, a.n, &mut rng::stream(a.seed, "data"))?;
            d.save(&a.out)?;
            eprintln!("{} transitions in {} trajectories", d.len(), d.n_trajectories());
        }
        Command::Prune(a) => {
            let d = data::Dataset::load(&a.data)?;
            let center = match a.center {
                Some(c) => parse_point(&c).map_err(Failure::Config)?,
                None => layout_of(&d)?.goal,
            };
            let pruned = data::prune_near_goal(&d, center, a.radius)?;
            pruned.save(&a.out)?;
            eprintln!("kept {} of {} transitions", pruned.len(), d.len());
        }
        Command::Subsample(a) => {
            let d = data::Dataset::load(&a.data)?;
            let kept = data::subsample_trajectories(&d, a.fraction, &mut rng::stream(a.seed, "subsample"))?;
            kept.save(&a.out)?;
            eprintln!("kept {} of {} trajectories", kept.n_trajectories(), d.n_trajectories());
        }
        Command::TrainOffline(a) => {
            let mut cfg: OfflineConfig = load_section(&a.config, |c| c.offline).map_err(Failure::Config)?;
            set(&mut cfg.steps, a.steps);
            set(&mut cfg.alpha, a.alpha);
            cfg.validate().map_err(Failure::Config)?;
            let d = data::Dataset::load(&a.data)?;
            let spec = layout_of(&d)?;
            let mut r = rng::stream(a.seed, "offline");
            match a.algo {
                Algo::Bc => offline::bc_train(&d, spec.max_force, &cfg, &mut r)?.save(&a.out)?,
                Algo::Td3bc => offline::td3bc_train(&d, spec.max_force, &cfg, &mut r)?.save(&a.out)?,
            }
        }
        Command::TrainRepr(a) => {
            let mut cfg: ReprConfig = load_section(&a.config, |c| c.repr).map_err(Failure::Config)?;
            set(&mut cfg.train_steps, a.steps);
            let d = data::Dataset::load(&a.data)?;
            let mut e = RepresentationEnsemble::new(OBS_DIM, ACT_DIM, &cfg, rng::derive_seed(a.seed, "repr/init"))?;
            repr::train_ensemble(&mut e, &d, cfg.train_steps, cfg.batch_size, &mut rng::stream(a.seed, "repr/train"))?;
            e.save(&a.out)?;
        }
        Command::ActiveCollect { restricted, exp } => {
            let mode = if restricted { Mode::ActiveRestricted } else { Mode::Active };
            run_experiment(exp, Some(mode))?;
        }
        Command::Finetune(exp) => run_experiment(exp, Some(Mode::Ft))?,
        Command::Ablate(exp) => run_experiment(exp, Some(Mode::Ablate))?,
        Command::Online(exp) => run_experiment(exp, Some(Mode::Online))?,
        Command::Run { mode, exp } => {
            if exp.config.is_none() && mode.is_none() {
                return Err(Failure::Config(Error::Config {
                    key: "run.mode".into(),
                    message: "give --config or --mode".into(),
                }));
            }
            run_experiment(exp, mode)?;
        }
        Command::Evaluate(a) => {
            let spec = MazeSpec::resolve(&a.layout).map_err(Failure::Config)?;
            let mut policy = load_policy(&a.checkpoint)?;
            let refs = match &a.reference {
                Some(p) => eval::ReferenceScores::cached(
                    &spec,
                    p,
                    eval::REFERENCE_EPISODES,
                    &mut rng::stream(0, &format!("reference/{}", spec.layout_name)),
                )?,
                None => eval::compute_reference_scores(
                    &spec,
                    eval::REFERENCE_EPISODES,
                    &mut rng::stream(0, &format!("reference/{}", spec.layout_name)),
                )?,
            };
            let report = eval::evaluate(&spec, &mut policy, a.episodes, &refs, &mut rng::stream(a.seed, "eval"))?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Plot(a) => {
            let text = std::fs::read_to_string(&a.curves).map_err(|e| Error::io(&a.curves, e))?;
            let curves = eval::read_curves_csv(&text, &a.layout)?;
            std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let (svg, csv) = eval::emit_plots(&curves, &a.out)?;
            eprintln!("wrote {} and {}", svg.display(), csv.display());
        }
    }
    Ok(())
}

fn parse_point(s: &str) -> Result<[f64; 2]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config {
            key: "center".into(),
            message: e.to_string(),
        })?;
    match parts[..] {
        [x, y] => Ok([x, y]),
        _ => Err(Error::Config {
            key: "center".into(),
            message: format!("expected `x,y`, got `{s}`"),
        }),
    }
}

fn load_policy(path: &Path) -> Result<DeterministicPolicy> {
    Td3Bc::load(path)
        .map(|l| l.policy)
        .or_else(|_| DeterministicPolicy::load(path))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
