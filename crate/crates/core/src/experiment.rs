//! Experiment configuration and the staged per-seed pipeline behind the
//! command-line tool: dataset, reference anchors, offline learner,
//! representation ensemble, then the selected collection mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active::{self, ArmSpec, ExplorationConfig, LoopConfig, LoopInputs, LoopOutcome, OnlineConfig};
use crate::baselines::{self, DistillConfig, SeedStart};
use crate::data::{self, Dataset};
use crate::env::{EnvState, MazeSpec, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::eval::{self, LearningCurve, Reduction, ReferenceScores};
use crate::offline::{self, OfflineConfig, Td3Bc};
use crate::planner::WaypointPlanner;
use crate::repr::{self, Aggregator, ReprConfig, RepresentationEnsemble};
use crate::restricted::{RestrictedConfig, TravelPlan};
use crate::rng;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "AORL_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Offline,
    Ft,
    Active,
    ActiveRestricted,
    Online,
    Ablate,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Offline => "offline",
            Mode::Ft => "ft",
            Mode::Active => "active",
            Mode::ActiveRestricted => "active-restricted",
            Mode::Online => "online",
            Mode::Ablate => "ablate",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::Offline, Mode::Ft, Mode::Active, Mode::ActiveRestricted, Mode::Online, Mode::Ablate]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Built-in layout name or path to a layout file.
    pub layout: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Output directory; defaults to `$AORL_OUT/<mode>-<layout>`.
    pub out_dir: Option<PathBuf>,
    /// Offline dataset used as-is instead of generating one.
    pub dataset: Option<PathBuf>,
    /// Dataset whose states form the candidate pool; defaults to the
    /// unpruned generated dataset, or `dataset` when that is given.
    pub candidates: Option<PathBuf>,
    pub offline_checkpoint: Option<PathBuf>,
    pub repr_checkpoint: Option<PathBuf>,
    /// Arms of the ablation grid.
    pub arms: Vec<String>,
    /// Arms compared from scratch in online mode.
    pub online_arms: Vec<String>,
    /// Aggregators compared with the active arm in ablate mode.
    pub aggregators: Vec<Aggregator>,
    pub reference_episodes: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            layout: "large".into(),
            mode: Mode::Active,
            seeds: vec![0],
            out_dir: None,
            dataset: None,
            candidates: None,
            offline_checkpoint: None,
            repr_checkpoint: None,
            arms: baselines::ABLATION_ARMS.iter().map(|a| a.label()).collect(),
            online_arms: vec!["A+U".into(), "I+P".into()],
            aggregators: Vec::new(),
            reference_episodes: eval::REFERENCE_EPISODES,
        }
    }
}

/// How the offline dataset is generated when none is supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    /// Action noise of the waypoint behavior policy.
    pub sigma: f64,
    /// Radius of the disc around the goal removed from the dataset; 0 keeps it.
    pub prune_radius: Option<f64>,
    /// Fraction of trajectories kept.
    pub subsample: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 50_000,
            sigma: 0.2,
            prune_radius: Some(3.0),
            subsample: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub offline: OfflineConfig,
    pub repr: ReprConfig,
    pub explore: ExplorationConfig,
    pub schedule: LoopConfig,
    pub restricted: RestrictedConfig,
    pub online: OnlineConfig,
    pub distill: DistillConfig,
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .and_then(|s| text.get(s))
                .map(|k| k.trim().to_string())
                .unwrap_or_default();
            config_error(&key, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.seeds.is_empty() {
            return Err(config_error("run.seeds", "at least one seed is required"));
        }
        MazeSpec::resolve(&r.layout).map_err(|e| config_error("run.layout", e.to_string()))?;
        for (key, p) in [
            ("run.dataset", &r.dataset),
            ("run.candidates", &r.candidates),
            ("run.offline_checkpoint", &r.offline_checkpoint),
            ("run.repr_checkpoint", &r.repr_checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(config_error(key, format!("{} does not exist", p.display())));
                }
            }
        }
        if r.reference_episodes == 0 {
            return Err(config_error("run.reference_episodes", "must be positive"));
        }
        self.arms().map_err(|e| config_error("run.arms", e.to_string()))?;
        self.online_arms()
            .map_err(|e| config_error("run.online_arms", e.to_string()))?;
        if self.data.n == 0 {
            return Err(config_error("data.n", "must be positive"));
        }
        let wrap = |key: &str, res: Result<()>| res.map_err(|e| config_error(key, e.to_string()));
        wrap("offline", self.offline.validate())?;
        wrap("explore", self.explore.validate())?;
        wrap("schedule", self.schedule.validate())?;
        Ok(())
    }

    pub fn arms(&self) -> Result<Vec<ArmSpec>> {
        baselines::parse_ablation_arms(&self.run.arms.join(","))
    }

    pub fn online_arms(&self) -> Result<Vec<ArmSpec>> {
        self.run.online_arms.iter().map(|a| a.parse()).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.run.out_dir.clone().unwrap_or_else(|| {
            let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(format!("{}-{}", self.run.mode.name(), layout_stem(&self.run.layout)))
        })
    }
}

fn layout_stem(layout: &str) -> String {
    Path::new(layout)
        .file_stem()
        .map_or_else(|| layout.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Provenance record written when a run starts and finalized when it ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: String,
    pub started_unix: u64,
    pub wall_clock_secs: Option<f64>,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Relative path to SHA-256 of every emitted file.
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn start(cfg: &ExperimentConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.to_toml(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            wall_clock_secs: None,
            status: "running".into(),
            failed_stage: None,
            error: None,
            checksums: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Checksums of every file under `dir` except the manifest itself.
pub fn checksum_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != RunManifest::FILE) {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&p)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Attaches a stage name to an error.
pub fn in_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reference anchors for `spec`, cached at `<out>/reference_<layout>.json`.
pub fn reference_scores(spec: &MazeSpec, cfg: &ExperimentConfig, out: &Path) -> Result<ReferenceScores> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(format!("reference_{}.json", spec.layout_name));
    let mut r = rng::stream(0, &format!("reference/{}", spec.layout_name));
    ReferenceScores::cached(spec, &path, cfg.run.reference_episodes, &mut r)
}

/// Behavior data for `seed`: the unpruned dataset and the offline dataset
/// after pruning and subsampling.
pub fn generate_datasets(spec: &MazeSpec, cfg: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut r = rng::stream(seed, "data");
    let mut behavior = WaypointPlanner::behavior(spec, cfg.sigma)?;
    let full = data::collect_behavior_dataset(spec, &mut behavior, cfg.n, &mut r)?;
    let mut d0 = match cfg.prune_radius {
        Some(radius) if radius > 0.0 => data::prune_near_goal(&full, spec.goal, radius)?,
        _ => full.clone(),
    };
    if let Some(f) = cfg.subsample {
        d0 = data::subsample_trajectories(&d0, f, &mut rng::stream(seed, "subsample"))?;
    }
    Ok((full, d0))
}

/// One seed's shared starting point.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub d0: Dataset,
    pub candidates: Vec<EnvState>,
    pub learner: Td3Bc,
    pub ensemble: RepresentationEnsemble,
}

/// Loads each stage's artifact from `dir` when present, otherwise builds
/// and saves it. Explicit paths in the configuration take precedence.
pub fn prepare_seed(
    spec: &MazeSpec,
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<Prepared> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d0_path = dir.join("dataset.txt");
    let full_path = dir.join("dataset_full.txt");
    let (d0, full) = in_stage("data", (|| {
        if let Some(p) = &cfg.run.dataset {
            let d0 = Dataset::load(p)?;
            let full = match &cfg.run.candidates {
                Some(c) => Dataset::load(c)?,
                None => d0.clone(),
            };
            return Ok((d0, full));
        }
        if d0_path.exists() && full_path.exists() {
            progress("data: reusing stored datasets");
            return Ok((Dataset::load(&d0_path)?, Dataset::load(&full_path)?));
        }
        progress("data: generating behavior dataset");
        let (full, d0) = generate_datasets(spec, &cfg.data, seed)?;
        full.save(&full_path)?;
        d0.save(&d0_path)?;
        Ok((d0, full))
    })())?;
    let full = match &cfg.run.candidates {
        Some(c) if cfg.run.dataset.is_none() => in_stage("data", Dataset::load(c))?,
        _ => full,
    };
    let candidates = in_stage("data", full.states())?;

    let learner_path = dir.join("offline.ckpt");
    let learner = in_stage("offline", (|| {
        if let Some(p) = &cfg.run.offline_checkpoint {
            return Td3Bc::load(p);
        }
        if learner_path.exists() {
            progress("offline: reusing stored learner");
            return Td3Bc::load(&learner_path);
        }
        progress(&format!("offline: {} TD3+BC updates", cfg.offline.steps));
        let l = offline::td3bc_train(&d0, spec.max_force, &cfg.offline, &mut rng::stream(seed, "offline"))?;
        l.save(&learner_path)?;
        Ok(l)
    })())?;

    let repr_path = dir.join("repr.ckpt");
    let ensemble = in_stage("repr", (|| {
        if let Some(p) = &cfg.run.repr_checkpoint {
            return RepresentationEnsemble::load(p);
        }
        if repr_path.exists() {
            progress("repr: reusing stored ensemble");
            return RepresentationEnsemble::load(&repr_path);
        }
        progress(&format!("repr: {} contrastive updates", cfg.repr.train_steps));
        let mut e = RepresentationEnsemble::new(OBS_DIM, ACT_DIM, &cfg.repr, rng::derive_seed(seed, "repr/init"))?;
        repr::train_ensemble(
            &mut e,
            &d0,
            cfg.repr.train_steps,
            cfg.repr.batch_size,
            &mut rng::stream(seed, "repr/train"),
        )?;
        e.save(&repr_path)?;
        Ok(e)
    })())?;

    Ok(Prepared {
        seed,
        d0,
        candidates,
        learner,
        ensemble,
    })
}

/// Per-method summary row of `report.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub normalized: f64,
    pub reduction: Option<Reduction>,
}

/// Final-return statistics per method, with the interaction reduction
/// against `baseline` computed on seed-averaged curves.
pub fn report_rows(
    curves: &[LearningCurve],
    finals: &[(String, f64, f64)],
    baseline: Option<&str>,
) -> Result<Vec<ReportRow>> {
    let bands = eval::aggregate_curves(curves);
    let mean_curve = |label: &str| -> Option<LearningCurve> {
        let band = bands.get(label)?;
        let mut c = LearningCurve::new(label, 0, "");
        for b in band {
            c.push(b.env_steps, b.mean).ok()?;
        }
        Some(c)
    };
    let base = baseline.and_then(mean_curve);
    let mut methods: Vec<&str> = Vec::new();
    for (m, _, _) in finals {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let returns: Vec<f64> = finals.iter().filter(|f| f.0 == m).map(|f| f.1).collect();
            let scores: Vec<f64> = finals.iter().filter(|f| f.0 == m).map(|f| f.2).collect();
            let (mean, std) = eval::mean_std(&returns);
            let (normalized, _) = eval::mean_std(&scores);
            let reduction = match (&base, mean_curve(m)) {
                (Some(b), Some(c)) if Some(m) != baseline && !c.points.is_empty() => {
                    Some(eval::interaction_reduction(&c, b)?)
                }
                _ => None,
            };
            Ok(ReportRow {
                method: m.to_string(),
                mean,
                std,
                normalized,
                reduction,
            })
        })
        .collect()
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("method,mean,std,normalized,reduction_pct\n");
    for r in rows {
        let red = r.reduction.map_or_else(|| "-".to_string(), |x| x.to_string());
        let _ = writeln!(out, "{},{},{},{},{}", r.method, r.mean, r.std, r.normalized, red);
    }
    out
}

/// What a completed run produced.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub curves: Vec<LearningCurve>,
    pub report: Vec<ReportRow>,
    pub arm_results: Vec<baselines::ArmResult>,
    pub aggregator_results: Vec<AggregatorResult>,
    pub out_dir: PathBuf,
}

/// Final score of the active arm run with one aggregator on one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorResult {
    pub aggregator: Aggregator,
    pub seed: u64,
    pub final_score: f64,
}

pub fn aggregator_label(agg: Aggregator) -> String {
    format!("A+U[{agg}]")
}

/// One row per aggregator in `Aggregator::ALL` order: seed count, mean and
/// standard deviation of the final normalized score.
pub fn aggregator_csv(results: &[AggregatorResult]) -> String {
    let mut out = String::from("aggregator,n_seeds,mean_final_score,std_final_score\n");
    for agg in Aggregator::ALL {
        let scores: Vec<f64> = results.iter().filter(|r| r.aggregator == agg).map(|r| r.final_score).collect();
        if scores.is_empty() {
            continue;
        }
        let (m, sd) = eval::mean_std(&scores);
        let _ = writeln!(out, "{agg},{},{m},{sd}", scores.len());
    }
    out
}

fn save_outcome(dir: &Path, run: &LoopOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("curve.csv"), &run.curve_csv())?;
    write_text(&dir.join("log.jsonl"), &run.log.to_jsonl())?;
    run.learner.save(&dir.join("learner.ckpt"))?;
    run.learner.policy.save(&dir.join("policy.ckpt"))
}

fn arm_dir_name(arm: &ArmSpec) -> String {
    arm.label().replace('+', "_")
}

/// Runs `cfg.run.mode` for every seed and writes all artifacts plus the
/// manifest into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut manifest = RunManifest::start(cfg);
    manifest.write(&out)?;
    let t0 = Instant::now();
    let result = execute(cfg, &out, progress);
    manifest.wall_clock_secs = Some(t0.elapsed().as_secs_f64());
    match &result {
        Ok(_) => manifest.status = "ok".into(),
        Err(e) => {
            manifest.status = "failed".into();
            if let Error::Stage { stage, .. } = e {
                manifest.failed_stage = Some(stage.clone());
            }
            manifest.error = Some(e.to_string());
        }
    }
    manifest.checksums = checksum_tree(&out)?;
    manifest.write(&out)?;
    result
}

fn execute(cfg: &ExperimentConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    let spec = in_stage("layout", MazeSpec::resolve(&cfg.run.layout))?;
    let refs = in_stage("reference", reference_scores(&spec, cfg, out))?;
    let mut summary = RunSummary {
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    let mut finals: Vec<(String, f64, f64)> = Vec::new();
    let mut agg_results = Vec::new();
    let mut active_runs: BTreeMap<u64, (LearningCurve, f64, f64)> = BTreeMap::new();
    let mut baseline = None;

    if cfg.run.mode == Mode::Online {
        for &seed in &cfg.run.seeds {
            for arm in cfg.online_arms()? {
                progress(&format!("online {arm} seed {seed}"));
                let run = in_stage(
                    "online",
                    active::online_loop(
                        arm,
                        &spec,
                        &refs,
                        &cfg.offline,
                        &cfg.repr,
                        &cfg.explore,
                        &cfg.online,
                        rng::derive_seed(seed, "online"),
                    ),
                )?;
                let mut curve = run.curve.clone();
                curve.seed = seed;
                in_stage(
                    "write",
                    save_outcome(&out.join(format!("seed_{seed}")).join(format!("online_{}", arm_dir_name(&arm))), &run),
                )?;
                if let Some(e) = run.epochs.last() {
                    finals.push((curve.method_label.clone(), e.mean_return, e.normalized_score));
                }
                summary.curves.push(curve);
            }
        }
        baseline = cfg
            .online_arms()?
            .into_iter()
            .find(|a| *a == ArmSpec::FINETUNE)
            .map(|a| format!("online {}", a.label()));
    } else {
        for &seed in &cfg.run.seeds {
            let seed_dir = out.join(format!("seed_{seed}"));
            let prepared = prepare_seed(&spec, cfg, seed, &seed_dir, progress)?;
            if cfg.run.mode == Mode::Offline {
                let report = in_stage(
                    "evaluate",
                    eval::evaluate(
                        &spec,
                        &mut prepared.learner.policy.clone(),
                        cfg.schedule.eval_episodes,
                        &refs,
                        &mut rng::stream(seed, "eval/offline"),
                    ),
                )?;
                progress(&format!("offline seed {seed}: normalized {:.2}", report.normalized_score));
                finals.push(("offline".into(), report.mean_return, report.normalized_score));
                continue;
            }
            let travel = if cfg.run.mode == Mode::ActiveRestricted {
                let path = seed_dir.join("travel.ckpt");
                let plan = in_stage("restricted", (|| {
                    if path.exists() {
                        return TravelPlan::load(&path);
                    }
                    progress("restricted: graph, clustering and goal policy");
                    let plan = TravelPlan::build(
                        &prepared.d0,
                        spec.max_force,
                        &cfg.restricted,
                        &cfg.offline,
                        &mut rng::stream(seed, "restricted"),
                    )?;
                    plan.save(&path)?;
                    write_text(&seed_dir.join("clusters.csv"), &plan.clustering.to_csv(&plan.graph))?;
                    Ok(plan)
                })())?;
                Some(plan)
            } else {
                None
            };
            let arms: Vec<ArmSpec> = match cfg.run.mode {
                Mode::Ft => vec![ArmSpec::FINETUNE],
                Mode::Active => vec![ArmSpec::ACTIVE],
                Mode::ActiveRestricted => vec![ArmSpec {
                    init: active::InitMode::Restricted,
                    explore: active::ExploreMode::Uncertainty,
                }],
                Mode::Ablate => cfg.arms()?,
                Mode::Offline | Mode::Online => unreachable!(),
            };
            let inputs = LoopInputs {
                spec: &spec,
                refs: &refs,
                candidates: &prepared.candidates,
                offline: &cfg.offline,
                repr: &cfg.repr,
                explore: &cfg.explore,
                schedule: &cfg.schedule,
                distilled: None,
                travel: travel.as_ref(),
                seed,
            };
            let start = SeedStart {
                seed,
                learner: prepared.learner.clone(),
                ensemble: prepared.ensemble.clone(),
            };
            let mut write_err = None;
            let results = in_stage(
                "collect",
                baselines::run_grid(&arms, std::slice::from_ref(&start), &prepared.d0, &inputs, |arm, s, run| {
                    progress(&format!(
                        "{arm} seed {}: final normalized {:.2}",
                        s.seed,
                        run.epochs.last().map_or(f64::NAN, |e| e.normalized_score)
                    ));
                    let mut curve = run.curve.clone();
                    curve.seed = s.seed;
                    if let Some(e) = run.epochs.last() {
                        finals.push((arm.label(), e.mean_return, e.normalized_score));
                        if *arm == ArmSpec::ACTIVE {
                            active_runs.insert(s.seed, (curve.clone(), e.mean_return, e.normalized_score));
                        }
                    }
                    summary.curves.push(curve);
                    if let Err(e) = save_outcome(&seed_dir.join(arm_dir_name(arm)), run) {
                        write_err.get_or_insert(e);
                    }
                }),
            )?;
            if let Some(e) = write_err {
                return Err(in_stage::<()>("write", Err(e)).unwrap_err());
            }
            summary.arm_results.extend(results);
            if cfg.run.mode == Mode::Ablate {
                for &agg in &cfg.run.aggregators {
                    let explore = ExplorationConfig {
                        aggregator: agg,
                        ..cfg.explore.clone()
                    };
                    let inputs = LoopInputs {
                        explore: &explore,
                        seed: rng::derive_seed(seed, &format!("arm/{}", ArmSpec::ACTIVE)),
                        ..inputs
                    };
                    let label = aggregator_label(agg);
                    // The configured aggregator with the same arm seed is the
                    // grid's own active run.
                    if agg == cfg.explore.aggregator {
                        if let Some((curve, ret, score)) = active_runs.get(&seed).cloned() {
                            let mut curve = curve;
                            curve.method_label = label.clone();
                            agg_results.push(AggregatorResult {
                                aggregator: agg,
                                seed,
                                final_score: score,
                            });
                            finals.push((label, ret, score));
                            summary.curves.push(curve);
                            continue;
                        }
                    }
                    progress(&format!("{label} seed {seed}"));
                    let run = in_stage(
                        "collect",
                        active::run_arm(
                            ArmSpec::ACTIVE,
                            &prepared.d0,
                            prepared.learner.clone(),
                            Some(prepared.ensemble.clone()),
                            &inputs,
                        ),
                    )?;
                    let mut curve = run.curve.clone();
                    curve.method_label = label.clone();
                    curve.seed = seed;
                    in_stage("write", save_outcome(&seed_dir.join(format!("A_U_{agg}")), &run))?;
                    let last = run.epochs.last();
                    agg_results.push(AggregatorResult {
                        aggregator: agg,
                        seed,
                        final_score: last.map_or(f64::NAN, |e| e.normalized_score),
                    });
                    if let Some(e) = last {
                        finals.push((label, e.mean_return, e.normalized_score));
                    }
                    summary.curves.push(curve);
                }
            }
        }
        if cfg.run.mode == Mode::Ablate {
            in_stage("write", write_text(&out.join("ablation.csv"), &baselines::ablation_csv(&summary.arm_results)))?;
            in_stage("write", write_text(&out.join("ablation_runs.csv"), &baselines::results_csv(&summary.arm_results)))?;
            if !agg_results.is_empty() {
                in_stage("write", write_text(&out.join("aggregators.csv"), &aggregator_csv(&agg_results)))?;
            }
            baseline = Some(ArmSpec::FINETUNE.label());
        }
        summary.aggregator_results = agg_results;
    }

    summary.report = in_stage("report", report_rows(&summary.curves, &finals, baseline.as_deref()))?;
    in_stage("write", write_text(&out.join("report.csv"), &report_csv(&summary.report)))?;
    if !summary.curves.is_empty() {
        in_stage("write", write_text(&out.join("curves.csv"), &eval::curves_csv(&summary.curves)))?;
        in_stage("plot", eval::emit_plots(&summary.curves, out))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let minimal = ExperimentConfig::from_toml("[run]\nlayout = \"umaze\"\n").unwrap();
        assert_eq!(minimal.run.layout, "umaze");
        assert_eq!(minimal.explore, ExplorationConfig::default());
        assert_eq!(minimal.offline, OfflineConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml("[explore]\nepsilonn = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
        let err = ExperimentConfig::from_toml("[nope]\n").unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn validation_checks_paths_and_seeds() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.run.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = ExperimentConfig::default();
        cfg.run.dataset = Some(PathBuf::from("/definitely/not/here.txt"));
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("run.dataset"));
        let mut cfg = ExperimentConfig::default();
        cfg.run.arms = vec!["Q+U".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn modes_parse() {
        for m in ["offline", "ft", "active", "active-restricted", "online", "ablate"] {
            assert_eq!(m.parse::<Mode>().unwrap().name(), m);
        }
        assert!("other".parse::<Mode>().is_err());
    }

    #[test]
    fn report_reduction_against_baseline() {
        let mut ft = LearningCurve::new("I+P", 0, "large");
        ft.push(2000, 10.0).unwrap();
        ft.push(8000, 50.0).unwrap();
        let mut act = LearningCurve::new("A+U", 0, "large");
        act.push(2000, 50.0).unwrap();
        act.push(8000, 60.0).unwrap();
        let finals = vec![("A+U".to_string(), 100.0, 60.0), ("I+P".to_string(), 90.0, 50.0)];
        let rows = report_rows(&[ft, act], &finals, Some("I+P")).unwrap();
        assert_eq!(rows[0].reduction, Some(Reduction::Percent(75.0)));
        assert_eq!(rows[1].reduction, None);
        let csv = report_csv(&rows);
        assert!(csv.contains("A+U,100,0,60,75"));
        assert!(csv.contains("I+P,90,0,50,-"));
    }
}
