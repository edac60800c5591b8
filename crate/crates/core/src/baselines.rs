//! Comparison collectors: naive fine-tuning, the initial-state ×
//! exploration ablation grid, and exploration driven by a distilled copy
//! of the offline policy.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::active::{
    self, ArmSpec, CandidatePool, CollectionLog, ExplorationConfig, ExploreMode, Explorer, InitMode,
    LoopInputs, LoopOutcome, Resources,
};
use crate::data::Dataset;
use crate::env::{MazeSpec, ACT_DIM};
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{adam_step, Activation, AdamState, Mlp, MlpSpec};
use crate::offline::{DeterministicPolicy, ObsNormalizer, Td3Bc};
use crate::repr::RepresentationEnsemble;
use crate::rng::{self, Rng};

/// An ablation arm: initial states from `I` (reset) or `A` (active), and
/// exploration by `R` (random), `P` (offline policy) or `U` (uncertainty).
pub type AblationArm = ArmSpec;

pub const ABLATION_ARMS: [AblationArm; 6] = [
    arm(InitMode::Reset, ExploreMode::Random),
    arm(InitMode::Reset, ExploreMode::Policy),
    arm(InitMode::Reset, ExploreMode::Uncertainty),
    arm(InitMode::Active, ExploreMode::Random),
    arm(InitMode::Active, ExploreMode::Policy),
    arm(InitMode::Active, ExploreMode::Uncertainty),
];

const fn arm(init: InitMode, explore: ExploreMode) -> AblationArm {
    ArmSpec { init, explore }
}

pub fn parse_ablation_arms(list: &str) -> Result<Vec<AblationArm>> {
    let arms = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<ArmSpec>())
        .collect::<Result<Vec<_>>>()?;
    if arms.is_empty() {
        return Err(Error::invalid("no arms given"));
    }
    for a in &arms {
        if !ABLATION_ARMS.contains(a) {
            return Err(Error::invalid(format!("{a} is not an ablation arm")));
        }
    }
    Ok(arms)
}

/// Collects exactly `budget` transitions with `arm` and returns them as a
/// dataset increment with its log.
pub fn ablation_arm_collect(
    arm: AblationArm,
    spec: &MazeSpec,
    res: &Resources<'_>,
    budget: usize,
    rng: &mut Rng,
) -> Result<(Dataset, CollectionLog)> {
    let mut explorer = Explorer::new(arm, spec.clone(), rng);
    let mut buffer = Vec::with_capacity(budget);
    for _ in 0..budget {
        buffer.push(explorer.next_transition(res, rng)?);
    }
    explorer.truncate();
    let mut d = Dataset::new(spec.layout_name.clone(), format!("collected {arm} budget={budget}"));
    d.append_buffer(buffer)?;
    Ok((d, explorer.log))
}

/// Full episodes from the start distribution following `policy` with
/// Gaussian action noise `noise`.
pub fn ft_collect(
    spec: &MazeSpec,
    policy: &DeterministicPolicy,
    budget: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<(Dataset, CollectionLog)> {
    let cfg = ExplorationConfig {
        policy_noise: noise,
        ..Default::default()
    };
    let res = Resources {
        policy,
        ensemble: None,
        distilled: None,
        travel: None,
        candidates: CandidatePool::Resets,
        threshold: 0.0,
        cfg: &cfg,
    };
    ablation_arm_collect(ArmSpec::FINETUNE, spec, &res, budget, rng)
}

/// Small regressors of the offline policy's actions. Their spread, and
/// their distance to a proposed action, mark states and actions the policy
/// has not been distilled on.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledEnsemble {
    pub nets: Vec<Mlp>,
    pub normalizer: ObsNormalizer,
    pub max_action: f64,
}

impl DistilledEnsemble {
    pub fn count(&self) -> usize {
        self.nets.len()
    }

    /// Per-net actions for `n` observations, as `count × n × act_dim`.
    fn outputs(&self, obs: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
        let x = self.normalizer.apply_batch(obs);
        self.nets
            .iter()
            .map(|net| {
                let mut y = net.forward_batch(&x, n)?;
                y.iter_mut().for_each(|v| *v *= self.max_action);
                Ok(y)
            })
            .collect()
    }

    /// Max pairwise squared distance between the nets' actions at each of
    /// `n` observations.
    pub fn disagreement(&self, obs: &[f64], n: usize) -> Result<Vec<f64>> {
        let outs = self.outputs(obs, n)?;
        let d = self.nets.first().map_or(ACT_DIM, |m| m.output_dim());
        Ok((0..n)
            .map(|r| {
                let mut best: f64 = 0.0;
                for i in 0..outs.len() {
                    for j in i + 1..outs.len() {
                        let s = crate::repr::sq_dist(&outs[i][r * d..(r + 1) * d], &outs[j][r * d..(r + 1) * d]);
                        best = best.max(s);
                    }
                }
                best
            })
            .collect())
    }

    /// For each of `m` candidate actions at `obs`, the largest squared
    /// distance from any net's prediction.
    pub fn action_novelty(&self, obs: &[f64], actions: &[f64], m: usize) -> Result<Vec<f64>> {
        let outs = self.outputs(obs, 1)?;
        let d = actions.len() / m.max(1);
        if d * m != actions.len() || outs.first().is_some_and(|o| o.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "action novelty",
                expected: outs.first().map_or(0, |o| o.len()) * m,
                actual: actions.len(),
            });
        }
        Ok(actions
            .chunks_exact(d)
            .map(|a| outs.iter().map(|o| crate::repr::sq_dist(o, a)).fold(0.0, f64::max))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub count: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            count: 5,
            hidden: 32,
            steps: 2_000,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

/// Trains `cfg.count` small nets, each from its own seed, to regress
/// `policy(s)` over dataset states.
pub fn distill_policy(policy: &DeterministicPolicy, d: &Dataset, cfg: &DistillConfig, rng: &mut Rng) -> Result<DistilledEnsemble> {
    if d.is_empty() {
        return Err(Error::EmptyDataset("policy distillation"));
    }
    if cfg.count == 0 || cfg.hidden == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("count, hidden and batch_size must be positive"));
    }
    let table = d.to_table();
    let obs_dim = table.obs_dim;
    let act_dim = policy.act_dim();
    let seeds: Vec<u64> = (0..cfg.count).map(|_| rng.gen()).collect();
    let mut nets = Vec::with_capacity(cfg.count);
    for seed in seeds {
        let spec = MlpSpec::feedforward(
            obs_dim,
            &[cfg.hidden],
            act_dim,
            Activation::Relu,
            Activation::Tanh,
            rng::derive_seed(seed, "init"),
        )?;
        let mut net = Mlp::new(spec)?;
        let mut opt = AdamState::new(net.params().len(), cfg.lr);
        let mut r = rng::stream(seed, "batches");
        for step in 0..cfg.steps {
            let batch = table.sample_batch(cfg.batch_size, &mut r)?;
            let n = batch.len();
            let targets: Vec<f64> = policy
                .act_batch(&batch.obs, n)?
                .iter()
                .map(|a| a / policy.max_action)
                .collect();
            let x = policy.normalizer.apply_batch(&batch.obs);
            let cache = net.forward_cached(&x, n)?;
            let grad_out: Vec<f64> = cache
                .output()
                .iter()
                .zip(&targets)
                .map(|(y, t)| 2.0 * (y - t) / n as f64)
                .collect();
            let loss: f64 = cache
                .output()
                .iter()
                .zip(&targets)
                .map(|(y, t)| (y - t).powi(2))
                .sum::<f64>()
                / n as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "distillation loss",
                    step,
                });
            }
            let mut grads = vec![0.0; net.params().len()];
            net.backward_cached(&cache, &grad_out, &mut grads, false)?;
            adam_step(&mut net, &grads, &mut opt)?;
        }
        nets.push(net);
    }
    Ok(DistilledEnsemble {
        nets,
        normalizer: policy.normalizer.clone(),
        max_action: policy.max_action,
    })
}

/// Starts from the environment's distribution and explores ε-greedily
/// toward actions the distilled ensemble finds most novel.
pub fn rnd_collect(
    spec: &MazeSpec,
    policy: &DeterministicPolicy,
    distilled: &DistilledEnsemble,
    budget: usize,
    cfg: &ExplorationConfig,
    rng: &mut Rng,
) -> Result<(Dataset, CollectionLog)> {
    let res = Resources {
        policy,
        ensemble: None,
        distilled: Some(distilled),
        travel: None,
        candidates: CandidatePool::Resets,
        threshold: 0.0,
        cfg,
    };
    let arm = ArmSpec {
        init: InitMode::Reset,
        explore: ExploreMode::Distilled,
    };
    ablation_arm_collect(arm, spec, &res, budget, rng)
}

/// Per-seed starting point shared by every arm: the offline learner and the
/// pretrained ensemble.
#[derive(Clone, Debug)]
pub struct SeedStart {
    pub seed: u64,
    pub learner: Td3Bc,
    pub ensemble: RepresentationEnsemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub final_score: f64,
    pub best_score: f64,
    pub env_steps: usize,
}

/// Runs every arm from every seed's starting point through the epoch loop.
pub fn run_grid(
    arms: &[ArmSpec],
    starts: &[SeedStart],
    d0: &Dataset,
    inputs: &LoopInputs<'_>,
    mut on_done: impl FnMut(&ArmSpec, &SeedStart, &LoopOutcome),
) -> Result<Vec<ArmResult>> {
    let mut out = Vec::new();
    for start in starts {
        for &a in arms {
            let inputs = LoopInputs {
                seed: rng::derive_seed(start.seed, &format!("arm/{a}")),
                ..*inputs
            };
            let run = active::run_arm(a, d0, start.learner.clone(), Some(start.ensemble.clone()), &inputs)?;
            let last = run.epochs.last().map_or(f64::NAN, |e| e.normalized_score);
            let best = run.curve.best().unwrap_or(f64::NAN);
            on_done(&a, start, &run);
            out.push(ArmResult {
                arm: a.label(),
                seed: start.seed,
                final_score: last,
                best_score: best,
                env_steps: run.epochs.last().map_or(0, |e| e.env_steps_used),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub n_seeds: usize,
    pub mean_final: f64,
    pub std_final: f64,
}

/// Mean and population standard deviation of final scores per arm, in
/// first-appearance order.
pub fn summarize(results: &[ArmResult]) -> Vec<ArmSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.arm.as_str()) {
            order.push(&r.arm);
        }
    }
    order
        .into_iter()
        .map(|a| {
            let xs: Vec<f64> = results.iter().filter(|r| r.arm == a).map(|r| r.final_score).collect();
            let (mean_final, std_final) = eval::mean_std(&xs);
            ArmSummary {
                arm: a.to_string(),
                n_seeds: xs.len(),
                mean_final,
                std_final,
            }
        })
        .collect()
}

/// `sqrt((s_a² + s_b²) / 2)`.
pub fn pooled_std(a: &ArmSummary, b: &ArmSummary) -> f64 {
    ((a.std_final.powi(2) + b.std_final.powi(2)) / 2.0).sqrt()
}

/// One row per arm (`init`, `explore`, mean, std) followed by the raw
/// per-seed rows.
pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut out = String::from("arm,init,explore,n_seeds,mean_final_score,std_final_score\n");
    for s in summarize(results) {
        let (i, e) = s.arm.split_once('+').unwrap_or((&s.arm, ""));
        writeln!(out, "{},{i},{e},{},{},{}", s.arm, s.n_seeds, s.mean_final, s.std_final).expect("string write");
    }
    out
}

pub fn results_csv(results: &[ArmResult]) -> String {
    let mut out = String::from("arm,seed,final_score,best_score,env_steps\n");
    for r in results {
        writeln!(out, "{},{},{},{},{}", r.arm, r.seed, r.final_score, r.best_score, r.env_steps).expect("string write");
    }
    out
}
