//! Behavior cloning and TD3+BC, plus the per-epoch fine-tuning step with a
//! geometric decay of the behavior-cloning weight.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, TransitionTable};
use crate::env::{EnvState, MazeSpec};
use crate::error::{Error, Result};
use crate::nn::{self, adam_step, Activation, AdamState, Mlp, MlpSpec};
use crate::planner::Controller;
use crate::rng::{self, Rng};

const POLICY_MAGIC: &[u8; 4] = b"AORP";
const LEARNER_MAGIC: &[u8; 4] = b"AORT";
const STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    /// Initial behavior-cloning weight.
    pub alpha: f64,
    pub gamma: f64,
    pub policy_delay: usize,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Gradient updates for offline training.
    pub steps: usize,
    /// Ratio between the first and last epoch's behavior-cloning weight.
    pub alpha_decay_factor: f64,
    /// Divide the Q term by the batch mean of |Q| in the actor loss.
    pub normalize_q: bool,
    pub hidden: usize,
    pub lr: f64,
    /// Clamp TD targets to `[lo, hi]`, the range of attainable discounted returns.
    pub value_bounds: Option<[f64; 2]>,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            alpha: 2.5,
            gamma: 0.99,
            policy_delay: 2,
            policy_noise: 0.2,
            noise_clip: 0.5,
            tau: 0.005,
            batch_size: 128,
            steps: 10_000,
            alpha_decay_factor: 5.0,
            normalize_q: false,
            hidden: 64,
            lr: AdamState::DEFAULT_LR,
            value_bounds: Some([0.0, 100.0]),
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1)"));
        }
        if self.policy_delay == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::invalid(
                "policy_delay, batch_size and hidden must be positive",
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid("tau must lie in (0, 1]"));
        }
        if !(self.alpha_decay_factor > 0.0) {
            return Err(Error::invalid("alpha_decay_factor must be positive"));
        }
        if let Some([lo, hi]) = self.value_bounds {
            if !(lo < hi) {
                return Err(Error::invalid("value_bounds must be an increasing pair"));
            }
        }
        Ok(())
    }
}

/// Behavior-cloning weight for `epoch` of `n_epochs`: `alpha0` at the first
/// epoch, `alpha0 / factor` at the last, geometric in between.
pub fn alpha_for_epoch(alpha0: f64, factor: f64, epoch: usize, n_epochs: usize) -> f64 {
    if n_epochs <= 1 {
        return alpha0;
    }
    let frac = epoch.min(n_epochs - 1) as f64 / (n_epochs - 1) as f64;
    alpha0 * factor.powf(-frac)
}

/// Per-dimension affine observation standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ObsNormalizer {
    pub fn identity(dim: usize) -> Self {
        ObsNormalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn from_table(table: &TransitionTable) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::EmptyDataset("observation statistics"));
        }
        let d = table.obs_dim;
        let n = table.len() as f64;
        let mut mean = vec![0.0; d];
        for row in table.obs.chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in table.obs.chunks_exact(d) {
            for k in 0..d {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(ObsNormalizer { mean, std })
    }

    /// Statistics of the uniform distribution over the maze's bounding box
    /// with zero-mean, unit-scale velocities.
    pub fn from_maze(spec: &MazeSpec) -> Self {
        let (w, h) = (spec.cols as f64, spec.rows as f64);
        let s12 = 12f64.sqrt();
        ObsNormalizer {
            mean: vec![w / 2.0, h / 2.0, 0.0, 0.0],
            std: vec![w / s12, h / s12, spec.max_speed / 3f64.sqrt(), spec.max_speed / 3f64.sqrt()],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_batch(&self, obs: &[f64]) -> Vec<f64> {
        let d = self.dim();
        obs.chunks_exact(d)
            .flat_map(|row| (0..d).map(move |k| (row[k] - self.mean[k]) / self.std[k]))
            .collect()
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        nn::write_f64s(w, &self.mean)?;
        nn::write_f64s(w, &self.std)
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mean = nn::read_f64s(r, "normalizer mean")?;
        let std = nn::read_f64s(r, "normalizer std")?;
        if mean.len() != std.len() {
            return Err(Error::Checkpoint("normalizer lengths differ".into()));
        }
        Ok(ObsNormalizer { mean, std })
    }
}

/// Deterministic actor: `max_action * tanh(net(normalize(obs)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicPolicy {
    pub actor: Mlp,
    pub normalizer: ObsNormalizer,
    pub max_action: f64,
}

fn actor_spec(obs_dim: usize, act_dim: usize, hidden: usize, seed: u64) -> Result<MlpSpec> {
    MlpSpec::feedforward(
        obs_dim,
        &[hidden, hidden],
        act_dim,
        Activation::Relu,
        Activation::Tanh,
        seed,
    )
}

fn critic_spec(obs_dim: usize, act_dim: usize, hidden: usize, seed: u64) -> Result<MlpSpec> {
    MlpSpec::feedforward(
        obs_dim + act_dim,
        &[hidden, hidden],
        1,
        Activation::Relu,
        Activation::Identity,
        seed,
    )
}

impl DeterministicPolicy {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        hidden: usize,
        max_action: f64,
        normalizer: ObsNormalizer,
        seed: u64,
    ) -> Result<Self> {
        if normalizer.dim() != obs_dim {
            return Err(Error::DimensionMismatch {
                context: "policy normalizer",
                expected: obs_dim,
                actual: normalizer.dim(),
            });
        }
        Ok(DeterministicPolicy {
            actor: Mlp::new(actor_spec(obs_dim, act_dim, hidden, seed)?)?,
            normalizer,
            max_action,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.act_batch(obs, 1)
    }

    pub fn act_batch(&self, obs: &[f64], n: usize) -> Result<Vec<f64>> {
        if obs.len() != n * self.obs_dim() {
            return Err(Error::DimensionMismatch {
                context: "policy observation",
                expected: n * self.obs_dim(),
                actual: obs.len(),
            });
        }
        let mut out = self
            .actor
            .forward_batch(&self.normalizer.apply_batch(obs), n)?;
        out.iter_mut().for_each(|x| *x *= self.max_action);
        Ok(out)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(POLICY_MAGIC)?;
        w.write_all(&self.max_action.to_le_bytes())?;
        self.normalizer.write_to(w)?;
        self.actor.write_checkpoint(w)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        nn::read_exact(r, &mut magic, "policy magic")?;
        if &magic != POLICY_MAGIC {
            return Err(Error::Checkpoint("bad policy magic".into()));
        }
        let max_action = nn::read_f64(r, "max action")?;
        let normalizer = ObsNormalizer::read_from(r)?;
        let actor = Mlp::read_checkpoint(r)?;
        if actor.input_dim() != normalizer.dim() {
            return Err(Error::Checkpoint("normalizer does not match actor".into()));
        }
        Ok(DeterministicPolicy {
            actor,
            normalizer,
            max_action,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_with(path, |w| self.write_checkpoint(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        DeterministicPolicy::read_checkpoint(&mut BufReader::new(file))
    }
}

pub(crate) fn save_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

impl Controller for DeterministicPolicy {
    fn name(&self) -> &str {
        "deterministic-policy"
    }

    fn begin_episode(&mut self, _: &MazeSpec, _: &EnvState, _: &mut Rng) {}

    fn act(&mut self, _: &MazeSpec, state: &EnvState, _: &mut Rng) -> [f64; 2] {
        let a = DeterministicPolicy::act(self, &state.obs()).expect("policy matches maze dims");
        [a[0], a[1]]
    }
}

/// Twin critics over `(normalized obs, action)` with slowly tracking targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub tau: f64,
}

impl CriticPair {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: usize, tau: f64, seed: u64) -> Result<Self> {
        let q1 = Mlp::new(critic_spec(obs_dim, act_dim, hidden, rng::derive_seed(seed, "q1"))?)?;
        let q2 = Mlp::new(critic_spec(obs_dim, act_dim, hidden, rng::derive_seed(seed, "q2"))?)?;
        Ok(CriticPair {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            tau,
        })
    }

    pub fn soft_update(&mut self) {
        self.q1_target.soft_update_from(&self.q1, self.tau);
        self.q2_target.soft_update_from(&self.q2, self.tau);
    }
}

/// Row-wise `[obs | act]`.
pub fn concat_rows(obs: &[f64], obs_dim: usize, act: &[f64], act_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(obs.len() + act.len());
    for (o, a) in obs.chunks_exact(obs_dim).zip(act.chunks_exact(act_dim)) {
        out.extend_from_slice(o);
        out.extend_from_slice(a);
    }
    out
}

/// Mean over the batch of `‖max_action·actor(x) − a‖²` and its parameter
/// gradient. `obs` is already normalized.
pub fn bc_loss(actor: &Mlp, obs: &[f64], act: &[f64], n: usize, max_action: f64) -> Result<(f64, Vec<f64>)> {
    let cache = actor.forward_cached(obs, n)?;
    let out = cache.output();
    if act.len() != out.len() {
        return Err(Error::DimensionMismatch {
            context: "behavior-cloning targets",
            expected: out.len(),
            actual: act.len(),
        });
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad_out: Vec<f64> = out
        .iter()
        .zip(act)
        .map(|(&y, &a)| {
            let d = max_action * y - a;
            loss += d * d;
            2.0 * d * max_action * scale
        })
        .collect();
    let mut grad = vec![0.0; actor.params().len()];
    actor.backward_cached(&cache, &grad_out, &mut grad, false)?;
    Ok((loss * scale, grad))
}

/// Mean squared error of a critic against fixed targets; `inputs` are
/// `[normalized obs | act]` rows.
pub fn critic_loss(q: &Mlp, inputs: &[f64], targets: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
    let cache = q.forward_cached(inputs, n)?;
    let out = cache.output();
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            context: "critic targets",
            expected: n,
            actual: targets.len(),
        });
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let grad_out: Vec<f64> = out
        .iter()
        .zip(targets)
        .map(|(&y, &t)| {
            loss += (y - t) * (y - t);
            2.0 * (y - t) * scale
        })
        .collect();
    let mut grad = vec![0.0; q.params().len()];
    q.backward_cached(&cache, &grad_out, &mut grad, false)?;
    Ok((loss * scale, grad))
}

/// `−k·mean Q(x, π(x)) + α·mean ‖π(x) − a‖²` and its gradient with respect to
/// the actor parameters, where `k = 1 / mean|Q|` (held constant) when
/// `normalize_q` is set and 1 otherwise. With normalization on, `α` here is
/// the reciprocal of the usual TD3+BC weight: `α = 0.4` matches its 2.5.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    actor: &Mlp,
    q: &Mlp,
    obs: &[f64],
    act: &[f64],
    n: usize,
    alpha: f64,
    max_action: f64,
    normalize_q: bool,
) -> Result<(f64, Vec<f64>)> {
    let obs_dim = actor.input_dim();
    let act_dim = actor.output_dim();
    let a_cache = actor.forward_cached(obs, n)?;
    let pi: Vec<f64> = a_cache.output().iter().map(|y| y * max_action).collect();
    let q_in = concat_rows(obs, obs_dim, &pi, act_dim);
    let q_cache = q.forward_cached(&q_in, n)?;
    let q_vals = q_cache.output();
    let scale = 1.0 / n as f64;
    let k = if normalize_q {
        let m = q_vals.iter().map(|v| v.abs()).sum::<f64>() * scale;
        1.0 / m.max(1e-8)
    } else {
        1.0
    };
    let mut loss = -k * q_vals.iter().sum::<f64>() * scale;
    let mut dummy = vec![0.0; q.params().len()];
    let dq_din = q
        .backward_cached(&q_cache, &vec![-k * scale; n], &mut dummy, true)?
        .expect("input gradient requested");
    let mut grad_out = vec![0.0; n * act_dim];
    for i in 0..n {
        for j in 0..act_dim {
            let d = pi[i * act_dim + j] - act[i * act_dim + j];
            loss += alpha * d * d * scale;
            let g_pi = dq_din[i * (obs_dim + act_dim) + obs_dim + j] + 2.0 * alpha * d * scale;
            grad_out[i * act_dim + j] = g_pi * max_action;
        }
    }
    let mut grad = vec![0.0; actor.params().len()];
    actor.backward_cached(&a_cache, &grad_out, &mut grad, false)?;
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
}

/// TD3+BC learner state: actor, critics, targets and optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Td3Bc {
    pub policy: DeterministicPolicy,
    pub actor_target: Mlp,
    pub critics: CriticPair,
    actor_opt: AdamState,
    q1_opt: AdamState,
    q2_opt: AdamState,
    pub total_updates: u64,
}

impl Td3Bc {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        max_action: f64,
        normalizer: ObsNormalizer,
        cfg: &OfflineConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let policy = DeterministicPolicy::new(
            obs_dim,
            act_dim,
            cfg.hidden,
            max_action,
            normalizer,
            rng::derive_seed(seed, "actor"),
        )?;
        let critics = CriticPair::new(obs_dim, act_dim, cfg.hidden, cfg.tau, rng::derive_seed(seed, "critic"))?;
        Ok(Td3Bc {
            actor_target: policy.actor.clone(),
            actor_opt: AdamState::new(policy.actor.params().len(), cfg.lr),
            q1_opt: AdamState::new(critics.q1.params().len(), cfg.lr),
            q2_opt: AdamState::new(critics.q2.params().len(), cfg.lr),
            policy,
            critics,
            total_updates: 0,
        })
    }

    /// One critic update, plus an actor and target update every
    /// `policy_delay` calls.
    pub fn update(&mut self, batch: &Batch, alpha: f64, cfg: &OfflineConfig, rng: &mut Rng) -> Result<UpdateStats> {
        let n = batch.len();
        let obs_dim = batch.obs_dim;
        let act_dim = batch.act_dim;
        let max_action = self.policy.max_action;
        let norm = &self.policy.normalizer;
        let obs = norm.apply_batch(&batch.obs);
        let next_obs = norm.apply_batch(&batch.next_obs);
        self.total_updates += 1;
        let step = self.total_updates as usize;

        let mut next_act = self.actor_target.forward_batch(&next_obs, n)?;
        let clip = cfg.noise_clip * max_action;
        for a in next_act.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            let noise = (z * cfg.policy_noise * max_action).clamp(-clip, clip);
            *a = (*a * max_action + noise).clamp(-max_action, max_action);
        }
        let next_in = concat_rows(&next_obs, obs_dim, &next_act, act_dim);
        let t1 = self.critics.q1_target.forward_batch(&next_in, n)?;
        let t2 = self.critics.q2_target.forward_batch(&next_in, n)?;
        let targets: Vec<f64> = (0..n)
            .map(|i| {
                let y = batch.rew[i] + cfg.gamma * (1.0 - batch.done[i]) * t1[i].min(t2[i]);
                match cfg.value_bounds {
                    Some([lo, hi]) => y.clamp(lo, hi),
                    None => y,
                }
            })
            .collect();

        let cur_in = concat_rows(&obs, obs_dim, &batch.act, act_dim);
        let (l1, g1) = critic_loss(&self.critics.q1, &cur_in, &targets, n)?;
        let (l2, g2) = critic_loss(&self.critics.q2, &cur_in, &targets, n)?;
        if !(l1 + l2).is_finite() {
            return Err(Error::NonFinite {
                context: "critic loss",
                step,
            });
        }
        adam_step(&mut self.critics.q1, &g1, &mut self.q1_opt)?;
        adam_step(&mut self.critics.q2, &g2, &mut self.q2_opt)?;

        let mut stats = UpdateStats {
            critic_loss: l1 + l2,
            actor_loss: None,
        };
        if step.is_multiple_of(cfg.policy_delay) {
            let (la, ga) = actor_loss(
                &self.policy.actor,
                &self.critics.q1,
                &obs,
                &batch.act,
                n,
                alpha,
                max_action,
                cfg.normalize_q,
            )?;
            if !la.is_finite() {
                return Err(Error::NonFinite {
                    context: "actor loss",
                    step,
                });
            }
            adam_step(&mut self.policy.actor, &ga, &mut self.actor_opt)?;
            self.critics.soft_update();
            self.actor_target.soft_update_from(&self.policy.actor, cfg.tau);
            stats.actor_loss = Some(la);
        }
        Ok(stats)
    }

    /// `updates` TD3+BC steps on uniformly drawn batches.
    pub fn train(
        &mut self,
        table: &TransitionTable,
        updates: usize,
        alpha: f64,
        cfg: &OfflineConfig,
        rng: &mut Rng,
    ) -> Result<()> {
        if updates == 0 {
            return Ok(());
        }
        if table.is_empty() {
            return Err(Error::EmptyDataset("TD3+BC training"));
        }
        for _ in 0..updates {
            let batch = table.sample_batch(cfg.batch_size, rng)?;
            self.update(&batch, alpha, cfg, rng)?;
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(LEARNER_MAGIC)?;
        w.write_all(&self.total_updates.to_le_bytes())?;
        w.write_all(&self.critics.tau.to_le_bytes())?;
        self.policy.write_checkpoint(w)?;
        for net in [
            &self.actor_target,
            &self.critics.q1,
            &self.critics.q2,
            &self.critics.q1_target,
            &self.critics.q2_target,
        ] {
            net.write_checkpoint(w)?;
        }
        for opt in [&self.actor_opt, &self.q1_opt, &self.q2_opt] {
            opt.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        nn::read_exact(r, &mut magic, "learner magic")?;
        if &magic != LEARNER_MAGIC {
            return Err(Error::Checkpoint("bad learner magic".into()));
        }
        let total_updates = nn::read_u64(r, "update count")?;
        let tau = nn::read_f64(r, "tau")?;
        let policy = DeterministicPolicy::read_checkpoint(r)?;
        let actor_target = Mlp::read_checkpoint(r)?;
        let q1 = Mlp::read_checkpoint(r)?;
        let q2 = Mlp::read_checkpoint(r)?;
        let q1_target = Mlp::read_checkpoint(r)?;
        let q2_target = Mlp::read_checkpoint(r)?;
        let actor_opt = AdamState::read_from(r)?;
        let q1_opt = AdamState::read_from(r)?;
        let q2_opt = AdamState::read_from(r)?;
        let consistent = actor_target.spec().layer_sizes == policy.actor.spec().layer_sizes
            && q1.spec().layer_sizes == q1_target.spec().layer_sizes
            && q2.spec().layer_sizes == q2_target.spec().layer_sizes
            && actor_opt.m.len() == policy.actor.params().len()
            && q1_opt.m.len() == q1.params().len()
            && q2_opt.m.len() == q2.params().len();
        if !consistent {
            return Err(Error::Checkpoint("learner components disagree on shapes".into()));
        }
        Ok(Td3Bc {
            policy,
            actor_target,
            critics: CriticPair {
                q1,
                q2,
                q1_target,
                q2_target,
                tau,
            },
            actor_opt,
            q1_opt,
            q2_opt,
            total_updates,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_with(path, |w| self.write_checkpoint(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Td3Bc::read_checkpoint(&mut BufReader::new(file))
    }
}

fn dataset_table(d: &Dataset) -> Result<TransitionTable> {
    if d.is_empty() {
        return Err(Error::EmptyDataset("offline training"));
    }
    Ok(d.to_table())
}

/// Mean-squared action regression for `cfg.steps` updates.
pub fn bc_train(d: &Dataset, max_action: f64, cfg: &OfflineConfig, rng: &mut Rng) -> Result<DeterministicPolicy> {
    let table = dataset_table(d)?;
    bc_train_on_table(&table, max_action, cfg, rng)
}

pub fn bc_train_on_table(
    table: &TransitionTable,
    max_action: f64,
    cfg: &OfflineConfig,
    rng: &mut Rng,
) -> Result<DeterministicPolicy> {
    cfg.validate()?;
    let normalizer = ObsNormalizer::from_table(table)?;
    let seed: u64 = rand::Rng::gen(rng);
    let mut policy = DeterministicPolicy::new(table.obs_dim, table.act_dim, cfg.hidden, max_action, normalizer, seed)?;
    let mut opt = AdamState::new(policy.actor.params().len(), cfg.lr);
    for step in 0..cfg.steps {
        let batch = table.sample_batch(cfg.batch_size, rng)?;
        let obs = policy.normalizer.apply_batch(&batch.obs);
        let (loss, grad) = bc_loss(&policy.actor, &obs, &batch.act, batch.len(), max_action)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "behavior-cloning loss",
                step,
            });
        }
        adam_step(&mut policy.actor, &grad, &mut opt)?;
    }
    Ok(policy)
}

/// TD3+BC from scratch with observation statistics taken from `d`.
pub fn td3bc_train(d: &Dataset, max_action: f64, cfg: &OfflineConfig, rng: &mut Rng) -> Result<Td3Bc> {
    let table = dataset_table(d)?;
    let normalizer = ObsNormalizer::from_table(&table)?;
    let seed: u64 = rand::Rng::gen(rng);
    let mut learner = Td3Bc::new(table.obs_dim, table.act_dim, max_action, normalizer, cfg, seed)?;
    learner.train(&table, cfg.steps, cfg.alpha, cfg, rng)?;
    Ok(learner)
}

/// `updates` TD3+BC steps on the augmented data with the epoch's decayed
/// behavior-cloning weight. Observation statistics stay frozen.
pub fn finetune_epoch(
    learner: &mut Td3Bc,
    table: &TransitionTable,
    cfg: &OfflineConfig,
    epoch: usize,
    n_epochs: usize,
    updates: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let alpha = alpha_for_epoch(cfg.alpha, cfg.alpha_decay_factor, epoch, n_epochs);
    learner.train(table, updates, alpha, cfg, rng)?;
    Ok(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TransitionTable;
    use rand::Rng as _;

    fn small_cfg() -> OfflineConfig {
        OfflineConfig {
            hidden: 32,
            batch_size: 64,
            lr: 1e-3,
            ..Default::default()
        }
    }

    fn linear_teacher(n: usize, seed: u64) -> TransitionTable {
        let mut r = rng::from_seed(seed);
        let mut t = TransitionTable::with_dims(4, 2);
        for _ in 0..n {
            let s: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            let a = [0.3 * s[0] - 0.2 * s[1], 0.1 * s[1] + 0.25 * s[2]];
            t.push(&s, &a, &s, 0.0, false);
        }
        t
    }

    #[test]
    fn alpha_schedule_endpoints() {
        assert_eq!(alpha_for_epoch(2.5, 5.0, 0, 8), 2.5);
        assert!((alpha_for_epoch(2.5, 5.0, 7, 8) - 0.5).abs() < 1e-15);
        assert_eq!(alpha_for_epoch(2.5, 5.0, 0, 1), 2.5);
        let mid = alpha_for_epoch(1.0, 4.0, 1, 3);
        assert!((mid - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bc_learns_linear_teacher() {
        let train = linear_teacher(2000, 1);
        let val = linear_teacher(200, 2);
        let cfg = OfflineConfig { steps: 3000, ..small_cfg() };
        let pi = bc_train_on_table(&train, 1.0, &cfg, &mut rng::from_seed(0)).unwrap();
        let pred = pi.act_batch(&val.obs, val.len()).unwrap();
        let mse = pred.iter().zip(&val.act).map(|(p, a)| (p - a).powi(2)).sum::<f64>() / val.len() as f64;
        assert!(mse < 1e-2, "validation mse {mse}");
    }

    #[test]
    fn bc_zero_steps_returns_initial_policy() {
        let t = linear_teacher(50, 1);
        let cfg = OfflineConfig { steps: 0, ..small_cfg() };
        let mut r = rng::from_seed(4);
        let pi = bc_train_on_table(&t, 1.0, &cfg, &mut r).unwrap();
        let mut r2 = rng::from_seed(4);
        let seed: u64 = r2.gen();
        let fresh = DeterministicPolicy::new(4, 2, 32, 1.0, ObsNormalizer::from_table(&t).unwrap(), seed).unwrap();
        assert_eq!(pi, fresh);
    }

    #[test]
    fn actions_stay_in_bounds() {
        let pi = DeterministicPolicy::new(4, 2, 16, 0.7, ObsNormalizer::identity(4), 3).unwrap();
        let mut r = rng::from_seed(0);
        for _ in 0..500 {
            let s: Vec<f64> = (0..4).map(|_| r.gen_range(-1e6..1e6)).collect();
            for a in pi.act(&s).unwrap() {
                assert!(a.abs() <= 0.7);
            }
        }
    }

    /// Four states, each with one action and a fixed reward.
    fn micro_dataset() -> TransitionTable {
        let mut t = TransitionTable::with_dims(4, 2);
        let rows = [
            ([0.0, 0.0, 0.0, 0.0], [0.5, 0.0], 1.0),
            ([1.0, 0.0, 0.0, 0.0], [0.0, 0.5], 0.0),
            ([0.0, 1.0, 0.0, 0.0], [-0.5, 0.0], 0.5),
            ([1.0, 1.0, 0.0, 0.0], [0.0, -0.5], 0.25),
        ];
        for (s, a, r) in rows {
            t.push(&s, &a, &s, r, false);
        }
        t
    }

    #[test]
    fn zero_discount_critic_regresses_reward() {
        let t = micro_dataset();
        let cfg = OfflineConfig {
            gamma: 0.0,
            batch_size: 32,
            hidden: 32,
            lr: 1e-3,
            ..Default::default()
        };
        let mut r = rng::from_seed(0);
        let norm = ObsNormalizer::from_table(&t).unwrap();
        let mut l = Td3Bc::new(4, 2, 1.0, norm, &cfg, 1).unwrap();
        l.train(&t, 3000, cfg.alpha, &cfg, &mut r).unwrap();
        let obs = l.policy.normalizer.apply_batch(&t.obs);
        let q = l.critics.q1.forward_batch(&concat_rows(&obs, 4, &t.act, 2), 4).unwrap();
        for (qv, rv) in q.iter().zip(&t.rew) {
            assert!((qv - rv).abs() < 0.05, "{qv} vs {rv}");
        }
    }

    #[test]
    fn huge_alpha_matches_behavior_cloning() {
        let t = linear_teacher(64, 5);
        let cfg = OfflineConfig {
            alpha: 1e6,
            steps: 4000,
            ..small_cfg()
        };
        let norm = ObsNormalizer::from_table(&t).unwrap();
        let mut l = Td3Bc::new(4, 2, 1.0, norm, &cfg, 1).unwrap();
        l.train(&t, cfg.steps * 2, cfg.alpha, &cfg, &mut rng::from_seed(0)).unwrap();
        let bc_cfg = OfflineConfig { steps: cfg.steps * 2, ..cfg.clone() };
        let bc = bc_train_on_table(&t, 1.0, &bc_cfg, &mut rng::from_seed(1)).unwrap();
        let a = l.policy.act_batch(&t.obs, t.len()).unwrap();
        let b = bc.act_batch(&t.obs, t.len()).unwrap();
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 0.05, "max deviation {worst}");
    }

    #[test]
    fn finetune_with_zero_updates_is_noop() {
        let t = micro_dataset();
        let cfg = small_cfg();
        let mut l = Td3Bc::new(4, 2, 1.0, ObsNormalizer::identity(4), &cfg, 1).unwrap();
        let before = l.clone();
        let alpha = finetune_epoch(&mut l, &t, &cfg, 3, 4, 0, &mut rng::from_seed(0)).unwrap();
        assert_eq!(l, before);
        assert!((alpha - cfg.alpha / 5.0).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_resume_exactly() {
        let t = micro_dataset();
        let cfg = small_cfg();
        let run = |updates| {
            let mut l = Td3Bc::new(4, 2, 1.0, ObsNormalizer::identity(4), &cfg, 9).unwrap();
            l.train(&t, updates, cfg.alpha, &cfg, &mut rng::from_seed(2)).unwrap();
            l
        };
        let a = run(20);
        assert_eq!(a, run(20));

        let mut buf = Vec::new();
        a.write_checkpoint(&mut buf).unwrap();
        let mut back = Td3Bc::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, a);
        let mut cont = a.clone();
        cont.train(&t, 5, cfg.alpha, &cfg, &mut rng::from_seed(3)).unwrap();
        back.train(&t, 5, cfg.alpha, &cfg, &mut rng::from_seed(3)).unwrap();
        assert_eq!(cont, back);
    }

    #[test]
    fn soft_updates_follow_closed_form() {
        let cfg = small_cfg();
        let mut c = CriticPair::new(4, 2, 8, 0.1, 0).unwrap();
        c.q1.params_mut().iter_mut().for_each(|p| *p += 1.0);
        let start = c.q1_target.clone();
        for _ in 0..7 {
            c.soft_update();
        }
        let keep = 0.9f64.powi(7);
        for ((t, s), o) in c.q1_target.params().iter().zip(start.params()).zip(c.q1.params()) {
            assert!((t - (keep * s + (1.0 - keep) * o)).abs() < 1e-12);
        }
        let _ = cfg;
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let pi = DeterministicPolicy::new(4, 2, 8, 1.0, ObsNormalizer::from_maze(&MazeSpec::builtin("umaze").unwrap()), 4).unwrap();
        let mut buf = Vec::new();
        pi.write_checkpoint(&mut buf).unwrap();
        assert_eq!(DeterministicPolicy::read_checkpoint(&mut buf.as_slice()).unwrap(), pi);
    }
}
