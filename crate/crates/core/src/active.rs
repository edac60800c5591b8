//! The active agent: uncertain initial-state selection, ε-greedy
//! uncertainty-maximizing exploration, threshold termination, and the
//! collect/retrain loops built on a step-at-a-time [`Explorer`].

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::DistilledEnsemble;
use crate::data::{Dataset, Transition, TransitionTable};
use crate::env::{self, CandidateSet, EnvState, MazeEnv, MazeSpec, ACT_DIM};
use crate::error::{Error, Result};
use crate::eval::{self, LearningCurve, ReferenceScores};
use crate::offline::{self, DeterministicPolicy, ObsNormalizer, OfflineConfig, Td3Bc};
use crate::repr::{self, Aggregator, RepresentationEnsemble};
use crate::restricted::TravelPlan;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    pub epsilon: f64,
    /// Perturbed actions scored per exploratory step.
    pub n_action_samples: usize,
    /// Scale of the Gaussian perturbation of exploratory actions.
    pub noise_scale: f64,
    /// Quantile of dataset state uncertainties used as the stopping threshold.
    pub threshold_quantile: f64,
    /// Fixed stopping threshold; overrides the quantile when set.
    pub uncertainty_threshold: Option<f64>,
    /// Aggregator used to score perturbed actions.
    pub aggregator: Aggregator,
    /// Candidate start states drawn per trajectory.
    pub n_candidates: usize,
    /// Dataset states used to estimate the threshold quantile.
    pub threshold_sample: usize,
    /// Gaussian action noise of policy-driven collection.
    pub policy_noise: f64,
    /// Consecutive zero-length trajectories after which one step is forced.
    pub stall_limit: usize,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            epsilon: 0.5,
            n_action_samples: 16,
            noise_scale: 0.3,
            threshold_quantile: 0.7,
            uncertainty_threshold: None,
            aggregator: Aggregator::Max,
            n_candidates: 64,
            threshold_sample: 2000,
            policy_noise: 0.1,
            stall_limit: 32,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid("epsilon must lie in [0, 1]"));
        }
        if self.n_action_samples == 0 || self.n_candidates == 0 || self.threshold_sample == 0 {
            return Err(Error::invalid(
                "n_action_samples, n_candidates and threshold_sample must be positive",
            ));
        }
        if !(self.noise_scale >= 0.0 && self.policy_noise >= 0.0) {
            return Err(Error::invalid("noise scales must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.threshold_quantile) {
            return Err(Error::invalid("threshold_quantile must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub total: usize,
    pub remaining: usize,
}

impl Budget {
    pub fn new(total: usize) -> Self {
        Budget {
            total,
            remaining: total,
        }
    }

    pub fn used(&self) -> usize {
        self.total - self.remaining
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining == 0
    }

    /// Takes one step from the budget; false when none is left.
    pub fn consume(&mut self) -> bool {
        if self.remaining == 0 {
            return false;
        }
        self.remaining -= 1;
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Threshold,
    EpisodeDone,
    BudgetExhausted,
}

/// Which phase of a trajectory a step belongs to. Unrestricted collection
/// only ever explores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Travel,
    Explore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub trajectory: u64,
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    /// Max-aggregated state uncertainty when it was needed for stopping.
    pub state_uncertainty: Option<f64>,
    /// Score of the chosen perturbed action on exploratory steps.
    pub action_score: Option<f64>,
    pub explored: bool,
    pub stage: Stage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory: u64,
    pub initial_obs: Vec<f64>,
    pub initial_score: Option<f64>,
    pub length: usize,
    pub travel_steps: usize,
    pub reason: TerminationReason,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectionLog {
    pub steps: Vec<StepRecord>,
    pub trajectories: Vec<TrajectoryRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Trajectory(&'a TrajectoryRecord),
}

impl CollectionLog {
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn extend(&mut self, other: CollectionLog) {
        self.steps.extend(other.steps);
        self.trajectories.extend(other.trajectories);
    }

    /// One JSON object per line; each trajectory record follows its steps.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut s = 0;
        for tr in &self.trajectories {
            while s < self.steps.len() && self.steps[s].trajectory <= tr.trajectory {
                push_json(&mut out, &LogLine::Step(&self.steps[s]));
                s += 1;
            }
            push_json(&mut out, &LogLine::Trajectory(tr));
        }
        for step in &self.steps[s..] {
            push_json(&mut out, &LogLine::Step(step));
        }
        out
    }
}

fn push_json(out: &mut String, line: &LogLine<'_>) {
    out.push_str(&serde_json::to_string(line).expect("log records serialize"));
    out.push('\n');
}

/// The agent's three parts: the ensemble scoring states and actions, the
/// policy being perturbed, and the stopping threshold.
#[derive(Clone, Copy, Debug)]
pub struct ActiveAgent<'a> {
    pub scorer: &'a RepresentationEnsemble,
    pub policy: &'a DeterministicPolicy,
    pub cfg: &'a ExplorationConfig,
    pub threshold: f64,
}

impl<'a> ActiveAgent<'a> {
    pub fn new(
        scorer: &'a RepresentationEnsemble,
        policy: &'a DeterministicPolicy,
        cfg: &'a ExplorationConfig,
        threshold: f64,
    ) -> Result<Self> {
        if scorer.obs_dim() != policy.obs_dim() || scorer.act_dim() != policy.act_dim() {
            return Err(Error::invalid("ensemble and policy disagree on dimensions"));
        }
        Ok(ActiveAgent {
            scorer,
            policy,
            cfg,
            threshold,
        })
    }

    pub fn state_uncertainty(&self, s: &EnvState) -> Result<f64> {
        Ok(self
            .scorer
            .state_uncertainties(&s.obs(), 1, Aggregator::Max)?[0])
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Index of the most uncertain candidate (lowest index on ties) and every
/// candidate's score.
pub fn select_initial_state(c: &CandidateSet, e: &RepresentationEnsemble) -> Result<(usize, Vec<f64>)> {
    if c.is_empty() {
        return Err(Error::invalid("candidate set is empty"));
    }
    let obs: Vec<f64> = c.states.iter().flat_map(|s| s.obs()).collect();
    let scores = e.state_uncertainties(&obs, c.len(), Aggregator::Max)?;
    Ok((argmax_first(&scores), scores))
}

fn gaussian_perturbations(base: &[f64], m: usize, scale: f64, bound: f64, rng: &mut Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * base.len());
    for _ in 0..m {
        for &b in base {
            let z: f64 = rng.sample(StandardNormal);
            out.push((b + scale * z).clamp(-bound, bound));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExploreChoice {
    pub action: Vec<f64>,
    pub explored: bool,
    pub score: Option<f64>,
}

/// With probability ε, the most uncertain of `M` Gaussian perturbations of
/// `π(s)`; otherwise `π(s)` itself.
pub fn explore_action(s: &EnvState, agent: &ActiveAgent<'_>, rng: &mut Rng) -> Result<ExploreChoice> {
    let obs = s.obs();
    let base = agent.policy.act(&obs)?;
    let u: f64 = rng.gen();
    if u >= agent.cfg.epsilon {
        return Ok(ExploreChoice {
            action: base,
            explored: false,
            score: None,
        });
    }
    let m = agent.cfg.n_action_samples;
    let cands = gaussian_perturbations(&base, m, agent.cfg.noise_scale, agent.policy.max_action, rng);
    let scores = agent
        .scorer
        .state_action_uncertainties(&obs, &cands, m, agent.cfg.aggregator)?;
    let best = argmax_first(&scores);
    let d = base.len();
    Ok(ExploreChoice {
        action: cands[best * d..(best + 1) * d].to_vec(),
        explored: true,
        score: Some(scores[best]),
    })
}

/// Runs from `start` until the state uncertainty drops below the threshold,
/// the episode ends, or `budget` runs out.
pub fn collect_trajectory(
    env: &mut MazeEnv,
    start: &EnvState,
    agent: &ActiveAgent<'_>,
    budget: &mut Budget,
    rng: &mut Rng,
) -> Result<(Vec<Transition>, TerminationReason, CollectionLog)> {
    let mut state = env.reset_to(start)?;
    let mut steps = Vec::new();
    let mut log = CollectionLog::default();
    let first_score = agent.state_uncertainty(&state)?;
    let reason = loop {
        if budget.is_exhausted() {
            break TerminationReason::BudgetExhausted;
        }
        let u = agent.state_uncertainty(&state)?;
        if u < agent.threshold {
            break TerminationReason::Threshold;
        }
        let choice = explore_action(&state, agent, rng)?;
        let out = env.step(&choice.action)?;
        budget.consume();
        log.steps.push(StepRecord {
            trajectory: 0,
            t: steps.len(),
            obs: state.obs().to_vec(),
            action: choice.action.clone(),
            state_uncertainty: Some(u),
            action_score: choice.score,
            explored: choice.explored,
            stage: Stage::Explore,
        });
        steps.push(make_transition(&state, &choice.action, &out, 0, &env.spec));
        state = out.next;
        if out.done {
            break TerminationReason::EpisodeDone;
        }
    };
    log.trajectories.push(TrajectoryRecord {
        trajectory: 0,
        initial_obs: start.obs().to_vec(),
        initial_score: Some(first_score),
        length: steps.len(),
        travel_steps: 0,
        reason,
    });
    Ok((steps, reason, log))
}

fn make_transition(s: &EnvState, a: &[f64], out: &env::StepOutcome, id: u64, spec: &MazeSpec) -> Transition {
    Transition {
        obs: s.obs().to_vec(),
        act: env::clip_action(spec, a).to_vec(),
        next_obs: out.next.obs().to_vec(),
        rew: out.reward,
        done: out.done,
        episode_id: id,
    }
}

/// `q`-quantile (linear interpolation) of the max-aggregated uncertainty
/// over at most `sample` states of `table`; 0 for an empty table.
pub fn threshold_from_quantile(
    e: &RepresentationEnsemble,
    table: &TransitionTable,
    q: f64,
    sample: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if table.is_empty() {
        return Ok(0.0);
    }
    let n = table.len();
    let obs: Vec<f64> = if n <= sample {
        table.obs.clone()
    } else {
        let mut picks = index::sample(rng, n, sample).into_vec();
        picks.sort_unstable();
        picks.iter().flat_map(|&i| table.obs_row(i).to_vec()).collect()
    };
    let mut u = e.state_uncertainties(&obs, obs.len() / table.obs_dim, Aggregator::Max)?;
    u.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (u.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(u[lo] + (u[hi] - u[lo]) * (pos - lo as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitMode {
    /// Start from the environment's own distribution.
    Reset,
    /// Jump to the most uncertain candidate.
    Active,
    /// Start from the environment's distribution and travel to the most
    /// uncertain candidate's cluster first.
    Restricted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExploreMode {
    /// Uniform actions over the force box.
    Random,
    /// The policy plus small Gaussian noise.
    Policy,
    /// ε-greedy uncertainty maximization.
    Uncertainty,
    /// ε-greedy novelty against a distilled copy of the policy.
    Distilled,
}

/// An initial-state rule paired with an exploration rule. Only
/// uncertainty-driven exploration stops on the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArmSpec {
    pub init: InitMode,
    pub explore: ExploreMode,
}

impl ArmSpec {
    pub const ACTIVE: ArmSpec = ArmSpec {
        init: InitMode::Active,
        explore: ExploreMode::Uncertainty,
    };
    pub const FINETUNE: ArmSpec = ArmSpec {
        init: InitMode::Reset,
        explore: ExploreMode::Policy,
    };

    pub fn terminates_on_threshold(&self) -> bool {
        self.explore == ExploreMode::Uncertainty
    }

    pub fn needs_ensemble(&self) -> bool {
        self.init != InitMode::Reset || self.explore == ExploreMode::Uncertainty
    }

    pub fn label(&self) -> String {
        let init = match self.init {
            InitMode::Reset => "I",
            InitMode::Active => "A",
            InitMode::Restricted => "G",
        };
        let explore = match self.explore {
            ExploreMode::Random => "R",
            ExploreMode::Policy => "P",
            ExploreMode::Uncertainty => "U",
            ExploreMode::Distilled => "D",
        };
        format!("{init}+{explore}")
    }
}

impl fmt::Display for ArmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ArmSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown arm `{s}` (expected e.g. A+U, I+P)"));
        let (i, e) = s.trim().split_once('+').ok_or_else(bad)?;
        let init = match i {
            "I" => InitMode::Reset,
            "A" => InitMode::Active,
            "G" => InitMode::Restricted,
            _ => return Err(bad()),
        };
        let explore = match e {
            "R" => ExploreMode::Random,
            "P" => ExploreMode::Policy,
            "U" => ExploreMode::Uncertainty,
            "D" => ExploreMode::Distilled,
            _ => return Err(bad()),
        };
        Ok(ArmSpec { init, explore })
    }
}

/// Where candidate start states come from.
#[derive(Clone, Copy, Debug)]
pub enum CandidatePool<'a> {
    States(&'a [EnvState]),
    /// Fresh draws from the environment's start distribution.
    Resets,
}

/// Read-only inputs for one collection step.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub policy: &'a DeterministicPolicy,
    pub ensemble: Option<&'a RepresentationEnsemble>,
    pub distilled: Option<&'a DistilledEnsemble>,
    pub travel: Option<&'a TravelPlan>,
    pub candidates: CandidatePool<'a>,
    pub threshold: f64,
    pub cfg: &'a ExplorationConfig,
}

impl<'a> Resources<'a> {
    fn ensemble(&self) -> Result<&'a RepresentationEnsemble> {
        self.ensemble
            .ok_or_else(|| Error::InvalidState("arm needs a representation ensemble".into()))
    }

    fn agent(&self) -> Result<ActiveAgent<'a>> {
        ActiveAgent::new(self.ensemble()?, self.policy, self.cfg, self.threshold)
    }
}

#[derive(Clone, Debug)]
struct Running {
    id: u64,
    length: usize,
    initial_obs: Vec<f64>,
    initial_score: Option<f64>,
    stage: Stage,
    waypoint: Option<[f64; 2]>,
    travel_steps: usize,
}

/// Step-at-a-time collector for one arm. Every call to
/// [`Explorer::next_transition`] takes exactly one environment step,
/// starting new trajectories as needed.
#[derive(Clone, Debug)]
pub struct Explorer {
    pub arm: ArmSpec,
    env: MazeEnv,
    current: Option<Running>,
    next_id: u64,
    zero_streak: usize,
    pub log: CollectionLog,
}

impl Explorer {
    pub fn new(arm: ArmSpec, spec: MazeSpec, rng: &mut Rng) -> Self {
        let env = if arm.init == InitMode::Restricted {
            MazeEnv::restricted(spec, rng)
        } else {
            MazeEnv::new(spec, rng)
        };
        Explorer {
            arm,
            env,
            current: None,
            next_id: 0,
            zero_streak: 0,
            log: CollectionLog::default(),
        }
    }

    pub fn spec(&self) -> &MazeSpec {
        &self.env.spec
    }

    pub fn in_trajectory(&self) -> bool {
        self.current.is_some()
    }

    fn draw_candidates(&self, res: &Resources<'_>, rng: &mut Rng) -> Result<CandidateSet> {
        let n = res.cfg.n_candidates;
        match res.candidates {
            CandidatePool::States(states) => {
                if states.is_empty() {
                    return Err(Error::invalid("candidate pool is empty"));
                }
                let picks: Vec<EnvState> = if n <= states.len() {
                    index::sample(rng, states.len(), n)
                        .into_iter()
                        .map(|i| states[i])
                        .collect()
                } else {
                    (0..n).map(|_| states[rng.gen_range(0..states.len())]).collect()
                };
                CandidateSet::new(picks, env::CandidateSource::DatasetStates)
            }
            CandidatePool::Resets => {
                let picks = (0..n).map(|_| env::reset(&self.env.spec, rng)).collect();
                CandidateSet::new(picks, env::CandidateSource::Custom)
            }
        }
    }

    fn begin(&mut self, res: &Resources<'_>, rng: &mut Rng) -> Result<()> {
        let mut run = Running {
            id: self.next_id,
            length: 0,
            initial_obs: Vec::new(),
            initial_score: None,
            stage: Stage::Explore,
            waypoint: None,
            travel_steps: 0,
        };
        self.next_id += 1;
        match self.arm.init {
            InitMode::Reset => {
                self.env.reset(rng);
            }
            InitMode::Active => {
                let c = self.draw_candidates(res, rng)?;
                let (best, scores) = select_initial_state(&c, res.ensemble()?)?;
                self.env.reset_to(&c.states[best])?;
                run.initial_score = Some(scores[best]);
            }
            InitMode::Restricted => {
                let plan = res
                    .travel
                    .ok_or_else(|| Error::InvalidState("restricted arm needs a travel plan".into()))?;
                let start = self.env.reset(rng);
                let c = self.draw_candidates(res, rng)?;
                let (best, scores) = select_initial_state(&c, res.ensemble()?)?;
                run.initial_score = Some(scores[best]);
                let waypoint = plan.waypoint_for(&c.states[best], rng)?;
                if env::dist(start.position, waypoint) > plan.switch_radius {
                    run.stage = Stage::Travel;
                    run.waypoint = Some(waypoint);
                }
            }
        }
        run.initial_obs = self.env.state().obs().to_vec();
        self.current = Some(run);
        Ok(())
    }

    fn finish(&mut self, reason: TerminationReason) {
        if let Some(run) = self.current.take() {
            self.zero_streak = if run.length == 0 { self.zero_streak + 1 } else { 0 };
            self.log.trajectories.push(TrajectoryRecord {
                trajectory: run.id,
                initial_obs: run.initial_obs,
                initial_score: run.initial_score,
                length: run.length,
                travel_steps: run.travel_steps,
                reason,
            });
        }
    }

    /// Closes the running trajectory, if any, as out of budget.
    pub fn truncate(&mut self) {
        self.finish(TerminationReason::BudgetExhausted);
    }

    fn choose(&self, res: &Resources<'_>, state: &EnvState, rng: &mut Rng) -> Result<ExploreChoice> {
        let bound = self.env.spec.max_force;
        let obs = state.obs();
        match self.arm.explore {
            ExploreMode::Random => Ok(ExploreChoice {
                action: (0..ACT_DIM).map(|_| rng.gen_range(-bound..=bound)).collect(),
                explored: false,
                score: None,
            }),
            ExploreMode::Policy => {
                let base = res.policy.act(&obs)?;
                Ok(ExploreChoice {
                    action: gaussian_perturbations(&base, 1, res.cfg.policy_noise, bound, rng),
                    explored: false,
                    score: None,
                })
            }
            ExploreMode::Uncertainty => explore_action(state, &res.agent()?, rng),
            ExploreMode::Distilled => {
                let distilled = res
                    .distilled
                    .ok_or_else(|| Error::InvalidState("arm needs a distilled ensemble".into()))?;
                let base = res.policy.act(&obs)?;
                let u: f64 = rng.gen();
                if u >= res.cfg.epsilon {
                    return Ok(ExploreChoice {
                        action: gaussian_perturbations(&base, 1, res.cfg.policy_noise, bound, rng),
                        explored: false,
                        score: None,
                    });
                }
                let m = res.cfg.n_action_samples;
                let cands = gaussian_perturbations(&base, m, res.cfg.noise_scale, bound, rng);
                let scores = distilled.action_novelty(&obs, &cands, m)?;
                let best = argmax_first(&scores);
                Ok(ExploreChoice {
                    action: cands[best * ACT_DIM..(best + 1) * ACT_DIM].to_vec(),
                    explored: true,
                    score: Some(scores[best]),
                })
            }
        }
    }

    /// Takes exactly one environment step. The returned transition's
    /// `episode_id` is the explorer's trajectory counter.
    pub fn next_transition(&mut self, res: &Resources<'_>, rng: &mut Rng) -> Result<Transition> {
        loop {
            if self.current.is_none() {
                self.begin(res, rng)?;
            }
            let state = *self.env.state();
            let run = self.current.as_mut().expect("trajectory started");
            if run.stage == Stage::Travel {
                let plan = res.travel.expect("travel stage implies a plan");
                let target = run.waypoint.expect("travel stage has a waypoint");
                if env::dist(state.position, target) <= plan.switch_radius
                    || run.travel_steps >= plan.stage_cap
                {
                    run.stage = Stage::Explore;
                }
            }
            let stage = run.stage;
            let forced = run.length == 0 && self.zero_streak >= res.cfg.stall_limit;
            let mut state_u = None;
            if stage == Stage::Explore && self.arm.terminates_on_threshold() {
                let u = res.agent()?.state_uncertainty(&state)?;
                if u < res.threshold && !forced {
                    self.finish(TerminationReason::Threshold);
                    continue;
                }
                state_u = Some(u);
            }
            let choice = match stage {
                Stage::Travel => {
                    let plan = res.travel.expect("travel stage implies a plan");
                    let run = self.current.as_ref().unwrap();
                    ExploreChoice {
                        action: plan.goal_policy.act(&state.obs(), run.waypoint.unwrap())?,
                        explored: false,
                        score: None,
                    }
                }
                Stage::Explore => self.choose(res, &state, rng)?,
            };
            let out = self.env.step(&choice.action)?;
            let run = self.current.as_mut().unwrap();
            let t = make_transition(&state, &choice.action, &out, run.id, &self.env.spec);
            self.log.steps.push(StepRecord {
                trajectory: run.id,
                t: run.length,
                obs: state.obs().to_vec(),
                action: t.act.clone(),
                state_uncertainty: state_u,
                action_score: choice.score,
                explored: choice.explored,
                stage,
            });
            run.length += 1;
            if stage == Stage::Travel {
                run.travel_steps += 1;
            }
            if out.done {
                self.finish(TerminationReason::EpisodeDone);
            }
            return Ok(t);
        }
    }
}

/// Sizes of the collect/retrain schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub budget: usize,
    /// Transitions collected per epoch.
    pub epoch_transitions: usize,
    /// Policy updates per epoch.
    pub epoch_updates: usize,
    pub eval_episodes: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            budget: 40_000,
            epoch_transitions: 5_000,
            epoch_updates: 15_000,
            eval_episodes: eval::EVAL_EPISODES,
        }
    }
}

impl LoopConfig {
    pub fn n_epochs(&self) -> usize {
        self.budget.div_ceil(self.epoch_transitions.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 || self.epoch_transitions == 0 || self.eval_episodes == 0 {
            return Err(Error::invalid(
                "budget, epoch_transitions and eval_episodes must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub env_steps_used: usize,
    pub threshold: f64,
    pub alpha: f64,
    pub mean_return: f64,
    pub normalized_score: f64,
}

/// Everything a collection run produces.
#[derive(Clone, Debug)]
pub struct LoopOutcome {
    pub learner: Td3Bc,
    pub ensemble: Option<RepresentationEnsemble>,
    pub dataset: Dataset,
    pub log: CollectionLog,
    pub curve: LearningCurve,
    pub epochs: Vec<EpochSummary>,
}

impl LoopOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,env_steps_used,mean_return,normalized_score\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.env_steps_used, e.mean_return, e.normalized_score
            ));
        }
        out
    }
}

/// Shared inputs of an epoch-based collection run.
#[derive(Clone, Copy)]
pub struct LoopInputs<'a> {
    pub spec: &'a MazeSpec,
    pub refs: &'a ReferenceScores,
    /// Candidate start states (typically every state of the full dataset).
    pub candidates: &'a [EnvState],
    pub offline: &'a OfflineConfig,
    pub repr: &'a repr::ReprConfig,
    pub explore: &'a ExplorationConfig,
    pub schedule: &'a LoopConfig,
    pub distilled: Option<&'a DistilledEnsemble>,
    pub travel: Option<&'a TravelPlan>,
    pub seed: u64,
}

/// Epoch loop: collect `min(X, remaining)` transitions with `arm`, append
/// them, fine-tune the policy with the decayed weight, continue training
/// the ensemble, evaluate. Stops when the budget is spent.
pub fn run_arm(
    arm: ArmSpec,
    d0: &Dataset,
    learner: Td3Bc,
    ensemble: Option<RepresentationEnsemble>,
    inputs: &LoopInputs<'_>,
) -> Result<LoopOutcome> {
    let sched = inputs.schedule;
    sched.validate()?;
    inputs.explore.validate()?;
    if arm.needs_ensemble() && ensemble.is_none() {
        return Err(Error::InvalidState(format!("arm {arm} needs a representation ensemble")));
    }
    let seed = inputs.seed;
    let mut learner = learner;
    let mut ensemble = if arm.needs_ensemble() { ensemble } else { None };
    let mut dataset = d0.clone();
    let mut table = dataset.to_table();
    let mut budget = Budget::new(sched.budget);
    let mut explorer = Explorer::new(arm, inputs.spec.clone(), &mut rng::stream(seed, "env"));
    let mut collect_rng = rng::stream(seed, "collect");
    let mut train_rng = rng::stream(seed, "finetune");
    let mut repr_rng = rng::stream(seed, "repr/continue");
    let mut threshold_rng = rng::stream(seed, "threshold");
    let mut curve = LearningCurve::new(arm.label(), seed, inputs.spec.layout_name.clone());
    let mut epochs = Vec::new();
    let n_epochs = sched.n_epochs();

    for epoch in 0..n_epochs {
        let take = sched.epoch_transitions.min(budget.remaining);
        if take == 0 {
            break;
        }
        let threshold = match (&ensemble, inputs.explore.uncertainty_threshold) {
            (_, Some(t)) => t,
            (Some(e), None) if arm.terminates_on_threshold() => threshold_from_quantile(
                e,
                &table,
                inputs.explore.threshold_quantile,
                inputs.explore.threshold_sample,
                &mut threshold_rng,
            )?,
            _ => 0.0,
        };
        let mut buffer = Vec::with_capacity(take);
        {
            let res = Resources {
                policy: &learner.policy,
                ensemble: ensemble.as_ref(),
                distilled: inputs.distilled,
                travel: inputs.travel,
                candidates: CandidatePool::States(inputs.candidates),
                threshold,
                cfg: inputs.explore,
            };
            for _ in 0..take {
                buffer.push(explorer.next_transition(&res, &mut collect_rng)?);
                budget.consume();
            }
        }
        explorer.truncate();
        for t in &buffer {
            table.push(&t.obs, &t.act, &t.next_obs, t.rew, t.done);
        }
        dataset.append_buffer(buffer)?;
        let alpha = offline::finetune_epoch(
            &mut learner,
            &table,
            inputs.offline,
            epoch,
            n_epochs,
            sched.epoch_updates,
            &mut train_rng,
        )?;
        if let Some(e) = ensemble.as_mut() {
            let rc = inputs.repr;
            repr::train_ensemble_on_table(e, &table, rc.update_steps, rc.batch_size, &mut repr_rng)?;
        }
        let report = eval::evaluate(
            inputs.spec,
            &mut learner.policy.clone(),
            sched.eval_episodes,
            inputs.refs,
            &mut rng::stream(seed, &format!("eval/{epoch}")),
        )?;
        curve.push(budget.used() as u64, report.normalized_score)?;
        epochs.push(EpochSummary {
            epoch,
            env_steps_used: budget.used(),
            threshold,
            alpha,
            mean_return: report.mean_return,
            normalized_score: report.normalized_score,
        });
    }
    debug_assert_eq!(dataset.len() - d0.len(), budget.used());
    Ok(LoopOutcome {
        learner,
        ensemble,
        dataset,
        log: explorer.log,
        curve,
        epochs,
    })
}

/// The active method: most-uncertain starts, ε-greedy uncertainty
/// exploration, threshold termination.
pub fn active_loop(
    d0: &Dataset,
    learner: Td3Bc,
    ensemble: RepresentationEnsemble,
    inputs: &LoopInputs<'_>,
) -> Result<LoopOutcome> {
    run_arm(ArmSpec::ACTIVE, d0, learner, Some(ensemble), inputs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub budget: usize,
    /// Policy updates after every collected transition.
    pub updates_per_step: usize,
    /// Representation updates after every collected transition.
    pub repr_updates_per_step: usize,
    /// Environment steps between evaluations and threshold refreshes.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            budget: 10_000,
            updates_per_step: 5,
            repr_updates_per_step: 1,
            eval_every: 1_000,
            eval_episodes: eval::EVAL_EPISODES,
        }
    }
}

/// Learning from an empty dataset with no behavior-cloning term: one
/// transition collected, then `updates_per_step` updates, repeated.
/// Active arms draw candidates from fresh environment resets.
#[allow(clippy::too_many_arguments)]
pub fn online_loop(
    arm: ArmSpec,
    spec: &MazeSpec,
    refs: &ReferenceScores,
    offline_cfg: &OfflineConfig,
    repr_cfg: &repr::ReprConfig,
    explore: &ExplorationConfig,
    cfg: &OnlineConfig,
    seed: u64,
) -> Result<LoopOutcome> {
    explore.validate()?;
    if cfg.budget == 0 || cfg.eval_every == 0 || cfg.eval_episodes == 0 {
        return Err(Error::invalid("budget, eval_every and eval_episodes must be positive"));
    }
    let offline_cfg = OfflineConfig {
        alpha: 0.0,
        ..offline_cfg.clone()
    };
    let mut learner = Td3Bc::new(
        env::OBS_DIM,
        ACT_DIM,
        spec.max_force,
        ObsNormalizer::from_maze(spec),
        &offline_cfg,
        rng::derive_seed(seed, "online/learner"),
    )?;
    let mut ensemble = if arm.needs_ensemble() {
        Some(RepresentationEnsemble::new(
            env::OBS_DIM,
            ACT_DIM,
            repr_cfg,
            rng::derive_seed(seed, "online/repr"),
        )?)
    } else {
        None
    };
    let mut table = TransitionTable::with_dims(env::OBS_DIM, ACT_DIM);
    let mut collected = Vec::with_capacity(cfg.budget);
    let mut explorer = Explorer::new(arm, spec.clone(), &mut rng::stream(seed, "env"));
    let mut collect_rng = rng::stream(seed, "collect");
    let mut train_rng = rng::stream(seed, "finetune");
    let mut repr_rng = rng::stream(seed, "repr/continue");
    let mut threshold_rng = rng::stream(seed, "threshold");
    let mut curve = LearningCurve::new(format!("online {}", arm.label()), seed, spec.layout_name.clone());
    let mut epochs = Vec::new();
    let mut threshold = explore.uncertainty_threshold.unwrap_or(0.0);
    let repr_streams: Vec<u64> = ensemble
        .as_ref()
        .map(|e| (0..e.k()).map(|_| repr_rng.gen()).collect())
        .unwrap_or_default();
    let mut repr_stream_rngs: Vec<Rng> = repr_streams.iter().map(|&s| rng::from_seed(s)).collect();

    for step in 1..=cfg.budget {
        let t = {
            let res = Resources {
                policy: &learner.policy,
                ensemble: ensemble.as_ref(),
                distilled: None,
                travel: None,
                candidates: CandidatePool::Resets,
                threshold,
                cfg: explore,
            };
            explorer.next_transition(&res, &mut collect_rng)?
        };
        table.push(&t.obs, &t.act, &t.next_obs, t.rew, t.done);
        collected.push(t);
        learner.train(&table, cfg.updates_per_step, 0.0, &offline_cfg, &mut train_rng)?;
        if let Some(e) = ensemble.as_mut() {
            train_members(e, &table, cfg.repr_updates_per_step, repr_cfg.batch_size, &mut repr_stream_rngs)?;
        }
        if step % cfg.eval_every == 0 || step == cfg.budget {
            if let (Some(e), None) = (&ensemble, explore.uncertainty_threshold) {
                if arm.terminates_on_threshold() {
                    threshold = threshold_from_quantile(
                        e,
                        &table,
                        explore.threshold_quantile,
                        explore.threshold_sample,
                        &mut threshold_rng,
                    )?;
                }
            }
            let epoch = epochs.len();
            let report = eval::evaluate(
                spec,
                &mut learner.policy.clone(),
                cfg.eval_episodes,
                refs,
                &mut rng::stream(seed, &format!("eval/{epoch}")),
            )?;
            curve.push(step as u64, report.normalized_score)?;
            epochs.push(EpochSummary {
                epoch,
                env_steps_used: step,
                threshold,
                alpha: 0.0,
                mean_return: report.mean_return,
                normalized_score: report.normalized_score,
            });
        }
    }
    explorer.truncate();
    let mut dataset = Dataset::new(spec.layout_name.clone(), format!("online {}", arm.label()));
    dataset.append_buffer(collected)?;
    Ok(LoopOutcome {
        learner,
        ensemble,
        dataset,
        log: explorer.log,
        curve,
        epochs,
    })
}

/// `steps` updates per member, each member drawing from its own persistent
/// stream.
fn train_members(
    e: &mut RepresentationEnsemble,
    table: &TransitionTable,
    steps: usize,
    batch_size: usize,
    streams: &mut [Rng],
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let seeds: Vec<u64> = streams.iter_mut().map(|r| r.gen()).collect();
    repr::train_ensemble_with_streams(e, table, steps, batch_size, &seeds)
}
