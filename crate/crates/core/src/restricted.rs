//! Collection when the environment only starts from its own distribution:
//! a distance-weighted state graph, Louvain communities over it, and a
//! goal-conditioned policy that carries the agent to the chosen region
//! before exploration begins.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufReader, Read, Write};
use std::fs::File;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TransitionTable};
use crate::env::{self, EnvState, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn;
use crate::offline::{self, DeterministicPolicy, ObsNormalizer, OfflineConfig, Td3Bc};
use crate::rng::Rng;

/// Dimension of the goal appended to observations.
pub const GOAL_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct StateGraph {
    pub states: Vec<EnvState>,
    /// Each undirected edge once, as `(i, j, w)` with `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
    pub threshold: f64,
}

impl StateGraph {
    pub fn n_nodes(&self) -> usize {
        self.states.len()
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        self.states[i].position
    }

    /// Symmetric adjacency lists.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for &(i, j, w) in &self.edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        adj
    }
}

fn state_distance(a: &EnvState, b: &EnvState) -> f64 {
    let (x, y) = (a.obs(), b.obs());
    x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Subsamples at most `max_nodes` dataset states and joins every pair whose
/// weight `exp(-‖s_i - s_j‖)` reaches `threshold`.
pub fn build_state_graph(d: &Dataset, max_nodes: usize, threshold: f64, rng: &mut Rng) -> Result<StateGraph> {
    if d.is_empty() {
        return Err(Error::EmptyDataset("state graph"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("edge threshold must lie in (0, 1)"));
    }
    if max_nodes == 0 {
        return Err(Error::invalid("max_nodes must be positive"));
    }
    let all = d.states()?;
    let states: Vec<EnvState> = if all.len() <= max_nodes {
        all
    } else {
        let mut picks = index::sample(rng, all.len(), max_nodes).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| all[i]).collect()
    };
    Ok(graph_from_states(states, threshold))
}

pub fn graph_from_states(states: Vec<EnvState>, threshold: f64) -> StateGraph {
    let mut edges = Vec::new();
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let w = (-state_distance(&states[i], &states[j])).exp();
            if w >= threshold {
                edges.push((i, j, w));
            }
        }
    }
    StateGraph {
        states,
        edges,
        threshold,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Community id per node; ids are contiguous from 0.
    pub assignment: Vec<usize>,
    pub modularity: f64,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.assignment.iter().map(|&c| c + 1).max().unwrap_or(0)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }

    /// Rows `node_index,x,y,cluster_id`.
    pub fn to_csv(&self, g: &StateGraph) -> String {
        let mut out = String::from("node_index,x,y,cluster_id\n");
        for (i, c) in self.assignment.iter().enumerate() {
            let p = g.position(i);
            writeln!(out, "{i},{},{},{c}", p[0], p[1]).expect("string write");
        }
        out
    }
}

/// Newman modularity of `assignment` on the weighted graph `g`.
pub fn modularity(g: &StateGraph, assignment: &[usize]) -> f64 {
    let two_m: f64 = 2.0 * g.edges.iter().map(|e| e.2).sum::<f64>();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut degree = vec![0.0; g.n_nodes()];
    let mut internal: BTreeMap<usize, f64> = BTreeMap::new();
    for &(i, j, w) in &g.edges {
        degree[i] += w;
        degree[j] += w;
        if assignment[i] == assignment[j] {
            *internal.entry(assignment[i]).or_default() += 2.0 * w;
        }
    }
    let mut tot: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, &k) in degree.iter().enumerate() {
        *tot.entry(assignment[i]).or_default() += k;
    }
    tot.iter()
        .map(|(c, &t)| internal.get(c).copied().unwrap_or(0.0) - t * t / two_m)
        .sum::<f64>()
        / two_m
}

/// Weighted graph with explicit self-loops, as produced by aggregation.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
}

impl Level {
    fn degree(&self, i: usize) -> f64 {
        self.self_loop[i] + self.adj[i].iter().map(|e| e.1).sum::<f64>()
    }
}

/// Local-moving phase. Returns the community of each node and whether any
/// node moved.
fn local_moves(level: &Level, two_m: f64, rng: &mut Rng) -> (Vec<usize>, bool) {
    let n = level.adj.len();
    let degree: Vec<f64> = (0..n).map(|i| level.degree(i)).collect();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot = degree.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut moved_any = false;
    let mut links: HashMap<usize, f64> = HashMap::new();
    loop {
        let mut moved = false;
        for &i in &order {
            let own = comm[i];
            links.clear();
            links.insert(own, 0.0);
            for &(j, w) in &level.adj[i] {
                *links.entry(comm[j]).or_default() += w;
            }
            tot[own] -= degree[i];
            let gain = |c: usize, k_in: f64| k_in - tot[c] * degree[i] / two_m;
            let mut best = own;
            let mut best_gain = gain(own, links[&own]);
            let mut cands: Vec<(usize, f64)> = links.iter().map(|(&c, &k)| (c, k)).collect();
            cands.sort_unstable_by_key(|e| e.0);
            for (c, k_in) in cands {
                let g = gain(c, k_in);
                if g > best_gain + 1e-12 * best_gain.abs().max(1e-300) {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += degree[i];
            if best != own {
                comm[i] = best;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    (comm, moved_any)
}

fn relabel_contiguous(comm: &mut [usize]) -> usize {
    let mut map = HashMap::new();
    for c in comm.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

fn aggregate(level: &Level, comm: &[usize], n_comm: usize) -> Level {
    let mut acc: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n_comm];
    let mut self_loop = vec![0.0; n_comm];
    for i in 0..level.adj.len() {
        let ci = comm[i];
        self_loop[ci] += level.self_loop[i];
        for &(j, w) in &level.adj[i] {
            let cj = comm[j];
            if ci == cj {
                self_loop[ci] += w;
            } else {
                *acc[ci].entry(cj).or_default() += w;
            }
        }
    }
    let adj = acc
        .into_iter()
        .map(|m| {
            let mut v: Vec<(usize, f64)> = m.into_iter().collect();
            v.sort_unstable_by_key(|e| e.0);
            v
        })
        .collect();
    Level { adj, self_loop }
}

/// Two-phase Louvain: local moves, then community aggregation, until no
/// node changes community. Visitation order comes from `rng`.
pub fn louvain(g: &StateGraph, rng: &mut Rng) -> Result<Clustering> {
    let n = g.n_nodes();
    if n == 0 {
        return Err(Error::invalid("graph has no nodes"));
    }
    let mut assignment: Vec<usize> = (0..n).collect();
    let two_m: f64 = 2.0 * g.edges.iter().map(|e| e.2).sum::<f64>();
    if two_m > 0.0 {
        let mut level = Level {
            adj: g.adjacency(),
            self_loop: vec![0.0; n],
        };
        loop {
            let (mut comm, moved) = local_moves(&level, two_m, rng);
            if !moved {
                break;
            }
            let n_comm = relabel_contiguous(&mut comm);
            for a in assignment.iter_mut() {
                *a = comm[*a];
            }
            level = aggregate(&level, &comm, n_comm);
        }
    }
    relabel_contiguous(&mut assignment);
    let modularity = modularity(g, &assignment);
    Ok(Clustering {
        assignment,
        modularity,
    })
}

/// Transitions whose observations carry the goal position as two extra
/// columns.
#[derive(Clone, Debug)]
pub struct GoalTable {
    pub table: TransitionTable,
}

impl GoalTable {
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn goal(&self, i: usize) -> [f64; 2] {
        let row = self.table.obs_row(i);
        [row[OBS_DIM], row[OBS_DIM + 1]]
    }
}

/// Hindsight relabeling: each trajectory is cut into consecutive full
/// windows of `window` transitions; the goal is the window's final
/// position, reached (reward 1, done) on its last transition.
pub fn relabel_subtrajectories(d: &Dataset, window: usize) -> Result<GoalTable> {
    if window < 2 {
        return Err(Error::invalid("window must be at least 2"));
    }
    let obs_dim = d.obs_dim().unwrap_or(OBS_DIM);
    let act_dim = d.act_dim().unwrap_or(env::ACT_DIM);
    let mut table = TransitionTable::with_dims(obs_dim + GOAL_DIM, act_dim);
    for traj in d.trajectories() {
        for w in traj.transitions.chunks_exact(window) {
            let last = &w[window - 1];
            let goal = [last.next_obs[0], last.next_obs[1]];
            for (k, t) in w.iter().enumerate() {
                let end = k == window - 1;
                let obs: Vec<f64> = t.obs.iter().chain(&goal).copied().collect();
                let next: Vec<f64> = t.next_obs.iter().chain(&goal).copied().collect();
                table.push(&obs, &t.act, &next, if end { 1.0 } else { 0.0 }, end);
            }
        }
    }
    Ok(GoalTable { table })
}

/// Actor over `obs ‖ goal`.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalPolicy {
    pub policy: DeterministicPolicy,
}

impl GoalPolicy {
    pub fn act(&self, obs: &[f64], goal: [f64; 2]) -> Result<Vec<f64>> {
        let input: Vec<f64> = obs.iter().chain(&goal).copied().collect();
        self.policy.act(&input)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        self.policy.write_checkpoint(w)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let policy = DeterministicPolicy::read_checkpoint(r)?;
        if policy.obs_dim() != OBS_DIM + GOAL_DIM {
            return Err(Error::Checkpoint("goal policy input has the wrong width".into()));
        }
        Ok(GoalPolicy { policy })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.policy.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        GoalPolicy::read_checkpoint(&mut BufReader::new(file))
    }
}

/// TD3+BC on the relabeled transitions for `cfg.steps` updates.
pub fn train_goal_policy(data: &GoalTable, max_action: f64, cfg: &OfflineConfig, rng: &mut Rng) -> Result<GoalPolicy> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("goal-policy training"));
    }
    let normalizer = ObsNormalizer::from_table(&data.table)?;
    let seed: u64 = rng.gen();
    let mut learner = Td3Bc::new(
        data.table.obs_dim,
        data.table.act_dim,
        max_action,
        normalizer,
        cfg,
        seed,
    )?;
    learner.train(&data.table, cfg.steps, cfg.alpha, cfg, rng)?;
    Ok(GoalPolicy {
        policy: learner.policy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestrictedConfig {
    pub max_nodes: usize,
    pub edge_threshold: f64,
    pub window: usize,
    pub switch_radius: f64,
    pub stage_cap: usize,
    /// Goal-policy training updates.
    pub goal_steps: usize,
}

impl Default for RestrictedConfig {
    fn default() -> Self {
        RestrictedConfig {
            max_nodes: 2000,
            edge_threshold: 1e-2,
            window: 32,
            switch_radius: 1.0,
            stage_cap: 150,
            goal_steps: 20_000,
        }
    }
}

/// Everything the first (travel) stage needs.
#[derive(Clone, Debug)]
pub struct TravelPlan {
    pub goal_policy: GoalPolicy,
    pub graph: StateGraph,
    pub clustering: Clustering,
    pub switch_radius: f64,
    pub stage_cap: usize,
}

impl TravelPlan {
    /// Builds the graph, clusters it and trains the goal policy.
    pub fn build(d: &Dataset, max_action: f64, cfg: &RestrictedConfig, offline_cfg: &OfflineConfig, rng: &mut Rng) -> Result<Self> {
        let graph = build_state_graph(d, cfg.max_nodes, cfg.edge_threshold, rng)?;
        let clustering = louvain(&graph, rng)?;
        let relabeled = relabel_subtrajectories(d, cfg.window)?;
        let goal_cfg = OfflineConfig {
            steps: cfg.goal_steps,
            ..offline_cfg.clone()
        };
        let goal_policy = train_goal_policy(&relabeled, max_action, &goal_cfg, rng)?;
        Ok(TravelPlan {
            goal_policy,
            graph,
            clustering,
            switch_radius: cfg.switch_radius,
            stage_cap: cfg.stage_cap,
        })
    }

    /// Cluster containing the graph node nearest to `target` by position.
    pub fn nearest_cluster(&self, target: &EnvState) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.graph.n_nodes() {
            let d = env::dist(self.graph.position(i), target.position);
            if d < best.0 {
                best = (d, i);
            }
        }
        self.clustering.assignment[best.1]
    }

    /// Position of a uniformly drawn member of the cluster nearest to
    /// `target`.
    pub fn waypoint_for(&self, target: &EnvState, rng: &mut Rng) -> Result<[f64; 2]> {
        let members = self.clustering.members(self.nearest_cluster(target));
        let pick = members
            .choose(rng)
            .ok_or_else(|| Error::InvalidState("empty cluster".into()))?;
        Ok(self.graph.position(*pick))
    }

    /// Goal policy, then the graph nodes with their cluster ids.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        self.goal_policy.write_checkpoint(w)?;
        let mut nodes = Vec::with_capacity(self.graph.n_nodes() * (OBS_DIM + 1));
        for (s, &c) in self.graph.states.iter().zip(&self.clustering.assignment) {
            nodes.extend_from_slice(&s.obs());
            nodes.push(c as f64);
        }
        nn::write_f64s(w, &nodes)?;
        nn::write_f64s(
            w,
            &[
                self.graph.threshold,
                self.clustering.modularity,
                self.switch_radius,
                self.stage_cap as f64,
            ],
        )
    }

    /// Edges are rebuilt from the stored nodes and threshold.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let goal_policy = GoalPolicy::read_checkpoint(r)?;
        let nodes = nn::read_f64s(r, "graph nodes")?;
        let tail = nn::read_f64s(r, "travel settings")?;
        if nodes.len() % (OBS_DIM + 1) != 0 || tail.len() != 4 {
            return Err(Error::Checkpoint("malformed travel plan".into()));
        }
        let mut states = Vec::new();
        let mut assignment = Vec::new();
        for row in nodes.chunks_exact(OBS_DIM + 1) {
            states.push(EnvState::from_obs(&row[..OBS_DIM])?);
            assignment.push(row[OBS_DIM] as usize);
        }
        Ok(TravelPlan {
            goal_policy,
            graph: graph_from_states(states, tail[0]),
            clustering: Clustering {
                assignment,
                modularity: tail[1],
            },
            switch_radius: tail[2],
            stage_cap: tail[3] as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        offline::save_with(path, |w| self.write_checkpoint(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        TravelPlan::read_checkpoint(&mut BufReader::new(file))
    }
}
