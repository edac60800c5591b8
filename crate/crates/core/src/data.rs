//! Offline transition datasets.
//!
//! On disk a dataset is a small `#`-prefixed header followed by one
//! transition per line: `obs|act|next_obs|rew|done|episode_id`, vectors
//! comma-separated, floats written with 17 significant digits.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvState, MazeSpec};
use crate::error::{Error, Result};
use crate::planner::Controller;
use crate::rng::Rng;

const FORMAT_TAG: &str = "# aorl-dataset v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub rew: f64,
    pub done: bool,
    pub episode_id: u64,
}

impl Transition {
    pub fn position(&self) -> [f64; 2] {
        [self.obs[0], self.obs[1]]
    }

    pub fn next_position(&self) -> [f64; 2] {
        [self.next_obs[0], self.next_obs[1]]
    }
}

/// A contiguous run of transitions sharing one episode id.
#[derive(Clone, Copy, Debug)]
pub struct Trajectory<'a> {
    pub transitions: &'a [Transition],
}

impl<'a> Trajectory<'a> {
    pub fn episode_id(&self) -> u64 {
        self.transitions[0].episode_id
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Checks chaining and terminal placement within one trajectory.
pub fn validate_trajectory(steps: &[Transition]) -> Result<()> {
    for (t, pair) in steps.windows(2).enumerate() {
        if pair[0].next_obs != pair[1].obs {
            return Err(Error::InvalidDataset(format!(
                "episode {}: next_obs of step {t} does not match obs of step {}",
                pair[0].episode_id,
                t + 1
            )));
        }
        if pair[0].done {
            return Err(Error::InvalidDataset(format!(
                "episode {}: done flag set before the final step",
                pair[0].episode_id
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub layout_name: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(layout_name: impl Into<String>, provenance: impl Into<String>) -> Self {
        Dataset {
            transitions: Vec::new(),
            layout_name: layout_name.into(),
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn obs_dim(&self) -> Option<usize> {
        self.transitions.first().map(|t| t.obs.len())
    }

    pub fn act_dim(&self) -> Option<usize> {
        self.transitions.first().map(|t| t.act.len())
    }

    pub fn trajectories(&self) -> Vec<Trajectory<'_>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.transitions.len() {
            if i == self.transitions.len()
                || self.transitions[i].episode_id != self.transitions[start].episode_id
            {
                out.push(Trajectory {
                    transitions: &self.transitions[start..i],
                });
                start = i;
            }
        }
        out
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories().len()
    }

    pub fn next_episode_id(&self) -> u64 {
        self.transitions
            .iter()
            .map(|t| t.episode_id + 1)
            .max()
            .unwrap_or(0)
    }

    /// Appends one trajectory under a fresh episode id.
    pub fn push_trajectory(&mut self, steps: Vec<Transition>) -> Result<()> {
        if steps.is_empty() {
            return Ok(());
        }
        let id = self.next_episode_id();
        let steps: Vec<Transition> = steps
            .into_iter()
            .map(|t| Transition { episode_id: id, ..t })
            .collect();
        validate_trajectory(&steps)?;
        self.transitions.extend(steps);
        Ok(())
    }

    /// Appends a buffer whose episode ids are local labels; each run of equal
    /// labels becomes one trajectory with a fresh id.
    pub fn append_buffer(&mut self, buffer: Vec<Transition>) -> Result<()> {
        let mut current: Vec<Transition> = Vec::new();
        for t in buffer {
            if let Some(last) = current.last() {
                if last.episode_id != t.episode_id {
                    self.push_trajectory(std::mem::take(&mut current))?;
                }
            }
            current.push(t);
        }
        self.push_trajectory(current)
    }

    pub fn validate(&self) -> Result<()> {
        let (obs_dim, act_dim) = match (self.obs_dim(), self.act_dim()) {
            (Some(o), Some(a)) => (o, a),
            _ => return Ok(()),
        };
        for (i, t) in self.transitions.iter().enumerate() {
            if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim || t.act.len() != act_dim {
                return Err(Error::InvalidDataset(format!(
                    "transition {i} has inconsistent dimensions"
                )));
            }
        }
        let mut seen = HashSet::new();
        for traj in self.trajectories() {
            if !seen.insert(traj.episode_id()) {
                return Err(Error::InvalidDataset(format!(
                    "episode {} is not contiguous",
                    traj.episode_id()
                )));
            }
            validate_trajectory(traj.transitions)?;
        }
        Ok(())
    }

    pub fn to_table(&self) -> TransitionTable {
        TransitionTable::from_transitions(&self.transitions)
    }

    /// Observations of every transition, as maze states.
    pub fn states(&self) -> Result<Vec<EnvState>> {
        self.transitions
            .iter()
            .map(|t| EnvState::from_obs(&t.obs))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_text().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let one_line = |s: &str| s.replace(['\n', '\r'], " ");
        let _ = writeln!(out, "{FORMAT_TAG}");
        let _ = writeln!(out, "# layout: {}", one_line(&self.layout_name));
        let _ = writeln!(out, "# provenance: {}", one_line(&self.provenance));
        let _ = writeln!(out, "# count: {}", self.transitions.len());
        for t in &self.transitions {
            write_vec(&mut out, &t.obs);
            out.push('|');
            write_vec(&mut out, &t.act);
            out.push('|');
            write_vec(&mut out, &t.next_obs);
            let _ = writeln!(
                out,
                "|{:.16e}|{}|{}",
                t.rew,
                u8::from(t.done),
                t.episode_id
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n').enumerate();
        let header_err = |line: usize, msg: &str| Error::Parse {
            location: format!("line {}", line + 1),
            message: msg.to_string(),
        };
        let mut header = |expected: &str| -> Result<String> {
            let (n, raw) = lines
                .next()
                .ok_or_else(|| header_err(0, "missing header"))?;
            let line = raw.trim_end_matches(['\n', '\r']);
            if expected.is_empty() {
                return if line == FORMAT_TAG {
                    Ok(String::new())
                } else {
                    Err(header_err(n, "missing format tag"))
                };
            }
            line.strip_prefix(expected)
                .map(str::to_string)
                .ok_or_else(|| header_err(n, &format!("expected `{expected}`")))
        };
        header("")?;
        let layout_name = header("# layout: ")?;
        let provenance = header("# provenance: ")?;
        let count_text = header("# count: ")?;
        let count: usize = count_text.parse().map_err(|_| Error::Parse {
            location: "line 4".into(),
            message: format!("bad count `{count_text}`"),
        })?;

        let mut transitions = Vec::with_capacity(count);
        for (n, raw) in lines {
            let loc = |field: &str| format!("line {}, field {field}", n + 1);
            if !raw.ends_with('\n') {
                return Err(Error::Parse {
                    location: format!("line {}", n + 1),
                    message: "unterminated record (truncated file?)".into(),
                });
            }
            let line = raw.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('|').collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    location: format!("line {}", n + 1),
                    message: format!("expected 6 fields, found {}", fields.len()),
                });
            }
            let rew = parse_f64(fields[3]).ok_or_else(|| Error::Parse {
                location: loc("rew"),
                message: format!("bad float `{}`", fields[3]),
            })?;
            let done = match fields[4] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        location: loc("done"),
                        message: format!("bad flag `{other}`"),
                    })
                }
            };
            let episode_id = fields[5].parse().map_err(|_| Error::Parse {
                location: loc("episode_id"),
                message: format!("bad integer `{}`", fields[5]),
            })?;
            transitions.push(Transition {
                obs: parse_vec(fields[0], &loc("obs"))?,
                act: parse_vec(fields[1], &loc("act"))?,
                next_obs: parse_vec(fields[2], &loc("next_obs"))?,
                rew,
                done,
                episode_id,
            });
        }
        if transitions.len() != count {
            return Err(Error::Parse {
                location: "end of file".into(),
                message: format!(
                    "header declares {count} records, found {} (truncated file?)",
                    transitions.len()
                ),
            });
        }
        let ds = Dataset {
            transitions,
            layout_name,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn write_vec(out: &mut String, v: &[f64]) {
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x:.16e}");
    }
}

fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

fn parse_vec(s: &str, location: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            parse_f64(x).ok_or_else(|| Error::Parse {
                location: location.to_string(),
                message: format!("bad float `{x}`"),
            })
        })
        .collect()
}

/// Rolls out `controller` from the environment's start distribution until
/// exactly `n` transitions have been collected.
pub fn collect_behavior_dataset(
    spec: &MazeSpec,
    controller: &mut dyn Controller,
    n: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("n_transitions must be at least 1"));
    }
    let mut ds = Dataset::new(
        spec.layout_name.clone(),
        format!("behavior:{} n={n}", controller.name()),
    );
    let mut episode = 0u64;
    while ds.len() < n {
        let mut state = env::reset(spec, rng);
        controller.begin_episode(spec, &state, rng);
        loop {
            let action = controller.act(spec, &state, rng);
            let out = env::step(spec, &state, &action)?;
            ds.transitions.push(Transition {
                obs: state.obs().to_vec(),
                act: env::clip_action(spec, &action).to_vec(),
                next_obs: out.next.obs().to_vec(),
                rew: out.reward,
                done: out.done,
                episode_id: episode,
            });
            state = out.next;
            if out.done || ds.len() >= n {
                break;
            }
        }
        episode += 1;
    }
    Ok(ds)
}

/// Drops every transition touching the disc around `center`, splitting
/// trajectories at the removals and renumbering episodes.
pub fn prune_near_goal(d: &Dataset, center: [f64; 2], radius: f64) -> Result<Dataset> {
    if !(radius > 0.0) {
        return Err(Error::invalid("prune radius must be positive"));
    }
    let inside = |p: [f64; 2]| env::dist(p, center) <= radius;
    let mut out = Dataset::new(d.layout_name.clone(), d.provenance.clone());
    let mut next_id = 0u64;
    for traj in d.trajectories() {
        let mut open = false;
        for t in traj.transitions {
            if inside(t.position()) || inside(t.next_position()) {
                if open {
                    next_id += 1;
                    open = false;
                }
                continue;
            }
            out.transitions.push(Transition {
                episode_id: next_id,
                ..t.clone()
            });
            open = true;
        }
        if open {
            next_id += 1;
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("pruning removed every transition"));
    }
    let tag = format!(" | pruned c=({:.3},{:.3}) r={radius}", center[0], center[1]);
    if !out.provenance.ends_with(&tag) {
        out.provenance.push_str(&tag);
    }
    Ok(out)
}

/// Keeps `ceil(fraction * n_traj)` whole trajectories, in original order.
pub fn subsample_trajectories(d: &Dataset, fraction: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction must lie in (0, 1]"));
    }
    let trajs = d.trajectories();
    let n = trajs.len();
    // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
    let keep = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(n.min(1), n);
    let mut picks = index::sample(rng, n, keep).into_vec();
    picks.sort_unstable();
    let mut out = Dataset::new(
        d.layout_name.clone(),
        format!("{} | subsampled f={fraction}", d.provenance),
    );
    for i in picks {
        out.transitions.extend_from_slice(trajs[i].transitions);
    }
    Ok(out)
}

/// Column-major copy of a transition list for fast minibatch gathering.
#[derive(Clone, Debug, Default)]
pub struct TransitionTable {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub rew: Vec<f64>,
    pub done: Vec<f64>,
}

impl TransitionTable {
    pub fn from_transitions(ts: &[Transition]) -> Self {
        let obs_dim = ts.first().map_or(0, |t| t.obs.len());
        let act_dim = ts.first().map_or(0, |t| t.act.len());
        let mut table = TransitionTable {
            obs_dim,
            act_dim,
            ..Default::default()
        };
        for t in ts {
            table.push(&t.obs, &t.act, &t.next_obs, t.rew, t.done);
        }
        table
    }

    pub fn with_dims(obs_dim: usize, act_dim: usize) -> Self {
        TransitionTable {
            obs_dim,
            act_dim,
            ..Default::default()
        }
    }

    pub fn push(&mut self, obs: &[f64], act: &[f64], next_obs: &[f64], rew: f64, done: bool) {
        self.obs.extend_from_slice(obs);
        self.act.extend_from_slice(act);
        self.next_obs.extend_from_slice(next_obs);
        self.rew.push(rew);
        self.done.push(if done { 1.0 } else { 0.0 });
    }

    pub fn len(&self) -> usize {
        self.rew.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rew.is_empty()
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn act_row(&self, i: usize) -> &[f64] {
        &self.act[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn gather(&self, indices: &[usize], negatives: &[usize]) -> Batch {
        let mut b = Batch {
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            indices: indices.to_vec(),
            negative_indices: negatives.to_vec(),
            ..Default::default()
        };
        for &i in indices {
            b.obs.extend_from_slice(self.obs_row(i));
            b.act.extend_from_slice(self.act_row(i));
            b.next_obs
                .extend_from_slice(&self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim]);
            b.rew.push(self.rew[i]);
            b.done.push(self.done[i]);
        }
        for &j in negatives {
            b.neg_obs.extend_from_slice(self.obs_row(j));
        }
        b
    }

    /// Uniform with replacement; negatives drawn independently of anchors.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::EmptyDataset("batch sampling"));
        }
        let n = self.len();
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..n)).collect();
        let neg: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..n)).collect();
        Ok(self.gather(&idx, &neg))
    }
}

/// Flat minibatch of `(s, a, s', r, d)` tuples plus negative states `s''`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub indices: Vec<usize>,
    pub negative_indices: Vec<usize>,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub rew: Vec<f64>,
    pub done: Vec<f64>,
    pub neg_obs: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rew.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rew.is_empty()
    }
}

pub fn sample_batch(d: &Dataset, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
    d.to_table().sample_batch(batch_size, rng)
}
