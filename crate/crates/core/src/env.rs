//! Continuous point-mass maze.
//!
//! Coordinates are measured in cells: cell `(row, col)` covers
//! `x in [col, col + 1)`, `y in [row, row + 1)`. Observations are
//! `(x, y, vx, vy)`; actions are 2D forces.

use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const OBS_DIM: usize = 4;
pub const ACT_DIM: usize = 2;

/// Distance kept between a clamped position and the wall face it hit.
const WALL_EPS: f64 = 1e-9;

pub const BUILTIN_LAYOUTS: &[&str] = &["open", "umaze", "medium", "large"];

fn builtin_text(name: &str) -> Option<&'static str> {
    match name {
        "open" => Some(include_str!("../layouts/open.txt")),
        "umaze" => Some(include_str!("../layouts/umaze.txt")),
        "medium" => Some(include_str!("../layouts/medium.txt")),
        "large" => Some(include_str!("../layouts/large.txt")),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `true` for walls.
    pub walls: Vec<bool>,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub dt: f64,
    pub max_force: f64,
    pub max_speed: f64,
    pub max_episode_steps: usize,
    pub layout_name: String,
}

impl MazeSpec {
    /// Parses a `#`/`.`/`G` grid with default physics.
    pub fn parse_layout(name: &str, text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::InvalidLayout(format!("{name}: empty grid")));
        }
        let cols = lines[0].chars().count();
        let rows = lines.len();
        let mut walls = Vec::with_capacity(rows * cols);
        let mut goal = None;
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::InvalidLayout(format!(
                    "{name}: row {r} has {} columns, expected {cols}",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'G' => {
                        if goal.is_some() {
                            return Err(Error::InvalidLayout(format!("{name}: more than one goal")));
                        }
                        goal = Some([c as f64 + 0.5, r as f64 + 0.5]);
                        walls.push(false);
                    }
                    other => {
                        return Err(Error::InvalidLayout(format!(
                            "{name}: unexpected character {other:?} at row {r}, column {c}"
                        )))
                    }
                }
            }
        }
        let goal = goal.ok_or_else(|| Error::InvalidLayout(format!("{name}: no goal cell")))?;
        let spec = MazeSpec {
            rows,
            cols,
            walls,
            goal,
            goal_radius: 0.5,
            dt: 0.1,
            max_force: 1.0,
            max_speed: 1.0,
            max_episode_steps: 300,
            layout_name: name.to_string(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let text = builtin_text(name).ok_or_else(|| {
            Error::InvalidLayout(format!(
                "unknown layout `{name}` (built-in: {})",
                BUILTIN_LAYOUTS.join(", ")
            ))
        })?;
        MazeSpec::parse_layout(name, text)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        MazeSpec::parse_layout(&name, &text)
    }

    /// A built-in layout name or a path to a layout file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if builtin_text(name_or_path).is_some() {
            MazeSpec::builtin(name_or_path)
        } else {
            MazeSpec::from_file(Path::new(name_or_path))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.walls.len() != self.rows * self.cols {
            return Err(Error::InvalidLayout("wall map size mismatch".into()));
        }
        if !self.walls.iter().any(|w| !w) {
            return Err(Error::InvalidLayout("no free cell".into()));
        }
        if !self.is_free(self.goal) {
            return Err(Error::InvalidLayout("goal lies in a wall".into()));
        }
        if self.goal_radius <= 0.0 || self.dt <= 0.0 || self.max_speed <= 0.0 {
            return Err(Error::InvalidLayout(
                "goal_radius, dt and max_speed must be positive".into(),
            ));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::InvalidLayout("max_episode_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_is_free(&self, row: i64, col: i64) -> bool {
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            return false;
        }
        !self.walls[row as usize * self.cols + col as usize]
    }

    pub fn cell_of(&self, p: [f64; 2]) -> (i64, i64) {
        (p[1].floor() as i64, p[0].floor() as i64)
    }

    pub fn is_free(&self, p: [f64; 2]) -> bool {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return false;
        }
        let (r, c) = self.cell_of(p);
        self.cell_is_free(r, c)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.walls[r * self.cols + c])
            .collect()
    }

    pub fn in_goal(&self, p: [f64; 2]) -> bool {
        dist(p, self.goal) <= self.goal_radius
    }

    pub fn validate_state(&self, s: &EnvState) -> Result<()> {
        if !self.is_free(s.position) {
            return Err(Error::InvalidState(format!(
                "position ({}, {}) is not in a free cell",
                s.position[0], s.position[1]
            )));
        }
        let v_ok = s
            .velocity
            .iter()
            .all(|v| v.is_finite() && v.abs() <= self.max_speed);
        if !v_ok {
            return Err(Error::InvalidState(format!(
                "velocity ({}, {}) exceeds max speed {}",
                s.velocity[0], s.velocity[1], self.max_speed
            )));
        }
        Ok(())
    }

    /// Longest straight-line extent of the grid, in cells.
    pub fn diameter(&self) -> f64 {
        ((self.rows * self.rows + self.cols * self.cols) as f64).sqrt()
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub step_index: usize,
}

impl EnvState {
    pub fn at(position: [f64; 2]) -> Self {
        EnvState {
            position,
            velocity: [0.0; 2],
            step_index: 0,
        }
    }

    pub fn obs(&self) -> [f64; OBS_DIM] {
        [
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ]
    }

    pub fn from_obs(obs: &[f64]) -> Result<Self> {
        if obs.len() != OBS_DIM {
            return Err(Error::DimensionMismatch {
                context: "maze observation",
                expected: OBS_DIM,
                actual: obs.len(),
            });
        }
        Ok(EnvState {
            position: [obs[0], obs[1]],
            velocity: [obs[2], obs[3]],
            step_index: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
}

pub fn clip_action(spec: &MazeSpec, action: &[f64]) -> [f64; ACT_DIM] {
    let f = spec.max_force;
    [action[0].clamp(-f, f), action[1].clamp(-f, f)]
}

/// Semi-implicit Euler step with per-axis wall resolution.
pub fn step(spec: &MazeSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
    if action.len() != ACT_DIM {
        return Err(Error::DimensionMismatch {
            context: "maze action",
            expected: ACT_DIM,
            actual: action.len(),
        });
    }
    spec.validate_state(state)?;
    let a = clip_action(spec, action);
    let mut v = [0.0; 2];
    for k in 0..2 {
        v[k] = (state.velocity[k] + a[k] * spec.dt).clamp(-spec.max_speed, spec.max_speed);
    }
    let mut p = state.position;
    for axis in 0..2 {
        let delta = v[axis] * spec.dt;
        let mut q = p;
        q[axis] += delta;
        if spec.is_free(q) {
            p = q;
        } else {
            let blocked = q[axis].floor();
            p[axis] = if delta > 0.0 {
                blocked - WALL_EPS
            } else {
                blocked + 1.0
            };
            v[axis] = 0.0;
        }
    }
    let next = EnvState {
        position: p,
        velocity: v,
        step_index: state.step_index + 1,
    };
    Ok(StepOutcome {
        reward: if spec.in_goal(p) { 1.0 } else { 0.0 },
        done: state.step_index + 1 >= spec.max_episode_steps,
        next,
    })
}

/// Uniform position over free space, zero velocity.
pub fn reset(spec: &MazeSpec, rng: &mut Rng) -> EnvState {
    loop {
        let p = [
            rng.gen_range(0.0..spec.cols as f64),
            rng.gen_range(0.0..spec.rows as f64),
        ];
        if spec.is_free(p) {
            return EnvState::at(p);
        }
    }
}

pub fn reset_to(spec: &MazeSpec, state: &EnvState) -> Result<EnvState> {
    spec.validate_state(state)?;
    Ok(EnvState {
        step_index: 0,
        ..*state
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    DatasetStates,
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub states: Vec<EnvState>,
    pub source: CandidateSource,
}

impl CandidateSet {
    pub fn new(states: Vec<EnvState>, source: CandidateSource) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("candidate set must not be empty"));
        }
        Ok(CandidateSet { states, source })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Draws `n` dataset observations as candidate starts; without replacement
/// when the dataset is large enough.
pub fn sample_candidates(dataset: &Dataset, n: usize, rng: &mut Rng) -> Result<CandidateSet> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("candidate sampling"));
    }
    if n == 0 {
        return Err(Error::invalid("candidate count must be at least 1"));
    }
    let len = dataset.len();
    let picks: Vec<usize> = if n <= len {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..len)).collect()
    };
    let states = picks
        .into_iter()
        .map(|i| EnvState::from_obs(&dataset.transitions[i].obs))
        .collect::<Result<Vec<_>>>()?;
    CandidateSet::new(states, CandidateSource::DatasetStates)
}

/// Stateful wrapper around the pure stepping functions.
#[derive(Clone, Debug)]
pub struct MazeEnv {
    pub spec: MazeSpec,
    state: EnvState,
    reset_to_enabled: bool,
}

impl MazeEnv {
    pub fn new(spec: MazeSpec, rng: &mut Rng) -> Self {
        let state = reset(&spec, rng);
        MazeEnv {
            spec,
            state,
            reset_to_enabled: true,
        }
    }

    /// Restricted-start variant: `reset_to` is refused.
    pub fn restricted(spec: MazeSpec, rng: &mut Rng) -> Self {
        let mut env = MazeEnv::new(spec, rng);
        env.reset_to_enabled = false;
        env
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn reset(&mut self, rng: &mut Rng) -> EnvState {
        self.state = reset(&self.spec, rng);
        self.state
    }

    pub fn reset_to(&mut self, state: &EnvState) -> Result<EnvState> {
        if !self.reset_to_enabled {
            return Err(Error::ResetToDisabled);
        }
        self.state = reset_to(&self.spec, state)?;
        Ok(self.state)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let out = step(&self.spec, &self.state, action)?;
        self.state = out.next;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn open5() -> MazeSpec {
        let text = ".....\n.....\n..G..\n.....\n.....\n";
        MazeSpec::parse_layout("open5", text).unwrap()
    }

    #[test]
    fn builtin_layouts_parse() {
        for name in BUILTIN_LAYOUTS {
            let spec = MazeSpec::builtin(name).unwrap();
            assert!(spec.is_free(spec.goal));
        }
        assert!(MazeSpec::builtin("nope").is_err());
    }

    #[test]
    fn layout_loader_rejects_bad_grids() {
        assert!(MazeSpec::parse_layout("x", "###\n#.#\n###").is_err());
        assert!(MazeSpec::parse_layout("x", "#G#\n#..#").is_err());
        assert!(MazeSpec::parse_layout("x", "#G?").is_err());
        assert!(MazeSpec::parse_layout("x", "GG").is_err());
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let spec = MazeSpec::builtin("large").unwrap();
        let s = EnvState::at([1.5, 1.5]);
        let out = step(&spec, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(out.next.position, s.position);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn goal_center_is_rewarded() {
        let spec = MazeSpec::builtin("medium").unwrap();
        let out = step(&spec, &EnvState::at(spec.goal), &[0.05, -0.05]).unwrap();
        assert_eq!(out.reward, 1.0);
    }

    #[test]
    fn hand_euler_step() {
        let spec = open5();
        let out = step(&spec, &EnvState::at([2.5, 2.5]), &[1.0, 0.0]).unwrap();
        assert!((out.next.position[0] - 2.51).abs() < 1e-12);
        assert_eq!(out.next.position[1], 2.5);
        assert!((out.next.velocity[0] - 0.1).abs() < 1e-12);
        assert_eq!(out.next.velocity[1], 0.0);
        assert_eq!(out.next.step_index, 1);
    }

    #[test]
    fn wall_collision_clamps_and_zeroes_velocity() {
        let spec = MazeSpec::builtin("open").unwrap();
        // free cells span x in [1, 6); push right at full speed from near the wall.
        let s = EnvState {
            position: [5.95, 2.5],
            velocity: [1.0, 0.3],
            step_index: 0,
        };
        let out = step(&spec, &s, &[1.0, 0.0]).unwrap();
        assert!(out.next.position[0] < 6.0 && out.next.position[0] > 5.99);
        assert_eq!(out.next.velocity[0], 0.0);
        assert!((out.next.position[1] - 2.53).abs() < 1e-12);

        let s = EnvState {
            position: [1.02, 2.5],
            velocity: [-1.0, 0.0],
            step_index: 0,
        };
        let out = step(&spec, &s, &[-1.0, 0.0]).unwrap();
        assert_eq!(out.next.position[0], 1.0);
        assert!(spec.is_free(out.next.position));
    }

    #[test]
    fn done_at_time_limit() {
        let spec = open5();
        let s = EnvState {
            step_index: spec.max_episode_steps - 1,
            ..EnvState::at([1.5, 1.5])
        };
        assert!(step(&spec, &s, &[0.0, 0.0]).unwrap().done);
        assert!(!step(&spec, &EnvState::at([1.5, 1.5]), &[0.0, 0.0]).unwrap().done);
    }

    #[test]
    fn invalid_states_are_rejected() {
        let spec = MazeSpec::builtin("large").unwrap();
        assert!(step(&spec, &EnvState::at([0.5, 0.5]), &[0.0, 0.0]).is_err());
        assert!(reset_to(&spec, &EnvState::at([0.5, 0.5])).is_err());
        let fast = EnvState {
            velocity: [2.0, 0.0],
            ..EnvState::at([1.5, 1.5])
        };
        assert!(reset_to(&spec, &fast).is_err());
    }

    #[test]
    fn reset_is_seeded_and_in_free_space() {
        let spec = MazeSpec::builtin("large").unwrap();
        let a = reset(&spec, &mut rng::from_seed(4));
        let b = reset(&spec, &mut rng::from_seed(4));
        assert_eq!(a, b);
        let mut r = rng::from_seed(5);
        for _ in 0..1000 {
            let s = reset(&spec, &mut r);
            assert!(spec.is_free(s.position));
            assert_eq!(s.velocity, [0.0, 0.0]);
        }
    }

    #[test]
    fn single_free_cell_reset() {
        let spec = MazeSpec::parse_layout("one", "###\n#G#\n###").unwrap();
        let mut r = rng::from_seed(0);
        for _ in 0..50 {
            let s = reset(&spec, &mut r);
            assert_eq!(spec.cell_of(s.position), (1, 1));
        }
    }

    #[test]
    fn reset_to_readback_and_successor() {
        let spec = MazeSpec::builtin("medium").unwrap();
        let s = EnvState {
            position: [1.3, 1.7],
            velocity: [0.2, -0.1],
            step_index: 17,
        };
        let mut env = MazeEnv::new(spec.clone(), &mut rng::from_seed(0));
        let got = env.reset_to(&s).unwrap();
        assert_eq!(got, EnvState { step_index: 0, ..s });
        let a = env.step(&[0.0, 0.0]).unwrap();
        let b = step(&spec, &got, &[0.0, 0.0]).unwrap();
        assert_eq!(a, b);

        let mut restricted = MazeEnv::restricted(spec, &mut rng::from_seed(0));
        assert!(matches!(restricted.reset_to(&s), Err(Error::ResetToDisabled)));
    }
}
