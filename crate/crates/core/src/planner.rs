//! Non-learned controllers: a breadth-first waypoint follower (behavior policy
//! for dataset generation, expert for reference scores, oracle for goal-policy
//! checks) and a uniform random controller.

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::env::{dist, EnvState, MazeSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Something that maps maze states to forces.
pub trait Controller {
    fn name(&self) -> &str;
    fn begin_episode(&mut self, spec: &MazeSpec, state: &EnvState, rng: &mut Rng);
    fn act(&mut self, spec: &MazeSpec, state: &EnvState, rng: &mut Rng) -> [f64; 2];
}

type Cell = (usize, usize);

/// Shortest 4-connected cell path from `from` to `to`, inclusive.
pub fn bfs_path(spec: &MazeSpec, from: Cell, to: Cell) -> Option<Vec<Cell>> {
    let idx = |c: Cell| c.0 * spec.cols + c.1;
    let mut prev = vec![usize::MAX; spec.rows * spec.cols];
    let mut queue = VecDeque::new();
    prev[idx(from)] = idx(from);
    queue.push_back(from);
    while let Some(c) = queue.pop_front() {
        if c == to {
            let mut path = vec![c];
            let mut cur = idx(c);
            while cur != idx(from) {
                cur = prev[cur];
                path.push((cur / spec.cols, cur % spec.cols));
            }
            path.reverse();
            return Some(path);
        }
        let (r, col) = (c.0 as i64, c.1 as i64);
        for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r + dr, col + dc);
            if spec.cell_is_free(nr, nc) {
                let n = (nr as usize, nc as usize);
                if prev[idx(n)] == usize::MAX {
                    prev[idx(n)] = idx(c);
                    queue.push_back(n);
                }
            }
        }
    }
    None
}

/// True when every free cell can reach every other free cell.
pub fn is_connected(spec: &MazeSpec) -> bool {
    let free = spec.free_cells();
    free.iter().all(|&c| bfs_path(spec, free[0], c).is_some())
}

fn center(c: Cell) -> [f64; 2] {
    [c.1 as f64 + 0.5, c.0 as f64 + 0.5]
}

#[derive(Clone, Debug)]
enum Mode {
    /// Wander between uniformly drawn free cells.
    Behavior,
    /// Travel to a fixed point and hold there.
    GoTo([f64; 2]),
}

#[derive(Clone, Debug)]
pub struct WaypointPlanner {
    mode: Mode,
    noise: f64,
    target_cell: Option<Cell>,
    path: VecDeque<[f64; 2]>,
    path_cells: Vec<Cell>,
    /// Speed gain on distance to the current waypoint.
    pub gain: f64,
    /// Force gain on velocity error.
    pub damping: f64,
    pub reach_radius: f64,
}

impl WaypointPlanner {
    fn with_mode(spec: &MazeSpec, mode: Mode, noise: f64) -> Result<Self> {
        if !is_connected(spec) {
            return Err(Error::Planner(format!(
                "layout `{}` has disconnected free cells",
                spec.layout_name
            )));
        }
        Ok(WaypointPlanner {
            mode,
            noise,
            target_cell: None,
            path: VecDeque::new(),
            path_cells: Vec::new(),
            gain: 2.0,
            damping: 10.0,
            reach_radius: 0.45,
        })
    }

    /// Random-waypoint wanderer with Gaussian action noise `sigma`.
    pub fn behavior(spec: &MazeSpec, sigma: f64) -> Result<Self> {
        WaypointPlanner::with_mode(spec, Mode::Behavior, sigma)
    }

    /// Noise-free shortest-path controller to the maze goal.
    pub fn expert(spec: &MazeSpec) -> Result<Self> {
        WaypointPlanner::with_mode(spec, Mode::GoTo(spec.goal), 0.0)
    }

    pub fn goto(spec: &MazeSpec, target: [f64; 2]) -> Result<Self> {
        if !spec.is_free(target) {
            return Err(Error::Planner("target is not in free space".into()));
        }
        WaypointPlanner::with_mode(spec, Mode::GoTo(target), 0.0)
    }

    fn plan(&mut self, spec: &MazeSpec, from: [f64; 2], rng: &mut Rng) {
        let here = spec.cell_of(from);
        let here = (here.0 as usize, here.1 as usize);
        let target_cell = match (&self.mode, self.target_cell) {
            (Mode::GoTo(p), _) => {
                let c = spec.cell_of(*p);
                (c.0 as usize, c.1 as usize)
            }
            (Mode::Behavior, Some(c)) => c,
            (Mode::Behavior, None) => {
                let free = spec.free_cells();
                free[rng.gen_range(0..free.len())]
            }
        };
        self.target_cell = Some(target_cell);
        let cells = bfs_path(spec, here, target_cell).unwrap_or_else(|| vec![here]);
        self.path = cells.iter().skip(1).map(|&c| center(c)).collect();
        if let Mode::GoTo(p) = self.mode {
            self.path.pop_back();
            self.path.push_back(p);
        } else if self.path.is_empty() {
            self.path.push_back(center(target_cell));
        }
        self.path_cells = cells;
    }

    fn waypoint(&mut self, spec: &MazeSpec, state: &EnvState, rng: &mut Rng) -> [f64; 2] {
        let here = spec.cell_of(state.position);
        let here = (here.0 as usize, here.1 as usize);
        if self.path_cells.is_empty() || !self.path_cells.contains(&here) {
            self.plan(spec, state.position, rng);
        }
        while self.path.len() > 1 && dist(state.position, self.path[0]) < self.reach_radius {
            self.path.pop_front();
        }
        if let Mode::Behavior = self.mode {
            if self.path.len() == 1 && dist(state.position, self.path[0]) < self.reach_radius {
                self.target_cell = None;
                self.plan(spec, state.position, rng);
            }
        }
        self.path[0]
    }
}

impl Controller for WaypointPlanner {
    fn name(&self) -> &str {
        match self.mode {
            Mode::Behavior => "waypoint-behavior",
            Mode::GoTo(_) => "waypoint-goto",
        }
    }

    fn begin_episode(&mut self, spec: &MazeSpec, state: &EnvState, rng: &mut Rng) {
        self.target_cell = None;
        self.plan(spec, state.position, rng);
    }

    fn act(&mut self, spec: &MazeSpec, state: &EnvState, rng: &mut Rng) -> [f64; 2] {
        let w = self.waypoint(spec, state, rng);
        let d = [w[0] - state.position[0], w[1] - state.position[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let speed = (self.gain * len).min(spec.max_speed);
        let v_des = if len > 1e-12 {
            [d[0] / len * speed, d[1] / len * speed]
        } else {
            [0.0, 0.0]
        };
        let mut a = [0.0; 2];
        for k in 0..2 {
            a[k] = (self.damping * (v_des[k] - state.velocity[k]))
                .clamp(-spec.max_force, spec.max_force);
            if self.noise > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                a[k] += self.noise * z;
            }
        }
        a
    }
}

/// Uniform actions over the force box.
#[derive(Clone, Debug, Default)]
pub struct RandomController;

impl Controller for RandomController {
    fn name(&self) -> &str {
        "uniform-random"
    }

    fn begin_episode(&mut self, _: &MazeSpec, _: &EnvState, _: &mut Rng) {}

    fn act(&mut self, spec: &MazeSpec, _: &EnvState, rng: &mut Rng) -> [f64; 2] {
        let f = spec.max_force;
        [rng.gen_range(-f..=f), rng.gen_range(-f..=f)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, BUILTIN_LAYOUTS};
    use crate::rng;

    fn steps_to_goal(spec: &MazeSpec, start: [f64; 2]) -> Option<usize> {
        let mut planner = WaypointPlanner::expert(spec).unwrap();
        let mut r = rng::from_seed(0);
        let mut s = EnvState::at(start);
        planner.begin_episode(spec, &s, &mut r);
        for t in 0..spec.max_episode_steps {
            if spec.in_goal(s.position) {
                return Some(t);
            }
            let a = planner.act(spec, &s, &mut r);
            s = env::step(spec, &s, &a).unwrap().next;
        }
        None
    }

    #[test]
    fn expert_reaches_goal_from_every_cell() {
        for name in BUILTIN_LAYOUTS {
            let spec = MazeSpec::builtin(name).unwrap();
            let mut worst = 0;
            for c in spec.free_cells() {
                let t = steps_to_goal(&spec, center(c))
                    .unwrap_or_else(|| panic!("{name}: stuck from {c:?}"));
                worst = worst.max(t);
            }
            if *name == "large" {
                assert!((100..=250).contains(&worst), "large worst case {worst}");
            }
        }
    }

    #[test]
    fn expert_holds_at_goal() {
        let spec = MazeSpec::builtin("large").unwrap();
        let mut planner = WaypointPlanner::expert(&spec).unwrap();
        let mut r = rng::from_seed(0);
        let mut s = EnvState::at([1.5, 1.5]);
        planner.begin_episode(&spec, &s, &mut r);
        let mut reward = 0.0;
        for _ in 0..spec.max_episode_steps {
            let a = planner.act(&spec, &s, &mut r);
            let out = env::step(&spec, &s, &a).unwrap();
            reward += out.reward;
            s = out.next;
        }
        assert!(spec.in_goal(s.position));
        assert!(reward > 50.0);
    }

    #[test]
    fn disconnected_layout_is_a_planner_failure() {
        let spec = MazeSpec::parse_layout("split", "#####\n#.#G#\n#####").unwrap();
        assert!(matches!(WaypointPlanner::expert(&spec), Err(Error::Planner(_))));
    }

    #[test]
    fn behavior_wanders_widely() {
        let spec = MazeSpec::builtin("medium").unwrap();
        let mut planner = WaypointPlanner::behavior(&spec, 0.2).unwrap();
        let mut r = rng::from_seed(1);
        let mut s = env::reset(&spec, &mut r);
        planner.begin_episode(&spec, &s, &mut r);
        let mut visited = std::collections::HashSet::new();
        for _ in 0..3000 {
            let a = planner.act(&spec, &s, &mut r);
            s = env::step(&spec, &s, &a).unwrap().next;
            s.step_index = 0;
            visited.insert(spec.cell_of(s.position));
        }
        assert!(visited.len() * 10 >= spec.free_cells().len() * 8);
    }
}
