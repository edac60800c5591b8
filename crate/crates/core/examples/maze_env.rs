//! Step a point mass through the built-in mazes with the expert planner and
//! print the return each layout yields.

use aorl::env::{self, MazeSpec, BUILTIN_LAYOUTS};
use aorl::planner::{Controller, WaypointPlanner};
use aorl::rng;

fn main() -> aorl::Result<()> {
    let mut r = rng::from_seed(7);
    for name in BUILTIN_LAYOUTS {
        let spec = MazeSpec::builtin(name)?;
        let mut expert = WaypointPlanner::expert(&spec)?;
        let mut s = env::reset(&spec, &mut r);
        expert.begin_episode(&spec, &s, &mut r);
        let start = s.position;
        let mut ret = 0.0;
        let mut first_hit = None;
        for t in 0..spec.max_episode_steps {
            let a = expert.act(&spec, &s, &mut r);
            let out = env::step(&spec, &s, &a)?;
            ret += out.reward;
            if out.reward > 0.0 && first_hit.is_none() {
                first_hit = Some(t + 1);
            }
            s = out.next;
        }
        println!(
            "{name:>6}: {}x{} cells, start ({:.2},{:.2}) goal ({:.2},{:.2}), reached after {:?} steps, return {ret}",
            spec.rows, spec.cols, start[0], start[1], spec.goal[0], spec.goal[1], first_hit
        );
    }

    // reset_to places the mass anywhere in free space; walls are rejected.
    let spec = MazeSpec::builtin("umaze")?;
    let mut e = env::MazeEnv::new(spec.clone(), &mut r);
    let s = e.reset_to(&env::EnvState::at(spec.goal))?;
    println!("reset_to goal -> in_goal = {}", spec.in_goal(s.position));
    let wall = env::EnvState::at([0.5, 0.5]);
    println!("reset_to wall -> {}", e.reset_to(&wall).unwrap_err());
    Ok(())
}
