//! Generate a behavior dataset, prune the goal neighbourhood, subsample it
//! and round-trip it through the text format.

use aorl::data::{self, Dataset};
use aorl::env::{self, MazeSpec};
use aorl::planner::WaypointPlanner;
use aorl::rng;

fn main() -> aorl::Result<()> {
    let spec = MazeSpec::builtin("medium")?;
    let mut behavior = WaypointPlanner::behavior(&spec, 0.2)?;
    let full = data::collect_behavior_dataset(&spec, &mut behavior, 10_000, &mut rng::stream(0, "data"))?;
    let rewards: f64 = full.transitions.iter().map(|t| t.rew).sum();
    println!("full: {} transitions, {} trajectories, {rewards} rewarded", full.len(), full.n_trajectories());

    let pruned = data::prune_near_goal(&full, spec.goal, 2.0)?;
    let closest = pruned
        .transitions
        .iter()
        .map(|t| env::dist(t.position(), spec.goal))
        .fold(f64::INFINITY, f64::min);
    println!(
        "pruned: {} transitions in {} trajectories, closest state {closest:.2} from goal",
        pruned.len(),
        pruned.n_trajectories()
    );

    let small = data::subsample_trajectories(&pruned, 0.25, &mut rng::stream(0, "subsample"))?;
    println!("subsampled: {} trajectories", small.n_trajectories());

    let dir = tempfile::tempdir().map_err(aorl::Error::RawIo)?;
    let path = dir.path().join("pruned.txt");
    pruned.save(&path)?;
    let back = Dataset::load(&path)?;
    println!("round trip identical: {}", back == pruned);
    println!("provenance: {}", back.provenance);
    Ok(())
}
