//! Distil the offline policy into a small ensemble and collect with the
//! novelty-seeking explorer from the reset distribution.

use aorl::active::ExplorationConfig;
use aorl::baselines::{self, DistillConfig};
use aorl::data;
use aorl::env::MazeSpec;
use aorl::offline::{self, OfflineConfig};
use aorl::planner::WaypointPlanner;
use aorl::rng;

fn main() -> aorl::Result<()> {
    let spec = MazeSpec::builtin("umaze")?;
    let mut behavior = WaypointPlanner::behavior(&spec, 0.2)?;
    let d = data::collect_behavior_dataset(&spec, &mut behavior, 5_000, &mut rng::stream(0, "data"))?;
    let cfg = OfflineConfig {
        steps: 2_000,
        ..Default::default()
    };
    let policy = offline::bc_train(&d, spec.max_force, &cfg, &mut rng::stream(0, "bc"))?;
    let distilled = baselines::distill_policy(&policy, &d, &DistillConfig::default(), &mut rng::stream(0, "distill"))?;

    let obs = d.transitions[0].obs.clone();
    let spread = distilled.disagreement(&obs, 1)?;
    println!("{} distilled nets, disagreement at a dataset state {:.5}", distilled.count(), spread[0]);

    let (collected, log) = baselines::rnd_collect(
        &spec,
        &policy,
        &distilled,
        2_000,
        &ExplorationConfig::default(),
        &mut rng::stream(0, "collect"),
    )?;
    let explored = log.steps.iter().filter(|s| s.explored).count();
    println!(
        "collected {} transitions in {} trajectories, {explored} exploratory steps",
        collected.len(),
        log.trajectories.len()
    );
    Ok(())
}
