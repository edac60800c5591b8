//! Fine-tuning baseline against the active method on one seed, with the
//! interaction reduction computed from their learning curves.

use aorl::active::{self, ArmSpec, ExplorationConfig, LoopConfig, LoopInputs};
use aorl::data;
use aorl::env::{MazeSpec, ACT_DIM, OBS_DIM};
use aorl::eval;
use aorl::offline::{self, OfflineConfig};
use aorl::planner::WaypointPlanner;
use aorl::repr::{self, ReprConfig, RepresentationEnsemble};
use aorl::rng;

fn main() -> aorl::Result<()> {
    let seed = 1;
    let spec = MazeSpec::builtin("umaze")?;
    let mut behavior = WaypointPlanner::behavior(&spec, 0.2)?;
    let full = data::collect_behavior_dataset(&spec, &mut behavior, 10_000, &mut rng::stream(seed, "data"))?;
    let d0 = data::prune_near_goal(&full, spec.goal, 1.5)?;
    let refs = eval::compute_reference_scores(&spec, 50, &mut rng::stream(seed, "reference"))?;
    let offline_cfg = OfflineConfig {
        steps: 3_000,
        ..Default::default()
    };
    let learner = offline::td3bc_train(&d0, spec.max_force, &offline_cfg, &mut rng::stream(seed, "offline"))?;
    let repr_cfg = ReprConfig {
        train_steps: 1_000,
        update_steps: 100,
        ..Default::default()
    };
    let mut ensemble = RepresentationEnsemble::new(OBS_DIM, ACT_DIM, &repr_cfg, seed)?;
    repr::train_ensemble(&mut ensemble, &d0, repr_cfg.train_steps, repr_cfg.batch_size, &mut rng::stream(seed, "repr"))?;
    let candidates = full.states()?;
    let explore = ExplorationConfig::default();
    let schedule = LoopConfig {
        budget: 3_000,
        epoch_transitions: 500,
        epoch_updates: 2_000,
        eval_episodes: 10,
    };
    let inputs = LoopInputs {
        spec: &spec,
        refs: &refs,
        candidates: &candidates,
        offline: &offline_cfg,
        repr: &repr_cfg,
        explore: &explore,
        schedule: &schedule,
        distilled: None,
        travel: None,
        seed,
    };
    let ft = active::run_arm(ArmSpec::FINETUNE, &d0, learner.clone(), None, &inputs)?;
    let act = active::run_arm(ArmSpec::ACTIVE, &d0, learner, Some(ensemble), &inputs)?;
    for run in [&ft, &act] {
        let pts: Vec<String> = run.curve.points.iter().map(|p| format!("{}:{:.0}", p.env_steps, p.score)).collect();
        println!("{:>4} {}", run.curve.method_label, pts.join(" "));
    }
    println!("reduction: {}", eval::interaction_reduction(&act.curve, &ft.curve)?);
    Ok(())
}
