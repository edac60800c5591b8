//! The active loop on a small budget: pretrain on pruned medium-maze data,
//! then collect from the most uncertain starts with uncertainty-guided
//! exploration, logging every trajectory.

use aorl::active::{self, ExplorationConfig, LoopConfig, LoopInputs, TerminationReason};
use aorl::data;
use aorl::env::{self, MazeSpec, ACT_DIM, OBS_DIM};
use aorl::eval;
use aorl::offline::{self, OfflineConfig};
use aorl::planner::WaypointPlanner;
use aorl::repr::{self, ReprConfig, RepresentationEnsemble};
use aorl::rng;

fn main() -> aorl::Result<()> {
    let seed = 0;
    let spec = MazeSpec::builtin("medium")?;
    let mut behavior = WaypointPlanner::behavior(&spec, 0.2)?;
    let full = data::collect_behavior_dataset(&spec, &mut behavior, 20_000, &mut rng::stream(seed, "data"))?;
    let d0 = data::prune_near_goal(&full, spec.goal, 2.0)?;
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
        budget: 4_000,
        epoch_transitions: 1_000,
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
    let out = active::active_loop(&d0, learner, ensemble, &inputs)?;
    for e in &out.epochs {
        println!(
            "epoch {}: {} steps used, threshold {:.4}, alpha {:.2}, normalized {:.1}",
            e.epoch, e.env_steps_used, e.threshold, e.alpha, e.normalized_score
        );
    }
    let trajs = &out.log.trajectories;
    let count = |r: TerminationReason| trajs.iter().filter(|t| t.reason == r).count();
    println!(
        "{} trajectories: {} hit the threshold, {} ran to the time limit, {} cut by the budget",
        trajs.len(),
        count(TerminationReason::Threshold),
        count(TerminationReason::EpisodeDone),
        count(TerminationReason::BudgetExhausted)
    );
    let added = &out.dataset.transitions[d0.len()..];
    let near = added.iter().filter(|t| env::dist(t.position(), spec.goal) <= 2.0).count();
    println!("{} of {} collected transitions lie in the pruned disc", near, added.len());
    Ok(())
}
