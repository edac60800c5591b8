//! Behavior cloning against TD3+BC on full open-maze data.

use aorl::data;
use aorl::env::MazeSpec;
use aorl::eval;
use aorl::offline::{self, OfflineConfig};
use aorl::planner::WaypointPlanner;
use aorl::rng;

fn main() -> aorl::Result<()> {
    let spec = MazeSpec::builtin("open")?;
    let mut behavior = WaypointPlanner::behavior(&spec, 0.2)?;
    let d = data::collect_behavior_dataset(&spec, &mut behavior, 20_000, &mut rng::stream(0, "data"))?;
    let refs = eval::compute_reference_scores(&spec, 50, &mut rng::stream(0, "reference"))?;
    println!("anchors: random {:.1}, expert {:.1}", refs.random_return, refs.expert_return);

    let cfg = OfflineConfig {
        steps: 5_000,
        ..Default::default()
    };
    let bc = offline::bc_train(&d, spec.max_force, &cfg, &mut rng::stream(0, "bc"))?;
    let report = eval::evaluate(&spec, &mut bc.clone(), 20, &refs, &mut rng::stream(0, "eval"))?;
    println!("BC:      normalized {:.1}", report.normalized_score);

    let learner = offline::td3bc_train(&d, spec.max_force, &cfg, &mut rng::stream(0, "td3bc"))?;
    let report = eval::evaluate(&spec, &mut learner.policy.clone(), 20, &refs, &mut rng::stream(0, "eval"))?;
    println!("TD3+BC:  normalized {:.1} after {} updates", report.normalized_score, learner.total_updates);
    Ok(())
}
