//! No offline data: collect one transition, train five updates, repeat.
//! Compares the active explorer with plain policy-driven collection.

use aorl::active::{self, ArmSpec, ExplorationConfig, OnlineConfig};
use aorl::env::MazeSpec;
use aorl::eval;
use aorl::offline::OfflineConfig;
use aorl::repr::ReprConfig;
use aorl::rng;

fn main() -> aorl::Result<()> {
    let spec = MazeSpec::builtin("umaze")?;
    let refs = eval::compute_reference_scores(&spec, 50, &mut rng::stream(0, "reference"))?;
    let cfg = OnlineConfig {
        budget: 3_000,
        eval_every: 1_000,
        eval_episodes: 10,
        ..Default::default()
    };
    for arm in [ArmSpec::ACTIVE, ArmSpec::FINETUNE] {
        let out = active::online_loop(
            arm,
            &spec,
            &refs,
            &OfflineConfig::default(),
            &ReprConfig::default(),
            &ExplorationConfig::default(),
            &cfg,
            0,
        )?;
        let pts: Vec<String> = out.epochs.iter().map(|e| format!("{}:{:.1}", e.env_steps_used, e.normalized_score)).collect();
        println!("{:<12} {}", out.curve.method_label, pts.join("  "));
    }
    Ok(())
}
