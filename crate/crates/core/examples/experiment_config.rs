//! Drive a complete staged run from a TOML configuration: dataset, anchors,
//! offline learner, ensemble and the active loop, plus the run manifest.

use aorl::experiment::{self, ExperimentConfig, RunManifest};

const CONFIG: &str = r#"
[run]
layout = "umaze"
mode = "active"
seeds = [0]

[data]
n = 5000
prune_radius = 1.5

[offline]
steps = 1000

[repr]
train_steps = 300
update_steps = 50

[schedule]
budget = 1000
epoch_transitions = 500
epoch_updates = 500
eval_episodes = 5
"#;

fn main() -> aorl::Result<()> {
    let dir = tempfile::tempdir().map_err(aorl::Error::RawIo)?;
    let mut cfg = ExperimentConfig::from_toml(CONFIG)?;
    cfg.run.out_dir = Some(dir.path().join("run"));
    cfg.run.reference_episodes = 20;
    println!("epsilon {} (default), budget {}", cfg.explore.epsilon, cfg.schedule.budget);

    let summary = experiment::run_experiment(&cfg, &mut |msg| println!("  {msg}"))?;
    print!("{}", experiment::report_csv(&summary.report));
    let manifest = RunManifest::load(&summary.out_dir)?;
    println!("status {}, {} files checksummed", manifest.status, manifest.checksums.len());
    for (file, sum) in manifest.checksums.iter().take(5) {
        println!("  {file} {}", &sum[..16]);
    }

    match ExperimentConfig::from_toml("[explore]\nepsillon = 0.3\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are rejected"),
    }
    Ok(())
}
