use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aorl::experiment::RunManifest;

const TINY: &str = r#"
[run]
layout = "umaze"
seeds = [0]
reference_episodes = 5

[data]
n = 2000
prune_radius = 1.5

[offline]
steps = 200
hidden = 16
batch_size = 32

[repr]
train_steps = 40
update_steps = 10
hidden = 16
embed_dim = 8
batch_size = 32

[schedule]
budget = 300
epoch_transitions = 150
epoch_updates = 60
eval_episodes = 2

[restricted]
max_nodes = 150
goal_steps = 60

[online]
budget = 120
updates_per_step = 1
eval_every = 60
eval_episodes = 2
"#;

fn aorl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aorl"))
        .args(args)
        .current_dir(dir)
        .env_remove("AORL_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn checksums(dir: &Path) -> BTreeMap<String, String> {
    RunManifest::load(dir).unwrap().checksums
}

#[test]
fn help_lists_every_verb() {
    let tmp = tempfile::tempdir().unwrap();
    let out = aorl(&["--help"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for verb in [
        "gen-data",
        "prune",
        "subsample",
        "train-offline",
        "train-repr",
        "active-collect",
        "finetune",
        "evaluate",
        "ablate",
        "online",
        "plot",
        "run",
    ] {
        assert!(text.contains(verb), "missing {verb} in help:\n{text}");
    }
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[explore]\nepsilonn = 0.3\n");
    let out = aorl(&["run", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epsilonn"), "{}", stderr(&out));

    let out = aorl(&["finetune", "--data", "missing.txt"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("run.dataset"));
}

#[test]
fn file_pipeline_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ok = |args: &[&str]| {
        let o = aorl(args, d);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["gen-data", "--layout", "umaze", "--n", "1500", "--seed", "3", "--out", "full.txt"]);
    ok(&["prune", "--data", "full.txt", "--radius", "1.0", "--out", "pruned.txt"]);
    ok(&["subsample", "--data", "pruned.txt", "--fraction", "0.5", "--out", "half.txt"]);
    let full = aorl::data::Dataset::load(&d.join("full.txt")).unwrap();
    let pruned = aorl::data::Dataset::load(&d.join("pruned.txt")).unwrap();
    let half = aorl::data::Dataset::load(&d.join("half.txt")).unwrap();
    assert_eq!(full.len(), 1500);
    assert!(pruned.len() < full.len());
    assert!(half.n_trajectories() < pruned.n_trajectories());

    ok(&["train-offline", "--data", "pruned.txt", "--algo", "bc", "--steps", "50", "--out", "bc.ckpt"]);
    ok(&["train-offline", "--data", "pruned.txt", "--steps", "50", "--out", "td3bc.ckpt"]);
    ok(&["train-repr", "--data", "pruned.txt", "--steps", "20", "--out", "repr.ckpt"]);
    aorl::repr::RepresentationEnsemble::load(&d.join("repr.ckpt")).unwrap();
    for ckpt in ["bc.ckpt", "td3bc.ckpt"] {
        let o = ok(&["evaluate", "--checkpoint", ckpt, "--layout", "umaze", "--episodes", "2", "--reference", "ref.json"]);
        let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(report["n_episodes"], 2);
    }

    fs::write(d.join("curves.csv"), "method,seed,env_steps,score\nA+U,0,100,1\nA+U,0,200,3\nI+P,0,100,0\nI+P,0,200,2\n").unwrap();
    ok(&["plot", "--curves", "curves.csv", "--layout", "umaze", "--out", "plots"]);
    assert!(d.join("plots/plot_umaze.svg").exists());
    assert!(d.join("plots/plot_umaze.csv").exists());
}

#[test]
fn flags_override_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[explore]\nepsilon = 0.9\n");
    let out = aorl(
        &["run", "--config", &cfg, "--mode", "ft", "--epsilon", "0.25", "--budget", "150", "--out", "o", "--quiet"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let m = RunManifest::load(&tmp.path().join("o")).unwrap();
    let snap = aorl::experiment::ExperimentConfig::from_toml(&m.config).unwrap();
    assert_eq!(snap.explore.epsilon, 0.25);
    assert_eq!(snap.schedule.budget, 150);
    assert_eq!(snap.run.mode, aorl::experiment::Mode::Ft);
    assert_eq!(m.status, "ok");
}

#[test]
fn offline_then_active_reuses_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let first = aorl(&["run", "--config", &cfg, "--mode", "offline", "--out", "shared"], tmp.path());
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stderr(&first).contains("offline: 200 TD3+BC updates"));
    let ckpt = tmp.path().join("shared/seed_0/offline.ckpt");
    let before = fs::read(&ckpt).unwrap();

    let second = aorl(&["active-collect", "--config", &cfg, "--out", "shared"], tmp.path());
    assert!(second.status.success(), "{}", stderr(&second));
    let log = stderr(&second);
    assert!(log.contains("offline: reusing stored learner"), "{log}");
    assert!(log.contains("repr: reusing stored ensemble"), "{log}");
    assert!(!log.contains("TD3+BC updates"), "{log}");
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    assert!(tmp.path().join("shared/seed_0/A_U/curve.csv").exists());
    assert!(tmp.path().join("shared/seed_0/A_U/log.jsonl").exists());
}

#[test]
fn ablate_writes_one_curve_per_arm_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = aorl(&["ablate", "--config", &cfg, "--seeds", "0,1,2", "--out", "abl", "--quiet"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let root = tmp.path().join("abl");
    let mut curves = 0;
    for seed in 0..3 {
        for entry in fs::read_dir(root.join(format!("seed_{seed}"))).unwrap() {
            let p = entry.unwrap().path();
            if p.join("curve.csv").exists() {
                curves += 1;
            }
        }
    }
    assert_eq!(curves, 18);
    let table = fs::read_to_string(root.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(table.starts_with("arm,init,explore,n_seeds"));
    assert!(root.join("report.csv").exists());
    assert!(root.join("plot_umaze.svg").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    for dir in ["a", "b"] {
        let out = aorl(&["active-collect", "--config", &cfg, "--out", dir, "--quiet"], tmp.path());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = checksums(&tmp.path().join("a"));
    let b = checksums(&tmp.path().join("b"));
    assert!(a.contains_key("curves.csv"));
    assert!(a.contains_key("seed_0/A_U/learner.ckpt"));
    assert_eq!(a, b);
}

#[test]
fn stage_failure_exits_two_and_marks_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    fs::write(tmp.path().join("broken.txt"), "# aorl-dataset v1\nnot a transition\n").unwrap();
    let out = aorl(&["finetune", "--config", &cfg, "--data", "broken.txt", "--out", "f"], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("data stage failed"));
    let m = RunManifest::load(&tmp.path().join("f")).unwrap();
    assert_eq!(m.status, "failed");
    assert_eq!(m.failed_stage.as_deref(), Some("data"));
    assert!(m.checksums.contains_key("reference_umaze.json"));
}

#[test]
fn online_and_restricted_modes_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = aorl(&["online", "--config", &cfg, "--out", "on", "--quiet"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.contains("online A+U"), "{report}");
    assert!(report.contains("online I+P"), "{report}");

    let out = aorl(&["active-collect", "--restricted", "--config", &cfg, "--out", "gr", "--quiet"], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("gr/seed_0/travel.ckpt").exists());
    assert!(tmp.path().join("gr/seed_0/clusters.csv").exists());
    assert!(tmp.path().join("gr/seed_0/G_U/curve.csv").exists());
}
