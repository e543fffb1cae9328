use std::path::Path;
use std::process::Command;

use seed_cli::commands::finish_oracle_check;
use seed_cli::{oracle_report, run, Format, EXIT_CONFIG, EXIT_FAILURE, EXIT_NUMERIC, EXIT_OK};
use seed_core::agent::{AgentConfig, PolicyBundle};
use seed_core::checkpoint::save_bundle;
use seed_core::script::{StageTable, Target};
use seed_core::sim::{TaskKind, TaskSpec, REACH_TARGET};
use seed_core::skills::{SkillAction, SkillId};

const LEAN: &str = "hidden = [16, 16]\nbatch_size = 16\ngradient_steps = 1\neval_every = 1000\neval_rollouts = 2\n";

fn seed(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(std::iter::once("seed").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn lean_config(dir: &Path) -> String {
    let p = dir.join("lean.toml");
    std::fs::write(&p, LEAN).unwrap();
    p.to_str().unwrap().to_string()
}

fn records(metrics: &Path, kind: &str) -> usize {
    std::fs::read_to_string(metrics)
        .unwrap()
        .lines()
        .filter(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"] == kind)
        .count()
}

#[test]
fn stacking_oracle_run_writes_one_record_per_decision_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = lean_config(dir.path());
    let run_dir = dir.path().join("run");
    let (code, out, err) = seed(&[
        "train", "--task", "stacking", "--feedback", "oracle", "--steps", "20000", "--seed", "1", "--config", &cfg,
        "--out", run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("steps      20000"));
    let metrics = run_dir.join("metrics.jsonl");
    assert_eq!(records(&metrics, "step"), 20_000);
    assert_eq!(records(&metrics, "eval"), 20);
    assert_eq!(records(&metrics, "summary"), 1);
    assert!(run_dir.join("manifest.json").exists());
    assert!(run_dir.join("checkpoints/final.json").exists());
    assert!(run_dir.join("checkpoints/latest.json").exists());
}

#[test]
fn human_mode_without_serve_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, _, err) = seed(&["train", "--task", "stacking", "--feedback", "human", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("--serve"));
    assert!(!out.exists(), "nothing is written for a rejected config");

    let status = Command::new(env!("CARGO_BIN_EXE_seed"))
        .args(["train", "--task", "stacking", "--feedback", "human"])
        .current_dir(dir.path())
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));
}

#[test]
fn bad_flags_and_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "warp_factor = 9\n").unwrap();
    assert_eq!(seed(&["train", "--config", bad.to_str().unwrap()]).0, EXIT_CONFIG);
    assert_eq!(seed(&["train", "--task", "juggling"]).0, EXIT_CONFIG);
    assert_eq!(seed(&["train", "--steps", "many"]).0, EXIT_CONFIG);
    assert_eq!(seed(&["train", "--feedback", "oracle-q"]).0, EXIT_CONFIG);
}

#[test]
fn oracle_runs_are_byte_identical_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = lean_config(dir.path());
    let train = |name: &str| {
        let out = dir.path().join(name);
        let (code, _, err) = seed(&[
            "train", "--task", "reaching", "--feedback", "oracle", "--steps", "600", "--seed", "3", "--config", &cfg,
            "--out", out.to_str().unwrap(), "--save-buffer",
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        out
    };
    let a = train("a");
    let b = train("b");
    let bytes = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(&a, "metrics.jsonl"), bytes(&b, "metrics.jsonl"));
    assert_eq!(bytes(&a, "buffer.jsonl"), bytes(&b, "buffer.jsonl"));
    assert_eq!(bytes(&a, "checkpoints/final.bin"), bytes(&b, "checkpoints/final.bin"));

    let (code, out, err) = seed(&["replay", a.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.starts_with("identical"));

    // a run directory is write-once
    let (code, _, err) = seed(&["train", "--task", "reaching", "--out", a.to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("manifest"));

    let metrics = a.join("metrics.jsonl");
    let text = std::fs::read_to_string(&metrics).unwrap().replacen("\"step\":5,", "\"step\":6,", 1);
    std::fs::write(&metrics, text).unwrap();
    let (code, _, err) = seed(&["replay", a.to_str().unwrap()]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(err.contains("line 6"), "{err}");
}

#[test]
fn divergent_learning_rate_halts_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    std::fs::write(&cfg, format!("{LEAN}learning_rate = 1e150\ngradient_steps = 5\n").replace("gradient_steps = 1\n", "")).unwrap();
    let out = dir.path().join("run");
    let (code, _, err) = seed(&[
        "train", "--task", "stacking", "--feedback", "env", "--steps", "400", "--config", cfg.to_str().unwrap(), "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_NUMERIC, "{err}");
    assert!(err.contains("numeric halt"));
    assert!(out.join("checkpoints/halt.json").exists());
}

fn reaching_checkpoint(dir: &Path) -> std::path::PathBuf {
    let task = TaskSpec::new(TaskKind::Reaching);
    let action = SkillAction::from_world(SkillId::Reach, &REACH_TARGET, &task.workspace);
    let bundle = PolicyBundle::constant_policy(&task, &action, &AgentConfig::default()).unwrap();
    save_bundle(&bundle, dir, "scripted", "none", Vec::new(), 0).unwrap()
}

#[test]
fn eval_of_a_scripted_reaching_policy_succeeds_every_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = reaching_checkpoint(dir.path());
    let (code, out, err) = seed(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--format", "json"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["success_rate"], 1.0);
    assert_eq!(v["rollouts"], 10);
    assert_eq!(v["episode_steps"].as_array().unwrap().len(), 10);
    assert_eq!(v["task"], "reaching");

    let (code, out, _) = seed(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--rollouts", "3"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("success_rate  1.000 (3/3)"));
}

#[test]
fn eval_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = reaching_checkpoint(dir.path());
    let (code, _, err) = seed(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--task", "stacking"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("stacking"), "{err}");

    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    m["obs_layout_hash"] = "0000000000000000".into();
    std::fs::write(&ckpt, serde_json::to_string(&m).unwrap()).unwrap();
    let (code, _, err) = seed(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("layout"), "{err}");

    let missing = dir.path().join("nope.json");
    assert_eq!(seed(&["eval", "--checkpoint", missing.to_str().unwrap()]).0, EXIT_CONFIG);
}

#[test]
fn oracle_check_passes_every_task_and_seed() {
    let (code, out, err) = seed(&["oracle-check", "--seeds", "20"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(out.lines().filter(|l| l.contains("  pass  ")).count(), 100);
    for kind in TaskKind::ALL {
        let line = out.lines().find(|l| l.starts_with(kind.name()) && l.contains("passed")).unwrap();
        assert!(line.contains("20/20 passed, mean solution length"), "{line}");
    }
}

#[test]
fn broken_stage_table_fails_naming_the_stage() {
    let broken = |kind: TaskKind| {
        let mut table = StageTable::for_task(kind);
        if kind == TaskKind::Stacking {
            table.entries[1].keypoint = |_, _| Target {
                point: [0.05, 0.05, 0.1],
                delta: None,
            };
        }
        table
    };
    let report = oracle_report(&[TaskKind::Reaching, TaskKind::Stacking], 0..3, 0.04, &broken);
    let mut out = Vec::new();
    let err = finish_oracle_check(&report, Format::Text, &mut out).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_FAILURE);
    let stage = StageTable::for_task(TaskKind::Stacking).entries[1].label;
    assert!(err.to_string().contains(stage), "{err}");
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("FAIL")).count(), 3);
    assert!(text.contains("reaching        3/3 passed"));
    assert!(text.contains("stacking        0/3 passed, mean solution length -"));
}
