use seed_core::checkpoint::{load_bundle_for, save_bundle};
use seed_core::feedback::ScriptOracle;
use seed_core::script::StageTable;
use seed_core::sim::TaskKind;
use seed_core::train::{
    evaluate_policy, run_training, FeedbackMode, JsonlSink, MetricRecord, ScriptedPolicy, StepRecord, TrainConfig,
    TrainObserver, METRICS_SCHEMA_VERSION,
};

fn small(task: TaskKind, mode: FeedbackMode, steps: u64) -> TrainConfig {
    TrainConfig {
        max_decision_steps: steps,
        hidden: vec![16, 16],
        batch_size: 32,
        gradient_steps: 1,
        eval_every: 250,
        eval_rollouts: 3,
        seed: 5,
        ..TrainConfig::for_task(task, mode)
    }
}

#[derive(Default)]
struct Steps(Vec<StepRecord>);

impl TrainObserver for Steps {
    fn record(&mut self, r: &MetricRecord) -> std::io::Result<()> {
        if let MetricRecord::Step(s) = r {
            self.0.push(s.clone());
        }
        Ok(())
    }
}

#[test]
fn scripted_solutions_solve_every_task() {
    for kind in TaskKind::ALL {
        let task = seed_core::sim::TaskSpec::new(kind);
        let r = evaluate_policy(&mut ScriptedPolicy(StageTable::for_task(kind)), &task, 10, 3);
        assert_eq!(r.success_rate, 1.0, "{kind}");
        assert_eq!(r.safety_violations, 0, "{kind}");
    }
}

#[test]
fn vetoed_decisions_never_touch_the_world() {
    for kind in [TaskKind::Stacking, TaskKind::Sweeping, TaskKind::CookingHotdog] {
        let mut steps = Steps::default();
        let mut oracle = ScriptOracle::default();
        run_training(&small(kind, FeedbackMode::OracleScript, 600), Some(&mut oracle), &mut steps, None).unwrap();
        assert_eq!(steps.0.len(), 600);
        let vetoed: Vec<&StepRecord> = steps.0.iter().filter(|s| s.feedback != Some(1)).collect();
        assert!(!vetoed.is_empty());
        for s in vetoed {
            assert!(!s.executed, "{kind} step {}", s.step);
            assert_eq!(s.state_hash_before, s.state_hash_after, "{kind} step {}", s.step);
        }
    }
}

#[test]
fn ungated_baseline_executes_everything() {
    let mut steps = Steps::default();
    let outcome = run_training(&small(TaskKind::Stacking, FeedbackMode::EnvRewardAff, 300), None, &mut steps, None).unwrap();
    assert!(steps.0.iter().all(|s| s.executed && s.feedback.is_none()));
    assert_eq!(outcome.metrics.vetoed_steps, 0);
}

#[test]
fn trained_bundle_survives_a_checkpoint() {
    let cfg = small(TaskKind::Reaching, FeedbackMode::OracleScript, 400);
    let mut oracle = ScriptOracle::default();
    let outcome = run_training(&cfg, Some(&mut oracle), &mut Steps::default(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_bundle(&outcome.bundle, dir.path(), "a", &cfg.hash(), Vec::new(), 400).unwrap();
    let task = cfg.task_spec();
    let mut loaded = load_bundle_for(&path, &task).unwrap();
    let again = save_bundle(&loaded, dir.path(), "b", &cfg.hash(), Vec::new(), 400).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.bin")).unwrap(), std::fs::read(dir.path().join("b.bin")).unwrap());
    assert!(again.exists());
    let mut trained = outcome.bundle.clone();
    let before = evaluate_policy(&mut trained, &task, 5, 1);
    let after = evaluate_policy(&mut loaded, &task, 5, 1);
    assert_eq!(before.success_rate, after.success_rate);
}

#[test]
fn metrics_lines_are_versioned_and_parse_back() {
    let cfg = small(TaskKind::Reaching, FeedbackMode::OracleScript, 260);
    let mut oracle = ScriptOracle::default();
    let mut sink = JsonlSink::new(Vec::new());
    run_training(&cfg, Some(&mut oracle), &mut sink, None).unwrap();
    let text = String::from_utf8(sink.into_inner()).unwrap();
    let mut kinds = (0, 0, 0);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["schema"], METRICS_SCHEMA_VERSION);
        match serde_json::from_value::<MetricRecord>(v).unwrap() {
            MetricRecord::Step(_) => kinds.0 += 1,
            MetricRecord::Eval(e) => {
                kinds.1 += 1;
                assert_eq!(e.episode_steps.len(), 3);
            }
            MetricRecord::Summary(m) => {
                kinds.2 += 1;
                assert_eq!(m.decision_steps, 260);
            }
        }
    }
    assert_eq!(kinds, (260, 1, 1));
}
