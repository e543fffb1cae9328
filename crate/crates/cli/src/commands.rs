use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use seed_core::checkpoint::{load_bundle_for, read_manifest, save_bundle, CheckpointError};
use seed_core::feedback::{FeedbackProvider, HumanFeedback, QThresholdOracle, ScriptOracle};
use seed_core::script::StageTable;
use seed_core::sim::{TaskKind, TaskSpec};
use seed_core::train::{
    evaluate_policy, oracle_check, run_training, FeedbackMode, JsonlSink, OracleCheck, Observers, RunMetrics,
    TrainConfig, TrainError, TrainObserver,
};
use seed_gateway::{Gateway, GatewayConfig};

use crate::config::{parse_task, resolve, Overrides};
use crate::manifest::RunManifest;
use crate::{CliError, EvalArgs, Format, OracleArgs, ReplayArgs, TrainArgs};

/// Runtime options that are not part of the recorded config.
#[derive(Debug, Clone, Default)]
pub struct JobOptions {
    pub serve: Option<String>,
    pub static_dir: Option<PathBuf>,
}

fn checkpoint_error(e: CheckpointError, what: &Path) -> CliError {
    match e {
        CheckpointError::Mismatch { .. } | CheckpointError::Layout(_) => {
            CliError::Mismatch(format!("{}: {e}", what.display()))
        }
        CheckpointError::Io(_) | CheckpointError::Json(_) | CheckpointError::Version(_) => {
            CliError::Config(format!("{}: {e}", what.display()))
        }
        other => CliError::Failed(format!("{}: {other}", what.display())),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(c) => CliError::Config(c.to_string()),
        TrainError::MissingProvider(_) => CliError::Config(e.to_string()),
        TrainError::NumericHalt {
            step, reason, checkpoint, ..
        } => CliError::Numeric(match checkpoint {
            Some(p) => format!("decision step {step}: {reason} (state saved to {})", p.display()),
            None => format!("decision step {step}: {reason}"),
        }),
        other => CliError::Failed(other.to_string()),
    }
}

/// Trains `manifest.config` into `dir`, which must already hold the manifest.
pub fn run_job(manifest: &RunManifest, dir: &Path, opts: &JobOptions) -> Result<RunMetrics, CliError> {
    let cfg = &manifest.config;
    let task = cfg.task_spec();
    let ckpt_dir = dir.join(&manifest.layout.checkpoints);
    let mut sink = JsonlSink::create(&dir.join(&manifest.layout.metrics))?;

    let mut script = ScriptOracle::default();
    script.tau_ok = cfg.tau_ok;
    let mut teacher = None;
    let mut gateway = None;
    let mut human = None;
    match cfg.feedback_mode {
        FeedbackMode::OracleQ => {
            let path = manifest
                .oracle_checkpoint
                .as_deref()
                .ok_or_else(|| CliError::Config("--feedback oracle-q needs --oracle-checkpoint".into()))?;
            let bundle = load_bundle_for(path, &task).map_err(|e| checkpoint_error(e, path))?;
            teacher = Some(QThresholdOracle::new(bundle));
        }
        FeedbackMode::Human => {
            let addr = opts
                .serve
                .as_deref()
                .ok_or_else(|| CliError::Config("--feedback human needs --serve ADDR".into()))?;
            let gw_cfg = GatewayConfig {
                static_dir: opts.static_dir.clone(),
                ..GatewayConfig::default()
            };
            let gw = Gateway::start(addr, gw_cfg).map_err(|e| CliError::Config(e.to_string()))?;
            log::info!("operator gateway listening on http://{}", gw.local_addr());
            let mut h = HumanFeedback::new(gw.hub().channel());
            h.timeout = Duration::from_secs_f64(cfg.human_timeout_secs);
            human = Some(h);
            gateway = Some(gw);
        }
        _ => {}
    }
    let provider: Option<&mut dyn FeedbackProvider> = match cfg.feedback_mode {
        FeedbackMode::OracleScript => Some(&mut script),
        FeedbackMode::OracleQ => teacher.as_mut().map(|t| t as &mut dyn FeedbackProvider),
        FeedbackMode::Human => human.as_mut().map(|h| h as &mut dyn FeedbackProvider),
        FeedbackMode::EnvReward | FeedbackMode::EnvRewardAff => None,
    };

    let mut gw_observer = gateway.as_ref().map(|g| g.hub().observer());
    let mut observers: Vec<&mut dyn TrainObserver> = vec![&mut sink];
    if let Some(o) = gw_observer.as_mut() {
        observers.push(o);
    }
    let outcome = run_training(cfg, provider, &mut Observers(observers), Some(&ckpt_dir)).map_err(train_error)?;
    if let Some(gw) = gateway {
        gw.shutdown();
    }

    save_bundle(&outcome.bundle, &ckpt_dir, "final", &manifest.config_hash, Vec::new(), outcome.metrics.decision_steps)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    if let Some(name) = &manifest.layout.buffer {
        outcome
            .buffer
            .dump_jsonl(&dir.join(name))
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    Ok(outcome.metrics)
}

fn default_run_dir(cfg: &TrainConfig) -> PathBuf {
    let mode = serde_json::to_value(cfg.feedback_mode).expect("mode serializes");
    PathBuf::from("runs").join(format!("{}-{}-s{}", cfg.task.name(), mode.as_str().unwrap_or("run"), cfg.seed))
}

fn write_summary(out: &mut dyn Write, dir: &Path, m: &RunMetrics) -> std::io::Result<()> {
    writeln!(out, "run        {}", dir.display())?;
    writeln!(out, "steps      {} ({} executed, {} vetoed)", m.decision_steps, m.executed_steps, m.vetoed_steps)?;
    writeln!(out, "episodes   {} ({} successful)", m.episodes, m.successes)?;
    let f = m.feedback_counts;
    writeln!(out, "feedback   +{} 0:{} -{}", f.positive, f.neutral, f.negative)?;
    writeln!(out, "safety     {} violations ({:.4} per step)", m.safety_violations, m.safety_violation_ratio())?;
    if let Some((step, rate)) = m.eval_curve.last() {
        writeln!(out, "eval       {rate:.3} at step {step}")?;
    }
    if let Some(h) = &m.halted {
        writeln!(out, "halted     {h}")?;
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let flags = Overrides {
        task: args.task.clone(),
        feedback: args.feedback.clone(),
        steps: args.steps,
        seed: args.seed,
    };
    let cfg = resolve(args.config.as_deref(), &flags)?;
    if cfg.feedback_mode == FeedbackMode::Human && args.serve.is_none() {
        return Err(CliError::Config("--feedback human needs --serve ADDR".into()));
    }
    if cfg.feedback_mode == FeedbackMode::OracleQ && args.oracle_checkpoint.is_none() {
        return Err(CliError::Config("--feedback oracle-q needs --oracle-checkpoint".into()));
    }
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(&cfg));
    let manifest = RunManifest::new(cfg, args.oracle_checkpoint.clone(), args.save_buffer);
    manifest.create(&dir)?;
    let opts = JobOptions {
        serve: args.serve.clone(),
        static_dir: args.static_dir.clone(),
    };
    let metrics = run_job(&manifest, &dir, &opts)?;
    write_summary(out, &dir, &metrics)?;
    Ok(())
}

pub fn cmd_replay(args: &ReplayArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = RunManifest::load(&args.run)?;
    if manifest.config.feedback_mode == FeedbackMode::Human {
        return Err(CliError::Config("human-feedback runs cannot be replayed".into()));
    }
    let scratch;
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path().to_path_buf()
        }
    };
    manifest.create(&dir)?;
    run_job(&manifest, &dir, &JobOptions::default())?;

    let original = std::fs::read(args.run.join(&manifest.layout.metrics))?;
    let rerun = std::fs::read(dir.join(&manifest.layout.metrics))?;
    if original == rerun {
        let lines = original.iter().filter(|b| **b == b'\n').count();
        writeln!(out, "identical: {lines} metric lines, {} bytes", original.len())?;
        return Ok(());
    }
    let line = original
        .split(|b| *b == b'\n')
        .zip(rerun.split(|b| *b == b'\n'))
        .position(|(a, b)| a != b)
        .map_or_else(|| "end of file".to_string(), |i| format!("line {}", i + 1));
    Err(CliError::Failed(format!("metrics diverge at {line}")))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    task: TaskKind,
    checkpoint: &'a Path,
    rollouts: usize,
    seed: u64,
    success_rate: f64,
    episode_steps: &'a [u32],
    successes: &'a [bool],
    safety_violations: u64,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let kind = match &args.task {
        Some(t) => parse_task(t)?,
        None => read_manifest(&args.checkpoint).map_err(|e| checkpoint_error(e, &args.checkpoint))?.task,
    };
    if args.rollouts == 0 {
        return Err(CliError::Config("--rollouts must be positive".into()));
    }
    let task = TaskSpec::new(kind);
    let mut bundle = load_bundle_for(&args.checkpoint, &task).map_err(|e| checkpoint_error(e, &args.checkpoint))?;
    let r = evaluate_policy(&mut bundle, &task, args.rollouts, args.seed);
    match args.format {
        Format::Json => {
            let report = EvalReport {
                task: kind,
                checkpoint: &args.checkpoint,
                rollouts: args.rollouts,
                seed: args.seed,
                success_rate: r.success_rate,
                episode_steps: &r.episode_steps,
                successes: &r.successes,
                safety_violations: r.safety_violations,
            };
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
        }
        Format::Text => {
            let wins = r.successes.iter().filter(|s| **s).count();
            writeln!(out, "task          {kind}")?;
            writeln!(out, "success_rate  {:.3} ({wins}/{})", r.success_rate, args.rollouts)?;
            let steps: Vec<String> = r.episode_steps.iter().map(u32::to_string).collect();
            writeln!(out, "episode_steps {}", steps.join(" "))?;
            writeln!(out, "safety        {}", r.safety_violations)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskSummary {
    pub task: TaskKind,
    pub passed: usize,
    pub total: usize,
    /// Mean decision steps of the passing solutions.
    pub mean_steps: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
    pub tasks: Vec<TaskSummary>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn oracle_report(
    tasks: &[TaskKind],
    seeds: Range<u64>,
    tau_ok: f64,
    table_for: &dyn Fn(TaskKind) -> StageTable,
) -> OracleReport {
    let mut checks = Vec::new();
    let mut summaries = Vec::new();
    for &kind in tasks {
        let table = table_for(kind);
        let task = TaskSpec::new(kind);
        let these: Vec<OracleCheck> = seeds.clone().map(|s| oracle_check(&table, &task, s, tau_ok)).collect();
        let ok: Vec<u32> = these.iter().filter(|c| c.passed).map(|c| c.steps).collect();
        summaries.push(TaskSummary {
            task: kind,
            passed: ok.len(),
            total: these.len(),
            mean_steps: (!ok.is_empty()).then(|| ok.iter().sum::<u32>() as f64 / ok.len() as f64),
        });
        checks.extend(these);
    }
    OracleReport {
        checks,
        tasks: summaries,
    }
}

/// Prints the report; any failed rollout becomes an error naming its stage.
pub fn finish_oracle_check(report: &OracleReport, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    match format {
        Format::Json => writeln!(out, "{}", serde_json::to_string(report)?)?,
        Format::Text => {
            for c in &report.checks {
                if c.passed {
                    writeln!(out, "{:<15} seed {:>3}  pass  {} steps", c.task.name(), c.seed, c.steps)?;
                } else {
                    writeln!(
                        out,
                        "{:<15} seed {:>3}  FAIL  stage `{}` after {} steps: {}",
                        c.task.name(),
                        c.seed,
                        c.failed_stage.as_deref().unwrap_or("-"),
                        c.steps,
                        c.reason.as_deref().unwrap_or("")
                    )?;
                }
            }
            for t in &report.tasks {
                let mean = t.mean_steps.map_or("-".to_string(), |m| format!("{m:.2}"));
                writeln!(out, "{:<15} {}/{} passed, mean solution length {mean}", t.task.name(), t.passed, t.total)?;
            }
        }
    }
    if report.all_passed() {
        return Ok(());
    }
    let mut stages: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} `{}`", c.task.name(), c.failed_stage.as_deref().unwrap_or("-")))
        .collect();
    stages.dedup();
    Err(CliError::Failed(format!("oracle check failed at {}", stages.join(", "))))
}

pub fn cmd_oracle_check(args: &OracleArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let tasks = if args.task == "all" { TaskKind::ALL.to_vec() } else { vec![parse_task(&args.task)?] };
    if args.seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let seeds = args.first_seed..args.first_seed.saturating_add(args.seeds);
    let report = oracle_report(&tasks, seeds, args.tau_ok, &StageTable::for_task);
    finish_oracle_check(&report, args.format, out)
}
