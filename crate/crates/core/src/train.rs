//! The propose, query, gate, store, update loop with periodic evaluation,
//! JSON-lines metrics and safety accounting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentError, CriticTarget, Learner, LossReport, PolicyBundle, SampleMode};
use crate::checkpoint::{save_bundle, CheckpointError};
use crate::feedback::{FeedbackContext, FeedbackError, FeedbackProvider};
use crate::net::{Activation, NetError};
use crate::render::SceneSnapshot;
use crate::replay::{Batch, ReplayBuffer, Transition, DEFAULT_CAPACITY};
use crate::script::StageTable;
use crate::sim::{execute_skill, observe, reset, SafetyViolation, SimError, StepOutcome, TaskKind, TaskSpec, WorldState};
use crate::skills::{encode_one_hot, SkillAction};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    OracleScript,
    OracleQ,
    Human,
    EnvReward,
    EnvRewardAff,
}

impl FeedbackMode {
    /// Accepts both the config spelling (`oracle_script`) and the CLI one (`oracle`).
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.replace('-', "_").as_str() {
            "oracle" | "oracle_script" => Self::OracleScript,
            "oracle_q" => Self::OracleQ,
            "human" => Self::Human,
            "env" | "env_reward" => Self::EnvReward,
            "env_aff" | "env_reward_aff" => Self::EnvRewardAff,
            _ => return None,
        })
    }

    pub fn uses_feedback(self) -> bool {
        !matches!(self, Self::EnvReward | Self::EnvRewardAff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Always,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Balanced,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub feedback_mode: FeedbackMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub gradient_steps: usize,
    pub train_frequency: usize,
    pub max_episodes: u64,
    pub max_decision_steps: u64,
    pub eval_every: u64,
    pub eval_rollouts: usize,
    pub gate_mode: GateMode,
    pub seed: u64,
    /// Buffer size before the first update; `None` means one batch.
    pub warmup: Option<usize>,
    /// Episode length in decision steps; `None` uses the task default.
    pub horizon: Option<u32>,
    pub buffer_capacity: usize,
    /// Defaults to balanced for feedback modes and uniform for the reward baselines.
    pub sampling: Option<Sampling>,
    pub include_affordance: bool,
    /// Bootstrap the feedback critic with this discount (off by default).
    pub feedback_gamma: Option<f64>,
    pub tau_ok: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub alpha_skill: f64,
    pub alpha_param: f64,
    pub auto_alpha: bool,
    pub target_tau: f64,
    pub human_timeout_secs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let agent = AgentConfig::default();
        Self {
            task: TaskKind::Stacking,
            feedback_mode: FeedbackMode::OracleScript,
            learning_rate: agent.learning_rate,
            batch_size: 256,
            gamma: 0.99,
            gradient_steps: 5,
            train_frequency: 1,
            max_episodes: u64::MAX,
            max_decision_steps: 20_000,
            eval_every: 500,
            eval_rollouts: 10,
            gate_mode: GateMode::Always,
            seed: 0,
            warmup: None,
            horizon: None,
            buffer_capacity: DEFAULT_CAPACITY,
            sampling: None,
            include_affordance: true,
            feedback_gamma: None,
            tau_ok: crate::feedback::DEFAULT_TAU_OK,
            hidden: agent.hidden,
            activation: agent.activation,
            alpha_skill: agent.alpha_skill,
            alpha_param: agent.alpha_param,
            auto_alpha: agent.auto_alpha,
            target_tau: agent.target_tau,
            human_timeout_secs: crate::feedback::DEFAULT_HUMAN_TIMEOUT.as_secs_f64(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

impl TrainConfig {
    pub fn for_task(task: TaskKind, mode: FeedbackMode) -> Self {
        Self {
            task,
            feedback_mode: mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("batch_size", self.batch_size as u64),
            ("gradient_steps", self.gradient_steps as u64),
            ("train_frequency", self.train_frequency as u64),
            ("max_episodes", self.max_episodes),
            ("max_decision_steps", self.max_decision_steps),
            ("eval_every", self.eval_every),
            ("eval_rollouts", self.eval_rollouts as u64),
            ("buffer_capacity", self.buffer_capacity as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(ConfigError(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if let Some(g) = self.feedback_gamma {
            if !(0.0..1.0).contains(&g) {
                return Err(ConfigError(format!("feedback_gamma {g} outside [0, 1)")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError("learning_rate must be positive".into()));
        }
        if !(self.alpha_skill > 0.0 && self.alpha_param > 0.0) {
            return Err(ConfigError("temperatures must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(ConfigError("hidden layers must be non-empty with positive widths".into()));
        }
        if self.horizon == Some(0) {
            return Err(ConfigError("horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.target_tau) {
            return Err(ConfigError("target_tau outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            hidden: self.hidden.clone(),
            activation: self.activation,
            learning_rate: self.learning_rate,
            alpha_skill: self.alpha_skill,
            alpha_param: self.alpha_param,
            auto_alpha: self.auto_alpha,
            target_tau: self.target_tau,
        }
    }

    pub fn critic_target(&self) -> CriticTarget {
        match self.feedback_mode {
            FeedbackMode::EnvReward => CriticTarget::Bellman {
                include_affordance: false,
                gamma: self.gamma,
            },
            FeedbackMode::EnvRewardAff => CriticTarget::Bellman {
                include_affordance: true,
                gamma: self.gamma,
            },
            _ => match self.feedback_gamma {
                Some(gamma) => CriticTarget::BootstrappedFeedback {
                    include_affordance: self.include_affordance,
                    gamma,
                },
                None => CriticTarget::Feedback {
                    include_affordance: self.include_affordance,
                },
            },
        }
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling.unwrap_or(if self.feedback_mode.uses_feedback() {
            Sampling::Balanced
        } else {
            Sampling::Uniform
        })
    }

    pub fn gated(&self) -> bool {
        self.gate_mode == GateMode::Always && self.feedback_mode.uses_feedback()
    }

    pub fn task_spec(&self) -> TaskSpec {
        let mut t = TaskSpec::new(self.task);
        if let Some(h) = self.horizon {
            t.max_steps = h;
        }
        t
    }

    /// Stable digest of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackCounts {
    pub negative: u64,
    pub neutral: u64,
    pub positive: u64,
}

impl FeedbackCounts {
    pub fn add(&mut self, value: i8) {
        match value {
            1 => self.positive += 1,
            0 => self.neutral += 1,
            _ => self.negative += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub decision_steps: u64,
    pub executed_steps: u64,
    pub vetoed_steps: u64,
    pub episodes: u64,
    pub successes: u64,
    pub feedback_counts: FeedbackCounts,
    pub safety_violations: u64,
    pub out_of_workspace: u64,
    pub collisions: u64,
    pub objects_lost: u64,
    pub gradient_bursts: u64,
    pub gradient_steps: u64,
    pub eval_curve: Vec<(u64, f64)>,
    pub halted: Option<String>,
    /// Excluded from metrics files so runs stay byte-reproducible.
    #[serde(skip)]
    pub wallclock_ms: u64,
}

impl RunMetrics {
    pub fn safety_violation_ratio(&self) -> f64 {
        if self.decision_steps == 0 {
            0.0
        } else {
            self.safety_violations as f64 / self.decision_steps as f64
        }
    }

    pub fn final_success_rate(&self) -> f64 {
        self.eval_curve.last().map_or(0.0, |e| e.1)
    }
}

/// Counts the decision step and, if present, its safety violation.
pub fn record_safety(outcome: &StepOutcome, metrics: &mut RunMetrics) {
    metrics.decision_steps += 1;
    if outcome.executed {
        metrics.executed_steps += 1;
    } else {
        metrics.vetoed_steps += 1;
    }
    if let Some(v) = outcome.safety_violation {
        metrics.safety_violations += 1;
        match v {
            SafetyViolation::OutOfWorkspace => metrics.out_of_workspace += 1,
            SafetyViolation::Collision => metrics.collisions += 1,
            SafetyViolation::ObjectLost => metrics.objects_lost += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub episode: u64,
    pub skill: String,
    pub params: Vec<f64>,
    pub feedback: Option<i8>,
    pub executed: bool,
    pub env_reward: f64,
    pub affordance: f64,
    pub success: bool,
    pub safety_violation: Option<SafetyViolation>,
    pub state_hash_before: String,
    pub state_hash_after: String,
    pub updates: usize,
    pub losses: Option<LossReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub success_rate: f64,
    pub episode_steps: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepRecord),
    Eval(EvalRecord),
    Summary(RunMetrics),
}

/// Versioned wrapper written to every metrics line.
#[derive(Serialize)]
struct Line<'a> {
    schema: u32,
    #[serde(flatten)]
    record: &'a MetricRecord,
}

/// What the trainer tells the world as it runs.
pub trait TrainObserver {
    fn record(&mut self, _record: &MetricRecord) -> std::io::Result<()> {
        Ok(())
    }
    /// Called after every decision step with the current scene and running totals.
    fn scene(&mut self, _scene: &SceneSnapshot, _metrics: &RunMetrics) {}
    /// Polled between decision steps; `true` stops the run cleanly.
    fn stop_requested(&mut self) -> bool {
        false
    }
}

pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Streams records as JSON lines.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl JsonlSink<std::io::BufWriter<std::fs::File>> {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TrainObserver for JsonlSink<W> {
    fn record(&mut self, record: &MetricRecord) -> std::io::Result<()> {
        serde_json::to_writer(
            &mut self.out,
            &Line {
                schema: METRICS_SCHEMA_VERSION,
                record,
            },
        )?;
        self.out.write_all(b"\n")?;
        if matches!(record, MetricRecord::Summary(_)) {
            self.out.flush()?;
        }
        Ok(())
    }
}

/// Fans out to several observers.
pub struct Observers<'a>(pub Vec<&'a mut dyn TrainObserver>);

impl TrainObserver for Observers<'_> {
    fn record(&mut self, r: &MetricRecord) -> std::io::Result<()> {
        self.0.iter_mut().try_for_each(|o| o.record(r))
    }
    fn scene(&mut self, s: &SceneSnapshot, m: &RunMetrics) {
        self.0.iter_mut().for_each(|o| o.scene(s, m))
    }
    fn stop_requested(&mut self) -> bool {
        self.0.iter_mut().any(|o| o.stop_requested())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("feedback provider: {0}")]
    Feedback(#[from] FeedbackError),
    #[error("feedback mode {0:?} needs a provider")]
    MissingProvider(FeedbackMode),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("numeric halt at decision step {step}: {reason}")]
    NumericHalt {
        step: u64,
        reason: String,
        checkpoint: Option<PathBuf>,
        metrics: Box<RunMetrics>,
    },
    #[error("learner: {0}")]
    Agent(AgentError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics sink: {0}")]
    Io(#[from] std::io::Error),
}

/// A deterministic policy for evaluation rollouts.
pub trait Policy {
    fn act(&mut self, state: &WorldState, obs: &[f64], task: &TaskSpec) -> SkillAction;
}

impl Policy for PolicyBundle {
    fn act(&mut self, _: &WorldState, obs: &[f64], _: &TaskSpec) -> SkillAction {
        // deterministic sampling ignores the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.sample_action(obs, SampleMode::Deterministic, &mut rng)
            .expect("bundle matches its task")
    }
}

/// The stage table's own solution: the expected skill at the exact keypoint.
pub struct ScriptedPolicy(pub StageTable);

impl Policy for ScriptedPolicy {
    fn act(&mut self, state: &WorldState, _: &[f64], task: &TaskSpec) -> SkillAction {
        self.0
            .scripted_action(state, task)
            .unwrap_or_else(|| SkillAction::bare(task.available_skills[0]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub success_rate: f64,
    pub episode_steps: Vec<u32>,
    pub successes: Vec<bool>,
    pub safety_violations: u64,
}

/// Initial-state seeds for evaluation, disjoint from training episodes.
pub fn eval_seed(seed: u64, rollout: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (0xe5a1_0000_0000 + rollout as u64)
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(episode)
}

/// Deterministic rollouts without gating or learning.
pub fn evaluate_policy<P: Policy + ?Sized>(policy: &mut P, task: &TaskSpec, n_rollouts: usize, seed: u64) -> EvalResult {
    let mut out = EvalResult {
        success_rate: 0.0,
        episode_steps: Vec::with_capacity(n_rollouts),
        successes: Vec::with_capacity(n_rollouts),
        safety_violations: 0,
    };
    for r in 0..n_rollouts {
        let mut state = reset(task, eval_seed(seed, r));
        let mut steps = 0;
        let mut success = false;
        while steps < task.max_steps && !success {
            let obs = observe(&state, task, false).values;
            let action = policy.act(&state, &obs, task);
            steps += 1;
            match execute_skill(&state, &action, task) {
                Ok(o) => {
                    success = o.success;
                    out.safety_violations += o.safety_violation.is_some() as u64;
                    state = o.next_state;
                }
                Err(_) => break,
            }
        }
        out.episode_steps.push(steps);
        out.successes.push(success);
    }
    let wins = out.successes.iter().filter(|s| **s).count();
    out.success_rate = if n_rollouts == 0 { 0.0 } else { wins as f64 / n_rollouts as f64 };
    out
}

pub fn evaluate(bundle: &PolicyBundle, task: &TaskSpec, n_rollouts: usize, seed: u64) -> f64 {
    let mut b = bundle.clone();
    evaluate_policy(&mut b, task, n_rollouts, seed).success_rate
}

pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub bundle: PolicyBundle,
    pub buffer: ReplayBuffer,
}

fn is_numeric(e: &AgentError) -> bool {
    matches!(e, AgentError::NonFiniteLoss(_) | AgentError::Net(NetError::NonFinite(_)))
}

/// Runs training to `max_decision_steps` (or `max_episodes`).
///
/// `provider` answers feedback queries in the feedback modes and is ignored
/// in the reward modes. Checkpoints go to `checkpoint_dir` after every
/// evaluation and on a numeric halt.
pub fn run_training(
    cfg: &TrainConfig,
    mut provider: Option<&mut dyn FeedbackProvider>,
    observer: &mut dyn TrainObserver,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.feedback_mode.uses_feedback() && provider.is_none() {
        return Err(TrainError::MissingProvider(cfg.feedback_mode));
    }
    let started = Instant::now();
    let task = cfg.task_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bundle = PolicyBundle::new(&task, &cfg.agent_config(), &mut rng).map_err(TrainError::Agent)?;
    let target = cfg.critic_target();
    let bellman = matches!(target, CriticTarget::Bellman { .. });
    let mut learner = Learner::new(bundle, &cfg.agent_config(), target);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let warmup = cfg.warmup.unwrap_or(cfg.batch_size);
    let sampling = cfg.sampling();
    let gated = cfg.gated();
    let config_hash = cfg.hash();
    let mut metrics = RunMetrics::default();

    let mut episode = 0u64;
    let mut state = reset(&task, episode_seed(cfg.seed, episode));
    let mut episode_steps = 0u32;

    let checkpoint = |learner: &Learner, stem: &str, step: u64| -> Result<Option<PathBuf>, CheckpointError> {
        checkpoint_dir
            .map(|d| save_bundle(&learner.bundle, d, stem, &config_hash, learner.optimizer_steps(), step))
            .transpose()
    };

    for step in 0..cfg.max_decision_steps {
        if observer.stop_requested() {
            metrics.halted = Some("stopped".into());
            break;
        }
        let obs = observe(&state, &task, false).values;
        let action = learner
            .bundle
            .sample_action(&obs, SampleMode::Stochastic, &mut rng)
            .map_err(TrainError::Agent)?;
        let aff = crate::sim::affordance_penalty(&state, &action, &task);
        let feedback = match (cfg.feedback_mode.uses_feedback(), provider.as_deref_mut()) {
            (true, Some(p)) => {
                let ctx = FeedbackContext {
                    step_id: step,
                    state: &state,
                    obs: &obs,
                    action: &action,
                    task: &task,
                };
                let signal = p.feedback(&ctx)?;
                metrics.feedback_counts.add(signal.value);
                Some(signal.value)
            }
            _ => None,
        };
        let execute = !gated || feedback == Some(1);
        let outcome = if execute {
            execute_skill(&state, &action, &task)?
        } else {
            StepOutcome::vetoed(&state, &task, aff)
        };
        record_safety(&outcome, &mut metrics);

        let next_obs = observe(&outcome.next_state, &task, false).values;
        buffer
            .push(Transition {
                obs: obs.clone(),
                skill_one_hot: encode_one_hot(action.skill, &task.available_skills).expect("sampled skill is available"),
                params_padded: action.params_raw,
                feedback: feedback.unwrap_or(0),
                affordance: aff,
                env_reward: outcome.env_reward,
                next_obs,
                done: outcome.success,
                executed: outcome.executed,
            })
            .expect("feedback in range");

        let mut updates = 0;
        let mut losses = None;
        if (step + 1) % cfg.train_frequency as u64 == 0 {
            metrics.gradient_bursts += 1;
            if buffer.len() >= warmup {
                for _ in 0..cfg.gradient_steps {
                    let items = match sampling {
                        Sampling::Balanced => buffer.sample_balanced(cfg.batch_size, &mut rng),
                        Sampling::Uniform => buffer.sample_uniform(cfg.batch_size, &mut rng),
                    }
                    .expect("buffer is non-empty after warmup");
                    // the reward baselines never learn from vetoed decisions
                    let items: Vec<&Transition> = if bellman { items.into_iter().filter(|t| t.executed).collect() } else { items };
                    if items.is_empty() {
                        continue;
                    }
                    let batch = Batch::from_transitions(&items);
                    match learner.update(&batch, &mut rng) {
                        Ok(r) => losses = Some(r),
                        Err(e) if is_numeric(&e) => {
                            let reason = e.to_string();
                            metrics.halted = Some(reason.clone());
                            metrics.wallclock_ms = started.elapsed().as_millis() as u64;
                            let path = checkpoint(&learner, "halt", step + 1)?;
                            observer.record(&MetricRecord::Summary(metrics.clone()))?;
                            return Err(TrainError::NumericHalt {
                                step,
                                reason,
                                checkpoint: path,
                                metrics: Box::new(metrics),
                            });
                        }
                        Err(e) => return Err(TrainError::Agent(e)),
                    }
                    updates += 1;
                    metrics.gradient_steps += 1;
                }
            }
        }

        episode_steps += 1;
        let hash_before = format!("{:016x}", state.state_hash());
        let hash_after = format!("{:016x}", outcome.next_state.state_hash());
        observer.record(&MetricRecord::Step(StepRecord {
            step,
            episode,
            skill: action.skill.name().to_string(),
            params: action.world_params().to_vec(),
            feedback,
            executed: outcome.executed,
            env_reward: outcome.env_reward,
            affordance: aff,
            success: outcome.success,
            safety_violation: outcome.safety_violation,
            state_hash_before: hash_before,
            state_hash_after: hash_after,
            updates,
            losses,
        }))?;

        state = outcome.next_state;
        observer.scene(&SceneSnapshot::capture(&state, task.kind, &task.workspace), &metrics);
        if outcome.success || episode_steps >= task.max_steps {
            metrics.episodes += 1;
            metrics.successes += outcome.success as u64;
            episode += 1;
            episode_steps = 0;
            state = reset(&task, episode_seed(cfg.seed, episode));
            if episode >= cfg.max_episodes {
                break;
            }
        }

        if (step + 1) % cfg.eval_every == 0 {
            let r = evaluate_policy(&mut learner.bundle.clone(), &task, cfg.eval_rollouts, cfg.seed);
            metrics.eval_curve.push((step + 1, r.success_rate));
            observer.record(&MetricRecord::Eval(EvalRecord {
                step: step + 1,
                success_rate: r.success_rate,
                episode_steps: r.episode_steps,
            }))?;
            checkpoint(&learner, "latest", step + 1)?;
        }
    }
    metrics.wallclock_ms = started.elapsed().as_millis() as u64;
    observer.record(&MetricRecord::Summary(metrics.clone()))?;
    Ok(TrainOutcome {
        metrics,
        bundle: learner.bundle,
        buffer,
    })
}

/// One scripted-solution rollout: every step must earn `+1` and the episode must succeed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub task: TaskKind,
    pub seed: u64,
    pub passed: bool,
    pub steps: u32,
    /// Label of the stage entry where the rollout went wrong.
    pub failed_stage: Option<String>,
    pub reason: Option<String>,
}

pub fn oracle_check(table: &StageTable, task: &TaskSpec, seed: u64, tau_ok: f64) -> OracleCheck {
    let mut state = reset(task, seed);
    let mut steps = 0;
    let fail = |steps, stage: Option<&str>, reason: String| OracleCheck {
        task: task.kind,
        seed,
        passed: false,
        steps,
        failed_stage: stage.map(str::to_string),
        reason: Some(reason),
    };
    while steps < task.max_steps {
        let Some(x) = table.expectation(&state, task) else {
            return fail(steps, None, "stage table finished without task success".into());
        };
        let action = table.scripted_action(&state, task).expect("expectation exists");
        if !table.approves(&state, task, &action, tau_ok) {
            return fail(steps, Some(x.label), "scripted action not approved".into());
        }
        let outcome = match execute_skill(&state, &action, task) {
            Ok(o) => o,
            Err(e) => return fail(steps, Some(x.label), e.to_string()),
        };
        steps += 1;
        if let Some(v) = outcome.safety_violation {
            return fail(steps, Some(x.label), format!("safety violation {v:?}"));
        }
        if outcome.success {
            return OracleCheck {
                task: task.kind,
                seed,
                passed: true,
                steps,
                failed_stage: None,
                reason: None,
            };
        }
        if !(table.entries[x.index].done)(&outcome.next_state, task) {
            return fail(steps, Some(x.label), "scripted action did not complete its stage".into());
        }
        state = outcome.next_state;
    }
    let stage = table.expectation(&state, task).map(|x| x.label);
    fail(steps, stage, format!("no success within {} steps", task.max_steps))
}

/// Uniformly random actions, useful as a chance-level reference.
pub struct RandomPolicy(pub ChaCha8Rng);

impl Policy for RandomPolicy {
    fn act(&mut self, _: &WorldState, _: &[f64], task: &TaskSpec) -> SkillAction {
        let skill = task.available_skills[self.0.random_range(0..task.available_skills.len())];
        let y: Vec<f64> = (0..skill.param_dim()).map(|_| self.0.random_range(-1.0..1.0)).collect();
        SkillAction::from_normalized(skill, &y, &task.workspace)
    }
}
