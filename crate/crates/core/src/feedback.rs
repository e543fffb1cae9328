//! Feedback providers: the scripted stage oracle, the Q-threshold oracle and
//! the human bridge over an abstract request/response channel.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{PolicyBundle, SampleMode};
use crate::render::{Overlay, SceneSnapshot};
use crate::script::StageTable;
use crate::sim::{TaskKind, TaskSpec, WorldState};
use crate::skills::{SkillAction, SkillId};

pub const DEFAULT_TAU_OK: f64 = 0.04;
pub const DEFAULT_HUMAN_TIMEOUT: Duration = Duration::from_secs(30);
pub const ORACLE_Q_ALPHA0: f64 = 0.999;
pub const ORACLE_Q_ALPHA_STEP: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("no stage table for task {0}")]
    MissingStageTable(TaskKind),
    #[error("observation width {got} does not match the oracle's {expected}")]
    ObsLayout { expected: usize, got: usize },
    #[error("oracle model: {0}")]
    Model(String),
    /// The operator session went away; training can resume once it returns.
    #[error("feedback session closed")]
    SessionClosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    OracleScript,
    OracleQ,
    Human,
    /// Sparse-reward baselines record no feedback.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSignal {
    pub step_id: u64,
    pub value: i8,
    pub source: FeedbackSource,
    pub latency_ms: u64,
    #[serde(default)]
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub step_id: u64,
    pub render: SceneSnapshot,
    pub skill: SkillId,
    pub params_world: Vec<f64>,
    pub overlay: Overlay,
}

/// Maps console keys to feedback values.
pub fn key_value(key: char) -> Option<i8> {
    match key {
        'g' => Some(1),
        'n' => Some(0),
        'b' => Some(-1),
        _ => None,
    }
}

/// Everything a provider may look at when judging one proposed decision.
pub struct FeedbackContext<'a> {
    pub step_id: u64,
    pub state: &'a WorldState,
    pub obs: &'a [f64],
    pub action: &'a SkillAction,
    pub task: &'a TaskSpec,
}

impl FeedbackContext<'_> {
    pub fn request(&self) -> FeedbackRequest {
        FeedbackRequest {
            step_id: self.step_id,
            render: SceneSnapshot::capture(self.state, self.task.kind, &self.task.workspace),
            skill: self.action.skill,
            params_world: self.action.world_params().to_vec(),
            overlay: crate::render::project_overlay(self.action, &self.task.workspace),
        }
    }
}

pub trait FeedbackProvider {
    fn feedback(&mut self, ctx: &FeedbackContext<'_>) -> Result<FeedbackSignal, FeedbackError>;
}

/// Approves exactly the stage-correct skill near the stage keypoint.
#[derive(Debug, Clone)]
pub struct ScriptOracle {
    tables: Vec<StageTable>,
    pub tau_ok: f64,
}

impl Default for ScriptOracle {
    fn default() -> Self {
        Self::with_tables(TaskKind::ALL.iter().map(|k| StageTable::for_task(*k)).collect())
    }
}

impl ScriptOracle {
    pub fn with_tables(tables: Vec<StageTable>) -> Self {
        Self {
            tables,
            tau_ok: DEFAULT_TAU_OK,
        }
    }

    pub fn table(&self, task: TaskKind) -> Result<&StageTable, FeedbackError> {
        self.tables
            .iter()
            .find(|t| t.task == task)
            .ok_or(FeedbackError::MissingStageTable(task))
    }

    pub fn feedback(&self, state: &WorldState, action: &SkillAction, task: &TaskSpec, step_id: u64) -> Result<FeedbackSignal, FeedbackError> {
        let ok = self.table(task.kind)?.approves(state, task, action, self.tau_ok);
        Ok(FeedbackSignal {
            step_id,
            value: if ok { 1 } else { -1 },
            source: FeedbackSource::OracleScript,
            latency_ms: 0,
            timed_out: false,
        })
    }
}

impl FeedbackProvider for ScriptOracle {
    fn feedback(&mut self, ctx: &FeedbackContext<'_>) -> Result<FeedbackSignal, FeedbackError> {
        ScriptOracle::feedback(self, ctx.state, ctx.action, ctx.task, ctx.step_id)
    }
}

/// Q-values and greedy actions of a trained reference agent.
pub trait QModel {
    fn obs_dim(&self) -> usize;
    fn q(&self, obs: &[f64], action: &SkillAction) -> Result<f64, FeedbackError>;
    fn best_action(&self, obs: &[f64]) -> Result<SkillAction, FeedbackError>;
}

impl QModel for PolicyBundle {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn q(&self, obs: &[f64], action: &SkillAction) -> Result<f64, FeedbackError> {
        let one_hot = crate::skills::encode_one_hot(action.skill, &self.skills).map_err(|e| FeedbackError::Model(e.to_string()))?;
        self.critic_predict(obs, &one_hot, &action.params_raw)
            .map_err(|e| FeedbackError::Model(e.to_string()))
    }

    fn best_action(&self, obs: &[f64]) -> Result<SkillAction, FeedbackError> {
        // deterministic mode never touches the rng
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.sample_action(obs, SampleMode::Deterministic, &mut rng)
            .map_err(|e| FeedbackError::Model(e.to_string()))
    }
}

/// `+1` when `q_a >= alpha * q_star`, else `-1`.
pub fn q_threshold_verdict(q_a: f64, q_star: f64, alpha: f64) -> i8 {
    if q_a >= alpha * q_star {
        1
    } else {
        -1
    }
}

pub struct QThresholdOracle<M: QModel> {
    pub model: M,
    pub alpha: f64,
    pub alpha_step: f64,
}

impl<M: QModel> QThresholdOracle<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            alpha: ORACLE_Q_ALPHA0,
            alpha_step: ORACLE_Q_ALPHA_STEP,
        }
    }

    pub fn feedback(&mut self, obs: &[f64], action: &SkillAction, step_id: u64) -> Result<FeedbackSignal, FeedbackError> {
        if obs.len() != self.model.obs_dim() {
            return Err(FeedbackError::ObsLayout {
                expected: self.model.obs_dim(),
                got: obs.len(),
            });
        }
        let star = self.model.best_action(obs)?;
        let value = q_threshold_verdict(self.model.q(obs, action)?, self.model.q(obs, &star)?, self.alpha);
        self.alpha = (self.alpha + self.alpha_step).min(1.0);
        Ok(FeedbackSignal {
            step_id,
            value,
            source: FeedbackSource::OracleQ,
            latency_ms: 0,
            timed_out: false,
        })
    }
}

impl<M: QModel> FeedbackProvider for QThresholdOracle<M> {
    fn feedback(&mut self, ctx: &FeedbackContext<'_>) -> Result<FeedbackSignal, FeedbackError> {
        QThresholdOracle::feedback(self, ctx.obs, ctx.action, ctx.step_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("channel closed")]
    Closed,
}

/// Request/response transport to a human operator.
pub trait FeedbackChannel {
    /// Blocks until an operator session is connected and not paused.
    fn wait_ready(&mut self) -> Result<(), ChannelError>;
    fn send_proposal(&mut self, request: &FeedbackRequest) -> Result<(), ChannelError>;
    /// Next `(step_id, value)` verdict, or `None` when `timeout` elapses first.
    fn recv_feedback(&mut self, timeout: Duration) -> Result<Option<(u64, i8)>, ChannelError>;
    /// Called once a proposal is resolved, by verdict or timeout.
    fn resolved(&mut self, _signal: &FeedbackSignal) {}
}

pub struct HumanFeedback<C: FeedbackChannel> {
    pub channel: C,
    pub timeout: Duration,
}

impl<C: FeedbackChannel> HumanFeedback<C> {
    pub fn new(channel: C) -> Self {
        Self {
            channel,
            timeout: DEFAULT_HUMAN_TIMEOUT,
        }
    }

    /// Sends the proposal and blocks for its verdict. Verdicts for other steps
    /// are dropped; a timeout yields a neutral signal.
    pub fn query(&mut self, request: &FeedbackRequest) -> Result<FeedbackSignal, FeedbackError> {
        let closed = |_| FeedbackError::SessionClosed;
        self.channel.wait_ready().map_err(closed)?;
        self.channel.send_proposal(request).map_err(closed)?;
        let start = Instant::now();
        let signal = loop {
            let left = self.timeout.saturating_sub(start.elapsed());
            match self.channel.recv_feedback(left).map_err(closed)? {
                Some((id, value)) if id == request.step_id && (-1..=1).contains(&value) => {
                    break FeedbackSignal {
                        step_id: id,
                        value,
                        source: FeedbackSource::Human,
                        latency_ms: start.elapsed().as_millis() as u64,
                        timed_out: false,
                    };
                }
                Some((id, value)) => {
                    log::warn!("discarding feedback {value} for step {id}; waiting on step {}", request.step_id);
                }
                None => {
                    log::warn!("no feedback for step {} within {:?}; treating as neutral", request.step_id, self.timeout);
                    break FeedbackSignal {
                        step_id: request.step_id,
                        value: 0,
                        source: FeedbackSource::Human,
                        latency_ms: start.elapsed().as_millis() as u64,
                        timed_out: true,
                    };
                }
            }
        };
        self.channel.resolved(&signal);
        Ok(signal)
    }
}

impl<C: FeedbackChannel> FeedbackProvider for HumanFeedback<C> {
    fn feedback(&mut self, ctx: &FeedbackContext<'_>) -> Result<FeedbackSignal, FeedbackError> {
        self.query(&ctx.request())
    }
}

impl<C: FeedbackChannel + ?Sized> FeedbackChannel for Box<C> {
    fn wait_ready(&mut self) -> Result<(), ChannelError> {
        (**self).wait_ready()
    }
    fn send_proposal(&mut self, request: &FeedbackRequest) -> Result<(), ChannelError> {
        (**self).send_proposal(request)
    }
    fn recv_feedback(&mut self, timeout: Duration) -> Result<Option<(u64, i8)>, ChannelError> {
        (**self).recv_feedback(timeout)
    }
    fn resolved(&mut self, signal: &FeedbackSignal) {
        (**self).resolved(signal)
    }
}
