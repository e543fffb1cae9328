//! State shared between the trainer thread and client connections.
//!
//! The trainer side is synchronous and blocks on a condition variable; client
//! tasks lock the same mutex briefly and push outbound frames through a
//! broadcast queue.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use tokio::sync::broadcast;

use seed_core::feedback::{ChannelError, FeedbackChannel, FeedbackRequest, FeedbackSignal};
use seed_core::render::SceneSnapshot;
use seed_core::train::{MetricRecord, RunMetrics, TrainObserver};

use crate::wire::{ControlAction, ErrorCode, SessionMode, StatsPayload, WireMessage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub session_id: String,
    pub mode: SessionMode,
    pub outstanding_step: Option<u64>,
    pub connected: bool,
}

/// Who an outbound frame is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Audience {
    Everyone,
    Trainer,
}

#[derive(Debug, Clone)]
pub struct Outbound {
    pub audience: Audience,
    pub message: WireMessage,
}

/// Why a verdict was refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub code: ErrorCode,
    pub message: String,
}

impl Rejection {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn to_message(&self) -> WireMessage {
        WireMessage::error(self.code, self.message.clone())
    }
}

#[derive(Debug, Default)]
struct Inner {
    sessions: HashMap<String, SessionState>,
    trainer: Option<String>,
    next_session: u64,
    paused: bool,
    stopped: bool,
    outstanding: Option<FeedbackRequest>,
    answered: bool,
    inbox: VecDeque<(u64, i8)>,
    scene: Option<SceneSnapshot>,
    metrics: RunMetrics,
}

impl Inner {
    fn trainer_connected(&self) -> bool {
        self.trainer
            .as_ref()
            .and_then(|id| self.sessions.get(id))
            .is_some_and(|s| s.connected)
    }

    fn ready(&self) -> bool {
        self.trainer_connected() && !self.paused
    }

    fn stats(&self) -> StatsPayload {
        StatsPayload {
            metrics: self.metrics.clone(),
            paused: self.paused,
            trainer_connected: self.trainer_connected(),
            outstanding_step: self.outstanding.as_ref().map(|r| r.step_id).filter(|_| !self.answered),
        }
    }
}

pub struct Hub {
    inner: Mutex<Inner>,
    changed: Condvar,
    tx: broadcast::Sender<Outbound>,
}

impl Hub {
    pub fn new() -> Arc<Self> {
        let (tx, _) = broadcast::channel(1024);
        Arc::new(Self {
            inner: Mutex::new(Inner::default()),
            changed: Condvar::new(),
            tx,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Outbound> {
        self.tx.subscribe()
    }

    fn broadcast(&self, audience: Audience, message: WireMessage) {
        // no receivers is fine: nobody is watching yet
        let _ = self.tx.send(Outbound { audience, message });
    }

    fn broadcast_stats(&self, inner: &Inner) {
        self.broadcast(Audience::Everyone, WireMessage::stats(&inner.stats()));
    }

    /// Registers a connection. Returns the session id and, for a trainer
    /// session, the proposal still awaiting a verdict.
    pub fn open_session(
        &self,
        mode: SessionMode,
        resume: Option<&str>,
    ) -> Result<(String, Option<FeedbackRequest>), Rejection> {
        let mut inner = self.lock();
        let id = match resume {
            Some(id) => {
                let s = inner
                    .sessions
                    .get(id)
                    .ok_or_else(|| Rejection::new(ErrorCode::UnknownSession, format!("no session `{id}`")))?;
                if s.connected {
                    return Err(Rejection::new(ErrorCode::TrainerBusy, format!("session `{id}` is still connected")));
                }
                if s.mode != mode {
                    return Err(Rejection::new(ErrorCode::BadMessage, format!("session `{id}` has a different mode")));
                }
                id.to_string()
            }
            None => {
                inner.next_session += 1;
                format!("s{}", inner.next_session)
            }
        };
        if mode == SessionMode::TrainHuman {
            if inner.trainer_connected() && inner.trainer.as_deref() != Some(id.as_str()) {
                return Err(Rejection::new(ErrorCode::TrainerBusy, "another trainer session is connected"));
            }
            if let Some(old) = inner.trainer.replace(id.clone()) {
                if old != id {
                    inner.sessions.remove(&old);
                }
            }
        }
        let outstanding = match mode {
            SessionMode::TrainHuman => inner.outstanding.clone().filter(|_| !inner.answered),
            SessionMode::Observe => None,
        };
        inner.sessions.insert(
            id.clone(),
            SessionState {
                session_id: id.clone(),
                mode,
                outstanding_step: outstanding.as_ref().map(|r| r.step_id),
                connected: true,
            },
        );
        self.broadcast_stats(&inner);
        drop(inner);
        self.changed.notify_all();
        Ok((id, outstanding))
    }

    /// Marks a connection gone. A lost trainer session pauses the run until it returns.
    pub fn close_session(&self, id: &str) {
        let mut inner = self.lock();
        let is_trainer = inner.trainer.as_deref() == Some(id);
        match inner.sessions.get_mut(id) {
            Some(s) if is_trainer => s.connected = false,
            Some(_) => {
                inner.sessions.remove(id);
            }
            None => {}
        }
        if is_trainer {
            log::warn!("trainer session {id} disconnected; pausing");
        }
        self.broadcast_stats(&inner);
        drop(inner);
        self.changed.notify_all();
    }

    pub fn session(&self, id: &str) -> Option<SessionState> {
        self.lock().sessions.get(id).cloned()
    }

    /// Accepts a verdict for the outstanding proposal. `from` is the sending
    /// session, or `None` for the HTTP fallback.
    pub fn submit_feedback(&self, from: Option<&str>, step_id: u64, value: i8) -> Result<(), Rejection> {
        if !(-1..=1).contains(&value) {
            return Err(Rejection::new(ErrorCode::BadValue, format!("feedback value {value} is not in -1..=1")));
        }
        let mut inner = self.lock();
        if let Some(id) = from {
            if inner.trainer.as_deref() != Some(id) {
                return Err(Rejection::new(ErrorCode::NotTrainer, "only the training session may give feedback"));
            }
        }
        let waiting = inner.outstanding.as_ref().map(|r| r.step_id).filter(|_| !inner.answered);
        if waiting != Some(step_id) {
            return Err(Rejection::new(
                ErrorCode::StaleStep,
                match waiting {
                    Some(w) => format!("step {step_id} is not outstanding; waiting on step {w}"),
                    None => format!("step {step_id} is not outstanding; no proposal is waiting"),
                },
            ));
        }
        inner.answered = true;
        if let Some(s) = inner.trainer.clone().and_then(|id| inner.sessions.get_mut(&id)) {
            s.outstanding_step = None;
        }
        inner.inbox.push_back((step_id, value));
        drop(inner);
        self.changed.notify_all();
        Ok(())
    }

    pub fn control(&self, action: ControlAction) {
        let mut inner = self.lock();
        match action {
            ControlAction::Pause => inner.paused = true,
            ControlAction::Resume => inner.paused = false,
            ControlAction::Stop => inner.stopped = true,
        }
        log::info!("control: {action:?}");
        self.broadcast_stats(&inner);
        drop(inner);
        self.changed.notify_all();
    }

    pub fn is_trainer(&self, id: &str) -> bool {
        self.lock().trainer.as_deref() == Some(id)
    }

    pub fn latest_scene(&self) -> Option<SceneSnapshot> {
        self.lock().scene.clone()
    }

    pub fn stats(&self) -> StatsPayload {
        self.lock().stats()
    }

    /// Trainer-side feedback transport.
    pub fn channel(self: &Arc<Self>) -> GatewayChannel {
        GatewayChannel(Arc::clone(self))
    }

    /// Trainer-side observer that streams scenes and stats to clients and honours pause/stop.
    pub fn observer(self: &Arc<Self>) -> GatewayObserver {
        GatewayObserver(Arc::clone(self))
    }

    /// Blocks while the run is paused; returns `true` once it is stopped.
    fn hold_while_paused(&self) -> bool {
        let mut inner = self.lock();
        while inner.paused && !inner.stopped {
            inner = self.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
        }
        inner.stopped
    }
}

pub struct GatewayChannel(Arc<Hub>);

impl FeedbackChannel for GatewayChannel {
    fn wait_ready(&mut self) -> Result<(), ChannelError> {
        let hub = &self.0;
        let mut inner = hub.lock();
        loop {
            if inner.stopped {
                return Err(ChannelError::Closed);
            }
            if inner.ready() {
                return Ok(());
            }
            inner = hub.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn send_proposal(&mut self, request: &FeedbackRequest) -> Result<(), ChannelError> {
        let hub = &self.0;
        let mut inner = hub.lock();
        if inner.stopped {
            return Err(ChannelError::Closed);
        }
        inner.inbox.clear();
        inner.outstanding = Some(request.clone());
        inner.answered = false;
        if let Some(s) = inner.trainer.clone().and_then(|id| inner.sessions.get_mut(&id)) {
            s.outstanding_step = Some(request.step_id);
        }
        hub.broadcast(Audience::Trainer, WireMessage::proposal(request));
        Ok(())
    }

    /// Waits for a verdict. The clock only runs while an operator is connected
    /// and the run is not paused, so a reconnect does not eat into the timeout.
    fn recv_feedback(&mut self, timeout: Duration) -> Result<Option<(u64, i8)>, ChannelError> {
        let hub = &self.0;
        let mut inner = hub.lock();
        let mut left = timeout;
        loop {
            if inner.stopped {
                return Err(ChannelError::Closed);
            }
            if let Some(v) = inner.inbox.pop_front() {
                return Ok(Some(v));
            }
            if !inner.ready() {
                inner = hub.changed.wait(inner).unwrap_or_else(|e| e.into_inner());
                continue;
            }
            if left.is_zero() {
                return Ok(None);
            }
            let t0 = Instant::now();
            inner = hub.changed.wait_timeout(inner, left).unwrap_or_else(|e| e.into_inner()).0;
            left = left.saturating_sub(t0.elapsed());
        }
    }

    fn resolved(&mut self, signal: &FeedbackSignal) {
        let hub = &self.0;
        let mut inner = hub.lock();
        if inner.outstanding.as_ref().is_some_and(|r| r.step_id == signal.step_id) {
            inner.outstanding = None;
        }
        if let Some(s) = inner.trainer.clone().and_then(|id| inner.sessions.get_mut(&id)) {
            if s.outstanding_step == Some(signal.step_id) {
                s.outstanding_step = None;
            }
        }
    }
}

pub struct GatewayObserver(Arc<Hub>);

impl TrainObserver for GatewayObserver {
    fn record(&mut self, _record: &MetricRecord) -> std::io::Result<()> {
        Ok(())
    }

    fn scene(&mut self, scene: &SceneSnapshot, metrics: &RunMetrics) {
        let hub = &self.0;
        let mut inner = hub.lock();
        inner.scene = Some(scene.clone());
        inner.metrics = metrics.clone();
        hub.broadcast(Audience::Everyone, WireMessage::scene(scene));
        hub.broadcast_stats(&inner);
    }

    fn stop_requested(&mut self) -> bool {
        self.0.hold_while_paused()
    }
}
