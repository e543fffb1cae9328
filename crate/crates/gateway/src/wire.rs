//! JSON text frames exchanged between the trainer and operator clients.
//!
//! Every frame is an envelope `{kind, session_id, step_id, payload}`; the
//! payload shape is fixed by `kind`, and [`WireMessage::parse`] rejects
//! frames whose kind is unknown or whose payload does not fit it.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use seed_core::feedback::FeedbackRequest;
use seed_core::render::SceneSnapshot;
use seed_core::train::RunMetrics;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{kind:?} payload: {source}")]
    Payload {
        kind: MessageKind,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Hello,
    Proposal,
    Feedback,
    Control,
    Stats,
    Scene,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::Hello,
        MessageKind::Proposal,
        MessageKind::Feedback,
        MessageKind::Control,
        MessageKind::Stats,
        MessageKind::Scene,
        MessageKind::Error,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    TrainHuman,
    Observe,
}

/// Client greeting; echoed back by the gateway with `session_id` filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub mode: SessionMode,
    /// Session to reattach to after a dropped connection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackPayload {
    pub step_id: u64,
    pub value: i8,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Pause,
    Resume,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlPayload {
    pub action: ControlAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsPayload {
    pub metrics: RunMetrics,
    pub paused: bool,
    pub trainer_connected: bool,
    pub outstanding_step: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    HelloRequired,
    StaleStep,
    BadValue,
    NotTrainer,
    TrainerBusy,
    UnknownSession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub kind: MessageKind,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub step_id: Option<u64>,
    #[serde(default)]
    pub payload: Value,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("wire payloads serialize")
}

impl WireMessage {
    fn new<T: Serialize>(kind: MessageKind, step_id: Option<u64>, payload: &T) -> Self {
        Self {
            kind,
            session_id: None,
            step_id,
            payload: to_value(payload),
        }
    }

    pub fn hello(hello: &Hello) -> Self {
        Self::new(MessageKind::Hello, None, hello)
    }

    pub fn proposal(req: &FeedbackRequest) -> Self {
        Self::new(MessageKind::Proposal, Some(req.step_id), req)
    }

    pub fn feedback(step_id: u64, value: i8) -> Self {
        Self::new(
            MessageKind::Feedback,
            Some(step_id),
            &FeedbackPayload {
                step_id,
                value,
                latency_ms: 0,
            },
        )
    }

    pub fn control(action: ControlAction) -> Self {
        Self::new(MessageKind::Control, None, &ControlPayload { action })
    }

    pub fn stats(stats: &StatsPayload) -> Self {
        Self::new(MessageKind::Stats, None, stats)
    }

    pub fn scene(scene: &SceneSnapshot) -> Self {
        Self::new(MessageKind::Scene, None, scene)
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::new(
            MessageKind::Error,
            None,
            &ErrorPayload {
                code,
                message: message.into(),
            },
        )
    }

    pub fn with_session(mut self, id: impl Into<String>) -> Self {
        self.session_id = Some(id.into());
        self
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step_id = Some(step);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    /// Parses a frame and checks that its payload matches its kind.
    pub fn parse(text: &str) -> Result<Self, WireError> {
        let msg: WireMessage = serde_json::from_str(text)?;
        msg.validate()?;
        Ok(msg)
    }

    fn validate(&self) -> Result<(), WireError> {
        match self.kind {
            MessageKind::Hello => self.payload_as::<Hello>().map(drop),
            MessageKind::Proposal => self.payload_as::<FeedbackRequest>().map(drop),
            MessageKind::Feedback => self.payload_as::<FeedbackPayload>().map(drop),
            MessageKind::Control => self.payload_as::<ControlPayload>().map(drop),
            MessageKind::Stats => self.payload_as::<StatsPayload>().map(drop),
            MessageKind::Scene => self.payload_as::<SceneSnapshot>().map(drop),
            MessageKind::Error => self.payload_as::<ErrorPayload>().map(drop),
        }
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T, WireError> {
        T::deserialize(&self.payload).map_err(|source| WireError::Payload { kind: self.kind, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_is_rejected() {
        let err = WireMessage::parse(r#"{"kind":"teleport","payload":{}}"#).unwrap_err();
        assert!(matches!(err, WireError::Json(_)), "{err}");
    }

    #[test]
    fn payload_must_match_kind() {
        let err = WireMessage::parse(r#"{"kind":"feedback","payload":{"mode":"observe"}}"#).unwrap_err();
        assert!(matches!(err, WireError::Payload { kind: MessageKind::Feedback, .. }), "{err}");
        assert!(WireMessage::parse(r#"{"kind":"control","payload":{"action":"jump"}}"#).is_err());
    }

    #[test]
    fn feedback_frame_from_console() {
        let m = WireMessage::parse(r#"{"kind":"feedback","step_id":42,"payload":{"step_id":42,"value":1}}"#).unwrap();
        let p: FeedbackPayload = m.payload_as().unwrap();
        assert_eq!((p.step_id, p.value, p.latency_ms), (42, 1, 0));
        assert_eq!(m.session_id, None);
    }

    #[test]
    fn hello_without_resume_omits_the_field() {
        let m = WireMessage::hello(&Hello {
            mode: SessionMode::TrainHuman,
            resume: None,
        });
        assert_eq!(m.payload, serde_json::json!({"mode": "train_human"}));
    }
}
