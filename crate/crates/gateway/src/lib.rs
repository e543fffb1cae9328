//! Session gateway between a training run and human operators.
//!
//! Clients connect to `/ws` and speak [`wire::WireMessage`] JSON frames;
//! `/scene`, `/stats` and `POST /feedback` offer the same data over plain HTTP.

pub mod hub;
pub mod server;
pub mod wire;

pub use hub::{GatewayChannel, GatewayObserver, Hub};
pub use server::{router, FeedbackBody, Gateway, GatewayConfig, GatewayError};
pub use wire::{MessageKind, SessionMode, WireMessage};
