//! Websocket sessions, HTTP fallback endpoints and static console assets.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, oneshot};
use tokio::time::Instant;
use tower_http::services::ServeDir;

use crate::hub::{Audience, Hub};
use crate::wire::{ControlPayload, ErrorCode, FeedbackPayload, Hello, MessageKind, SessionMode, WireMessage};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("runtime: {0}")]
    Runtime(std::io::Error),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub heartbeat: Duration,
    /// Consecutive unanswered heartbeats before a client is dropped.
    pub missed_heartbeats: u32,
    /// Directory served at `/` (the browser console build).
    pub static_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            heartbeat: Duration::from_secs(5),
            missed_heartbeats: 3,
            static_dir: None,
        }
    }
}

#[derive(Clone)]
struct AppState {
    hub: Arc<Hub>,
    cfg: Arc<GatewayConfig>,
}

pub fn router(hub: Arc<Hub>, cfg: GatewayConfig) -> Router {
    let static_dir = cfg.static_dir.clone();
    let app = Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/scene", get(get_scene))
        .route("/stats", get(get_stats))
        .route("/feedback", post(post_feedback))
        .with_state(AppState {
            hub,
            cfg: Arc::new(cfg),
        });
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

async fn get_scene(State(app): State<AppState>) -> Response {
    match app.hub.latest_scene() {
        Some(s) => Json(s).into_response(),
        None => (StatusCode::NOT_FOUND, "no scene yet").into_response(),
    }
}

async fn get_stats(State(app): State<AppState>) -> Response {
    Json(app.hub.stats()).into_response()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackBody {
    pub step_id: u64,
    pub value: i8,
}

async fn post_feedback(State(app): State<AppState>, Json(body): Json<FeedbackBody>) -> Response {
    match app.hub.submit_feedback(None, body.step_id, body.value) {
        Ok(()) => (StatusCode::ACCEPTED, Json(serde_json::json!({ "accepted": body.step_id }))).into_response(),
        Err(r) => {
            let status = match r.code {
                ErrorCode::StaleStep => StatusCode::CONFLICT,
                _ => StatusCode::UNPROCESSABLE_ENTITY,
            };
            (status, Json(r.to_message().payload)).into_response()
        }
    }
}

async fn ws_upgrade(State(app): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| session(socket, app))
}

async fn send(socket: &mut WebSocket, msg: &WireMessage) -> bool {
    socket.send(Message::Text(msg.to_json().into())).await.is_ok()
}

/// Waits for the opening `hello`, answering anything else with an error.
async fn handshake(socket: &mut WebSocket, app: &AppState) -> Option<(String, SessionMode)> {
    let deadline = app.cfg.heartbeat * app.cfg.missed_heartbeats;
    loop {
        let frame = tokio::time::timeout(deadline, socket.recv()).await.ok()??.ok()?;
        let text = match frame {
            Message::Text(t) => t,
            Message::Close(_) => return None,
            _ => continue,
        };
        let reply = match WireMessage::parse(&text) {
            Ok(m) if m.kind == MessageKind::Hello => {
                let hello: Hello = m.payload_as().ok()?;
                match app.hub.open_session(hello.mode, hello.resume.as_deref()) {
                    Ok((id, pending)) => {
                        let ack = WireMessage::hello(&Hello {
                            mode: hello.mode,
                            resume: None,
                        })
                        .with_session(&id);
                        if !send(socket, &ack).await {
                            app.hub.close_session(&id);
                            return None;
                        }
                        if let Some(req) = pending {
                            if !send(socket, &WireMessage::proposal(&req).with_session(&id)).await {
                                app.hub.close_session(&id);
                                return None;
                            }
                        }
                        return Some((id, hello.mode));
                    }
                    Err(r) => r.to_message(),
                }
            }
            Ok(_) => WireMessage::error(ErrorCode::HelloRequired, "send hello first"),
            Err(e) => WireMessage::error(ErrorCode::BadMessage, e.to_string()),
        };
        if !send(socket, &reply).await {
            return None;
        }
    }
}

fn handle_inbound(app: &AppState, id: &str, mode: SessionMode, text: &str) -> Option<WireMessage> {
    let msg = match WireMessage::parse(text) {
        Ok(m) => m,
        Err(e) => return Some(WireMessage::error(ErrorCode::BadMessage, e.to_string())),
    };
    match msg.kind {
        MessageKind::Feedback => {
            let p: FeedbackPayload = msg.payload_as().ok()?;
            app.hub.submit_feedback(Some(id), p.step_id, p.value).err().map(|r| r.to_message())
        }
        MessageKind::Control if mode == SessionMode::TrainHuman => {
            let p: ControlPayload = msg.payload_as().ok()?;
            app.hub.control(p.action);
            None
        }
        MessageKind::Control => Some(WireMessage::error(ErrorCode::NotTrainer, "observers cannot control the run")),
        MessageKind::Hello => Some(WireMessage::error(ErrorCode::BadMessage, "session already open")),
        other => Some(WireMessage::error(ErrorCode::BadMessage, format!("clients may not send {other:?}"))),
    }
}

async fn session(mut socket: WebSocket, app: AppState) {
    let mut rx = app.hub.subscribe();
    let Some((id, mode)) = handshake(&mut socket, &app).await else {
        return;
    };
    log::info!("session {id} opened ({mode:?})");
    let mut last_proposal: Option<u64> = app.hub.session(&id).and_then(|s| s.outstanding_step);
    let mut heartbeat = tokio::time::interval(app.cfg.heartbeat);
    heartbeat.tick().await;
    let mut last_seen = Instant::now();
    let limit = app.cfg.heartbeat * app.cfg.missed_heartbeats;
    loop {
        tokio::select! {
            frame = socket.recv() => {
                let Some(Ok(frame)) = frame else { break };
                last_seen = Instant::now();
                match frame {
                    Message::Text(t) => {
                        if let Some(reply) = handle_inbound(&app, &id, mode, &t) {
                            if !send(&mut socket, &reply.with_session(&id)).await {
                                break;
                            }
                        }
                    }
                    Message::Close(_) => break,
                    _ => {}
                }
            }
            out = rx.recv() => {
                let out = match out {
                    Ok(o) => o,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::warn!("session {id} lagged {n} frames");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                };
                if out.audience == Audience::Trainer && !app.hub.is_trainer(&id) {
                    continue;
                }
                if out.message.kind == MessageKind::Proposal {
                    // a proposal replayed at handshake may also arrive through the queue
                    if last_proposal == out.message.step_id {
                        continue;
                    }
                    last_proposal = out.message.step_id;
                }
                if !send(&mut socket, &out.message.with_session(&id)).await {
                    break;
                }
            }
            _ = heartbeat.tick() => {
                if last_seen.elapsed() > limit {
                    log::warn!("session {id} missed {} heartbeats", app.cfg.missed_heartbeats);
                    break;
                }
                if socket.send(Message::Ping(Vec::new().into())).await.is_err() {
                    break;
                }
            }
        }
    }
    app.hub.close_session(&id);
    log::info!("session {id} closed");
}

/// A gateway serving on a background runtime thread.
pub struct Gateway {
    hub: Arc<Hub>,
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Gateway {
    pub fn start(bind: &str, cfg: GatewayConfig) -> Result<Self, GatewayError> {
        let hub = Hub::new();
        let listener = std::net::TcpListener::bind(bind).map_err(|source| GatewayError::Bind {
            addr: bind.to_string(),
            source,
        })?;
        listener.set_nonblocking(true).map_err(GatewayError::Runtime)?;
        let addr = listener.local_addr().map_err(GatewayError::Runtime)?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(GatewayError::Runtime)?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(Arc::clone(&hub), cfg);
        let thread = std::thread::Builder::new()
            .name("gateway".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = match tokio::net::TcpListener::from_std(listener) {
                        Ok(l) => l,
                        Err(e) => {
                            log::error!("gateway listener: {e}");
                            return;
                        }
                    };
                    let served = axum::serve(listener, app).with_graceful_shutdown(async {
                        let _ = rx.await;
                    });
                    if let Err(e) = served.await {
                        log::error!("gateway: {e}");
                    }
                });
                runtime.shutdown_timeout(Duration::from_millis(200));
            })
            .map_err(GatewayError::Runtime)?;
        log::info!("gateway listening on {addr}");
        Ok(Self {
            hub,
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}
