use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use tower::ServiceExt;

use seed_core::feedback::{FeedbackChannel, FeedbackContext};
use seed_core::render::SceneSnapshot;
use seed_core::sim::{observe, reset, TaskKind, TaskSpec};
use seed_core::skills::{SkillAction, SkillId};
use seed_core::train::{RunMetrics, TrainObserver};
use seed_gateway::wire::StatsPayload;
use seed_gateway::{router, GatewayConfig, Hub, SessionMode};

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn post_feedback(step: u64, value: i8) -> Request<Body> {
    Request::post("/feedback")
        .header("content-type", "application/json")
        .body(Body::from(format!(r#"{{"step_id":{step},"value":{value}}}"#)))
        .unwrap()
}

#[tokio::test]
async fn scene_stats_and_feedback_endpoints() {
    let hub = Hub::new();
    let app = router(hub.clone(), GatewayConfig::default());

    assert_eq!(call(&app, get("/scene")).await.0, StatusCode::NOT_FOUND);

    let task = TaskSpec::new(TaskKind::Stacking);
    let state = reset(&task, 2);
    let snap = SceneSnapshot::capture(&state, task.kind, &task.workspace);
    let metrics = RunMetrics {
        decision_steps: 7,
        ..RunMetrics::default()
    };
    hub.observer().scene(&snap, &metrics);

    let (status, body) = call(&app, get("/scene")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<SceneSnapshot>(body).unwrap(), snap);

    let (status, body) = call(&app, get("/stats")).await;
    assert_eq!(status, StatusCode::OK);
    let stats: StatsPayload = serde_json::from_value(body).unwrap();
    assert_eq!(stats.metrics.decision_steps, 7);
    assert!(!stats.trainer_connected && stats.outstanding_step.is_none());

    let (status, body) = call(&app, post_feedback(3, 1)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "stale_step");

    hub.open_session(SessionMode::TrainHuman, None).unwrap();
    let obs = observe(&state, &task, false).values;
    let action = SkillAction::from_world(SkillId::Pick, &[0.4, 0.4, 0.02], &task.workspace);
    let req = FeedbackContext {
        step_id: 3,
        state: &state,
        obs: &obs,
        action: &action,
        task: &task,
    }
    .request();
    let mut channel = hub.channel();
    channel.send_proposal(&req).unwrap();

    assert_eq!(call(&app, post_feedback(3, 5)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, post_feedback(3, -1)).await.0, StatusCode::ACCEPTED);
    assert_eq!(call(&app, post_feedback(3, 1)).await.0, StatusCode::CONFLICT);
    assert_eq!(channel.recv_feedback(Duration::from_millis(50)).unwrap(), Some((3, -1)));
}

#[tokio::test]
async fn static_directory_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>console</h1>").unwrap();
    let cfg = GatewayConfig {
        static_dir: Some(dir.path().to_path_buf()),
        ..GatewayConfig::default()
    };
    let app = router(Hub::new(), cfg);
    let resp = app.oneshot(get("/index.html")).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = to_bytes(resp.into_body(), 1024).await.unwrap();
    assert_eq!(&bytes[..], b"<h1>console</h1>");
}
