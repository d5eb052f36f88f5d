mod common;

use std::path::Path;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{catwatch, init_catwatch, run_replay, Canned, MockServer};
use seal::http::{router, ServiceConfig};
use seal::run::ProviderChoice;
use seal::store::Store;

fn replay_service(root: &Path) -> Router {
    router(ServiceConfig {
        root: root.to_path_buf(),
        provider: Some(ProviderChoice::Replay {
            fixture: catwatch("replay.json"),
        }),
        ui_dir: None,
    })
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()));
    (status, value)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body)).await
}

/// Polls the event log until an event of one of `kinds` appears.
async fn wait_for(app: &Router, id: &str, kinds: &[&str]) -> Value {
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut after = 0;
    loop {
        let (status, page) = get(app, &format!("/api/sessions/{id}/events?after={after}")).await;
        assert_eq!(status, StatusCode::OK);
        for e in page["events"].as_array().unwrap() {
            let seq = e["seq"].as_u64().unwrap();
            assert!(seq > after, "event sequence regressed");
            after = seq;
            if kinds.contains(&e["kind"].as_str().unwrap()) {
                return e.clone();
            }
        }
        assert!(Instant::now() < deadline, "timed out waiting for {kinds:?}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn wait_idle(app: &Router, id: &str) {
    let deadline = Instant::now() + Duration::from_secs(20);
    while get(app, &format!("/api/sessions/{id}")).await.1["running"] == true {
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn run_then_report_over_http() {
    let tmp = tempfile::tempdir().unwrap();
    init_catwatch(&tmp.path().join("cw"));
    let app = replay_service(tmp.path());

    let (status, report) = get(&app, "/api/sessions/cw/report").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(report["code"], "MapNotRun");

    let (status, accepted) = post(&app, "/api/sessions/cw/run", json!({"full": true})).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{accepted}");
    let end = wait_for(&app, "cw", &["run_ended", "run_failed"]).await;
    assert_eq!(end["kind"], "run_ended", "{end}");
    wait_idle(&app, "cw").await;

    let (status, report) = get(&app, "/api/sessions/cw/report").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["coverage"]["numerator"], 7);
    assert_eq!(report["coverage"]["denominator"], 12);

    let (status, text) = get(&app, "/api/sessions/cw/report?format=text").await;
    assert_eq!(status, StatusCode::OK);
    assert!(text.as_str().unwrap().contains("Coverage: 7/12"));

    let (_, list) = get(&app, "/api/sessions").await;
    assert_eq!(list[0]["id"], "cw");
    assert_eq!(list[0]["coverage"], "7/12");
    assert_eq!(list[0]["low_goals"], 12);
}

#[tokio::test(flavor = "multi_thread")]
async fn decisions_are_read_back_and_survive_a_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("cw");
    init_catwatch(&dir);
    assert_eq!(run_replay(&dir, &catwatch("replay.json"), &[]).code, 0);
    let app = replay_service(tmp.path());

    let (status, body) = post(&app, "/api/sessions/cw/goals/1.1/decision", json!({"decision": "accept"})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["goal"]["status"], "accepted");
    let (_, goals) = get(&app, "/api/sessions/cw/goals").await;
    let one_one = goals["goals"].as_array().unwrap().iter().find(|g| g["id"] == "1.1").unwrap();
    assert_eq!(one_one["status"], "accepted");

    let (status, _) = post(
        &app,
        "/api/sessions/cw/goals/4/decision",
        json!({"decision": "discard", "reason": "handled by the platform"}),
    )
    .await;
    assert_eq!(status, StatusCode::OK);

    let restarted = replay_service(tmp.path());
    let (_, goals) = get(&restarted, "/api/sessions/cw/goals").await;
    let status_of = |id: &str| {
        goals["goals"].as_array().unwrap().iter().find(|g| g["id"] == id).unwrap()["status"].clone()
    };
    assert_eq!(status_of("1.1"), "accepted");
    assert_eq!(status_of("4"), "discarded");
    assert_eq!(status_of("4.1"), "discarded");
    assert_eq!(status_of("4.2"), "discarded");

    let (status, err) = post(&restarted, "/api/sessions/cw/goals/4/decision", json!({"decision": "accept"})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "AlreadyDiscarded");
    let (status, err) = post(
        &restarted,
        "/api/sessions/cw/goals/4.1/decision",
        json!({"decision": "discard", "reason": "again"}),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "AlreadyDiscarded");

    let (_, events) = get(&restarted, "/api/sessions/cw/events?after=0").await;
    let decisions = events["events"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "review_decision")
        .count();
    assert_eq!(decisions, 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn errors_use_the_documented_codes() {
    let tmp = tempfile::tempdir().unwrap();
    init_catwatch(&tmp.path().join("cw"));
    let app = replay_service(tmp.path());

    let (status, err) = get(&app, "/api/sessions/nope").await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownSession")));
    let (status, err) = get(&app, "/api/sessions/nope/events").await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownSession")));
    let (status, err) = post(&app, "/api/sessions/cw/goals/7.7/decision", json!({"decision": "accept"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownGoal")));
    let (status, err) = post(&app, "/api/sessions/cw/goals/x.y/decision", json!({"decision": "accept"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::NOT_FOUND, Some("UnknownGoal")));
    let (status, err) = post(&app, "/api/sessions/cw/goals/1/decision", json!({"decision": "maybe"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("InvalidBody")));
    let (status, err) = post(&app, "/api/sessions/cw/run", json!({"stage": "map", "full": true})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("InvalidBody")));
    let (status, err) = post(&app, "/api/sessions/cw/run", json!({"limits": {"inner_limit": 0, "outer_limit": 1}})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("InvalidLimits")));

    let bare = router(ServiceConfig {
        root: tmp.path().to_path_buf(),
        provider: None,
        ui_dir: None,
    });
    let (status, err) = post(&bare, "/api/sessions/cw/run", json!({})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("ProviderNotConfigured")));

    let (status, page) = get(&app, "/").await;
    assert_eq!(status, StatusCode::OK);
    assert!(page.as_str().unwrap().contains("/api"));
}

#[tokio::test(flavor = "multi_thread")]
async fn single_stage_runs_and_interactive_review() {
    let tmp = tempfile::tempdir().unwrap();
    init_catwatch(&tmp.path().join("cw"));
    let app = replay_service(tmp.path());

    post(&app, "/api/sessions/cw/run", json!({"stage": "extract"})).await;
    wait_for(&app, "cw", &["run_ended"]).await;
    wait_idle(&app, "cw").await;
    let (_, session) = get(&app, "/api/sessions/cw").await;
    assert_eq!(session["stage_status"]["extract"], "done");
    assert_eq!(session["catalog"]["endpoints"].as_array().unwrap().len(), 24);

    let (status, _) = post(&app, "/api/sessions/cw/run", json!({"interactive": true})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let suspended = wait_for(&app, "cw", &["suspended"]).await;
    assert_eq!(suspended["payload"]["point"]["point"], "after_elicit");
    wait_idle(&app, "cw").await;
    let (_, session) = get(&app, "/api/sessions/cw").await;
    assert_eq!(session["awaiting_review"].as_array().unwrap().len(), 6);
}

#[tokio::test(flavor = "multi_thread")]
async fn a_second_run_is_refused_while_one_is_active() {
    let tmp = tempfile::tempdir().unwrap();
    init_catwatch(&tmp.path().join("cw"));
    let (release, gate) = mpsc::channel();
    let server = MockServer::start(vec![Canned::new(401, "{}")], Some(gate));
    let config = tmp.path().join("llm.toml");
    std::fs::write(&config, format!("url = \"{}\"\nmodel = \"m\"\n", server.url())).unwrap();
    let app = router(ServiceConfig {
        root: tmp.path().to_path_buf(),
        provider: Some(ProviderChoice::Live {
            config: Some(config),
            record: None,
        }),
        ui_dir: None,
    });

    let (status, _) = post(&app, "/api/sessions/cw/run", json!({"full": true})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let deadline = Instant::now() + Duration::from_secs(20);
    while server.requests().is_empty() {
        assert!(Instant::now() < deadline, "provider never called");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let (status, err) = post(&app, "/api/sessions/cw/run", json!({"full": true})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::CONFLICT, Some("StageBusy")));
    let (status, err) = post(&app, "/api/sessions/cw/goals/1/decision", json!({"decision": "accept"})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::CONFLICT, Some("StageBusy")));
    assert_eq!(get(&app, "/api/sessions/cw").await.1["running"], true);

    release.send(()).unwrap();
    let failed = wait_for(&app, "cw", &["run_failed", "run_ended"]).await;
    assert_eq!(failed["kind"], "run_failed");
    assert_eq!(failed["payload"]["code"], "TaskBudgetExhausted");
    wait_idle(&app, "cw").await;
    assert_eq!(server.requests().len(), 1, "auth failures are not retried");
}

#[tokio::test(flavor = "multi_thread")]
async fn a_cli_writer_blocks_service_runs() {
    let tmp = tempfile::tempdir().unwrap();
    init_catwatch(&tmp.path().join("cw"));
    let app = replay_service(tmp.path());
    let held = Store::new(tmp.path()).lock("cw").unwrap();
    let (status, err) = post(&app, "/api/sessions/cw/run", json!({})).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::CONFLICT, Some("StageBusy")));
    let (status, _) = post(&app, "/api/sessions/cw/goals/1/decision", json!({"decision": "accept"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    drop(held);
    assert_eq!(get(&app, "/api/sessions/cw").await.1["running"], false);
}

#[tokio::test(flavor = "multi_thread")]
async fn ui_assets_are_served_at_the_root() {
    let tmp = tempfile::tempdir().unwrap();
    let ui = tmp.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<h1>console</h1>").unwrap();
    let app = router(ServiceConfig {
        root: tmp.path().join("sessions"),
        provider: None,
        ui_dir: Some(ui),
    });
    let (status, body) = get(&app, "/").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, "<h1>console</h1>");
    let (status, list) = get(&app, "/api/sessions").await;
    assert_eq!((status, list), (StatusCode::OK, json!([])));
}
