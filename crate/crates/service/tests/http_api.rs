use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dedup_service::{router, Registry};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn config(budget: usize, rounds: usize, epochs: usize) -> Value {
    json!({
        "data": {"kind": "synthetic", "n_entities": 60, "corruption": {"seed": 3}},
        "preprocess": {"max_len": 64},
        "encoder": {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 24, "seed": 5},
        "train": {"epochs_per_round": epochs, "seed": 9},
        "active": {"budget": budget, "rounds": rounds, "seed": 4}
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn wait_for(app: &Router, id: &str, status: &str) -> Value {
    let start = Instant::now();
    loop {
        let (code, handle) = call(app, "GET", &format!("/runs/{id}"), None).await;
        assert_eq!(code, StatusCode::OK);
        if handle["status"] == status {
            return handle;
        }
        assert!(handle["error"].is_null(), "run failed: {}", handle["error"]);
        assert!(start.elapsed() < Duration::from_secs(120), "timed out waiting for {status}: {handle}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn app(dir: &std::path::Path) -> (Router, Arc<Registry>) {
    let registry = Arc::new(Registry::new(dir).unwrap());
    (router(registry.clone()), registry)
}

fn truth_label(pair_id: &str) -> i64 {
    // Synthetic ids are `e{entity}-{copy}`; duplicates share the entity.
    let (l, r) = pair_id.split_once('|').unwrap();
    let entity = |id: &str| id.rsplit_once('-').unwrap().0.to_string();
    i64::from(entity(l) == entity(r))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn labeling_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (code, handle) = call(&app, "POST", "/runs", Some(json!({"run_id": "books", "config": config(3, 2, 4)}))).await;
    assert_eq!(code, StatusCode::CREATED, "{handle}");
    assert_eq!(handle["status"], "training");
    assert_eq!(handle["round_index"], 0);
    assert!(handle["latest_report"].is_null());

    let handle = wait_for(&app, "books", "awaiting_labels").await;
    let (code, queue) = call(&app, "GET", "/runs/books/queue", None).await;
    assert_eq!(code, StatusCode::OK);
    let queue = queue.as_array().unwrap().clone();
    assert_eq!(queue.len(), 3);
    assert_eq!(handle["pending"].as_array().unwrap().len(), 3);
    assert_eq!(queue[0]["left"]["fields"][0]["attribute"], "title");

    // Submit one of three.
    let first = queue[0]["pair_id"].as_str().unwrap().to_string();
    let (code, ack) = call(
        &app,
        "POST",
        "/runs/books/labels",
        Some(json!({"labels": [{"pair_id": first, "y": truth_label(&first), "annotator": "ann-1"}]})),
    )
    .await;
    assert_eq!(code, StatusCode::OK, "{ack}");
    assert_eq!(ack["remaining"], 2);
    assert_eq!(ack["status"], "awaiting_labels");

    // A repeat, a malformed label and an unknown pair are rejected item by item.
    let second = queue[1]["pair_id"].as_str().unwrap().to_string();
    let (_, ack) = call(
        &app,
        "POST",
        "/runs/books/labels",
        Some(json!({"labels": [
            {"pair_id": first, "y": 0},
            {"pair_id": second, "y": "yes"},
            {"pair_id": "x|y", "y": 1}
        ]})),
    )
    .await;
    assert_eq!(ack["accepted"], json!([]));
    assert_eq!(ack["rejected"].as_array().unwrap().len(), 3);
    assert_eq!(ack["remaining"], 2);
    let (_, handle) = call(&app, "GET", "/runs/books", None).await;
    assert_eq!(handle["pending"].as_array().unwrap().len(), 2);

    // Finishing the batch starts round 1.
    let rest: Vec<Value> = queue[1..]
        .iter()
        .map(|r| {
            let id = r["pair_id"].as_str().unwrap();
            json!({"pair_id": id, "y": truth_label(id)})
        })
        .collect();
    let (_, ack) = call(&app, "POST", "/runs/books/labels", Some(json!({ "labels": rest }))).await;
    assert_eq!(ack["remaining"], 0);
    assert_eq!(ack["status"], "training");

    let handle = wait_for(&app, "books", "awaiting_labels").await;
    assert_eq!(handle["round_index"], 1);
    assert_eq!(handle["latest_report"]["round_index"], 1);
    let (_, reports) = call(&app, "GET", "/runs/books/reports", None).await;
    assert_eq!(reports.as_array().unwrap().len(), 1);
    assert_eq!(reports[0]["selected"].as_array().unwrap().len(), 3);

    // The queue is ordered by |p - 0.5|, ties by pair id.
    let (_, queue) = call(&app, "GET", "/runs/books/queue", None).await;
    let mut resorted: Vec<(f64, String)> = queue
        .as_array()
        .unwrap()
        .iter()
        .map(|r| ((r["p"].as_f64().unwrap() - 0.5).abs(), r["pair_id"].as_str().unwrap().to_string()))
        .collect();
    let served: Vec<String> = resorted.iter().map(|(_, id)| id.clone()).collect();
    resorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    assert_eq!(served, resorted.into_iter().map(|(_, id)| id).collect::<Vec<_>>());

    // Concurrent reads agree.
    let (a, b) = tokio::join!(call(&app, "GET", "/runs/books", None), call(&app, "GET", "/runs/books", None));
    assert_eq!(a.1, b.1);

    let (code, export) = call(&app, "GET", "/runs/books/export", None).await;
    assert_eq!(code, StatusCode::OK);
    assert!(!export["pairs"].as_array().unwrap().is_empty());
    assert!(export["clusters"].is_array());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_configs_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let mut bad = config(3, 1, 4);
    bad["train"]["alpha"] = json!(-0.5);
    let (code, body) = call(&app, "POST", "/runs", Some(json!({ "config": bad }))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "train.alpha");

    let mut bad = config(3, 1, 4);
    bad["train"]["alpha"] = json!("high");
    let (code, body) = call(&app, "POST", "/runs", Some(json!({ "config": bad }))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "train.alpha");

    let mut bad = config(3, 1, 4);
    bad["active"]["strategy"] = json!({"kind": "committee"});
    let (code, body) = call(&app, "POST", "/runs", Some(json!({ "config": bad }))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert!(body["field"].as_str().unwrap().starts_with("active.strategy"));

    let mut bad = config(3, 1, 4);
    bad["train"]["alpah"] = json!(0.5);
    let (code, body) = call(&app, "POST", "/runs", Some(json!({ "config": bad }))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert!(body["field"].as_str().unwrap().starts_with("train"), "{body}");

    let (code, _) = call(&app, "GET", "/runs/missing", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = call(&app, "GET", "/runs/missing/queue", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn queue_is_closed_while_training() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    // Long enough training that the status gate is observable.
    let (code, _) = call(&app, "POST", "/runs", Some(json!({"run_id": "slow", "config": config(2, 1, 3000)}))).await;
    assert_eq!(code, StatusCode::CREATED);
    let handle = wait_for(&app, "slow", "awaiting_labels").await;
    let labels: Vec<Value> = handle["pending"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            let id = r["pair_id"].as_str().unwrap();
            json!({"pair_id": id, "y": truth_label(id)})
        })
        .collect();
    let (_, ack) = call(&app, "POST", "/runs/slow/labels", Some(json!({ "labels": labels }))).await;
    assert_eq!(ack["status"], "training");
    let (code, body) = call(&app, "GET", "/runs/slow/queue", None).await;
    assert_eq!(code, StatusCode::CONFLICT, "{body}");
    let (code, _) = call(&app, "POST", "/runs/slow/labels", Some(json!({"labels": []}))).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (_, handle) = call(&app, "GET", "/runs/slow", None).await;
    assert!(handle["pending"].as_array().unwrap().is_empty());
    wait_for(&app, "slow", "awaiting_labels").await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_resumes_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let (app, _) = app(dir.path());
        call(&app, "POST", "/runs", Some(json!({"run_id": "keep", "config": config(4, 2, 4)}))).await;
        let handle = wait_for(&app, "keep", "awaiting_labels").await;
        let first = handle["pending"][0]["pair_id"].as_str().unwrap().to_string();
        let (_, ack) = call(
            &app,
            "POST",
            "/runs/keep/labels",
            Some(json!({"labels": [{"pair_id": first, "y": truth_label(&first)}]})),
        )
        .await;
        assert_eq!(ack["remaining"], 3);
        let (_, handle) = call(&app, "GET", "/runs/keep", None).await;
        handle
    };

    // A fresh registry over the same directory picks the run up again.
    let (app, registry) = app(dir.path());
    assert_eq!(registry.restore().await.unwrap(), 1);
    let after = wait_for(&app, "keep", "awaiting_labels").await;
    assert_eq!(after["round_index"], before["round_index"]);
    assert_eq!(after["config_digest"], before["config_digest"]);
    let ids = |h: &Value| -> Vec<String> {
        h["pending"].as_array().unwrap().iter().map(|r| r["pair_id"].as_str().unwrap().to_string()).collect()
    };
    assert_eq!(ids(&after), ids(&before));
    let p = |h: &Value| -> Vec<f64> { h["pending"].as_array().unwrap().iter().map(|r| r["p"].as_f64().unwrap()).collect() };
    assert_eq!(p(&after), p(&before));

    // Starting the same id again while it is loaded is a conflict.
    let (code, _) = call(&app, "POST", "/runs", Some(json!({"run_id": "keep", "config": config(4, 2, 4)}))).await;
    assert_eq!(code, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ground_truth_runs_finish_on_their_own() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path());
    let (code, _) = call(
        &app,
        "POST",
        "/runs",
        Some(json!({"run_id": "auto", "oracle": "ground_truth", "config": config(5, 2, 4)})),
    )
    .await;
    assert_eq!(code, StatusCode::CREATED);
    let handle = wait_for(&app, "auto", "done").await;
    assert_eq!(handle["round_index"], 2);
    let (_, reports) = call(&app, "GET", "/runs/auto/reports", None).await;
    let rounds: Vec<u64> = reports.as_array().unwrap().iter().map(|r| r["round_index"].as_u64().unwrap()).collect();
    assert_eq!(rounds, vec![1, 2]);
    let (code, _) = call(&app, "GET", "/runs/auto/queue", None).await;
    assert_eq!(code, StatusCode::CONFLICT);
}
