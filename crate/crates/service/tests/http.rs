use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cewb_core::annotation::Pool;
use cewb_core::datakit::{Dataset, Domain, Origin, SentencePair};
use cewb_service::campaign::{Ack, Campaign, CampaignReport, Progress};
use cewb_service::http::{router, AppState, ErrorBody, NextResponse};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::json;
use tower::ServiceExt;

fn dataset(n: usize) -> Dataset {
    let pairs = (0..n)
        .map(|i| {
            let source = vec![format!("s{i}"), "s0".to_string()];
            let reference = vec![format!("t{i}"), "t0".to_string()];
            let target = if i % 3 == 0 { vec!["t9".to_string()] } else { reference.clone() };
            SentencePair {
                id: format!("p{i:04}"),
                source,
                target,
                reference: Some(reference),
                origin: Origin::CeTest,
                domain: Domain::InDomain,
            }
        })
        .collect();
    Dataset::new(pairs, "http pairs").unwrap()
}

fn app(dir: &std::path::Path, ui: Option<&std::path::Path>) -> Router {
    let c = Campaign::create(&dir.join("c1"), "c1", &dataset(12), 1, Pool::NonExpert).unwrap();
    router(AppState::new(vec![c]), ui)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get<T: DeserializeOwned>(app: &Router, uri: &str) -> (StatusCode, T) {
    let (s, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&body).unwrap_or_else(|e| panic!("{uri}: {e}: {}", String::from_utf8_lossy(&body))))
}

async fn post<T: DeserializeOwned>(app: &Router, uri: &str, body: serde_json::Value) -> (StatusCode, T) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let (s, body) = call(app, req).await;
    (s, serde_json::from_slice(&body).unwrap())
}

fn labels(n: usize) -> serde_json::Value {
    json!(vec!["good"; n])
}

#[tokio::test]
async fn next_submit_and_progress() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);

    let (s, next): (_, NextResponse) = get(&app, "/campaigns/c1/next?annotator=alice").await;
    assert_eq!(s, StatusCode::OK);
    let item = next.work_item.unwrap();
    assert_eq!(item.pairs.len(), 6);

    let body = json!({"annotator": "alice", "work_item": item.id, "labels": labels(6)});
    let (s, ack): (_, Ack) = post(&app, "/campaigns/c1/ratings", body.clone()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(ack.recorded);

    let (s, again): (_, Ack) = post(&app, "/campaigns/c1/ratings", body).await;
    assert_eq!(s, StatusCode::OK);
    assert!(!again.recorded);

    let (_, progress): (_, Progress) = get(&app, "/campaigns/c1").await;
    assert_eq!(progress.submissions, 1);
    assert_eq!(progress.complete_items, 1);
}

#[tokio::test]
async fn exhausted_annotator_gets_null() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    for _ in 0..2 {
        let (_, next): (_, NextResponse) = get(&app, "/campaigns/c1/next?annotator=bob").await;
        let id = next.work_item.unwrap().id;
        let (s, _): (_, Ack) =
            post(&app, "/campaigns/c1/ratings", json!({"annotator": "bob", "work_item": id, "labels": labels(6)})).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (s, body) = call(&app, Request::get("/campaigns/c1/next?annotator=bob").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert!(v["work_item"].is_null());
    assert_eq!(v["progress"]["state"], "complete");
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);

    let (s, _): (_, ErrorBody) = get(&app, "/campaigns/nope").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, e): (_, ErrorBody) =
        post(&app, "/campaigns/c1/ratings", json!({"annotator": "a", "work_item": "wi-00000", "labels": labels(5)})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(e.error.contains("6"));

    let (s, _): (_, ErrorBody) =
        post(&app, "/campaigns/c1/ratings", json!({"annotator": "a", "work_item": "wi-77777", "labels": labels(6)})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, _): (_, Ack) =
        post(&app, "/campaigns/c1/ratings", json!({"annotator": "a", "work_item": "wi-00000", "labels": labels(6)})).await;
    assert_eq!(s, StatusCode::OK);
    let mut other = vec!["good"; 6];
    other[3] = "needs_work";
    let (s, _): (_, ErrorBody) =
        post(&app, "/campaigns/c1/ratings", json!({"annotator": "a", "work_item": "wi-00000", "labels": other})).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, _): (_, ErrorBody) = get(&app, "/campaigns/c1/report?n=2").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _): (_, ErrorBody) = get(&app, "/campaigns/c1/next?annotator=").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn report_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    for id in ["wi-00000", "wi-00001"] {
        let body = json!({"annotator": "a", "work_item": id, "labels": ["good", "good", "needs_work", "good", "good", "good"]});
        let (s, _): (_, Ack) = post(&app, "/campaigns/c1/ratings", body).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (s, r): (_, CampaignReport) = get(&app, "/campaigns/c1/report?n=1").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r.analytics.samples, 12);
    assert_eq!(r.analytics.sacc, Some(10.0 / 12.0));
    // Default n = 3 on a 1-rating campaign is a partial report.
    let (_, r): (_, CampaignReport) = get(&app, "/campaigns/c1/report").await;
    assert_eq!(r.analytics.sacc, None);
    assert!(!r.analytics.notes.is_empty());
}

#[tokio::test]
async fn static_ui_is_served_as_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>workbench</html>").unwrap();
    let app = app(dir.path(), Some(&ui));
    let (s, body) = call(&app, Request::get("/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>workbench</html>");
    let (s, _): (_, Progress) = get(&app, "/campaigns/c1").await;
    assert_eq!(s, StatusCode::OK);
}
