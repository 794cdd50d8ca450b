use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use revsum_core::config::Config;
use revsum_core::dataset::{load_reviews_table, AspectSchema};
use revsum_core::gateway::MockBackend;
use revsum_core::orchestrator::Orchestrator;
use revsum_core::FixedClock;
use revsum_service::api::{router, AppState, Schedule};

fn golden_rows() -> Vec<revsum_core::dataset::ReviewRow> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/golden_reviews.csv");
    load_reviews_table(&path, &AspectSchema::default()).unwrap().records
}

fn app() -> (Router, Arc<Orchestrator>) {
    let clock = Arc::new(FixedClock(Utc.with_ymd_and_hms(2025, 3, 1, 12, 0, 0).unwrap()));
    let orch = Arc::new(Config::default().build_with(Arc::new(MockBackend::default()), clock).unwrap());
    let state = AppState {
        orchestrator: orch.clone(),
        schedule: Schedule::Inline,
    };
    (router(state, Some("http://localhost:5173")), orch)
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn post_golden(app: &Router, count: usize) -> Vec<Value> {
    let mut triggers = Vec::new();
    for row in golden_rows().into_iter().take(count) {
        let r = row.review;
        let body = json!({
            "review_id": r.review_id,
            "text": r.text,
            "created_at": r.created_at,
            "verified_purchaser": r.verified_purchaser,
        });
        let (status, v) = send(app, Method::POST, "/products/golden-desk/reviews", Some(body)).await;
        assert_eq!(status, StatusCode::ACCEPTED, "{v}");
        assert_eq!(v["accepted"], true);
        triggers.push(v["trigger"]["kind"].clone());
    }
    triggers
}

#[tokio::test]
async fn ingest_reports_triggers_and_summarizes() {
    let (app, _) = app();
    let triggers = post_golden(&app, 12).await;
    assert_eq!(triggers[0], "NONE");
    assert_eq!(triggers[8], "NONE");
    assert_eq!(triggers[9], "INITIAL_SUMMARY");
    assert_eq!(triggers[10], "REFRESH");

    let (status, summary) = send(&app, Method::GET, "/products/golden-desk/summary", None).await;
    assert_eq!(status, StatusCode::OK);
    let n = summary["summary_text"].as_str().unwrap().chars().count();
    assert!((300..=500).contains(&n), "{n}");
    assert_eq!(summary["review_count_at_generation"], 11);
}

#[tokio::test]
async fn ingest_errors() {
    let (app, _) = app();
    post_golden(&app, 1).await;
    let dup = json!({"review_id": "g01", "text": "again"});
    let (status, v) = send(&app, Method::POST, "/products/golden-desk/reviews", Some(dup)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["code"], "duplicate_review");

    for body in [
        json!({"review_id": "x", "text": "   "}),
        json!({"review_id": "x"}),
        json!({"review_id": "x", "text": "ok", "product_id": "other"}),
        json!({"review_id": "x", "text": "ok", "stars": 5}),
    ] {
        let (status, v) = send(&app, Method::POST, "/products/golden-desk/reviews", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
        assert!(v["message"].is_string());
    }
}

#[tokio::test]
async fn missing_resources_are_404() {
    let (app, _) = app();
    post_golden(&app, 9).await;
    for uri in [
        "/products/unknown/summary",
        "/products/golden-desk/summary",
        "/products/unknown/aspects",
        "/products/golden-desk/aspects",
    ] {
        let (status, v) = send(&app, Method::GET, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["code"], "not_found");
    }
}

#[tokio::test]
async fn aspects_are_ranked() {
    let (app, _) = app();
    post_golden(&app, 12).await;
    let (status, v) = send(&app, Method::GET, "/products/golden-desk/aspects", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 5);
    let key = |a: &Value| {
        let c = &a["counts"];
        let total = c["positive"].as_u64().unwrap() + c["negative"].as_u64().unwrap() + c["mixed"].as_u64().unwrap();
        (std::cmp::Reverse(total), a["aspect"].as_str().unwrap().to_string())
    };
    let mut sorted = list.clone();
    sorted.sort_by_key(key);
    assert_eq!(&sorted, list);
}

#[tokio::test]
async fn filter_matches_brute_force_scan() {
    let (app, orch) = app();
    post_golden(&app, 12).await;
    let store = orch.store();
    let consolidated = orch
        .mappings()
        .apply_cached(&store.get_reviews("golden-desk").iter().filter_map(|r| store.get_extraction(&r.review_id)).collect::<Vec<_>>());
    let aspects: BTreeSet<String> = consolidated.iter().flat_map(|e| e.mentions.iter().map(|m| m.aspect.clone())).collect();
    assert!(aspects.contains("assembly"));
    for aspect in &aspects {
        for sentiment in [None, Some("positive"), Some("negative"), Some("mixed")] {
            let expected: BTreeSet<String> = consolidated
                .iter()
                .filter(|e| {
                    e.mentions
                        .iter()
                        .any(|m| &m.aspect == aspect && sentiment.is_none_or(|s| m.sentiment.as_str() == s))
                })
                .map(|e| e.review_id.clone())
                .collect();
            let uri = match sentiment {
                Some(s) => format!("/products/golden-desk/reviews?aspect={}&sentiment={s}", aspect.replace(' ', "%20")),
                None => format!("/products/golden-desk/reviews?aspect={}", aspect.replace(' ', "%20")),
            };
            let (status, v) = send(&app, Method::GET, &uri, None).await;
            assert_eq!(status, StatusCode::OK);
            let got: BTreeSet<String> = v["reviews"]
                .as_array()
                .unwrap()
                .iter()
                .map(|r| r["review_id"].as_str().unwrap().to_string())
                .collect();
            assert_eq!(got, expected, "{uri}");
            assert_eq!(v["total"], expected.len());
        }
    }
}

#[tokio::test]
async fn unfiltered_pages_are_newest_first_and_stable() {
    let (app, _) = app();
    post_golden(&app, 12).await;
    let (status, first) = send(&app, Method::GET, "/products/golden-desk/reviews", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["total"], 12);
    assert_eq!(first["page_size"], 20);
    let dates: Vec<&str> = first["reviews"].as_array().unwrap().iter().map(|r| r["created_at"].as_str().unwrap()).collect();
    let mut sorted = dates.clone();
    sorted.sort_by(|a, b| b.cmp(a));
    assert_eq!(dates, sorted);
    let (_, again) = send(&app, Method::GET, "/products/golden-desk/reviews?page=1", None).await;
    assert_eq!(again, first);
    let (_, empty) = send(&app, Method::GET, "/products/golden-desk/reviews?page=2", None).await;
    assert_eq!(empty["reviews"], json!([]));
}

#[tokio::test]
async fn bad_query_parameters_are_400() {
    let (app, _) = app();
    post_golden(&app, 12).await;
    for uri in [
        "/products/golden-desk/reviews?sentiment=great",
        "/products/golden-desk/reviews?page=0",
        "/products/golden-desk/reviews?page=two",
    ] {
        let (status, v) = send(&app, Method::GET, uri, None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert_eq!(v["code"], "invalid_request");
    }
}

#[tokio::test]
async fn reads_have_no_side_effects() {
    let (app, orch) = app();
    post_golden(&app, 12).await;
    let before = serde_json::to_string(&orch.store().get_summary("golden-desk")).unwrap();
    let mappings = orch.mappings().snapshot();
    for uri in [
        "/products/golden-desk/summary",
        "/products/golden-desk/aspects",
        "/products/golden-desk/reviews?aspect=quality",
    ] {
        send(&app, Method::GET, uri, None).await;
    }
    assert_eq!(serde_json::to_string(&orch.store().get_summary("golden-desk")).unwrap(), before);
    assert_eq!(orch.mappings().snapshot(), mappings);
    assert_eq!(orch.store().get_refresh_state("golden-desk").count_at_last_summary, Some(11));
}

#[tokio::test]
async fn cors_allows_configured_origin() {
    let (app, _) = app();
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/products/x/summary")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "GET")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get("access-control-allow-origin").unwrap(),
        "http://localhost:5173"
    );
}
