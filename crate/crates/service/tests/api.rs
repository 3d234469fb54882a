use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use sentinel_core::corpus::ActionStore;
use sentinel_core::features::{handcrafted_embedding, schema_from_subgraphs, write_embeddings, Embedding};
use sentinel_core::ranking::{
    build_mutated_set, nn_rank, smr_rank, train_smr, InterestingSet, MutationConfig, RankMethod, SmrConfig,
};
use sentinel_core::sampler::{sample_all, write_subgraphs, SamplerConfig};
use sentinel_core::simgen::{generate, SimConfig};
use sentinel_core::stats::{credible_interval, AuditOutcome, BetaPrior};
use sentinel_core::testkit::fig1_records;
use sentinel_service::{router, AppState, ServiceConfig, LABELS_FILE};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    dir: TempDir,
    embeddings: BTreeMap<String, Embedding>,
}

fn build(records: Vec<sentinel_core::corpus::ActionRecord>, exemplars: usize, smr: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = ActionStore::from_records(records).unwrap();
    let gs = sample_all(&store, &SamplerConfig::default()).unwrap();
    let mutated = build_mutated_set(&gs, &MutationConfig::default(), &mut rand_chacha_rng());
    let schema = schema_from_subgraphs(gs.iter().chain(&mutated)).unwrap();
    let embeddings: BTreeMap<String, Embedding> = gs
        .iter()
        .map(|g| (g.root_id.clone(), handcrafted_embedding(g, &schema).unwrap()))
        .collect();
    write_subgraphs(&dir.path().join("subgraphs"), &gs).unwrap();
    write_embeddings(&dir.path().join("embeddings.jsonl"), &embeddings).unwrap();
    let mut cfg = ServiceConfig::new(if smr { RankMethod::Smr } else { RankMethod::Nn });
    cfg.exemplars = embeddings.keys().take(exemplars).cloned().collect();
    if smr {
        let m: Vec<Embedding> = mutated.iter().map(|g| handcrafted_embedding(g, &schema).unwrap()).collect();
        let n: Vec<Embedding> = embeddings.values().cloned().collect();
        let clf = train_smr(&n, &m, &SmrConfig { steps: 100, ..SmrConfig::default() }, 1).unwrap();
        let model = dir.path().join("smr");
        std::fs::create_dir_all(&model).unwrap();
        clf.save(&model).unwrap();
        cfg.smr_model = Some("smr".into());
    }
    cfg.save(dir.path()).unwrap();
    Fixture { dir, embeddings }
}

fn rand_chacha_rng() -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(4)
}

fn simulated(smr: bool) -> Fixture {
    let (records, _) = generate(&SimConfig {
        agents: 10,
        days: 2,
        anomaly_prevalence: 0.1,
        ..SimConfig::default()
    })
    .unwrap();
    build(records, 2, smr)
}

fn open(dir: &Path) -> Router {
    router(Arc::new(AppState::open(dir).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn ids(v: &Value) -> Vec<String> {
    v["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["subgraph_id"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn queue_matches_offline_ranking() {
    let fx = simulated(false);
    let app = open(fx.dir.path());
    let (status, body) = call(&app, "GET", "/api/queue?limit=50", None).await;
    assert_eq!(status, StatusCode::OK);
    let exemplars: Vec<String> = fx.embeddings.keys().take(2).cloned().collect();
    let want = nn_rank(&fx.embeddings, &InterestingSet::new(exemplars.clone()), 50).unwrap();
    assert_eq!(ids(&body), want.iter().map(|f| f.subgraph_id.clone()).collect::<Vec<_>>());
    assert_eq!(body["items"].as_array().unwrap().len(), 50);
    assert!(body["items"].as_array().unwrap().iter().all(|i| i["label"].is_null()));
    assert_eq!(body["interesting"], json!(exemplars));
    assert_eq!(body["method"], "NN");
}

#[tokio::test]
async fn label_then_rerank_folds_into_interesting_set() {
    let fx = simulated(false);
    let app = open(fx.dir.path());
    let (_, before) = call(&app, "GET", "/api/queue?limit=10", None).await;
    let first = ids(&before)[0].clone();
    let third = ids(&before)[2].clone();
    let (status, stored) = call(
        &app,
        "POST",
        "/api/label",
        Some(json!({"subgraph_id": first, "verdict": "worth_auditing", "auditor": "kim"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stored["subgraph_id"], first.as_str());
    call(
        &app,
        "POST",
        "/api/label",
        Some(json!({"subgraph_id": third, "verdict": "not_worth_auditing", "auditor": "kim"})),
    )
    .await;

    // Until the rerank the queue is unchanged but shows the verdicts.
    let (_, pending) = call(&app, "GET", "/api/queue?limit=10", None).await;
    assert_eq!(ids(&pending), ids(&before));
    assert_eq!(pending["items"][0]["label"], "worth_auditing");
    assert_eq!(pending["items"][2]["label"], "not_worth_auditing");

    let (status, rr) = call(&app, "POST", "/api/rerank", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rr["generation"], 1);
    let (_, after) = call(&app, "GET", "/api/queue?limit=200", None).await;
    let after_ids = ids(&after);
    assert!(!after_ids.contains(&first));
    assert!(!after_ids.contains(&third));

    let mut interesting: Vec<String> = fx.embeddings.keys().take(2).cloned().collect();
    interesting.push(first.clone());
    assert_eq!(after["interesting"], json!(interesting));
    let pool: BTreeMap<String, Embedding> = fx
        .embeddings
        .iter()
        .filter(|(id, _)| **id != third)
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let want = nn_rank(&pool, &InterestingSet::new(interesting), 200).unwrap();
    assert_eq!(after_ids, want.iter().map(|f| f.subgraph_id.clone()).collect::<Vec<_>>());
}

#[tokio::test]
async fn rerank_without_new_labels_is_identical() {
    let fx = simulated(false);
    let app = open(fx.dir.path());
    let (_, a) = call(&app, "GET", "/api/queue?limit=100", None).await;
    call(&app, "POST", "/api/rerank", None).await;
    let (_, b) = call(&app, "GET", "/api/queue?limit=100", None).await;
    assert_eq!(a["items"], b["items"]);
    assert_eq!(b["generation"], 1);
}

#[tokio::test]
async fn restart_replays_labels() {
    let fx = simulated(false);
    let app = open(fx.dir.path());
    let (_, q) = call(&app, "GET", "/api/queue?limit=5", None).await;
    for (i, id) in ids(&q).iter().enumerate() {
        let verdict = if i % 2 == 0 { "worth_auditing" } else { "not_worth_auditing" };
        call(
            &app,
            "POST",
            "/api/label",
            Some(json!({"subgraph_id": id, "verdict": verdict, "auditor": "lee"})),
        )
        .await;
    }
    call(&app, "POST", "/api/rerank", None).await;
    let (_, live) = call(&app, "GET", "/api/queue?limit=300", None).await;
    let (_, live_stats) = call(&app, "GET", "/api/stats", None).await;

    let restarted = open(fx.dir.path());
    let (_, replayed) = call(&restarted, "GET", "/api/queue?limit=300", None).await;
    assert_eq!(live["items"], replayed["items"]);
    assert_eq!(live["interesting"], replayed["interesting"]);
    let (_, replayed_stats) = call(&restarted, "GET", "/api/stats", None).await;
    assert_eq!(live_stats, replayed_stats);
    let lines = std::fs::read_to_string(fx.dir.path().join(LABELS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 5);
}

#[tokio::test]
async fn stats_over_labeled_items() {
    let fx = simulated(false);
    let app = open(fx.dir.path());
    let (_, empty) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(empty["k"], 0);
    assert!(empty["precision"].is_null());
    let (_, q) = call(&app, "GET", "/api/queue?limit=4", None).await;
    let q = ids(&q);
    for (id, verdict, auditor) in [
        (&q[0], "worth_auditing", "kim"),
        (&q[1], "not_worth_auditing", "kim"),
        (&q[2], "worth_auditing", "kim"),
        (&q[2], "not_worth_auditing", "kim"),
        (&q[3], "not_worth_auditing", "kim"),
        (&q[3], "worth_auditing", "lee"),
    ] {
        call(
            &app,
            "POST",
            "/api/label",
            Some(json!({"subgraph_id": id, "verdict": verdict, "auditor": auditor})),
        )
        .await;
    }
    let (_, s) = call(&app, "GET", "/api/stats", None).await;
    assert_eq!(s["k"], 4);
    assert_eq!(s["w"], 2);
    assert_eq!(s["precision"], 0.5);
    let (lo, hi) = credible_interval(AuditOutcome::new(4, 2).unwrap(), 0.9, BetaPrior::UNIFORM).unwrap();
    assert!((s["interval"][0].as_f64().unwrap() - lo).abs() < 1e-12);
    assert!((s["interval"][1].as_f64().unwrap() - hi).abs() < 1e-12);
}

#[tokio::test]
async fn subgraph_view_has_hour_offsets() {
    let fx = build(fig1_records(), 1, false);
    let app = open(fx.dir.path());
    let (status, g) = call(&app, "GET", "/api/subgraph/q.1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(g["root_id"], "q.1");
    let deltas: BTreeMap<String, f64> = g["actions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["id"].as_str().unwrap().to_string(), a["delta_hours"].as_f64().unwrap()))
        .collect();
    assert!((deltas["view.2"] + 18.75).abs() < 1e-9);
    assert_eq!(deltas["q.1"], 0.0);
    assert_eq!(g["edges"].as_array().unwrap().len(), 14);
    assert_eq!(g["entities"].as_array().unwrap().len(), 4);

    let (status, err) = call(&app, "GET", "/api/subgraph/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(err["error"].as_str().unwrap().contains("nope"));
}

#[tokio::test]
async fn bad_label_requests() {
    let fx = simulated(false);
    let app = open(fx.dir.path());
    let (status, err) = call(
        &app,
        "POST",
        "/api/label",
        Some(json!({"subgraph_id": "nope", "verdict": "worth_auditing", "auditor": "kim"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(err["error"].is_string());
    let id = fx.embeddings.keys().next().unwrap();
    let (status, _) = call(
        &app,
        "POST",
        "/api/label",
        Some(json!({"subgraph_id": id, "verdict": "worth_auditing", "auditor": " "})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        &app,
        "POST",
        "/api/label",
        Some(json!({"subgraph_id": id, "verdict": "maybe", "auditor": "kim"})),
    )
    .await;
    assert!(status.is_client_error());
    assert!(!fx.dir.path().join(LABELS_FILE).exists());
}

#[tokio::test]
async fn empty_interesting_set_conflicts() {
    let fx = build(fig1_records(), 0, false);
    let err = AppState::open(fx.dir.path()).unwrap_err().to_string();
    assert!(err.contains("interesting set is empty"), "{err}");
}

#[tokio::test]
async fn smr_queue_matches_offline_ranking() {
    let fx = simulated(true);
    let app = open(fx.dir.path());
    let clf = sentinel_core::ranking::SmrClassifier::load(&fx.dir.path().join("smr")).unwrap();
    let exemplars: Vec<String> = fx.embeddings.keys().take(2).cloned().collect();
    let naturals: BTreeMap<String, Embedding> = fx
        .embeddings
        .iter()
        .filter(|(id, _)| !exemplars.contains(id))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let want = smr_rank(&clf, &naturals, 30).unwrap();
    let (_, q) = call(&app, "GET", "/api/queue?limit=30", None).await;
    assert_eq!(q["method"], "SMR");
    assert_eq!(ids(&q), want.iter().map(|f| f.subgraph_id.clone()).collect::<Vec<_>>());

    let top = ids(&q)[0].clone();
    call(
        &app,
        "POST",
        "/api/label",
        Some(json!({"subgraph_id": top, "verdict": "not_worth_auditing", "auditor": "kim"})),
    )
    .await;
    call(&app, "POST", "/api/rerank", None).await;
    let (_, q2) = call(&app, "GET", "/api/queue?limit=29", None).await;
    assert_eq!(ids(&q2), ids(&q)[1..].to_vec());
}

#[tokio::test]
async fn startup_errors_name_the_file() {
    let fx = simulated(false);
    std::fs::remove_file(fx.dir.path().join("embeddings.jsonl")).unwrap();
    let err = AppState::open(fx.dir.path()).unwrap_err().to_string();
    assert!(err.contains("embeddings.jsonl"), "{err}");

    let fx = simulated(false);
    std::fs::write(fx.dir.path().join(LABELS_FILE), "not json\n").unwrap();
    let err = AppState::open(fx.dir.path()).unwrap_err().to_string();
    assert!(err.contains(LABELS_FILE) && err.contains("line 1"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let err = AppState::open(dir.path()).unwrap_err().to_string();
    assert!(err.contains("service.json"), "{err}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_labels_are_all_recorded() {
    let fx = simulated(false);
    let app = open(fx.dir.path());
    let targets: Vec<String> = fx.embeddings.keys().skip(2).take(40).cloned().collect();
    let mut tasks = Vec::new();
    for (i, id) in targets.iter().enumerate() {
        let labeler = app.clone();
        let id = id.clone();
        tasks.push(tokio::spawn(async move {
            let app = labeler;
            let body = json!({"subgraph_id": id, "verdict": "not_worth_auditing", "auditor": format!("a{}", i % 3)});
            call(&app, "POST", "/api/label", Some(body)).await.0
        }));
        if i % 10 == 0 {
            let app = app.clone();
            tasks.push(tokio::spawn(async move { call(&app, "POST", "/api/rerank", None).await.0 }));
        }
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let text = std::fs::read_to_string(fx.dir.path().join(LABELS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 40);
    for line in text.lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
    call(&app, "POST", "/api/rerank", None).await;
    let (_, q) = call(&app, "GET", "/api/queue?limit=1000", None).await;
    assert!(ids(&q).iter().all(|id| !targets.contains(id)));
}
