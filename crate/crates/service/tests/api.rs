use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use egcr_core::engine::{ingest, IngestSources, Model, ModelConfig};
use egcr_core::explainer::FallbackOnlyClient;
use egcr_core::recommender::FitConfig;
use egcr_core::synthetic::{PlantedConfig, PlantedCorpus};
use egcr_service::{router, SessionManager};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Toy {
    model: Arc<Model>,
    corpus: PlantedCorpus,
    _dir: tempfile::TempDir,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = PlantedCorpus::generate(&PlantedConfig::default());
        let f = corpus.write(dir.path()).unwrap();
        let src = IngestSources {
            triples: f.triples,
            entities: f.entities,
            concept_triples: Some(f.concept_triples),
            concept_entities: Some(f.concept_entities),
            alignment: Some(f.alignment),
            reviews: Some(f.reviews),
        };
        let mut model = ingest(&src, ModelConfig::new(32, 11)).unwrap();
        model.fit(&corpus.train, &FitConfig::default()).unwrap();
        Toy { model: Arc::new(model), corpus, _dir: dir }
    })
}

fn manager(data: &Path, with_model: bool) -> Arc<SessionManager> {
    let model = with_model.then(|| Arc::clone(&toy().model));
    Arc::new(SessionManager::open(data, model, Arc::new(FallbackOnlyClient)).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn new_session(app: &Router) -> String {
    let (status, body) = call(app, "POST", "/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn sessions_start_empty_and_are_distinct() {
    let data = tempfile::tempdir().unwrap();
    let app = router(manager(data.path(), true));
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    assert_ne!(a, b);
    assert_eq!(a.len(), 32);
    let (status, t) = call(&app, "GET", &format!("/sessions/{a}/transcript"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(t["turns"], json!([]));
    assert_eq!(t["rendered"], "");
}

#[tokio::test]
async fn planted_mention_gets_the_partner_with_an_explanation() {
    let data = tempfile::tempdir().unwrap();
    let app = router(manager(data.path(), true));
    let id = new_session(&app).await;
    let (mentioned, gold) = toy().corpus.partners[0];
    let (status, r) =
        call(&app, "POST", &format!("/sessions/{id}/turns"), Some(json!({"text": format!("I loved @{}", mentioned.0)}))).await;
    assert_eq!(status, StatusCode::OK, "{r}");
    let recs = r["recommendations"].as_array().unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0]["entity_id"], gold.0);
    let scores: Vec<f64> = recs.iter().map(|x| x["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(recs[0]["path"].as_array().unwrap().len(), 2);
    let name = toy().model.graph().name_of(gold);
    let explanation = r["explanation"]["text"].as_str().unwrap();
    assert!(explanation.contains(&name));
    assert_eq!(r["explanation"]["source"], "fallback");
    assert_eq!(r["response_text"], format!("You should watch {name}. ({explanation})"));
    assert_eq!(r["turn_index"], 1);
}

#[tokio::test]
async fn two_exchanges_make_four_transcript_turns() {
    let data = tempfile::tempdir().unwrap();
    let app = router(manager(data.path(), true));
    let id = new_session(&app).await;
    let uri = format!("/sessions/{id}/turns");
    let (_, first) = call(&app, "POST", &uri, Some(json!({"text": "Hello, I want a movie"}))).await;
    let (_, second) = call(&app, "POST", &uri, Some(json!({"text": "Something else please"}))).await;
    assert_eq!(first["turn_index"], 1);
    assert_eq!(second["turn_index"], 2);
    // the first recommendation is now mentioned and must not come back on top
    assert_ne!(first["recommendations"][0]["entity_id"], second["recommendations"][0]["entity_id"]);

    let (_, t) = call(&app, "GET", &format!("/sessions/{id}/transcript"), None).await;
    let turns = t["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 4);
    let rendered = t["rendered"].as_str().unwrap();
    let lines: Vec<&str> = rendered.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "SEEKER: Hello, I want a movie");
    assert!(lines[1].starts_with("AGENT: You should watch "));
    assert!(lines[1].ends_with(&format!("({})", first["explanation"]["text"].as_str().unwrap())));
    for t in turns.iter().filter(|t| t["speaker"] == "recommender") {
        assert!(!t["explanation"]["text"].as_str().unwrap().is_empty());
    }
}

#[tokio::test]
async fn error_contract() {
    let data = tempfile::tempdir().unwrap();
    let app = router(manager(data.path(), true));
    let id = new_session(&app).await;
    let uri = format!("/sessions/{id}/turns");

    let (status, body) = call(&app, "POST", &uri, Some(json!({"text": "   "}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].is_string());
    let (status, body) = call(&app, "POST", &uri, Some(json!({"message": "hi"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].is_string());
    let (_, t) = call(&app, "GET", &format!("/sessions/{id}/transcript"), None).await;
    assert_eq!(t["turns"], json!([]));

    let missing = "0".repeat(32);
    let (status, body) = call(&app, "POST", &format!("/sessions/{missing}/turns"), Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    let (status, _) = call(&app, "GET", &format!("/sessions/{missing}/transcript"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let bare_data = tempfile::tempdir().unwrap();
    let bare = router(manager(bare_data.path(), false));
    let id = new_session(&bare).await;
    let (status, body) = call(&bare, "POST", &format!("/sessions/{id}/turns"), Some(json!({"text": "hi"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "model not loaded");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posters_are_serialized() {
    let data = tempfile::tempdir().unwrap();
    let app = router(manager(data.path(), true));
    let id = new_session(&app).await;
    let posters: Vec<_> = (0..8)
        .map(|i| {
            let app = app.clone();
            let uri = format!("/sessions/{id}/turns");
            tokio::spawn(async move { call(&app, "POST", &uri, Some(json!({"text": format!("poster {i} says hi")}))).await })
        })
        .collect();
    let mut indices = Vec::new();
    for p in posters {
        let (status, body) = p.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        indices.push(body["turn_index"].as_u64().unwrap());
    }
    indices.sort_unstable();
    assert_eq!(indices, (1..=8).collect::<Vec<u64>>());

    let (_, t) = call(&app, "GET", &format!("/sessions/{id}/transcript"), None).await;
    let turns = t["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 16);
    let mut seen = Vec::new();
    for (k, pair) in turns.chunks(2).enumerate() {
        assert_eq!(pair[0]["speaker"], "seeker");
        assert_eq!(pair[1]["speaker"], "recommender");
        assert_eq!(pair[0]["turn_index"], 2 * k + 1);
        assert_eq!(pair[1]["turn_index"], 2 * k + 2);
        seen.push(pair[0]["text"].as_str().unwrap().to_string());
    }
    seen.sort();
    let mut expected: Vec<String> = (0..8).map(|i| format!("poster {i} says hi")).collect();
    expected.sort();
    assert_eq!(seen, expected);
}

#[tokio::test]
async fn restart_recovers_identical_transcripts() {
    let data = tempfile::tempdir().unwrap();
    let first = manager(data.path(), true);
    let app = router(Arc::clone(&first));
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    let (m, _) = toy().corpus.partners[3];
    call(&app, "POST", &format!("/sessions/{a}/turns"), Some(json!({"text": format!("I liked @{}", m.0)}))).await;
    call(&app, "POST", &format!("/sessions/{a}/turns"), Some(json!({"text": "Anything else?"}))).await;
    let (_, before_a) = call(&app, "GET", &format!("/sessions/{a}/transcript"), None).await;
    let (_, before_b) = call(&app, "GET", &format!("/sessions/{b}/transcript"), None).await;
    drop(app);
    drop(first);

    let restarted = manager(data.path(), true);
    assert_eq!(restarted.len(), 2);
    let app = router(restarted);
    let (_, after_a) = call(&app, "GET", &format!("/sessions/{a}/transcript"), None).await;
    let (_, after_b) = call(&app, "GET", &format!("/sessions/{b}/transcript"), None).await;
    assert_eq!(after_a, before_a);
    assert_eq!(after_b, before_b);

    // the restored history keeps feeding the pipeline
    let (status, r) = call(&app, "POST", &format!("/sessions/{a}/turns"), Some(json!({"text": "One more"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["turn_index"], 3);
}
