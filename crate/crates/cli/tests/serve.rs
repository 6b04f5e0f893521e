mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use brainlang_cli::pipeline::{self, Variant};
use brainlang_cli::serve::{self, AskRequest, AskResponse, ErrorBody, ServeState};
use tower::ServiceExt;

fn state() -> Arc<ServeState> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let (ds, split) = pipeline::synth(&cfg).unwrap();
    let (base, _) = pipeline::pretrain_base(&cfg, &ds, &split).unwrap();
    let out = pipeline::train(&cfg, &base, &ds, &split, &Variant::Main).unwrap();
    Arc::new(ServeState::new(cfg, &out.phase2, ds, split).unwrap())
}

async fn call(state: &Arc<ServeState>, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = serve::router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

fn error_code(body: &[u8]) -> String {
    serde_json::from_slice::<ErrorBody>(body).unwrap().code
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoints_and_structured_errors() {
    let s = state();
    let t0 = s.split.test_ids[0];

    let (st, body) = call(&s, "GET", "/api/health", "").await;
    assert_eq!(st, StatusCode::OK);
    let h: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(h["fingerprint"].as_str().unwrap().len(), 64);

    let (st, body) = call(&s, "GET", "/api/trials", "").await;
    assert_eq!(st, StatusCode::OK);
    let trials: Vec<serde_json::Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(trials.len(), s.dataset.trials.len());
    assert_eq!(trials[0]["ground_truth_hidden"], true);

    let (st, body) = call(&s, "GET", "/api/masks", "").await;
    assert_eq!(st, StatusCode::OK);
    let masks: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(masks["masks"].as_array().unwrap().len(), 2);
    let mask_id = masks["masks"][0]["id"].as_str().unwrap().to_string();

    let ask = format!(r#"{{"trial_id": {t0}, "question": "Describe this image.", "beta": 0.5, "mask_id": "{mask_id}", "evidence_tokens": ["person", "man"]}}"#);
    let (st, body) = call(&s, "POST", "/api/ask", &ask).await;
    assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: AskResponse = serde_json::from_slice(&body).unwrap();
    let ev = r.evidence.unwrap();
    assert!(!ev.step_sums.is_empty() && ev.aggregate <= 0.0);
    assert!(r.caption_score.is_finite());

    let (st, body) = call(&s, "POST", "/api/ask", r#"{"trial_id": 999999, "question": "x"}"#).await;
    assert_eq!((st, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_trial"));
    let bad_mask = format!(r#"{{"trial_id": {t0}, "question": "x", "beta": 1.0, "mask_id": "nope"}}"#);
    let (st, body) = call(&s, "POST", "/api/ask", &bad_mask).await;
    assert_eq!((st, error_code(&body).as_str()), (StatusCode::NOT_FOUND, "unknown_mask"));
    let no_mask = format!(r#"{{"trial_id": {t0}, "question": "x", "beta": 1.0}}"#);
    let (st, body) = call(&s, "POST", "/api/ask", &no_mask).await;
    assert_eq!((st, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "mask_required"));
    let (st, body) = call(&s, "POST", "/api/ask", "{not json").await;
    assert_eq!((st, error_code(&body).as_str()), (StatusCode::BAD_REQUEST, "malformed_body"));
    let (st, _) = call(&s, "POST", "/api/ask", &format!(r#"{{"trial_id": {t0}, "question": "x", "extra": 1}}"#)).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let sweep = format!(r#"{{"trial_id": {t0}, "mask_id": "{mask_id}", "grid": [-1, 0, 1]}}"#);
    let (st, body) = call(&s, "POST", "/api/sweep", &sweep).await;
    assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let sr: brainlang::experiments::SweepResult = serde_json::from_slice(&body).unwrap();
    assert_eq!(sr.mention_rate.len(), 3);
    let big: Vec<String> = (0..40).map(|i| format!("{}", i as f64 / 10.0)).collect();
    let huge = format!(r#"{{"trial_id": {t0}, "mask_id": "{mask_id}", "grid": [{}]}}"#, big.join(","));
    let (st, body) = call(&s, "POST", "/api/sweep", &huge).await;
    assert_eq!((st, error_code(&body).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "grid_size"));

    let (st, _) = call(&s, "GET", "/api/nothing", "").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_get_identical_bodies() {
    let s = state();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = serve::router(s.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });

    let mask_id = s.masks[0].id.clone();
    let body = serde_json::json!({
        "trial_id": s.split.test_ids[1],
        "question": "What is in this image?",
        "beta": 0.25,
        "mask_id": mask_id,
        "evidence_tokens": ["person"],
    });
    let client = reqwest::Client::new();
    let url = format!("http://{addr}/api/ask");
    let handles: Vec<_> = (0..32)
        .map(|_| {
            let (c, u, b) = (client.clone(), url.clone(), body.clone());
            tokio::spawn(async move {
                let r = c.post(u).json(&b).send().await.unwrap();
                assert!(r.headers().contains_key("x-elapsed-ms"));
                r.bytes().await.unwrap().to_vec()
            })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(h.await.unwrap());
    }
    assert!(bodies.iter().all(|b| *b == bodies[0]));

    // beta = 0 equals the shared generate path used by the command line
    let req = AskRequest {
        trial_id: s.split.test_ids[1],
        question: "What is in this image?".into(),
        beta: 0.0,
        mask_id: None,
        evidence_tokens: None,
        generation: None,
    };
    let direct = serve::answer(&s, &req).unwrap();
    let t = s.dataset.trial(req.trial_id).unwrap();
    let g = brainlang::generate::generate(&s.model, &t.betas, &req.question, &s.cfg.generation).unwrap();
    assert_eq!(direct.text, g.text);
}
