use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use vaex_core::classifier::{ClassifierConfig, ClassifierSnapshot};
use vaex_core::data::{generate_synthetic_dataset, load_dataset, AttributeSpec};
use vaex_core::{ModelConfig, VaexSnapshot};
use vaex_service::{router, ServiceState};

fn state() -> Arc<ServiceState> {
    let dir = tempfile::tempdir().unwrap();
    let spec = AttributeSpec { image_size: 8, ..AttributeSpec::default() };
    generate_synthetic_dataset(12, 5, &spec, dir.path()).unwrap();
    let (set, _) = load_dataset(dir.path(), 8).unwrap();
    let model = VaexSnapshot::<f32>::init(ModelConfig::tiny(), 1).unwrap();
    let cls = ClassifierSnapshot::init(ClassifierConfig { image_size: 8, widths: vec![4, 4, 8, 8], ..Default::default() }, 2).unwrap();
    Arc::new(ServiceState::new(model, cls, set).unwrap())
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap()
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn decode_png(b64: &str) -> image::RgbImage {
    let bytes = B64.decode(b64).unwrap();
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).unwrap().to_rgb8()
}

#[tokio::test]
async fn model_info_fields() {
    let app = router(state(), None);
    let (status, body) = call(&app, get("/api/model/info")).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["K"], 2);
    assert_eq!(v["variant"], "adain");
    assert_eq!(v["class_count"], 2);
    assert_eq!(v["image_size"], 8);
    assert_eq!(v["checkpoint_hash"].as_str().unwrap().len(), 64);
    assert!(v.get("classifier_accuracy").is_some());
}

#[tokio::test]
async fn sample_listing_pages_and_is_stable() {
    let st = state();
    let app = router(st.clone(), None);
    let (status, a) = call(&app, get("/api/samples?page=0&page_size=5")).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, get("/api/samples?page=0&page_size=5")).await;
    assert_eq!(a, b);
    let page = json_of(&a);
    let items = page.as_array().unwrap();
    assert_eq!(items.len(), 5);
    for item in items {
        assert!(item["id"].is_string() && item["label"].is_u64());
        let p: Vec<f64> = item["probs_raw"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(decode_png(item["thumbnail"].as_str().unwrap()).dimensions(), (8, 8));
    }
    // the last page is short, past it is an error
    let (status, last) = call(&app, get("/api/samples?page=2&page_size=5")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&last).as_array().unwrap().len(), 2);
    for bad in ["/api/samples?page=3&page_size=5", "/api/samples?page_size=0", "/api/samples?page_size=100000", "/api/samples?page=-1"] {
        let (status, body) = call(&app, get(bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert!(json_of(&body)["error"].is_string());
    }
}

#[tokio::test]
async fn counterfactual_is_deterministic_per_seed() {
    let app = router(state(), None);
    let req = json!({"sample_id": "s0003", "target_class": 0, "r": 0.4, "seed": 99});
    let (s1, a) = call(&app, post("/api/counterfactual", req.clone())).await;
    let (s2, b) = call(&app, post("/api/counterfactual", req)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let v = json_of(&a);
    assert_eq!(v["seed"], 99);
    assert_eq!(v["r"], 0.4);
    for k in ["original_png", "reconstruction_png", "counterfactual_png"] {
        assert_eq!(decode_png(v[k].as_str().unwrap()).dimensions(), (8, 8), "{k}");
    }
    let probs: Vec<f64> = v["probs_counterfactual"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let argmax = if probs[1] > probs[0] { 1 } else { 0 };
    assert_eq!(v["success"], argmax == 0);

    let other = json!({"sample_id": "s0003", "target_class": 0, "r": 0.4, "seed": 100});
    let (_, c) = call(&app, post("/api/counterfactual", other)).await;
    assert_ne!(json_of(&c)["counterfactual_png"], v["counterfactual_png"]);
}

#[tokio::test]
async fn omitted_seed_is_drawn_and_returned() {
    let app = router(state(), None);
    let (status, a) = call(&app, post("/api/counterfactual", json!({"sample_id": "s0001", "target_class": 1, "r": 0.0}))).await;
    assert_eq!(status, StatusCode::OK);
    let a = json_of(&a);
    let seed = a["seed"].as_u64().unwrap();
    assert!(seed < vaex_service::MAX_DRAWN_SEED);
    let (_, b) = call(&app, post("/api/counterfactual", json!({"sample_id": "s0001", "target_class": 1, "r": 0.0, "seed": seed}))).await;
    assert_eq!(json_of(&b)["counterfactual_png"], a["counterfactual_png"]);
}

#[tokio::test]
async fn counterfactual_error_paths() {
    let app = router(state(), None);
    let cases = [
        (json!({"sample_id": "nope", "target_class": 0, "r": 0.5}), StatusCode::NOT_FOUND, Some("sample_id")),
        (json!({"sample_id": "s0001", "target_class": 0, "r": 1.5}), StatusCode::UNPROCESSABLE_ENTITY, Some("r")),
        (json!({"sample_id": "s0001", "target_class": 0, "r": -0.1}), StatusCode::UNPROCESSABLE_ENTITY, Some("r")),
        (json!({"sample_id": "s0001", "target_class": 7, "r": 0.5}), StatusCode::UNPROCESSABLE_ENTITY, Some("target_class")),
        (
            json!({"sample_id": "s0001", "target_class": 0, "r": 0.5, "intervention": "magic"}),
            StatusCode::UNPROCESSABLE_ENTITY,
            Some("intervention"),
        ),
        (json!({"sample_id": "s0001", "r": 0.5}), StatusCode::UNPROCESSABLE_ENTITY, None),
    ];
    for (body, code, field) in cases {
        let (status, out) = call(&app, post("/api/counterfactual", body.clone())).await;
        assert_eq!(status, code, "{body}");
        let v = json_of(&out);
        assert!(v["error"].is_string());
        assert_eq!(v["field"].as_str(), field, "{body}");
    }
    let raw = Request::post("/api/counterfactual").header(header::CONTENT_TYPE, "application/json").body(Body::from("{not json")).unwrap();
    let (status, out) = call(&app, raw).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json_of(&out)["error"].is_string());
}

#[tokio::test]
async fn sweep_returns_one_payload_per_r_in_order() {
    let app = router(state(), None);
    let r_list = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let (status, body) = call(&app, post("/api/sweep", json!({"sample_id": "s0002", "target_class": 1, "r_list": r_list, "seed": 5}))).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    let items = v.as_array().unwrap();
    assert_eq!(items.len(), 6);
    for (item, r) in items.iter().zip(r_list) {
        assert_eq!(item["r"], r);
        assert_eq!(item["seed"], 5);
    }
    // each entry equals the single-r endpoint with the same seed
    let (_, single) = call(&app, post("/api/counterfactual", json!({"sample_id": "s0002", "target_class": 1, "r": 0.6, "seed": 5}))).await;
    assert_eq!(json_of(&single), items[3]);

    for (body, field) in [
        (json!({"sample_id": "s0002", "target_class": 1, "r_list": []}), "r_list"),
        (json!({"sample_id": "s0002", "target_class": 1, "r_list": [0.5, 2.0]}), "r_list"),
    ] {
        let (status, out) = call(&app, post("/api/sweep", body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(json_of(&out)["field"], field);
    }
    let (status, _) = call(&app, post("/api/sweep", json!({"sample_id": "zzz", "target_class": 1, "r_list": [0.5]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let app = router(state(), None);
    let req = json!({"sample_id": "s0005", "target_class": 1, "r": 0.3, "seed": 11});
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            let req = req.clone();
            tokio::spawn(async move { call(&app, post("/api/counterfactual", req)).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn cors_headers_present() {
    let app = router(state(), Some("http://localhost:5173"));
    let req = Request::get("/api/model/info").header(header::ORIGIN, "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(), "http://localhost:5173");
    let preflight = Request::options("/api/counterfactual")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(preflight).await.unwrap();
    assert!(resp.status().is_success());
}

#[tokio::test]
async fn every_payload_carries_the_checkpoint_hash() {
    let st = state();
    let app = router(st.clone(), None);
    let (_, body) = call(&app, post("/api/counterfactual", json!({"sample_id": "s0000", "target_class": 1, "r": 1.0, "seed": 1}))).await;
    assert_eq!(json_of(&body)["checkpoint_hash"], st.checkpoint_hash());
}
