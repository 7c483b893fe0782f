use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use pccnn_core::data::{Image, Signature};
use pccnn_core::maskgen::Mask;
use pccnn_core::model::{ArchitectureConfig, ModelParams};
use pccnn_core::training::{file_sha256, save_checkpoint};
use pccnn_service::{image_to_json, mask_to_json, router, AppState, LoadedModel, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn config(signature: Signature) -> ArchitectureConfig {
    ArchitectureConfig {
        signature,
        prior_blocks: 1,
        prior_filters: 4,
        prior_kernel: 3,
        cond_blocks: 1,
        cond_filters: 4,
        cond_kernel: 3,
        head_hidden: None,
    }
}

fn binary_sig() -> Signature {
    Signature::new(5, 4, 1, 2).unwrap()
}

fn color_sig() -> Signature {
    Signature::new(4, 4, 3, 4).unwrap()
}

fn model(signature: Signature) -> LoadedModel {
    LoadedModel::new(ModelParams::init(&config(signature), 7).unwrap(), "test-model")
}

fn service(signature: Signature, max_queue: usize) -> axum::Router {
    let cfg = ServiceConfig {
        max_queue,
        workers: 1,
        threads: 2,
    };
    router(AppState::new(Some(model(signature)), &cfg))
}

fn binary_service() -> axum::Router {
    service(binary_sig(), 8)
}

fn test_image(s: Signature) -> Image {
    let pixels = (0..s.values()).map(|i| ((i * 7 + 3) % s.levels) as u8).collect();
    Image::new(s, pixels).unwrap()
}

/// Top two rows visible.
fn test_mask(s: Signature) -> Mask {
    let bits = (0..s.pixels()).map(|p| u8::from(p / s.width < 2)).collect();
    Mask::new(s.height, s.width, bits).unwrap()
}

fn inpaint_body(s: Signature, extra: Value) -> Value {
    let mut body = json!({
        "image": image_to_json(&test_image(s)),
        "mask": mask_to_json(&test_mask(s)),
        "num_samples": 4,
        "seed": 42,
    });
    for (k, v) in extra.as_object().unwrap() {
        body[k] = v.clone();
    }
    body
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn post(app: &axum::Router, uri: &str, body: &Value) -> (StatusCode, Value) {
    let (status, bytes) = call(app, "POST", uri, Some(serde_json::to_vec(body).unwrap())).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn grid_of(v: &Value) -> Vec<Vec<i64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_i64().unwrap()).collect())
        .collect()
}

#[tokio::test]
async fn health_reports_loaded_model() {
    let (status, body) = call(&binary_service(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let body: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["model_id"], "test-model");
    assert_eq!(body["signature"], json!({"height": 5, "width": 4, "channels": 1, "levels": 2}));
}

#[tokio::test]
async fn health_signature_and_id_come_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pccn");
    let params = ModelParams::init(&config(color_sig()), 1).unwrap();
    save_checkpoint(&params, None, &path).unwrap();
    let loaded = LoadedModel::from_checkpoint(&path).unwrap();
    let app = router(AppState::new(Some(loaded), &ServiceConfig::default()));
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let body: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(body["signature"], serde_json::to_value(params.signature()).unwrap());
    let digest = file_sha256(&path).unwrap();
    assert!(digest.starts_with(body["model_id"].as_str().unwrap()));
}

#[tokio::test]
async fn checkpoint_load_failure_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.pccn");
    let err = LoadedModel::from_checkpoint(&missing).unwrap_err();
    assert!(err.to_string().contains("absent.pccn"));
}

#[tokio::test]
async fn no_model_gives_503_everywhere() {
    let app = router(AppState::new(None, &ServiceConfig::default()));
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let body: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(body["code"], "model_unavailable");
    for uri in ["/inpaint", "/probmap"] {
        let (status, _) = post(&app, uri, &inpaint_body(binary_sig(), json!({}))).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
    }
}

#[tokio::test]
async fn inpaint_returns_sorted_samples_that_keep_visible_pixels() {
    let s = binary_sig();
    let (status, body) = post(&binary_service(), "/inpaint", &inpaint_body(s, json!({}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["seed"], 42);
    assert_eq!(body["model_id"], "test-model");
    let samples = body["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 4);
    let lls: Vec<f64> = samples.iter().map(|x| x["log_likelihood"].as_f64().unwrap()).collect();
    assert!(lls.windows(2).all(|w| w[0] >= w[1]), "{lls:?}");
    let source = grid_of(&image_to_json(&test_image(s)));
    let mask = test_mask(s);
    let hidden = mask.hidden_count() as f64;
    for sample in samples {
        let img = grid_of(&sample["image"]);
        for y in 0..s.height {
            for x in 0..s.width {
                if mask.is_visible(y, x) {
                    assert_eq!(img[y][x], source[y][x]);
                }
                assert!((0..2).contains(&img[y][x]));
            }
        }
        let ll = sample["log_likelihood"].as_f64().unwrap();
        let mean = sample["per_pixel_mean_log_likelihood"].as_f64().unwrap();
        assert!(ll < 0.0);
        assert!((mean - ll / hidden).abs() < 1e-9);
    }
}

#[tokio::test]
async fn all_visible_mask_returns_input_with_zero_likelihood() {
    let s = color_sig();
    let full = mask_to_json(&Mask::all_visible(s.height, s.width));
    let (status, body) = post(&service(s, 4), "/inpaint", &inpaint_body(s, json!({"mask": full}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let input = image_to_json(&test_image(s));
    for sample in body["samples"].as_array().unwrap() {
        assert_eq!(sample["image"], input);
        assert_eq!(sample["log_likelihood"].as_f64().unwrap(), 0.0);
    }
}

#[tokio::test]
async fn seeded_requests_are_byte_identical() {
    let app = binary_service();
    let body = serde_json::to_vec(&inpaint_body(binary_sig(), json!({"num_samples": 6, "temperature": 1.5}))).unwrap();
    let (a, b) = tokio::join!(
        call(&app, "POST", "/inpaint", Some(body.clone())),
        call(&app, "POST", "/inpaint", Some(body.clone()))
    );
    let c = call(&app, "POST", "/inpaint", Some(body)).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.1, b.1);
    assert_eq!(a.1, c.1);
}

#[tokio::test]
async fn different_seeds_give_different_samples() {
    let app = binary_service();
    let (_, a) = post(&app, "/inpaint", &inpaint_body(binary_sig(), json!({"seed": 1, "num_samples": 8}))).await;
    let (_, b) = post(&app, "/inpaint", &inpaint_body(binary_sig(), json!({"seed": 2, "num_samples": 8}))).await;
    assert_ne!(a["samples"], b["samples"]);
}

#[tokio::test]
async fn missing_seed_is_chosen_and_reported() {
    let mut body = inpaint_body(binary_sig(), json!({}));
    body.as_object_mut().unwrap().remove("seed");
    let (status, resp) = post(&binary_service(), "/inpaint", &body).await;
    assert_eq!(status, StatusCode::OK);
    let seed = resp["seed"].as_u64().unwrap();
    body["seed"] = json!(seed);
    let (_, again) = post(&binary_service(), "/inpaint", &body).await;
    assert_eq!(again["samples"], resp["samples"]);
}

async fn expect_error(app: &axum::Router, uri: &str, body: Value, status: StatusCode, field: &str) {
    let (got, resp) = post(app, uri, &body).await;
    assert_eq!(got, status, "{resp}");
    assert_eq!(resp["field"], field, "{resp}");
    assert!(resp["code"].is_string());
    assert!(!resp["message"].as_str().unwrap().is_empty());
}

#[tokio::test]
async fn out_of_range_values_are_422() {
    let app = binary_service();
    let s = binary_sig();
    let u = StatusCode::UNPROCESSABLE_ENTITY;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"num_samples": 17})), u, "num_samples").await;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"num_samples": 0})), u, "num_samples").await;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"num_samples": -3})), u, "num_samples").await;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"temperature": 0.05})), u, "temperature").await;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"temperature": 2.5})), u, "temperature").await;
    let mut img = grid_of(&image_to_json(&test_image(s)));
    img[1][2] = 2;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"image": img})), u, "image").await;
    img[1][2] = -1;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"image": img})), u, "image").await;
    let mut mask = grid_of(&mask_to_json(&test_mask(s)));
    mask[4][0] = 3;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"mask": mask})), u, "mask").await;
}

#[tokio::test]
async fn malformed_and_mismatched_requests_are_400() {
    let app = binary_service();
    let s = binary_sig();
    let b = StatusCode::BAD_REQUEST;
    let img = grid_of(&image_to_json(&test_image(s)));
    let short: Vec<_> = img[..4].to_vec();
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"image": short})), b, "image").await;
    let mut ragged = img.clone();
    ragged[2].push(0);
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"image": ragged})), b, "image").await;
    let wide_mask = vec![vec![1; 5]; 5];
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"mask": wide_mask})), b, "mask").await;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"image": "pixels"})), b, "image").await;
    let mut fractional = image_to_json(&test_image(s));
    fractional[0][0] = json!(0.5);
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"image": fractional})), b, "image").await;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"num_samples": "four"})), b, "num_samples").await;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"seed": -1})), b, "seed").await;
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"temperature": "hot"})), b, "temperature").await;
    let mut no_mask = inpaint_body(s, json!({}));
    no_mask.as_object_mut().unwrap().remove("mask");
    expect_error(&app, "/inpaint", no_mask, b, "mask").await;
    expect_error(&app, "/inpaint", json!([1, 2]), b, "body").await;
    let (status, bytes) = call(&app, "POST", "/inpaint", Some(b"{not json".to_vec())).await;
    assert_eq!(status, b);
    let body: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(body["field"], "body");
}

#[tokio::test]
async fn color_images_need_channel_lists() {
    let s = color_sig();
    let app = service(s, 4);
    let flat = vec![vec![0; 4]; 4];
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"image": flat})), StatusCode::BAD_REQUEST, "image").await;
    let two_channels = vec![vec![vec![0, 1]; 4]; 4];
    expect_error(&app, "/inpaint", inpaint_body(s, json!({"image": two_channels})), StatusCode::BAD_REQUEST, "image").await;
    let (status, body) = post(&app, "/inpaint", &inpaint_body(s, json!({"num_samples": 2}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let px = &body["samples"][0]["image"][3][3];
    assert_eq!(px.as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn full_queue_is_429_after_validation() {
    let app = service(binary_sig(), 0);
    let (status, body) = post(&app, "/inpaint", &inpaint_body(binary_sig(), json!({}))).await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(body["code"], "queue_full");
    // Invalid requests are rejected before they need a queue slot.
    let (status, _) = post(&app, "/inpaint", &inpaint_body(binary_sig(), json!({"num_samples": 17}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = post(&app, "/probmap", &inpaint_body(binary_sig(), json!({}))).await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS);
}

#[tokio::test]
async fn probmap_covers_grid_with_fixed_visible_pixels() {
    let s = binary_sig();
    let (status, body) = post(&binary_service(), "/probmap", &inpaint_body(s, json!({}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let map = body["map"].as_array().unwrap();
    assert_eq!(map.len(), s.height);
    let img = test_image(s);
    let mask = test_mask(s);
    for (y, row) in map.iter().enumerate() {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), s.width);
        for (x, p) in row.iter().enumerate() {
            let p = p.as_f64().unwrap();
            if mask.is_visible(y, x) {
                assert_eq!(p, f64::from(img.get(y, x, 0)));
            } else {
                assert!(p > 0.0 && p < 1.0, "{p}");
            }
        }
    }
}

#[tokio::test]
async fn probmap_rejects_non_binary_model() {
    let s = color_sig();
    let (status, body) = post(&service(s, 4), "/probmap", &inpaint_body(s, json!({}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "unsupported_model");
}

#[tokio::test]
async fn probmap_validates_shapes() {
    let bad = json!({"image": vec![vec![0; 4]; 5], "mask": vec![vec![1; 4]; 3]});
    expect_error(&binary_service(), "/probmap", bad, StatusCode::BAD_REQUEST, "mask").await;
}
