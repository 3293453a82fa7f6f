use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use clickseg::data::{decode_mask, encode_rgb_png};
use clickseg::{Model, ModelConfig};
use clickseg_server::{router, ServiceConfig, SessionManager};
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    let model = Arc::new(Model::new(ModelConfig::toy()).unwrap());
    router(Arc::new(SessionManager::new(model, ServiceConfig::default())))
}

fn image_png(h: u32, w: u32) -> Vec<u8> {
    encode_rgb_png(&RgbImage::from_fn(w, h, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, 128]))).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn new_session(app: &Router, h: u32, w: u32) -> String {
    let (status, v) = call_json(app, "POST", "/sessions", Some(json!({ "image": B64.encode(image_png(h, w)) }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn full_interaction_over_http() {
    let app = app();
    let (status, v) = call_json(&app, "GET", "/healthz", None).await;
    assert_eq!((status, v["status"].as_str()), (StatusCode::OK, Some("ok")));

    let id = new_session(&app, 112, 112).await;
    for (k, (row, col, label)) in [(50, 50, "+"), (10, 100, "-"), (60, 30, "+")].into_iter().enumerate() {
        let (status, v) =
            call_json(&app, "POST", &format!("/sessions/{id}/clicks"), Some(json!({"row": row, "col": col, "label": label}))).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["clicks"], k + 1);
        let mask = decode_mask(&B64.decode(v["mask_png"].as_str().unwrap()).unwrap()).unwrap();
        assert_eq!(mask.dims(), (112, 112));
        assert_eq!(v["foreground_pixels"], mask.count());
        assert!(v["iou"].is_null());
    }
    let (_, m) = call_json(&app, "GET", "/metrics", None).await;
    assert_eq!((m["backbone_invocations"].as_u64(), m["head_invocations"].as_u64()), (Some(1), Some(3)));

    let (status, v) = call_json(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!((status, v["clicks"].as_u64()), (StatusCode::OK, Some(2)));

    let (status, v) = call_json(&app, "GET", &format!("/sessions/{id}/mask"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["clicks"].as_array().unwrap().len(), 2);
    assert_eq!(v["clicks"][1]["label"], "-");
    let from_json = B64.decode(v["mask_png"].as_str().unwrap()).unwrap();
    let (status, raw) = call(&app, "GET", &format!("/sessions/{id}/mask?format=png"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(raw, from_json);

    let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, v) = call_json(&app, "GET", &format!("/sessions/{id}/mask"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains(&id));
}

#[tokio::test]
async fn raw_png_upload() {
    let app = app();
    let req = Request::builder()
        .method("POST")
        .uri("/sessions")
        .header("content-type", "image/png")
        .body(Body::from(image_png(100, 75)))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(100), Some(75)));
    assert_eq!(v["token_grid"], json!([8, 6]));
}

#[tokio::test]
async fn request_errors_map_to_statuses() {
    let app = app();
    let (status, v) = call_json(&app, "POST", "/sessions", Some(json!({ "image": B64.encode(b"garbage") }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
    let (status, _) = call_json(&app, "POST", "/sessions", Some(json!({ "image": "%%%" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (_, m) = call_json(&app, "GET", "/metrics", None).await;
    assert_eq!(m["sessions_active"], 0);

    let id = new_session(&app, 56, 56).await;
    let (status, _) = call_json(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) =
        call_json(&app, "POST", &format!("/sessions/{id}/clicks"), Some(json!({"row": 56, "col": 0, "label": "+"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) =
        call_json(&app, "POST", &format!("/sessions/{id}/clicks"), Some(json!({"row": 1, "col": 0, "label": "?"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) =
        call_json(&app, "POST", "/sessions/nope/clicks", Some(json!({"row": 1, "col": 0, "label": "+"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "DELETE", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn reference_mask_gives_live_iou() {
    let app = app();
    let gt = clickseg::Mask::from_fn(56, 56, |i, j| i < 28 && j < 28);
    let body = json!({
        "image": B64.encode(image_png(56, 56)),
        "reference_mask": B64.encode(clickseg::data::encode_mask_png(&gt).unwrap()),
    });
    let (status, v) = call_json(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap();
    let (_, v) =
        call_json(&app, "POST", &format!("/sessions/{id}/clicks"), Some(json!({"row": 10, "col": 10, "label": "+"}))).await;
    let iou = v["iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));
}
