#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pal_core::b64;
use pal_core::manifest::{FrameLine, ManifestLine};
use pal_core::pipeline::{Pipeline, PipelineConfig};
use pal_service::{router, AppState};
use serde_json::Value;
use tower::ServiceExt;

pub const DIM: usize = 8;

pub fn config() -> PipelineConfig {
    PipelineConfig { dim: DIM, ..PipelineConfig::default() }
}

pub fn app(config: PipelineConfig) -> (AppState, Router) {
    let state = AppState::new(Pipeline::new(config));
    (state.clone(), router(state))
}

pub fn axis(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[i] = 1.0;
    v
}

/// `axis(i)` nudged along `axis(j)`.
pub fn near(i: usize, j: usize, by: f64) -> Vec<f64> {
    let mut v = axis(i);
    v[j] += by;
    v
}

pub fn frame(id: &str, at: i64, v: &[f64]) -> FrameLine {
    let mut f = FrameLine::new(id, at);
    f.embedding = Some(b64::encode_f32(v));
    f.lat = Some(42.36);
    f.lon = Some(-71.09);
    f
}

pub fn jsonl(lines: &[ManifestLine]) -> String {
    lines.iter().map(|l| serde_json::to_string(l).unwrap() + "\n").collect()
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    send(app, "GET", uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    send(app, "POST", uri, Some(body.to_string())).await
}

pub async fn ingest(app: &Router, lines: &[ManifestLine]) -> (StatusCode, Value) {
    send(app, "POST", "/api/ingest", Some(jsonl(lines))).await
}
