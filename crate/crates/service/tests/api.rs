use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use halluface_core::trainer::{save_checkpoint, TrainConfig, TrainState};
use halluface_core::{AttributeVector, Image, ATTRIBUTE_NAMES};
use halluface_service::{
    load_service, router, HallucinationRequest, HallucinationResponse, ImagePayload, ServiceError, ServiceState,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.generator.base_channels = 8;
    cfg.critic.base_width = 4;
    cfg.critic.max_width = 8;
    cfg.classifier.width = 4;
    cfg.seed = 3;
    cfg
}

fn write_checkpoint(dir: &Path, stage: usize) -> PathBuf {
    let mut state = TrainState::new(tiny_config()).unwrap();
    state.active_stage = stage;
    let path = dir.join(format!("stage{stage}.ckpt"));
    save_checkpoint(&state, &path).unwrap();
    path
}

fn service() -> (tempfile::TempDir, Arc<ServiceState>) {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), 3);
    let svc = Arc::new(load_service(&path).unwrap());
    (dir, svc)
}

fn lr_image(seed: u32) -> Image {
    let px = ndarray::Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
        ((y * 7 + x * 13 + c * 5 + seed as usize * 31) % 251) as f64 / 255.0
    });
    Image::from_rgb8(&Image::from_clamped(px).to_rgb8())
}

fn request(attributes: Option<Vec<f64>>) -> HallucinationRequest {
    HallucinationRequest {
        lr_image: ImagePayload::encode(&lr_image(1)).unwrap(),
        attributes,
        return_stages: false,
        return_attribute_predictions: false,
    }
}

async fn call(svc: &Arc<ServiceState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b)).unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    (&a.pixels() - &b.pixels()).mapv(f64::abs).mean().unwrap()
}

#[tokio::test]
async fn health_and_schema() {
    let (_d, svc) = service();
    let (status, body) = call(&svc, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok"}));
    let (status, body) = call(&svc, "GET", "/attributes", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!(ATTRIBUTE_NAMES));
}

#[tokio::test]
async fn default_attributes_come_from_the_classifier() {
    let (_d, svc) = service();
    let body = serde_json::to_string(&request(None)).unwrap();
    let (status, resp) = call(&svc, "POST", "/hallucinate", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: HallucinationResponse = serde_json::from_value(resp).unwrap();
    let (_, classified) = call(
        &svc,
        "POST",
        "/classify",
        Some(json!({"lr_image": ImagePayload::encode(&lr_image(1)).unwrap()}).to_string()),
    )
    .await;
    let classified: AttributeVector = serde_json::from_value(classified["attributes"].clone()).unwrap();
    assert_eq!(resp.used_attributes, classified);
    assert_eq!(resp.classifier_attributes, classified);
    assert_eq!(resp.outputs.keys().collect::<Vec<_>>(), vec!["128"]);
    let hr = resp.outputs["128"].decode().unwrap();
    assert_eq!((hr.height(), hr.width()), (128, 128));
}

#[test]
fn explicit_classifier_attributes_reproduce_the_default_path() {
    let (_d, svc) = service();
    let default = svc.hallucinate(&request(None)).unwrap();
    let explicit = svc.hallucinate(&request(Some(default.classifier_attributes.values().to_vec()))).unwrap();
    assert_eq!(default.outputs, explicit.outputs);
    assert_eq!(default.used_attributes, explicit.used_attributes);
}

#[test]
fn used_attributes_echo_the_request() {
    let (_d, svc) = service();
    let values = vec![0.0, 1.0, 0.25, 0.5, 0.0, 1.0, 0.0, 1.0, 0.75, 0.0, 1.0, 0.125];
    let resp = svc.hallucinate(&request(Some(values.clone()))).unwrap();
    assert_eq!(resp.used_attributes.values().to_vec(), values);
}

#[test]
fn stages_and_critic_predictions_on_request() {
    let (_d, svc) = service();
    let mut req = request(None);
    req.return_stages = true;
    req.return_attribute_predictions = true;
    let resp = svc.hallucinate(&req).unwrap();
    for (key, side) in [("32", 32), ("64", 64), ("128", 128)] {
        let img = resp.outputs[key].decode().unwrap();
        assert_eq!((img.height(), img.width()), (side, side));
    }
    let preds = resp.critic_attribute_predictions.unwrap();
    assert_eq!(preds.keys().collect::<Vec<_>>(), vec!["1", "2", "3"]);
    for v in preds.values() {
        assert!(v.values().iter().all(|p| *p > 0.0 && *p < 1.0));
    }
}

#[test]
fn flipping_an_attribute_changes_the_output() {
    let (_d, svc) = service();
    let zeros = svc.hallucinate(&request(Some(vec![0.0; 12]))).unwrap();
    let mut flipped = vec![0.0; 12];
    flipped[6] = 1.0;
    let ones = svc.hallucinate(&request(Some(flipped))).unwrap();
    let a = zeros.outputs["128"].decode().unwrap();
    let b = ones.outputs["128"].decode().unwrap();
    assert!(mean_abs_diff(&a, &b) > 0.0);
}

#[tokio::test]
async fn out_of_range_attributes_are_client_errors() {
    let (_d, svc) = service();
    let mut values = vec![0.5; 12];
    values[3] = 1.5;
    let body = serde_json::to_string(&request(Some(values))).unwrap();
    let (status, resp) = call(&svc, "POST", "/hallucinate", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(resp["code"], "invalid_attributes");
    assert!(resp["message"].as_str().unwrap().contains("Blond Hair"));

    let body = serde_json::to_string(&request(Some(vec![0.5; 11]))).unwrap();
    let (status, resp) = call(&svc, "POST", "/hallucinate", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(resp["code"], "invalid_attributes");
}

#[tokio::test]
async fn malformed_images_are_client_errors() {
    let (_d, svc) = service();
    let cases = [
        "%%% not base64 %%%".to_string(),
        ImagePayload(base64_of(b"plain bytes")).0,
        jpeg_payload(),
        ImagePayload::encode(&Image::constant(32, 32, 0.5)).unwrap().0,
    ];
    for payload in cases {
        for uri in ["/hallucinate", "/classify"] {
            let body = json!({"lr_image": payload}).to_string();
            let (status, resp) = call(&svc, "POST", uri, Some(body)).await;
            assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
            assert_eq!(resp["code"], "invalid_image");
            assert!(!resp["message"].as_str().unwrap().is_empty());
        }
    }
}

fn base64_of(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn jpeg_payload() -> String {
    let rgb = lr_image(2).to_rgb8();
    let mut bytes = Vec::new();
    image::codecs::jpeg::JpegEncoder::new(&mut bytes).encode_image(&rgb).unwrap();
    base64_of(&bytes)
}

#[tokio::test]
async fn malformed_json_is_a_client_error() {
    let (_d, svc) = service();
    for body in ["{", "{\"lr_image\": 3}", "{\"unexpected\": true}"] {
        let (status, resp) = call(&svc, "POST", "/hallucinate", Some(body.to_string())).await;
        assert!(status.is_client_error(), "{body}: {status}");
        assert_eq!(resp["code"], "malformed_request");
    }
}

#[test]
fn internal_failures_map_to_server_errors() {
    let e = ServiceError::from(halluface_core::Error::NonFinite("generator.l1".into()));
    assert!(e.status.is_server_error());
    assert_eq!(e.code, "internal");
}

#[test]
fn stage_one_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), 1);
    let err = load_service(&path).unwrap_err();
    assert!(err.to_string().contains("stage-3"), "{err}");
}

#[test]
fn missing_or_corrupt_checkpoints_fail_to_load() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_service(&dir.path().join("absent.ckpt")).is_err());
    let path = write_checkpoint(dir.path(), 3);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(load_service(&path).is_err());
}

#[test]
fn independent_loads_answer_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), 3);
    let a = load_service(&path).unwrap();
    let b = load_service(&path).unwrap();
    let mut req = request(None);
    req.return_stages = true;
    req.return_attribute_predictions = true;
    assert_eq!(a.hallucinate(&req).unwrap(), b.hallucinate(&req).unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_return_identical_bodies() {
    let (_d, svc) = service();
    let body = serde_json::to_string(&request(None)).unwrap();
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let svc = svc.clone();
            let body = body.clone();
            tokio::spawn(async move { call(&svc, "POST", "/hallucinate", Some(body)).await })
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

#[test]
fn manipulation_with_no_edits_matches_hallucination() {
    let (_d, svc) = service();
    let lr = lr_image(1);
    let plain = svc.hallucinate(&request(None)).unwrap();
    let edited = svc.manipulate(&lr, None, &BTreeMap::new(), false).unwrap();
    assert_eq!(plain.outputs, edited.outputs);
    assert_eq!(plain.used_attributes, edited.used_attributes);
    assert_eq!(edited.edits, Some(BTreeMap::new()));
}

#[test]
fn manipulation_applies_edits_by_name() {
    let (_d, svc) = service();
    let lr = lr_image(1);
    let base = AttributeVector::zeros();
    let edits = BTreeMap::from([("Bald".to_string(), 1.0), ("Young".to_string(), 0.5)]);
    let resp = svc.manipulate(&lr, Some(base), &edits, false).unwrap();
    assert_eq!(resp.used_attributes.get(0), 1.0);
    assert_eq!(resp.used_attributes.get(11), 0.5);
    assert_eq!(resp.edits.as_ref(), Some(&edits));
    let plain = svc.manipulate(&lr, Some(base), &BTreeMap::new(), false).unwrap();
    assert_ne!(plain.outputs["128"], resp.outputs["128"]);
}

#[test]
fn manipulation_rejects_bad_edits() {
    let (_d, svc) = service();
    let lr = lr_image(1);
    let unknown = BTreeMap::from([("Freckles".to_string(), 1.0)]);
    let err = svc.manipulate(&lr, None, &unknown, false).unwrap_err();
    assert_eq!(err.code, "unknown_attribute");
    for name in ATTRIBUTE_NAMES {
        assert!(err.message.contains(name), "{}", err.message);
    }
    let too_big = BTreeMap::from([("Bald".to_string(), 1.5)]);
    let err = svc.manipulate(&lr, None, &too_big, false).unwrap_err();
    assert_eq!(err.code, "invalid_attributes");
}
