//! Inference over a trained stage-3 checkpoint: hallucination, attribute
//! manipulation and an HTTP API.
//!
//! Images travel as base64-encoded PNG. Every error body is
//! `{"code": ..., "message": ...}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use halluface_autograd::{no_grad, Var};
use halluface_core::classifier::Classifier;
use halluface_core::critic::Critic;
use halluface_core::data::LR_SIZE;
use halluface_core::generator::{attributes_to_var, Generator};
use halluface_core::image::{images_to_tensor, tensor_to_images};
use halluface_core::nn::ForwardCtx;
use halluface_core::trainer::load_checkpoint;
use halluface_core::{AttributeVector, Error, Image, ATTRIBUTE_NAMES};
use serde::{Deserialize, Serialize};

/// A machine-readable failure with its HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", message: message.into() }
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ServiceError {}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidAttributes(_) => Self::bad_request("invalid_attributes", e.to_string()),
            Error::UnknownAttribute(_) => Self::bad_request("unknown_attribute", e.to_string()),
            Error::InvalidImage(_) | Error::Decode(_) | Error::Shape(_) => {
                Self::bad_request("invalid_image", e.to_string())
            }
            other => Self::internal(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code, message: &self.message };
        (self.status, Json(body)).into_response()
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

/// A PNG image carried as base64 text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImagePayload(pub String);

impl ImagePayload {
    pub fn encode(image: &Image) -> ServiceResult<Self> {
        Ok(Self(BASE64.encode(image.encode_png()?)))
    }

    pub fn decode(&self) -> ServiceResult<Image> {
        let bytes = BASE64
            .decode(self.0.trim())
            .map_err(|e| ServiceError::bad_request("invalid_image", format!("payload is not base64: {e}")))?;
        Ok(Image::decode_png(&bytes)?)
    }

    /// Decodes a low-resolution input, which must be exactly 16×16.
    pub fn decode_lr(&self) -> ServiceResult<Image> {
        let img = self.decode()?;
        if img.height() != LR_SIZE || img.width() != LR_SIZE {
            return Err(ServiceError::bad_request(
                "invalid_image",
                format!("input must be {LR_SIZE}x{LR_SIZE}, got {}x{}", img.width(), img.height()),
            ));
        }
        Ok(img)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HallucinationRequest {
    pub lr_image: ImagePayload,
    /// Absent means the classifier's prediction for `lr_image` is used.
    #[serde(default)]
    pub attributes: Option<Vec<f64>>,
    #[serde(default)]
    pub return_stages: bool,
    #[serde(default)]
    pub return_attribute_predictions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationResponse {
    /// Keyed by side length; `"128"` is always present.
    pub outputs: BTreeMap<String, ImagePayload>,
    pub used_attributes: AttributeVector,
    pub classifier_attributes: AttributeVector,
    /// Keyed by stage number.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_attribute_predictions: Option<BTreeMap<String, AttributeVector>>,
    /// Edits applied on top of the base vector, for manipulation requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edits: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub lr_image: ImagePayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub attributes: AttributeVector,
}

/// Read-only networks restored from a stage-3 checkpoint.
pub struct ServiceState {
    generator: Generator,
    classifier: Classifier,
    critics: Vec<Critic>,
}

impl std::fmt::Debug for ServiceState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceState").finish_non_exhaustive()
    }
}

/// Loads the networks of a checkpoint; anything below stage 3 is refused.
pub fn load_service(checkpoint: &Path) -> halluface_core::Result<ServiceState> {
    let state = load_checkpoint(checkpoint)?;
    if state.active_stage < 3 {
        return Err(Error::Config(format!(
            "the service needs a stage-3 checkpoint; {} is at stage {}",
            checkpoint.display(),
            state.active_stage
        )));
    }
    Ok(ServiceState { generator: state.generator, classifier: state.classifier, critics: state.critics })
}

impl ServiceState {
    pub fn new(generator: Generator, classifier: Classifier, critics: Vec<Critic>) -> Self {
        Self { generator, classifier, critics }
    }

    pub fn classify(&self, lr: &Image) -> ServiceResult<AttributeVector> {
        Ok(self.classifier.classify(lr)?)
    }

    pub fn hallucinate(&self, req: &HallucinationRequest) -> ServiceResult<HallucinationResponse> {
        let lr = req.lr_image.decode_lr()?;
        let attributes = req.attributes.as_deref().map(AttributeVector::from_slice).transpose()?;
        self.run(&lr, attributes, req.return_stages, req.return_attribute_predictions, None)
    }

    /// Hallucination with `edits` applied to `base` (or to the classifier's
    /// prediction when `base` is absent).
    pub fn manipulate(
        &self,
        lr: &Image,
        base: Option<AttributeVector>,
        edits: &BTreeMap<String, f64>,
        return_stages: bool,
    ) -> ServiceResult<HallucinationResponse> {
        let mut attrs = match base {
            Some(a) => a,
            None => self.classify(lr)?,
        };
        for (name, value) in edits {
            attrs = attrs.with(name, *value)?;
        }
        self.run(lr, Some(attrs), return_stages, false, Some(edits.clone()))
    }

    fn run(
        &self,
        lr: &Image,
        attributes: Option<AttributeVector>,
        return_stages: bool,
        return_predictions: bool,
        edits: Option<BTreeMap<String, f64>>,
    ) -> ServiceResult<HallucinationResponse> {
        let classifier_attributes = self.classify(lr)?;
        let used = attributes.unwrap_or(classifier_attributes);
        let out = no_grad(|| {
            self.generator.forward(
                &Var::constant(images_to_tensor(std::slice::from_ref(lr))),
                &attributes_to_var(&[used]),
                3,
                &mut ForwardCtx::eval(),
            )
        })?;
        let mut outputs = BTreeMap::new();
        for (i, merged) in out.merged.iter().enumerate() {
            let size = merged.shape()[2];
            if return_stages || i + 1 == out.merged.len() {
                let img = tensor_to_images(merged.value()).remove(0);
                outputs.insert(size.to_string(), ImagePayload::encode(&img)?);
            }
        }
        let critic_attribute_predictions = if return_predictions {
            let mut map = BTreeMap::new();
            for (critic, merged) in self.critics.iter().zip(&out.merged) {
                let attr = no_grad(|| critic.forward(merged))?.attr;
                let row: Vec<f64> = attr.value().iter().copied().collect();
                map.insert(critic.stage().to_string(), AttributeVector::from_slice(&row)?);
            }
            Some(map)
        } else {
            None
        };
        Ok(HallucinationResponse {
            outputs,
            used_attributes: used,
            classifier_attributes,
            critic_attribute_predictions,
            edits,
        })
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
}

fn body<T>(payload: std::result::Result<Json<T>, JsonRejection>) -> ServiceResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ServiceError {
        status: e.status(),
        code: "malformed_request",
        message: e.body_text(),
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ServiceResult<T> + Send + 'static) -> ServiceResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::internal(e.to_string()))?
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok" })
}

async fn attributes() -> Json<Vec<&'static str>> {
    Json(ATTRIBUTE_NAMES.to_vec())
}

async fn hallucinate_route(
    State(svc): State<Arc<ServiceState>>,
    payload: std::result::Result<Json<HallucinationRequest>, JsonRejection>,
) -> ServiceResult<Json<HallucinationResponse>> {
    let req = body(payload)?;
    blocking(move || svc.hallucinate(&req)).await.map(Json)
}

async fn classify_route(
    State(svc): State<Arc<ServiceState>>,
    payload: std::result::Result<Json<ClassifyRequest>, JsonRejection>,
) -> ServiceResult<Json<ClassifyResponse>> {
    let req = body(payload)?;
    blocking(move || {
        let lr = req.lr_image.decode_lr()?;
        Ok(ClassifyResponse { attributes: svc.classify(&lr)? })
    })
    .await
    .map(Json)
}

/// The HTTP API over a loaded service.
pub fn router(svc: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/attributes", get(attributes))
        .route("/hallucinate", post(hallucinate_route))
        .route("/classify", post(classify_route))
        .with_state(svc)
}

/// Serves the API until the process is stopped.
pub async fn serve(svc: Arc<ServiceState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await
}
