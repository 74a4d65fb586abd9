//! HTTP inference service.
//!
//! `POST /predict` takes a multipart form with an `image` field and returns
//! per-disease probabilities, the five most likely findings, the diseases at
//! or above their decision threshold and, on request, a Grad-CAM overlay.
//! `GET /health` reports the loaded model.
//!
//! Plain predictions run concurrently against a shared read-only model.
//! Grad-CAM requests go through one dedicated worker thread.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use dacnet_core::evaluation::ThresholdSet;
use dacnet_core::explain::{encode_png, grad_cam, overlay, HeatMap};
use dacnet_core::transforms::{build_eval_transform, decode_image, EvalTransform, GrayImage};
use dacnet_core::{Checkpoint, Classifier, DiseaseLabel, ImageTensor, NUM_DISEASES};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;

pub const MAX_UPLOAD_BYTES: usize = 20 * 1024 * 1024;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub thresholds: Option<PathBuf>,
}

/// A model ready to serve.
pub struct LoadedModel {
    model: Classifier,
    transform: EvalTransform,
    thresholds: Option<ThresholdSet>,
    fingerprint: String,
    recipe: String,
}

impl LoadedModel {
    pub fn new(ckpt: &Checkpoint, thresholds: Option<ThresholdSet>) -> dacnet_core::Result<Self> {
        let device = dacnet_core::Device::Cpu;
        Ok(Self {
            model: ckpt.build_model(&device)?,
            transform: build_eval_transform(&ckpt.recipe.transform)?,
            thresholds,
            fingerprint: ckpt.fingerprint.clone(),
            recipe: ckpt.recipe.name.clone(),
        })
    }

    pub fn from_files(config: &ServiceConfig) -> dacnet_core::Result<Self> {
        let ckpt = Checkpoint::load(&config.checkpoint, &dacnet_core::Device::Cpu)?;
        let thresholds = config.thresholds.as_deref().map(ThresholdSet::load).transpose()?;
        if let Some(t) = &thresholds {
            if t.provenance == dacnet_core::evaluation::Provenance::Test {
                return Err(dacnet_core::Error::Leakage(
                    "refusing to serve thresholds fitted on the test split".into(),
                ));
            }
        }
        Self::new(&ckpt, thresholds)
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn threshold(&self, d: DiseaseLabel) -> f64 {
        self.thresholds.as_ref().map_or(DEFAULT_THRESHOLD, |t| t.get(d))
    }

    fn probabilities(&self, image: &ImageTensor) -> dacnet_core::Result<[f32; NUM_DISEASES]> {
        let batch = ImageTensor::stack(std::slice::from_ref(image), self.model.device())?;
        Ok(self.model.predict_probabilities(&batch)?[0])
    }
}

struct CamJob {
    model: Arc<LoadedModel>,
    image: ImageTensor,
    gray: GrayImage,
    disease: DiseaseLabel,
    reply: oneshot::Sender<dacnet_core::Result<Vec<u8>>>,
}

fn spawn_cam_worker() -> mpsc::Sender<CamJob> {
    let (tx, rx) = mpsc::channel::<CamJob>();
    std::thread::Builder::new()
        .name("grad-cam".into())
        .spawn(move || {
            for job in rx {
                let out = grad_cam(&job.model.model, &job.image, job.disease)
                    .and_then(|h: HeatMap| overlay(&h, &job.gray))
                    .and_then(|img| encode_png(&img));
                let _ = job.reply.send(out);
            }
        })
        .expect("spawn grad-cam worker");
    tx
}

enum ModelSlot {
    Loading,
    Ready(Arc<LoadedModel>),
    Failed(String),
}

pub struct AppState {
    slot: RwLock<ModelSlot>,
    started: Instant,
    cam: std::sync::Mutex<mpsc::Sender<CamJob>>,
}

impl AppState {
    /// State with no model yet; requests get 503 until [`AppState::set_model`].
    pub fn loading() -> Arc<Self> {
        Arc::new(Self {
            slot: RwLock::new(ModelSlot::Loading),
            started: Instant::now(),
            cam: std::sync::Mutex::new(spawn_cam_worker()),
        })
    }

    pub fn with_model(model: LoadedModel) -> Arc<Self> {
        let state = Self::loading();
        state.set_model(model);
        state
    }

    pub fn set_model(&self, model: LoadedModel) {
        *self.slot.write().expect("model slot poisoned") = ModelSlot::Ready(Arc::new(model));
    }

    pub fn set_failed(&self, reason: String) {
        *self.slot.write().expect("model slot poisoned") = ModelSlot::Failed(reason);
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        match &*self.slot.read().expect("model slot poisoned") {
            ModelSlot::Ready(m) => Ok(m.clone()),
            ModelSlot::Loading => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is still loading")),
            ModelSlot::Failed(e) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                format!("model failed to load: {e}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub disease: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub disease: String,
    /// Base64-encoded PNG of the overlay on the 224×224 input.
    pub png_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub probabilities: BTreeMap<String, f64>,
    pub top5: Vec<Finding>,
    pub flagged: Vec<String>,
    pub heatmap: Option<Heatmap>,
    pub model_fingerprint: String,
    /// Set when no fitted thresholds were supplied and 0.5 is used for every disease.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_fingerprint: String,
    pub recipe: String,
    pub diseases: Vec<String>,
    pub thresholds: String,
    pub cam_supported: bool,
    pub uptime_seconds: f64,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct PredictParams {
    /// `none` (default), `top1`, or a disease name.
    pub explain: Option<String>,
}

enum Explain {
    None,
    Top1,
    Disease(DiseaseLabel),
}

fn parse_explain(raw: Option<&str>) -> Result<Explain, ApiError> {
    match raw.map(str::trim) {
        None | Some("") | Some("none") => Ok(Explain::None),
        Some("top1") => Ok(Explain::Top1),
        Some(name) => name
            .parse()
            .map(Explain::Disease)
            .map_err(|_| ApiError::bad_request(format!("explain must be none, top1 or a disease name, got {name:?}"))),
    }
}

async fn read_image_field(mut multipart: Multipart) -> Result<Vec<u8>, ApiError> {
    loop {
        let field = multipart
            .next_field()
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let Some(field) = field else {
            return Err(ApiError::bad_request("multipart form has no `image` field"));
        };
        if field.name() == Some("image") {
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
            return Ok(bytes.to_vec());
        }
    }
}

async fn predict(
    State(state): State<Arc<AppState>>,
    Query(params): Query<PredictParams>,
    multipart: Multipart,
) -> Result<Json<PredictionResponse>, ApiError> {
    let model = state.model()?;
    let explain = parse_explain(params.explain.as_deref())?;
    let bytes = read_image_field(multipart).await?;

    let m = model.clone();
    let (image, gray, probs) = tokio::task::spawn_blocking(move || {
        let decoded = decode_image(&bytes, "upload").map_err(|e| ApiError::bad_request(e.to_string()))?;
        if decoded.width() == 0 || decoded.height() == 0 {
            return Err(ApiError::bad_request("image is empty"));
        }
        let image = m
            .transform
            .apply(&decoded)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let gray = m.transform.resized_gray(&decoded);
        let probs = m.probabilities(&image).map_err(ApiError::internal)?;
        Ok((image, gray, probs))
    })
    .await
    .map_err(ApiError::internal)??;

    let mut ranked: Vec<(DiseaseLabel, f64)> = DiseaseLabel::ALL
        .iter()
        .map(|d| (*d, probs[d.index()] as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let target = match explain {
        Explain::None => None,
        Explain::Top1 => Some(ranked[0].0),
        Explain::Disease(d) => Some(d),
    };
    let heatmap = match target {
        None => None,
        Some(disease) => {
            if !model.model.kind().supports_cam() {
                return Err(ApiError::bad_request(format!(
                    "Grad-CAM is not available for the {} backbone",
                    model.model.kind()
                )));
            }
            let (reply, rx) = oneshot::channel();
            let job = CamJob {
                model: model.clone(),
                image,
                gray,
                disease,
                reply,
            };
            state
                .cam
                .lock()
                .expect("cam sender poisoned")
                .send(job)
                .map_err(|_| ApiError::internal("Grad-CAM worker stopped"))?;
            let png = rx.await.map_err(ApiError::internal)?.map_err(ApiError::internal)?;
            Some(Heatmap {
                disease: disease.name().to_string(),
                png_base64: base64::engine::general_purpose::STANDARD.encode(png),
            })
        }
    };

    Ok(Json(PredictionResponse {
        probabilities: ranked.iter().map(|(d, p)| (d.name().to_string(), *p)).collect(),
        top5: ranked
            .iter()
            .take(5)
            .map(|(d, p)| Finding {
                disease: d.name().to_string(),
                probability: *p,
            })
            .collect(),
        flagged: DiseaseLabel::ALL
            .iter()
            .filter(|d| probs[d.index()] as f64 >= model.threshold(**d))
            .map(|d| d.name().to_string())
            .collect(),
        heatmap,
        model_fingerprint: model.fingerprint.clone(),
        warning: model
            .thresholds
            .is_none()
            .then(|| format!("no fitted thresholds loaded; flagging uses {DEFAULT_THRESHOLD} for every disease")),
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Result<Json<HealthResponse>, ApiError> {
    let model = state.model()?;
    Ok(Json(HealthResponse {
        status: "ok".into(),
        model_fingerprint: model.fingerprint.clone(),
        recipe: model.recipe.clone(),
        diseases: DiseaseLabel::ALL.iter().map(|d| d.name().to_string()).collect(),
        thresholds: model
            .thresholds
            .as_ref()
            .map_or(format!("default {DEFAULT_THRESHOLD}"), |t| t.provenance.to_string()),
        cam_supported: model.model.kind().supports_cam(),
        uptime_seconds: state.started.elapsed().as_secs_f64(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves on `listener`, loading the model in the background; requests
/// get 503 until loading finishes.
pub async fn serve(config: ServiceConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let state = AppState::loading();
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match LoadedModel::from_files(&config) {
        Ok(m) => {
            log::info!("model {} loaded from {}", m.fingerprint, config.checkpoint.display());
            loader.set_model(m);
        }
        Err(e) => {
            log::error!("could not load {}: {e}", config.checkpoint.display());
            loader.set_failed(e.to_string());
        }
    });
    serve_state(state, listener).await
}

/// Serves an already prepared state.
pub async fn serve_state(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
