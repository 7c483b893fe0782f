//! JSON HTTP API over a loaded inpainting model.
//!
//! Routes:
//! - `GET /health` reports the model id and signature, 503 without a model.
//! - `POST /inpaint` samples completions of a partially visible image.
//! - `POST /probmap` returns per-pixel probabilities of level 1 (binary models).
//!
//! Requests are fully validated before any model work. Accepted requests
//! hold an admission permit while they wait for and run on a worker; when
//! no admission permit is free the request is refused with 429.

use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pccnn_core::data::{Image, Signature};
use pccnn_core::maskgen::Mask;
use pccnn_core::model::ModelParams;
use pccnn_core::sampling::{derive_seed, probability_map, rank_by_likelihood, sample_parallel};
use pccnn_core::training::{decode_checkpoint, sha256_hex};
use pccnn_core::CoreError;
use serde::Serialize;
use serde_json::{Map, Value};
use tokio::sync::Semaphore;

pub const MAX_SAMPLES: u64 = 16;
pub const MIN_TEMPERATURE: f64 = 0.1;
pub const MAX_TEMPERATURE: f64 = 2.0;
/// Hex digits of the checkpoint digest used as the model id.
const MODEL_ID_LEN: usize = 16;

/// A model ready to serve.
#[derive(Debug)]
pub struct LoadedModel {
    pub params: ModelParams,
    pub model_id: String,
}

impl LoadedModel {
    pub fn new(params: ModelParams, model_id: impl Into<String>) -> Self {
        Self {
            params,
            model_id: model_id.into(),
        }
    }

    /// Loads a checkpoint; the id is a prefix of the file's SHA-256.
    pub fn from_checkpoint(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let ckpt = decode_checkpoint(&bytes)?;
        let digest = sha256_hex(&bytes);
        Ok(Self::new(ckpt.params, &digest[..MODEL_ID_LEN]))
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Requests admitted at once, queued or running.
    pub max_queue: usize,
    /// Requests computing at once.
    pub workers: usize,
    /// Sampling threads per request.
    pub threads: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_queue: 32,
            workers: 1,
            threads: pccnn_core::parallel::worker_threads(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    model: Option<Arc<LoadedModel>>,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
    threads: usize,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, config: &ServiceConfig) -> Self {
        Self {
            model: model.map(Arc::new),
            admission: Arc::new(Semaphore::new(config.max_queue)),
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            threads: config.threads.max(1),
        }
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model.clone().ok_or_else(ApiError::unavailable)
    }

    /// Runs `job` on a blocking worker once admitted.
    async fn run<T, F>(&self, job: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce() -> Result<T, CoreError> + Send + 'static,
    {
        let _admitted = self.admission.clone().try_acquire_owned().map_err(|_| ApiError {
            status: StatusCode::TOO_MANY_REQUESTS,
            code: "queue_full",
            field: None,
            message: "too many requests in flight, retry later".into(),
        })?;
        let _worker = self.workers.clone().acquire_owned().await.map_err(|_| ApiError::internal("worker pool closed"))?;
        tokio::task::spawn_blocking(job)
            .await
            .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
            .map_err(ApiError::from)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/inpaint", post(inpaint))
        .route("/probmap", post(probmap))
        .with_state(state)
}

/// Structured error body `{code, field?, message}`.
#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<&'static str>,
    pub message: String,
}

impl ApiError {
    fn malformed(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "malformed",
            field: Some(field),
            message: message.into(),
        }
    }

    fn shape(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "shape_mismatch",
            field: Some(field),
            message: message.into(),
        }
    }

    fn range(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "out_of_range",
            field: Some(field),
            message: message.into(),
        }
    }

    fn unavailable() -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "model_unavailable",
            field: None,
            message: "no model loaded".into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            field: None,
            message: message.into(),
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        if e.is_input_error() {
            Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "invalid_request",
                field: None,
                message: e.to_string(),
            }
        } else {
            Self::internal(e.to_string())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

#[derive(Debug, Serialize)]
pub struct HealthResponse {
    pub status: &'static str,
    pub model_id: String,
    pub signature: Signature,
}

async fn health(State(state): State<AppState>) -> Result<Json<HealthResponse>, ApiError> {
    let model = state.model()?;
    Ok(Json(HealthResponse {
        status: "ok",
        model_id: model.model_id.clone(),
        signature: model.params.signature(),
    }))
}

#[derive(Debug, Serialize)]
pub struct InpaintSample {
    pub image: Value,
    pub log_likelihood: f64,
    pub per_pixel_mean_log_likelihood: f64,
}

#[derive(Debug, Serialize)]
pub struct InpaintResponse {
    pub samples: Vec<InpaintSample>,
    pub model_id: String,
    pub seed: u64,
}

/// A validated `/inpaint` request.
#[derive(Debug)]
struct InpaintJob {
    image: Image,
    mask: Mask,
    num_samples: usize,
    seed: u64,
    temperature: f64,
}

async fn inpaint(State(state): State<AppState>, body: Bytes) -> Result<Json<InpaintResponse>, ApiError> {
    let model = state.model()?;
    let obj = parse_object(&body)?;
    let job = parse_inpaint(&obj, model.params.signature())?;
    let threads = state.threads;
    let worker_model = model.clone();
    let results = state
        .run(move || {
            let seeds: Vec<u64> = (0..job.num_samples as u64).map(|j| derive_seed(job.seed, j)).collect();
            sample_parallel(&worker_model.params, &job.image, &job.mask, &seeds, job.temperature, threads)
        })
        .await?;
    let lls: Vec<f64> = results.iter().map(|r| r.total_log_likelihood).collect();
    let samples = rank_by_likelihood(&lls)
        .into_iter()
        .map(|i| InpaintSample {
            image: image_to_json(&results[i].image),
            log_likelihood: results[i].total_log_likelihood,
            per_pixel_mean_log_likelihood: results[i].per_pixel_mean(),
        })
        .collect();
    Ok(Json(InpaintResponse {
        samples,
        model_id: model.model_id.clone(),
        seed: job.seed,
    }))
}

#[derive(Debug, Serialize)]
pub struct ProbmapResponse {
    pub map: Vec<Vec<f64>>,
}

async fn probmap(State(state): State<AppState>, body: Bytes) -> Result<Json<ProbmapResponse>, ApiError> {
    let model = state.model()?;
    let s = model.params.signature();
    if s.levels != 2 || s.channels != 1 {
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "unsupported_model",
            field: None,
            message: format!("probability maps need a binary single-channel model, loaded model is {s}"),
        });
    }
    let obj = parse_object(&body)?;
    let image = parse_image(required(&obj, "image")?, s)?;
    let mask = parse_mask(required(&obj, "mask")?, s)?;
    let worker_model = model.clone();
    let map = state
        .run(move || probability_map(&worker_model.params, &image, &mask, None))
        .await?;
    Ok(Json(ProbmapResponse {
        map: map.values.chunks(map.width).map(<[f64]>::to_vec).collect(),
    }))
}

fn parse_object(body: &[u8]) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err(ApiError::malformed("body", "expected a JSON object")),
        Err(e) => Err(ApiError::malformed("body", format!("invalid JSON: {e}"))),
    }
}

fn required<'a>(obj: &'a Map<String, Value>, field: &'static str) -> Result<&'a Value, ApiError> {
    match obj.get(field) {
        Some(Value::Null) | None => Err(ApiError::malformed(field, "required field is missing")),
        Some(v) => Ok(v),
    }
}

fn optional<'a>(obj: &'a Map<String, Value>, field: &str) -> Option<&'a Value> {
    obj.get(field).filter(|v| !v.is_null())
}

fn parse_inpaint(obj: &Map<String, Value>, s: Signature) -> Result<InpaintJob, ApiError> {
    let image = parse_image(required(obj, "image")?, s)?;
    let mask = parse_mask(required(obj, "mask")?, s)?;
    let n = required(obj, "num_samples")?;
    let num_samples = n
        .as_u64()
        .map(i128::from)
        .or_else(|| n.as_i64().map(i128::from))
        .ok_or_else(|| ApiError::malformed("num_samples", "expected an integer"))?;
    if !(1..=MAX_SAMPLES as i128).contains(&num_samples) {
        return Err(ApiError::range(
            "num_samples",
            format!("{num_samples} outside 1..={MAX_SAMPLES}"),
        ));
    }
    let seed = match optional(obj, "seed") {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ApiError::malformed("seed", "expected a non-negative integer below 2^64"))?,
        None => fresh_seed(),
    };
    let temperature = match optional(obj, "temperature") {
        Some(v) => v.as_f64().ok_or_else(|| ApiError::malformed("temperature", "expected a number"))?,
        None => 1.0,
    };
    if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&temperature) {
        return Err(ApiError::range(
            "temperature",
            format!("{temperature} outside {MIN_TEMPERATURE}..={MAX_TEMPERATURE}"),
        ));
    }
    Ok(InpaintJob {
        image,
        mask,
        num_samples: num_samples as usize,
        seed,
        temperature,
    })
}

fn fresh_seed() -> u64 {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    derive_seed(nanos as u64, (nanos >> 64) as u64)
}

/// Rows of an `H × W` grid, checked for shape.
fn grid_rows<'a>(v: &'a Value, field: &'static str, s: Signature) -> Result<Vec<&'a Vec<Value>>, ApiError> {
    let rows = v
        .as_array()
        .ok_or_else(|| ApiError::malformed(field, "expected nested arrays"))?;
    if rows.len() != s.height {
        return Err(ApiError::shape(field, format!("expected {} rows, got {}", s.height, rows.len())));
    }
    rows.iter()
        .enumerate()
        .map(|(y, row)| {
            let row = row
                .as_array()
                .ok_or_else(|| ApiError::malformed(field, format!("row {y} is not an array")))?;
            if row.len() != s.width {
                return Err(ApiError::shape(
                    field,
                    format!("row {y} has {} entries, expected {}", row.len(), s.width),
                ));
            }
            Ok(row)
        })
        .collect()
}

/// An integer entry; range is checked by the caller.
fn integer(v: &Value, field: &'static str, y: usize, x: usize) -> Result<i64, ApiError> {
    v.as_i64()
        .ok_or_else(|| ApiError::malformed(field, format!("entry ({y}, {x}) is not an integer")))
}

fn parse_image(v: &Value, s: Signature) -> Result<Image, ApiError> {
    const FIELD: &str = "image";
    let rows = grid_rows(v, FIELD, s)?;
    let mut pixels = Vec::with_capacity(s.values());
    for (y, row) in rows.iter().enumerate() {
        for (x, entry) in row.iter().enumerate() {
            if s.channels == 1 {
                pixels.push(integer(entry, FIELD, y, x)?);
            } else {
                let chans = entry
                    .as_array()
                    .ok_or_else(|| ApiError::shape(FIELD, format!("entry ({y}, {x}) must list {} channels", s.channels)))?;
                if chans.len() != s.channels {
                    return Err(ApiError::shape(
                        FIELD,
                        format!("entry ({y}, {x}) has {} channels, expected {}", chans.len(), s.channels),
                    ));
                }
                for c in chans {
                    pixels.push(integer(c, FIELD, y, x)?);
                }
            }
        }
    }
    let max = s.levels as i64 - 1;
    if let Some(i) = pixels.iter().position(|&p| !(0..=max).contains(&p)) {
        let (y, x) = (i / s.channels / s.width, i / s.channels % s.width);
        return Err(ApiError::range(
            FIELD,
            format!("value {} at ({y}, {x}) outside 0..={max}", pixels[i]),
        ));
    }
    Image::new(s, pixels.into_iter().map(|p| p as u8).collect()).map_err(|e| ApiError::shape(FIELD, e.to_string()))
}

fn parse_mask(v: &Value, s: Signature) -> Result<Mask, ApiError> {
    const FIELD: &str = "mask";
    let rows = grid_rows(v, FIELD, s)?;
    let mut bits = Vec::with_capacity(s.pixels());
    for (y, row) in rows.iter().enumerate() {
        for (x, entry) in row.iter().enumerate() {
            let b = integer(entry, FIELD, y, x)?;
            if !(0..=1).contains(&b) {
                return Err(ApiError::range(FIELD, format!("value {b} at ({y}, {x}) is not 0 or 1")));
            }
            bits.push(b as u8);
        }
    }
    Mask::new(s.height, s.width, bits).map_err(|e| ApiError::shape(FIELD, e.to_string()))
}

/// Nested `H × W` integers, or `H × W × C` for multi-channel images.
pub fn image_to_json(img: &Image) -> Value {
    let s = img.signature();
    let rows = (0..s.height)
        .map(|y| {
            let cols = (0..s.width)
                .map(|x| {
                    if s.channels == 1 {
                        Value::from(img.get(y, x, 0))
                    } else {
                        Value::Array((0..s.channels).map(|c| Value::from(img.get(y, x, c))).collect())
                    }
                })
                .collect();
            Value::Array(cols)
        })
        .collect();
    Value::Array(rows)
}

/// Same layout as [`image_to_json`] for a mask.
pub fn mask_to_json(mask: &Mask) -> Value {
    Value::Array(
        mask.bits()
            .chunks(mask.width())
            .map(|row| Value::Array(row.iter().map(|&b| Value::from(b)).collect()))
            .collect(),
    )
}

/// Loads `path` into a state, or serves with no model when `None`.
pub fn state_from_checkpoint(path: Option<&Path>, config: &ServiceConfig) -> anyhow::Result<AppState> {
    let model = path.map(LoadedModel::from_checkpoint).transpose()?;
    Ok(AppState::new(model, config))
}
