//! HTTP edit service over a trained run directory.
//!
//! Predictions share a read lock on the memory. Mutations are serialized by a
//! separate mutex, applied to a copy, persisted, and only then swapped in.

use std::borrow::Cow;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use memedit_core::{EditDescriptor, EditMemory, Prediction, Route, RoutingTrace, Serac};
use serde::{Deserialize, Serialize};

use crate::formats;
use crate::pipeline::Models;

/// Trained components plus the live memory.
pub struct Loaded {
    models: Models,
    memory: RwLock<EditMemory>,
    memory_path: PathBuf,
    writer: tokio::sync::Mutex<()>,
}

impl Loaded {
    /// Reads the checkpoints and the persisted memory from `workdir`.
    pub fn from_dir(workdir: &Path, max_len: usize) -> crate::Result<Self> {
        let models = Models::load(workdir, max_len)?;
        let memory_path = workdir.join(formats::MEMORY);
        let memory = formats::read_memory(&memory_path, &models.classifier.fingerprint())?;
        Ok(Loaded { models, memory: RwLock::new(memory), memory_path, writer: Default::default() })
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn memory(&self) -> EditMemory {
        self.memory.read().expect("memory lock").clone()
    }

    /// Computes the next memory from the current one, persists it and swaps
    /// it in.
    async fn replace<T>(
        &self,
        f: impl FnOnce(&EditMemory) -> memedit_core::Result<(T, EditMemory)>,
    ) -> Result<T, ApiError> {
        let _guard = self.writer.lock().await;
        let (out, next) = f(&self.memory())?;
        formats::write_memory(&self.memory_path, &next).map_err(|e| ApiError::internal(e.to_string()))?;
        *self.memory.write().expect("memory lock") = next;
        Ok(out)
    }

    pub fn predict(&self, input: &str) -> memedit_core::Result<(Prediction, RoutingTrace, Option<String>)> {
        let memory = self.memory.read().expect("memory lock");
        let serac = Serac::with_memory(self.models.components(), Cow::Borrowed(&*memory))?;
        let (p, trace) = serac.predict(input)?;
        let winner = trace.winner.map(|i| memory.entries()[i].edit.id.clone());
        Ok((p, trace, winner))
    }
}

/// Shared handle; empty until the checkpoints are loaded.
#[derive(Clone, Default)]
pub struct AppState {
    loaded: Arc<OnceLock<Loaded>>,
    failure: Arc<OnceLock<String>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs the loaded models. Later calls are ignored.
    pub fn install(&self, loaded: Loaded) {
        let _ = self.loaded.set(loaded);
    }

    pub fn fail(&self, reason: String) {
        let _ = self.failure.set(reason);
    }

    pub fn loaded(&self) -> Option<&Loaded> {
        self.loaded.get()
    }

    fn ready(&self) -> Result<&Loaded, ApiError> {
        self.loaded.get().ok_or_else(|| ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: self.failure.get().cloned().unwrap_or_else(|| "checkpoints are still loading".into()),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn internal(message: String) -> Self {
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message }
    }
}

impl From<memedit_core::Error> for ApiError {
    fn from(e: memedit_core::Error) -> Self {
        use memedit_core::Error as E;
        let status = match e {
            E::DuplicateEditId(_) | E::StaleMemory { .. } => StatusCode::CONFLICT,
            E::InvalidEdit(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditsResponse {
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlushResponse {
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub input: String,
    pub prediction: String,
    pub tokens: Vec<u32>,
    pub slot_ids: Vec<u32>,
    pub slot_log_probs: Vec<f64>,
    pub log_prob: f64,
    pub route: Route,
    /// Highest scope score over the memory, if it is not empty.
    pub beta: Option<f64>,
    pub log_beta: Option<f64>,
    /// Id of the highest-scoring edit, whether or not it was routed to.
    pub winner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub edits: usize,
    pub ids: Vec<String>,
    pub classifier_hash: String,
    pub variant: String,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Deserialize)]
struct PredictQuery {
    input: String,
}

/// The response the service gives for `input`.
pub fn predict_response(loaded: &Loaded, input: &str) -> memedit_core::Result<PredictResponse> {
    let (p, trace, winner) = loaded.predict(input)?;
    Ok(PredictResponse {
        input: input.to_string(),
        prediction: loaded.models.tokenizer.detokenize(p.tokens.ids()),
        tokens: p.tokens.ids().to_vec(),
        slot_ids: p.slot_ids,
        slot_log_probs: p.slot_log_probs,
        log_prob: p.log_prob,
        route: trace.route,
        beta: trace.beta.map(|b| b.value()),
        log_beta: trace.beta.map(|b| b.log_value()),
        winner,
    })
}

async fn post_edits(State(state): State<AppState>, body: Bytes) -> Result<Json<EditsResponse>, ApiError> {
    let loaded = state.ready()?;
    let edits: Vec<EditDescriptor> = serde_json::from_slice(&body)
        .map_err(|e| ApiError { status: StatusCode::BAD_REQUEST, message: format!("malformed body: {e}") })?;
    let ids = edits.iter().map(|e| e.id.clone()).collect();
    loaded
        .replace(|current| {
            let mut serac = Serac::with_memory(loaded.models.components(), Cow::Borrowed(current))?;
            serac.add_edits(&edits)?;
            Ok(((), serac.into_memory()))
        })
        .await?;
    Ok(Json(EditsResponse { ids }))
}

async fn delete_edits(State(state): State<AppState>) -> Result<Json<FlushResponse>, ApiError> {
    let loaded = state.ready()?;
    // Starts from an empty memory under the active classifier, so this also
    // clears a stale memory.
    let removed =
        loaded.replace(|current| Ok((current.len(), Serac::new(loaded.models.components()).into_memory()))).await?;
    Ok(Json(FlushResponse { removed }))
}

async fn predict(
    State(state): State<AppState>,
    Query(q): Query<PredictQuery>,
) -> Result<Json<PredictResponse>, ApiError> {
    let loaded = state.ready()?;
    Ok(Json(predict_response(loaded, &q.input)?))
}

async fn report(State(state): State<AppState>) -> Result<Json<Report>, ApiError> {
    let loaded = state.ready()?;
    let memory = loaded.memory.read().expect("memory lock");
    let cls = &loaded.models.classifier;
    Ok(Json(Report {
        edits: memory.len(),
        ids: memory.entries().iter().map(|e| e.edit.id.clone()).collect(),
        classifier_hash: memory.classifier_hash().to_string(),
        variant: cls.variant().as_str().to_string(),
        stale: memory.classifier_hash() != cls.fingerprint(),
    }))
}

async fn health(State(state): State<AppState>) -> (StatusCode, Json<Health>) {
    match (state.loaded(), state.failure.get()) {
        (Some(_), _) => (StatusCode::OK, Json(Health { status: "ok".into(), error: None })),
        (None, Some(e)) => {
            (StatusCode::SERVICE_UNAVAILABLE, Json(Health { status: "failed".into(), error: Some(e.clone()) }))
        }
        (None, None) => (StatusCode::SERVICE_UNAVAILABLE, Json(Health { status: "loading".into(), error: None })),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/edits", axum::routing::post(post_edits).delete(delete_edits))
        .route("/predict", get(predict))
        .route("/report", get(report))
        .route("/health", get(health))
        .with_state(state)
}

/// Binds `addr`, loads `workdir` in the background and serves until ctrl-c.
pub async fn serve(addr: SocketAddr, workdir: PathBuf, max_len: usize) -> std::io::Result<()> {
    let state = AppState::new();
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Loaded::from_dir(&workdir, max_len) {
        Ok(l) => loader.install(l),
        Err(e) => loader.fail(e.to_string()),
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
