//! HTTP query service: upload an image, ask which regions match a piece of text.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tokenforge_core::corpus::{rgb_to_grid, BpeVocab};
use tokenforge_core::evalkit::{similarity_map, zero_shot_foreground, SimilarityMap};
use tokenforge_core::model::{load_checkpoint, ModelParams};
use tokenforge_core::tensorcore::{bilinear_resize, FeatureGrid};

const MAX_SIDE: usize = 1024;
const BODY_LIMIT: usize = 64 * 1024 * 1024;

/// A checkpoint ready for inference.
#[derive(Debug)]
pub struct LoadedModel {
    pub params: ModelParams,
    pub vocab: BpeVocab,
    /// Short content hash of the checkpoint file.
    pub id: String,
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

impl LoadedModel {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        let ckpt = load_checkpoint(path)?;
        let vocab = ckpt
            .vocab
            .ok_or_else(|| anyhow::anyhow!("checkpoint {} has no vocabulary", path.display()))?;
        Ok(Self {
            params: ckpt.params,
            vocab,
            id: short_hash(&bytes),
        })
    }
}

/// Side length used by the service for an input side: the nearest multiple of
/// `4p` within `[4p, 1024]` (the largest such multiple when `4p > 1024`).
pub fn serving_side(side: usize, patch: usize) -> usize {
    let m = 4 * patch;
    let hi = (MAX_SIDE / m).max(1) * m;
    let nearest = ((side as f64 / m as f64).round() as usize) * m;
    nearest.clamp(m, hi)
}

struct StoredImage {
    original: FeatureGrid,
    width: usize,
    height: usize,
    features: Mutex<Option<(String, Arc<FeatureGrid>)>>,
}

impl StoredImage {
    /// Features under `model`, computed once per checkpoint.
    fn features(&self, model: &LoadedModel) -> anyhow::Result<Arc<FeatureGrid>> {
        if let Some((id, f)) = self.features.lock().expect("feature cache lock").as_ref() {
            if *id == model.id {
                return Ok(f.clone());
            }
        }
        let p = model.params.config.patch_size;
        let resized = bilinear_resize(&self.original, serving_side(self.height, p), serving_side(self.width, p));
        let f = Arc::new(model.params.features(&resized)?);
        *self.features.lock().expect("feature cache lock") = Some((model.id.clone(), f.clone()));
        Ok(f)
    }
}

/// Shared service state: the current model behind an atomically swapped `Arc`
/// and the uploaded images keyed by content hash.
pub struct AppState {
    model: RwLock<Arc<LoadedModel>>,
    images: RwLock<HashMap<String, Arc<StoredImage>>>,
    checkpoint_path: Option<PathBuf>,
}

impl AppState {
    pub fn new(model: LoadedModel, checkpoint_path: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(Arc::new(model)),
            images: RwLock::new(HashMap::new()),
            checkpoint_path,
        })
    }

    fn model(&self) -> Arc<LoadedModel> {
        self.model.read().expect("model lock").clone()
    }

    pub fn image_count(&self) -> usize {
        self.images.read().expect("image lock").len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl ToString) -> Self {
        Self {
            status,
            error,
            detail: detail.to_string(),
        }
    }

    fn internal(e: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e)
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.error.into(),
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryRequest {
    pub image_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl From<SimilarityMap> for Heatmap {
    fn from(m: SimilarityMap) -> Self {
        Self {
            height: m.height,
            width: m.width,
            values: m.scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenHeatmap {
    pub text: String,
    pub token_id: Option<usize>,
    /// `None` when the token is not in the vocabulary.
    pub heatmap: Option<Heatmap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub image_id: String,
    pub checkpoint: String,
    pub tokens: Vec<TokenHeatmap>,
    /// Cell-wise max over the token heatmaps that exist.
    pub combined: Option<Heatmap>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ReloadRequest {
    pub path: Option<PathBuf>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/images", post(upload))
        .route("/query", post(query))
        .route("/checkpoint", post(reload))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        checkpoint: state.model().id.clone(),
    })
}

async fn upload(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<Json<UploadResponse>, ApiError> {
    let image_id = short_hash(&body);
    let model = state.model();
    let existing = state.images.read().expect("image lock").get(&image_id).cloned();
    let stored = match existing {
        Some(s) => s,
        None => {
            let rgb = image::load_from_memory(&body)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadImage", e))?
                .to_rgb8();
            let stored = Arc::new(StoredImage {
                width: rgb.width() as usize,
                height: rgb.height() as usize,
                original: rgb_to_grid(&rgb),
                features: Mutex::new(None),
            });
            // a concurrent upload of the same bytes may have won; keep the first
            state
                .images
                .write()
                .expect("image lock")
                .entry(image_id.clone())
                .or_insert(stored)
                .clone()
        }
    };
    let compute = stored.clone();
    let f = tokio::task::spawn_blocking(move || compute.features(&model))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok(Json(UploadResponse {
        image_id,
        width: stored.width,
        height: stored.height,
        grid_h: f.height,
        grid_w: f.width,
    }))
}

/// Heatmaps for `text` over precomputed features.
pub fn answer_query(model: &LoadedModel, features: &FeatureGrid, text: &str) -> anyhow::Result<Vec<TokenHeatmap>> {
    let embedding = |id: usize| model.params.token_embedding(id);
    if text == " " {
        let id = model.vocab.id(" ");
        let heatmap = match id {
            Some(id) => Some(zero_shot_foreground(features, embedding(id)?)?.into()),
            None => None,
        };
        return Ok(vec![TokenHeatmap {
            text: " ".into(),
            token_id: id,
            heatmap,
        }]);
    }
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let spans = match model.vocab.tokenize(word) {
            Ok(s) => s,
            Err(_) => {
                out.push(TokenHeatmap {
                    text: word.into(),
                    token_id: None,
                    heatmap: None,
                });
                continue;
            }
        };
        for span in spans {
            let known = Some(span.token_id) != model.vocab.unk_id();
            let heatmap = if known {
                Some(similarity_map(features, embedding(span.token_id)?)?.minmax().into())
            } else {
                None
            };
            out.push(TokenHeatmap {
                text: span.text,
                token_id: known.then_some(span.token_id),
                heatmap,
            });
        }
    }
    Ok(out)
}

/// Cell-wise max of the non-null heatmaps.
pub fn combine(tokens: &[TokenHeatmap]) -> Option<Heatmap> {
    let mut maps = tokens.iter().filter_map(|t| t.heatmap.as_ref());
    let mut acc = maps.next()?.clone();
    for m in maps {
        for (a, v) in acc.values.iter_mut().zip(&m.values) {
            *a = a.max(*v);
        }
    }
    Some(acc)
}

async fn query(State(state): State<Arc<AppState>>, Json(req): Json<QueryRequest>) -> Result<Json<QueryResponse>, ApiError> {
    if req.text.trim().is_empty() && req.text != " " {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "EmptyQuery",
            "text is empty after trimming; send a single space for the background probe",
        ));
    }
    let stored = state
        .images
        .read()
        .expect("image lock")
        .get(&req.image_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownImage", format!("no image {}", req.image_id)))?;
    let model = state.model();
    let response = tokio::task::spawn_blocking(move || -> anyhow::Result<QueryResponse> {
        let f = stored.features(&model)?;
        let tokens = answer_query(&model, &f, &req.text)?;
        Ok(QueryResponse {
            image_id: req.image_id,
            checkpoint: model.id.clone(),
            combined: combine(&tokens),
            tokens,
        })
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(Json(response))
}

async fn reload(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Result<Json<Health>, ApiError> {
    let req: ReloadRequest = if body.is_empty() {
        ReloadRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e))?
    };
    let path = req.path.or_else(|| state.checkpoint_path.clone()).ok_or_else(|| {
        ApiError::new(StatusCode::BAD_REQUEST, "NoCheckpointPath", "no path given and CHECKPOINT_PATH is unset")
    })?;
    let loaded = tokio::task::spawn_blocking(move || LoadedModel::load(&path))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "BadCheckpoint", format!("{e:#}")))?;
    let id = loaded.id.clone();
    *state.model.write().expect("model lock") = Arc::new(loaded);
    Ok(Json(Health {
        status: "ok".into(),
        checkpoint: id,
    }))
}
