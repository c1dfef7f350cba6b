//! HTTP facade over a pipeline store.
//!
//! Endpoints (all JSON):
//!
//! | method | path | |
//! |---|---|---|
//! | GET  | `/api/health` | liveness and version |
//! | GET  | `/api/patterns?status=&category=&page=` | paged pattern summaries, 50 per page |
//! | GET  | `/api/patterns/{id}/gallery` | exemplars with excerpts and stats |
//! | POST | `/api/patterns/{id}/verdict` | `{verdict, reviewer, note}` → updated summary |
//! | GET  | `/api/records/{id}/attribution/{target}` | attribution report |
//!
//! Every non-2xx response body is an [`ApiError`]. Verdicts are the only
//! mutation; they are serialized through one registry writer and land in the
//! audit log before the response is sent.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use patternlens::embedstore::Dataset;
use patternlens::patterns::{
    Annotation, Category, NeuronRef, PatternId, PatternRecord, PatternStatus, Registry, Verdict,
};
use patternlens::store::{render_report, Explainer, StoreLayout};
use patternlens::Error;

pub const PAGE_SIZE: usize = 50;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    InvalidVerdict,
    Conflict,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(skip)]
    pub status: StatusCode,
}

impl ApiError {
    pub fn new(status: StatusCode, code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            status,
        }
    }
    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, ErrorCode::NotFound, m)
    }
    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, ErrorCode::InvalidVerdict, m)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match &e {
            Error::NotFound(_) => Self::not_found(e.to_string()),
            Error::Conflict(_) => Self::new(StatusCode::CONFLICT, ErrorCode::Conflict, e.to_string()),
            Error::InvalidArgument(_) => Self::bad_request(e.to_string()),
            _ => {
                log::error!("internal error: {e}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, e.to_string())
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub pattern_id: PatternId,
    pub status: PatternStatus,
    pub category: Option<Category>,
    pub description: Option<String>,
    pub agreement: Option<f64>,
    pub flagged_for_review: bool,
    pub frequency: f64,
    pub max_activation: f64,
    pub consistency: f64,
    pub threshold: Option<f64>,
    pub n_members: usize,
}

impl From<&PatternRecord> for PatternSummary {
    fn from(p: &PatternRecord) -> Self {
        PatternSummary {
            pattern_id: p.pattern_id,
            status: p.status,
            category: p.annotation.as_ref().map(|a| a.category),
            description: p.annotation.as_ref().map(|a| a.description.clone()),
            agreement: p.agreement(),
            flagged_for_review: p.flagged_for_review,
            frequency: p.gallery.frequency,
            max_activation: p.gallery.max_activation,
            consistency: p.consistency,
            threshold: p.threshold,
            n_members: p.members.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternPage {
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
    /// Matching patterns across all pages.
    pub total: usize,
    pub total_pages: usize,
    pub patterns: Vec<PatternSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryExemplar {
    pub rank: usize,
    pub record_id: String,
    pub activation: f64,
    pub excerpt: Option<String>,
    pub thumbnail_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryPayload {
    pub pattern_id: PatternId,
    pub status: PatternStatus,
    pub neuron: NeuronRef,
    pub members: Vec<NeuronRef>,
    pub frequency: f64,
    pub mean_activation: f64,
    pub max_activation: f64,
    pub consistency: f64,
    pub annotation: Option<Annotation>,
    pub exemplars: Vec<GalleryExemplar>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub verdict: String,
    pub reviewer: String,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

pub struct AppState {
    pub layout: StoreLayout,
    /// The single writer; every verdict goes through this lock.
    pub registry: Mutex<Registry>,
    pub excerpts: HashMap<String, String>,
    /// `None` until `encode` and `train-head` have run.
    pub explainer: Option<Explainer>,
    explainer_error: Option<String>,
    pub assets: Option<PathBuf>,
}

impl AppState {
    /// Load the registry (required), dataset excerpts and, when present, the
    /// explanation artifacts.
    pub fn load(store: &Path, assets: Option<PathBuf>) -> patternlens::Result<Self> {
        let layout = StoreLayout::new(store);
        patternlens::store::require(&layout.registry().join("index.json"), "pattern registry", "discover")?;
        let registry = Registry::open(&layout.registry())?;
        let excerpts = if layout.dataset().join(patternlens::embedstore::MANIFEST_FILE).exists() {
            Dataset::load(&layout.dataset())?
                .records
                .into_iter()
                .map(|r| (r.record_id, r.report_excerpt))
                .collect()
        } else {
            HashMap::new()
        };
        let (explainer, explainer_error) = match Explainer::load(&layout) {
            Ok(e) => (Some(e), None),
            Err(e @ Error::NotFound(_)) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        Ok(AppState {
            layout,
            registry: Mutex::new(registry),
            excerpts,
            explainer,
            explainer_error,
            assets,
        })
    }

    fn thumbnail(&self, record_id: &str) -> Option<String> {
        let dir = self.assets.as_ref()?;
        ["png", "jpg", "jpeg", "webp"].iter().find_map(|ext| {
            let name = format!("{record_id}.{ext}");
            dir.join(&name).is_file().then(|| format!("/assets/{name}"))
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/api/health", get(health))
        .route("/api/patterns", get(list_patterns))
        .route("/api/patterns/{id}/gallery", get(gallery))
        .route("/api/patterns/{id}/verdict", post(verdict))
        .route("/api/records/{id}/attribution/{target}", get(attribution));
    if let Some(dir) = &state.assets {
        app = app.nest_service("/assets", ServeDir::new(dir));
    }
    app.fallback(|| async { ApiError::not_found("no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(
                StatusCode::METHOD_NOT_ALLOWED,
                ErrorCode::NotFound,
                "method not allowed",
            )
        })
        .with_state(state)
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: VERSION.into(),
    })
}

fn parse_id(raw: &str) -> ApiResult<PatternId> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("pattern {raw:?} does not exist")))
}

async fn list_patterns(
    State(st): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<PatternPage>> {
    if let Some(k) = q.keys().find(|k| !matches!(k.as_str(), "status" | "category" | "page")) {
        return Err(ApiError::bad_request(format!("unknown query parameter {k:?}")));
    }
    let status = q
        .get("status")
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<PatternStatus>())
        .transpose()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let category = q
        .get("category")
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Category>())
        .transpose()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let page = match q.get("page").filter(|s| !s.is_empty()) {
        None => 1,
        Some(p) => p
            .parse::<usize>()
            .ok()
            .filter(|&p| p >= 1)
            .ok_or_else(|| ApiError::bad_request(format!("page must be a positive integer, got {p:?}")))?,
    };
    let reg = st.registry.lock().map_err(|_| poisoned())?;
    let matching: Vec<PatternSummary> = reg
        .patterns()
        .filter(|p| status.is_none_or(|s| p.status == s))
        .filter(|p| category.is_none_or(|c| p.annotation.as_ref().is_some_and(|a| a.category == c)))
        .map(PatternSummary::from)
        .collect();
    let total = matching.len();
    let patterns = matching
        .into_iter()
        .skip((page - 1) * PAGE_SIZE)
        .take(PAGE_SIZE)
        .collect();
    Ok(Json(PatternPage {
        page,
        page_size: PAGE_SIZE,
        total,
        total_pages: total.div_ceil(PAGE_SIZE),
        patterns,
    }))
}

fn poisoned() -> ApiError {
    ApiError::new(
        StatusCode::INTERNAL_SERVER_ERROR,
        ErrorCode::Internal,
        "registry lock poisoned",
    )
}

async fn gallery(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<GalleryPayload>> {
    let id = parse_id(&id)?;
    let reg = st.registry.lock().map_err(|_| poisoned())?;
    let p = reg
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("pattern {id} does not exist")))?;
    let exemplars = p
        .gallery
        .exemplars
        .iter()
        .enumerate()
        .map(|(i, e)| GalleryExemplar {
            rank: i + 1,
            record_id: e.record_id.clone(),
            activation: e.activation,
            excerpt: st.excerpts.get(&e.record_id).cloned(),
            thumbnail_url: st.thumbnail(&e.record_id),
        })
        .collect();
    Ok(Json(GalleryPayload {
        pattern_id: p.pattern_id,
        status: p.status,
        neuron: p.gallery.neuron,
        members: p.members.clone(),
        frequency: p.gallery.frequency,
        mean_activation: p.gallery.mean_activation,
        max_activation: p.gallery.max_activation,
        consistency: p.consistency,
        annotation: p.annotation.clone(),
        exemplars,
    }))
}

async fn verdict(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<PatternSummary>> {
    let id = parse_id(&id)?;
    let req: VerdictRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid verdict body: {e}")))?;
    let verdict: Verdict = req
        .verdict
        .parse()
        .map_err(|e: Error| ApiError::bad_request(e.to_string()))?;
    let summary = tokio::task::spawn_blocking(move || -> ApiResult<PatternSummary> {
        let mut reg = st.registry.lock().map_err(|_| poisoned())?;
        reg.record_verdict(id, verdict, &req.reviewer, req.note.as_deref())?;
        Ok(PatternSummary::from(reg.get(id).expect("verdict succeeded")))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, e.to_string()))??;
    Ok(Json(summary))
}

async fn attribution(
    State(st): State<Arc<AppState>>,
    UrlPath((record, target)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let Some(explainer) = &st.explainer else {
        return Err(ApiError::not_found(
            st.explainer_error
                .clone()
                .unwrap_or_else(|| "explanation artifacts missing".into()),
        ));
    };
    let body = {
        let reg = st.registry.lock().map_err(|_| poisoned())?;
        let report = explainer.explain(&record, &target, Some(&reg))?;
        render_report(&report)?
    };
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub store: PathBuf,
    pub addr: SocketAddr,
    pub assets: Option<PathBuf>,
}

/// Load the store and serve until the process is stopped.
pub async fn serve(opts: ServeOptions) -> anyhow::Result<()> {
    let state = Arc::new(AppState::load(&opts.store, opts.assets.clone())?);
    log::info!(
        "serving {} patterns from {} on http://{}",
        state.registry.lock().map(|r| r.len()).unwrap_or(0),
        state.layout.root.display(),
        opts.addr
    );
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}
