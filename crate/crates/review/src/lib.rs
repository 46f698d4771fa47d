//! HTTP service for screening pseudo-masks.
//!
//! State is the manifest with the journal replayed over it. Every verdict
//! is appended to the journal and synced before the in-memory state
//! changes, so a restart reconstructs exactly what clients were told.

mod render;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use depthseg::corpus::{
    self, apply_verdict, coverage_stats, load_manifest, record_decision, replay_journal, CorpusError, CorpusStats,
    Manifest, ReplayWarning, SampleRecord, SampleStatus, ScreeningDecision, Split, Verdict, COVERAGE_BINS,
};
use depthseg::pseudolabel::Polarity;
use depthseg::raster::{self, ImageFormat, Raster2D};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::services::ServeDir;

pub use render::{composite_overlay, depth_visualization, DEFAULT_ALPHA, DEFAULT_TINT};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 1000;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid overlay alpha {0}")]
    Alpha(f64),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub manifest: PathBuf,
    pub journal: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub overlay_alpha: f64,
    pub tint: [u8; 3],
    pub polarity: Polarity,
}

impl ServiceConfig {
    pub fn new(manifest: impl Into<PathBuf>, journal: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            journal: journal.into(),
            static_dir: None,
            overlay_alpha: DEFAULT_ALPHA,
            tint: DEFAULT_TINT,
            polarity: Polarity::default(),
        }
    }
}

struct Corpus {
    base: Manifest,
    current: Manifest,
    index: HashMap<String, usize>,
    /// Sample indices ordered by id.
    order: Vec<usize>,
}

pub struct AppState {
    config: ServiceConfig,
    corpus: RwLock<Corpus>,
    pub replay_warnings: Vec<ReplayWarning>,
}

impl AppState {
    /// Loads the manifest, measures mask coverage and replays the journal.
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        if !(0.0..=1.0).contains(&config.overlay_alpha) {
            return Err(ServiceError::Alpha(config.overlay_alpha));
        }
        let mut base = load_manifest(&config.manifest)?;
        let stats = coverage_stats(&mut base, COVERAGE_BINS);
        for s in &stats.skipped {
            log::warn!("sample {}: mask skipped: {}", s.id, s.error);
        }
        let replay = replay_journal(&config.journal, &base)?;
        let index = base.samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        let mut order: Vec<usize> = (0..base.samples.len()).collect();
        order.sort_by(|&a, &b| base.samples[a].id.cmp(&base.samples[b].id));
        let corpus = Corpus { base, current: replay.manifest, index, order };
        Ok(Self { config, corpus: RwLock::new(corpus), replay_warnings: replay.warnings })
    }

    /// Snapshot of the current manifest state.
    pub fn manifest(&self) -> Manifest {
        self.corpus.read().expect("state lock").current.clone()
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::of(&self.corpus.read().expect("state lock").current)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSampleView {
    pub id: String,
    pub status: SampleStatus,
    pub split: Split,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay_url: Option<String>,
}

impl ApiSampleView {
    fn of(m: &Manifest, s: &SampleRecord) -> Self {
        let exists = |p: &Path| m.resolve(p).is_file();
        let image = exists(&s.image_path);
        let url = |ok: bool, what: &str| ok.then(|| format!("/api/samples/{}/{what}", s.id));
        Self {
            id: s.id.clone(),
            status: s.status,
            split: s.split,
            source: s.source.clone(),
            coverage: s.coverage,
            image_url: url(image, "image.png"),
            depth_url: url(exists(&s.depth_path), "depth.png"),
            overlay_url: url(image && s.mask_path.as_deref().is_some_and(exists), "overlay.png"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePage {
    pub items: Vec<ApiSampleView>,
    /// Cursor for the next page; absent on the last page.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_after: Option<String>,
    /// Samples matching the filter across all pages.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub code: String,
}

struct Failure(StatusCode, &'static str, String);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(ApiError { error: self.2, code: self.1.to_string() })).into_response()
    }
}

fn bad_request(code: &'static str, msg: impl Into<String>) -> Failure {
    Failure(StatusCode::BAD_REQUEST, code, msg.into())
}

fn not_found(msg: impl Into<String>) -> Failure {
    Failure(StatusCode::NOT_FOUND, "not_found", msg.into())
}

fn internal(msg: impl ToString) -> Failure {
    Failure(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg.to_string())
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/api/samples", get(list_samples))
        .route("/api/samples/{id}", get(get_sample))
        .route("/api/samples/{id}/decision", post(post_decision))
        .route("/api/samples/{id}/image.png", get(image_png))
        .route("/api/samples/{id}/depth.png", get(depth_png))
        .route("/api/samples/{id}/overlay.png", get(overlay_png))
        .route("/api/stats", get(stats))
        .with_state(state.clone());
    match &state.config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the task is cancelled.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Failure> + Send + 'static) -> Result<T, Failure> {
    tokio::task::spawn_blocking(f).await.map_err(internal)?
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    limit: Option<String>,
    after: Option<String>,
}

async fn list_samples(State(st): State<Shared>, Query(q): Query<ListQuery>) -> Result<Json<SamplePage>, Failure> {
    let status = match q.status.as_deref() {
        None | Some("") => None,
        Some(s) => Some(s.parse::<SampleStatus>().map_err(|e| bad_request("invalid_status", e))?),
    };
    let limit = match q.limit.as_deref() {
        None | Some("") => DEFAULT_PAGE,
        Some(s) => match s.parse::<usize>() {
            Ok(n) if (1..=MAX_PAGE).contains(&n) => n,
            _ => return Err(bad_request("invalid_limit", format!("limit must be an integer in 1..={MAX_PAGE}"))),
        },
    };
    blocking(move || {
        let c = st.corpus.read().expect("state lock");
        let m = &c.current;
        let matching: Vec<&SampleRecord> =
            c.order.iter().map(|&i| &m.samples[i]).filter(|s| status.is_none_or(|st| s.status == st)).collect();
        let start = match &q.after {
            Some(a) => matching.partition_point(|s| s.id.as_str() <= a.as_str()),
            None => 0,
        };
        let page: Vec<&SampleRecord> = matching[start..].iter().take(limit).copied().collect();
        let next_after = (start + page.len() < matching.len()).then(|| page.last().map(|s| s.id.clone())).flatten();
        Ok(Json(SamplePage {
            items: page.iter().map(|s| ApiSampleView::of(m, s)).collect(),
            next_after,
            total: matching.len(),
        }))
    })
    .await
}

async fn get_sample(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<ApiSampleView>, Failure> {
    blocking(move || {
        let c = st.corpus.read().expect("state lock");
        let i = *c.index.get(&id).ok_or_else(|| not_found(format!("unknown sample {id:?}")))?;
        Ok(Json(ApiSampleView::of(&c.current, &c.current.samples[i])))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    verdict: serde_json::Value,
    #[serde(default)]
    operator: Option<String>,
}

async fn post_decision(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ApiSampleView>, Failure> {
    let body: DecisionBody =
        serde_json::from_slice(&body).map_err(|e| bad_request("invalid_body", format!("expected {{verdict, operator}}: {e}")))?;
    let verdict: Verdict = serde_json::from_value(body.verdict.clone()).map_err(|_| {
        bad_request("invalid_verdict", format!("verdict {} is not one of accept, reject, full_coverage", body.verdict))
    })?;
    blocking(move || {
        // The write lock serializes journal appends and state changes.
        let mut c = st.corpus.write().expect("state lock");
        let i = *c.index.get(&id).ok_or_else(|| not_found(format!("unknown sample {id:?}")))?;
        if verdict == Verdict::FullCoverage {
            corpus::write_full_coverage_mask(&c.current, &id)
                .map_err(|e| Failure(StatusCode::UNPROCESSABLE_ENTITY, "full_coverage_failed", e.to_string()))?;
        }
        let decision = ScreeningDecision { sample_id: id, verdict, at: Utc::now(), operator: body.operator };
        record_decision(&st.config.journal, &decision)
            .map_err(|e| Failure(StatusCode::CONFLICT, "journal_append_failed", e.to_string()))?;
        let base = c.base.samples[i].clone();
        apply_verdict(&mut c.current.samples[i], &base, verdict);
        Ok(Json(ApiSampleView::of(&c.current, &c.current.samples[i])))
    })
    .await
}

async fn stats(State(st): State<Shared>) -> Result<Json<CorpusStats>, Failure> {
    blocking(move || Ok(Json(st.stats()))).await
}

/// Copies the record out so that decoding happens without the lock held.
fn record_of(st: &AppState, id: &str) -> Result<(Resolver, SampleRecord), Failure> {
    let c = st.corpus.read().expect("state lock");
    let i = *c.index.get(id).ok_or_else(|| not_found(format!("unknown sample {id:?}")))?;
    Ok((Resolver(c.current.root().to_path_buf()), c.current.samples[i].clone()))
}

struct Resolver(PathBuf);

impl Resolver {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.0.join(p) }
    }
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-cache")], bytes).into_response()
}

fn asset_missing(path: &Path, e: impl std::fmt::Display) -> Failure {
    if path.is_file() {
        internal(e)
    } else {
        not_found(format!("missing asset {}", path.display()))
    }
}

async fn image_png(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, Failure> {
    blocking(move || {
        let (m, s) = record_of(&st, &id)?;
        let path = m.resolve(&s.image_path);
        let rgb = raster::load_rgb(&path).map_err(|e| asset_missing(&path, e))?;
        Ok(png(raster::encode_rgb_png(&rgb).map_err(internal)?))
    })
    .await
}

async fn depth_png(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, Failure> {
    blocking(move || {
        let (m, s) = record_of(&st, &id)?;
        let path = m.resolve(&s.depth_path);
        let raw = raster::load_gray(&path).map_err(|e| asset_missing(&path, e))?;
        let vis = depth_visualization(&raw, st.config.polarity).map_err(internal)?;
        Ok(png(raster::encode_gray(&Raster2D::Byte8(vis), ImageFormat::Png).map_err(internal)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct OverlayQuery {
    alpha: Option<f64>,
}

async fn overlay_png(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<OverlayQuery>,
) -> Result<Response, Failure> {
    let alpha = q.alpha.unwrap_or(st.config.overlay_alpha);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(bad_request("invalid_alpha", format!("alpha {alpha} outside [0, 1]")));
    }
    blocking(move || {
        let (m, s) = record_of(&st, &id)?;
        let mask_rel = s.mask_path.as_ref().ok_or_else(|| not_found(format!("sample {id:?} has no mask")))?;
        let (img_path, mask_path) = (m.resolve(&s.image_path), m.resolve(mask_rel));
        let rgb = raster::load_rgb(&img_path).map_err(|e| asset_missing(&img_path, e))?;
        let mask = corpus::read_mask(&mask_path).map_err(|e| asset_missing(&mask_path, e))?;
        let out = composite_overlay(&rgb, &mask, alpha, st.config.tint).map_err(internal)?;
        Ok(png(raster::encode_rgb_png(&out).map_err(internal)?))
    })
    .await
}
