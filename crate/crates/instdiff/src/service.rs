//! HTTP API for one-shot and iterative generation.
//!
//! A session fixes its noise seed at creation, so revising the layout
//! regenerates from the same initial noise and identical layouts give
//! identical images.

use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use instdiff_core::layout::{LayoutSpec, SceneLayout};
use instdiff_core::sampler::SampleOptions;
use instdiff_shapeworld::RgbImage;
use rand::Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::pipeline::LoadedModel;
use crate::store::{now_ms, DiffStats, RegionDiff, Revision, Session, SessionStore};
use crate::Error;

pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    pub store: SessionStore,
    pub timeout: Duration,
}

impl AppState {
    pub fn new(store: SessionStore, timeout: Duration) -> Self {
        Self {
            model: RwLock::new(None),
            store,
            timeout,
        }
    }

    pub fn set_model(&self, m: LoadedModel) {
        *self.model.write().unwrap() = Some(Arc::new(m));
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().unwrap().clone()
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Unprocessable(String),
    Loading,
    Timeout,
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        use instdiff_core::Error as C;
        match e {
            Error::Core(C::Geometry(_) | C::UnsupportedFormat(_) | C::DegenerateRow { .. }) => {
                ApiError::Unprocessable(e.to_string())
            }
            Error::Core(C::Schema(_) | C::Vocabulary(_) | C::Contract(_)) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<instdiff_core::Error> for ApiError {
    fn from(e: instdiff_core::Error) -> Self {
        Error::Core(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::BadRequest(format!("schema error: {}", e.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, kind, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, "geometry", m),
            ApiError::Loading => (StatusCode::SERVICE_UNAVAILABLE, "loading", "weights are loading".into()),
            ApiError::Timeout => (StatusCode::GATEWAY_TIMEOUT, "timeout", "generation timed out".into()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        };
        (code, Json(json!({ "error": kind, "message": msg }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub layout: LayoutSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Partial sampler options; unspecified fields use the model defaults.
    #[serde(default)]
    pub sampler_cfg: Option<Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviseSession {
    pub layout: LayoutSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateOnce {
    pub layout: LayoutSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sampler_cfg: Option<Value>,
}

fn ready(state: &AppState) -> ApiResult<Arc<LoadedModel>> {
    state.model().ok_or(ApiError::Loading)
}

/// Model defaults overlaid with the request's partial options.
fn sampler_options(model: &LoadedModel, partial: Option<Value>, seed: u64) -> ApiResult<SampleOptions> {
    let mut base = serde_json::to_value(&model.config.sample).expect("options serialize");
    if let Some(Value::Object(over)) = partial {
        for (k, v) in over {
            base[k] = v;
        }
    } else if partial.is_some_and(|p| !p.is_null()) {
        return Err(ApiError::BadRequest("schema error: sampler_cfg must be an object".into()));
    }
    let mut opts: SampleOptions =
        serde_json::from_value(base).map_err(|e| ApiError::BadRequest(format!("schema error: {e}")))?;
    opts.seed = seed;
    opts.validate(&model.sched)?;
    Ok(opts)
}

/// Validates the layout, then renders off the async runtime.
async fn render(state: &AppState, model: Arc<LoadedModel>, layout: LayoutSpec, opts: SampleOptions) -> ApiResult<RgbImage> {
    layout.validate(&model.config.model.conditioning.location)?;
    let job = tokio::task::spawn_blocking(move || model.generate(&layout, &opts));
    match tokio::time::timeout(state.timeout, job).await {
        Err(_) => Err(ApiError::Timeout),
        Ok(Err(e)) => Err(ApiError::Internal(e.to_string())),
        Ok(Ok(r)) => Ok(r?),
    }
}

fn store_image(state: &AppState, img: &RgbImage) -> ApiResult<String> {
    let png = img.to_png().map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(state.store.put_image(&png)?)
}

fn image_url(hash: &str) -> String {
    format!("/images/{hash}")
}

/// Per-region change between consecutive revisions.
pub fn diff_stats(prev: &RgbImage, next: &RgbImage, layout: &SceneLayout) -> DiffStats {
    let (w, h) = (next.width, next.height);
    let regions: Vec<_> = layout.instances.iter().map(|ic| ic.region()).collect();
    let mut sums = vec![(0.0, 0usize); regions.len()];
    let (mut all, mut outside) = ((0.0, 0usize), (0.0, 0usize));
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (prev.get(x, y), next.get(x, y));
            let d = (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum::<f64>() / 3.0;
            let p = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64];
            all.0 += d;
            all.1 += 1;
            let mut inside = false;
            for (r, s) in regions.iter().zip(sums.iter_mut()) {
                if r.as_ref().is_some_and(|r| r.contains(p)) {
                    s.0 += d;
                    s.1 += 1;
                    inside = true;
                }
            }
            if !inside {
                outside.0 += d;
                outside.1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    DiffStats {
        overall: mean(all),
        outside_regions: mean(outside),
        regions: sums
            .into_iter()
            .enumerate()
            .map(|(i, s)| RegionDiff {
                instance: i,
                caption: layout.instances[i].caption.text(),
                mean_abs_diff: mean(s),
            })
            .collect(),
    }
}

async fn create_session(State(st): State<Arc<AppState>>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    let model = ready(&st)?;
    let seed = req.seed.unwrap_or_else(|| rand::rng().random::<u32>() as u64);
    let opts = sampler_options(&model, req.sampler_cfg, seed)?;
    let img = render(&st, model, req.layout.clone(), opts.clone()).await?;
    let hash = store_image(&st, &img)?;
    let id = format!("{:016x}", rand::rng().random::<u64>());
    let session = Session {
        id: id.clone(),
        seed,
        sampler: opts,
        history: vec![Revision {
            revision: 0,
            layout: req.layout,
            image: hash.clone(),
            created_ms: now_ms(),
            diff: None,
        }],
    };
    st.store.commit(session)?;
    Ok(Json(json!({
        "session_id": id,
        "seed": seed,
        "revision": 0,
        "image_hash": hash,
        "image_url": image_url(&hash),
    })))
}

async fn revise_session(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ReviseSession>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    if st.store.get(&id).is_none() {
        return Err(ApiError::NotFound(format!("unknown session {id}")));
    }
    let model = ready(&st)?;
    let lock = st.store.lock_for(&id);
    let _guard = lock.lock().await;
    let mut session = st.store.get(&id).expect("sessions are never removed");
    let img = render(&st, model.clone(), req.layout.clone(), session.sampler.clone()).await?;
    let hash = store_image(&st, &img)?;
    let prev_hash = &session.history.last().expect("history starts non-empty").image;
    let diff = st
        .store
        .read_image(prev_hash)
        .and_then(|b| RgbImage::from_png(&b).ok())
        .map(|prev| {
            let layout = SceneLayout::from_spec(&req.layout, &model.config.model.conditioning.location, session.seed)
                .expect("validated before rendering");
            diff_stats(&prev, &img, &layout)
        });
    let revision = session.history.len();
    session.history.push(Revision {
        revision,
        layout: req.layout,
        image: hash.clone(),
        created_ms: now_ms(),
        diff: diff.clone(),
    });
    st.store.commit(session)?;
    Ok(Json(json!({
        "session_id": id,
        "revision": revision,
        "image_hash": hash,
        "image_url": image_url(&hash),
        "diff": diff,
    })))
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    st.store
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))
}

async fn generate_once(State(st): State<Arc<AppState>>, body: Result<Json<GenerateOnce>, JsonRejection>) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    let model = ready(&st)?;
    let seed = req.seed.unwrap_or(model.config.sample.seed);
    let opts = sampler_options(&model, req.sampler_cfg, seed)?;
    let img = render(&st, model, req.layout, opts).await?;
    let hash = store_image(&st, &img)?;
    Ok(Json(json!({ "seed": seed, "image_hash": hash, "image_url": image_url(&hash) })))
}

async fn get_image(State(st): State<Arc<AppState>>, UrlPath(name): UrlPath<String>) -> Response {
    let hash = name.strip_suffix(".png").unwrap_or(&name);
    match st.store.read_image(hash) {
        Some(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        None => ApiError::NotFound(format!("unknown image {hash}")).into_response(),
    }
}

async fn healthz(State(st): State<Arc<AppState>>) -> Response {
    match st.model() {
        Some(m) => Json(json!({ "status": "ready", "step": m.step, "config_hash": m.config_hash })).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/generate", post(generate_once))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/revisions", post(revise_session))
        .route("/images/{hash}", get(get_image))
        .with_state(state)
}

/// Binds `addr`, loads the checkpoint in the background (503 until done)
/// and serves until ctrl-c.
pub async fn serve(addr: &str, ckpt: std::path::PathBuf, state: Arc<AppState>) -> crate::Result<()> {
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match LoadedModel::load(&ckpt) {
        Ok(m) => {
            tracing::info!("loaded {} (step {})", ckpt.display(), m.step);
            loader.set_model(m);
        }
        Err(e) => tracing::error!("cannot load {}: {e}", ckpt.display()),
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
