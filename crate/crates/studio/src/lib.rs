//! HTTP inference service for the makeup studio.
//!
//! One frozen bundle is loaded at start-up and shared read-only. Sessions hold
//! a preprocessed source face and uploaded references together with their
//! cached style codes, so a slider move costs one generator pass.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tower_http::cors::{Any, CorsLayer};

use slgan::dataset::{decode_image, ImageTensor};
use slgan::domain::{Domain, LatentCode, StyleCode};
use slgan::inference::{blend, interpolate_styles, sweep_codes, Face, FrozenModel, InferenceError};
use slgan::training::load_checkpoint;

pub const DEFAULT_BODY_LIMIT: usize = 16 * 1024 * 1024;
pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(3600);

#[derive(Debug, Error)]
pub enum StudioError {
    #[error("no bundle loaded")]
    BundleNotLoaded,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown reference {0}")]
    UnknownReference(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("payload too large: {0}")]
    TooLarge(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("cannot read bundle {path}: {source}")]
    BundleIo {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl StudioError {
    pub fn status(&self) -> StatusCode {
        match self {
            StudioError::BundleNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            StudioError::UnknownSession(_) | StudioError::UnknownReference(_) => StatusCode::NOT_FOUND,
            StudioError::BadRequest(_) => StatusCode::BAD_REQUEST,
            StudioError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            StudioError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StudioError::Inference(e) => match e {
                InferenceError::WeightSumViolation { .. }
                | InferenceError::CountMismatch { .. }
                | InferenceError::NoReferences
                | InferenceError::TooFewSteps(_) => StatusCode::UNPROCESSABLE_ENTITY,
                InferenceError::Dataset(_) => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            StudioError::BundleIo { .. } | StudioError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<MultipartError> for StudioError {
    fn from(e: MultipartError) -> Self {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            StudioError::TooLarge(e.body_text())
        } else {
            StudioError::BadRequest(e.body_text())
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for StudioError {
    fn into_response(self) -> Response {
        let status = self.status();
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

/// The frozen model plus the identity of the checkpoint it came from.
pub struct LoadedBundle {
    pub model: FrozenModel,
    /// SHA-256 of the checkpoint file.
    pub hash: String,
    pub step: u64,
}

impl LoadedBundle {
    pub fn load(path: &Path) -> Result<Self, StudioError> {
        let bytes = std::fs::read(path).map_err(|source| StudioError::BundleIo {
            path: path.display().to_string(),
            source,
        })?;
        let bundle = load_checkpoint(path).map_err(InferenceError::from)?;
        Ok(Self {
            model: FrozenModel::from_bundle(&bundle),
            hash: hex::encode(Sha256::digest(&bytes)),
            step: bundle.step,
        })
    }
}

/// An uploaded face with its style code in each domain.
struct Upload {
    face: Face,
    codes: [StyleCode; 2],
    unmasked: bool,
}

impl Upload {
    fn code(&self, d: Domain) -> &StyleCode {
        &self.codes[d.index()]
    }
}

struct Session {
    source: Upload,
    references: RwLock<Vec<(String, Arc<Upload>)>>,
    last_used: Mutex<Instant>,
}

pub struct Studio {
    bundle: Option<LoadedBundle>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    ttl: Duration,
}

impl Studio {
    pub fn new(bundle: Option<LoadedBundle>, ttl: Duration) -> Self {
        Self {
            bundle,
            sessions: RwLock::new(HashMap::new()),
            ttl,
        }
    }

    fn bundle(&self) -> Result<&LoadedBundle, StudioError> {
        self.bundle.as_ref().ok_or(StudioError::BundleNotLoaded)
    }

    fn purge_expired(&self) {
        let now = Instant::now();
        let mut map = self.sessions.write().expect("session map lock");
        map.retain(|_, s| now.duration_since(*s.last_used.lock().expect("session clock")) <= self.ttl);
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, StudioError> {
        self.purge_expired();
        let s = self
            .sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| StudioError::UnknownSession(id.to_string()))?;
        *s.last_used.lock().expect("session clock") = Instant::now();
        Ok(s)
    }

    fn encode(&self, files: &UploadFiles) -> Result<Upload, StudioError> {
        let model = &self.bundle()?.model;
        let raw = decode_image(&files.image).map_err(InferenceError::from)?;
        let dims = (raw.width(), raw.height());
        if let Some(p) = &files.parsing {
            let seg = decode_image(p).map_err(InferenceError::from)?;
            if (seg.width(), seg.height()) != dims {
                return Err(StudioError::BadRequest(format!(
                    "parsing map is {}x{}, image is {}x{}",
                    seg.width(),
                    seg.height(),
                    dims.0,
                    dims.1
                )));
            }
        }
        let face = model.face_from_bytes(&files.image, files.parsing.as_deref(), files.landmarks.as_deref())?;
        let m = model.style_code(&face, Domain::Makeup)?;
        let n = model.style_code(&face, Domain::NonMakeup)?;
        let codes = if Domain::Makeup.index() == 0 { [m, n] } else { [n, m] };
        Ok(Upload {
            face,
            codes,
            unmasked: files.parsing.is_none(),
        })
    }
}

#[derive(Default)]
struct UploadFiles {
    image: Vec<u8>,
    parsing: Option<Vec<u8>>,
    landmarks: Option<String>,
}

async fn read_upload(mut mp: Multipart) -> Result<UploadFiles, StudioError> {
    let mut image = None;
    let mut files = UploadFiles::default();
    while let Some(field) = mp.next_field().await? {
        match field.name().unwrap_or_default() {
            "image" => image = Some(field.bytes().await?.to_vec()),
            "parsing" => files.parsing = Some(field.bytes().await?.to_vec()),
            "landmarks" => files.landmarks = Some(field.text().await?),
            _ => {
                field.bytes().await?;
            }
        }
    }
    files.image = image.ok_or_else(|| StudioError::BadRequest("missing `image` field".into()))?;
    Ok(files)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, StudioError> + Send + 'static,
) -> Result<T, StudioError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| StudioError::Internal(e.to_string()))?
}

fn parse_domain(s: Option<&str>, default: Domain) -> Result<Domain, StudioError> {
    match s {
        None => Ok(default),
        Some(s) => Domain::parse(s).ok_or_else(|| StudioError::Unprocessable(format!("unknown domain {s:?}"))),
    }
}

fn png_base64(img: &ImageTensor) -> Result<String, StudioError> {
    let mut buf = Cursor::new(Vec::new());
    img.to_rgb8()
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| StudioError::Internal(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

type AppState = Arc<Studio>;

#[derive(Serialize, Deserialize, Debug)]
pub struct SessionCreated {
    pub session_id: String,
    pub unmasked: bool,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct ReferenceAdded {
    pub reference_id: String,
    pub style_code_norm: f64,
    pub unmasked: bool,
}

/// Render request. `style` mixes reference codes with `weights`; `blend`
/// moves from the source's own code to the first reference by `alpha`;
/// `latent` blends the codes of two latent seeds by `alpha`.
#[derive(Serialize, Deserialize, Debug, Clone, Default)]
pub struct RenderRequest {
    pub mode: String,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub seeds: Option<(u64, u64)>,
    #[serde(default)]
    pub domain: Option<String>,
    /// Reference ids to use, in weight order; all references when absent.
    #[serde(default)]
    pub references: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct RenderResponse {
    pub image: String,
    pub latency_ms: f64,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct SweepRequest {
    pub reference: String,
    pub steps: usize,
    #[serde(default)]
    pub domain: Option<String>,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct SweepResponse {
    pub frames: Vec<String>,
    pub latency_ms: f64,
}

#[derive(Serialize, Deserialize, Debug)]
pub struct Health {
    pub status: String,
    pub bundle_hash: Option<String>,
    pub step: Option<u64>,
}

async fn health(State(st): State<AppState>) -> Response {
    match &st.bundle {
        Some(b) => Json(Health {
            status: "ok".into(),
            bundle_hash: Some(b.hash.clone()),
            step: Some(b.step),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "no bundle".into(),
                bundle_hash: None,
                step: None,
            }),
        )
            .into_response(),
    }
}

async fn create_session(State(st): State<AppState>, mp: Multipart) -> Result<Response, StudioError> {
    st.bundle()?;
    let files = read_upload(mp).await?;
    let st2 = st.clone();
    let source = blocking(move || st2.encode(&files)).await?;
    let id = uuid::Uuid::new_v4().to_string();
    let unmasked = source.unmasked;
    st.purge_expired();
    st.sessions.write().expect("session map lock").insert(
        id.clone(),
        Arc::new(Session {
            source,
            references: RwLock::new(Vec::new()),
            last_used: Mutex::new(Instant::now()),
        }),
    );
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: id,
            unmasked,
        }),
    )
        .into_response())
}

async fn add_reference(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    mp: Multipart,
) -> Result<Json<ReferenceAdded>, StudioError> {
    st.bundle()?;
    let session = st.session(&id)?;
    let files = read_upload(mp).await?;
    let st2 = st.clone();
    let upload = blocking(move || st2.encode(&files)).await?;
    let norm = upload.code(Domain::Makeup).l2_norm();
    let unmasked = upload.unmasked;
    let rid = uuid::Uuid::new_v4().to_string();
    session
        .references
        .write()
        .expect("reference list lock")
        .push((rid.clone(), Arc::new(upload)));
    Ok(Json(ReferenceAdded {
        reference_id: rid,
        style_code_norm: norm,
        unmasked,
    }))
}

fn select(session: &Session, ids: Option<&[String]>) -> Result<Vec<Arc<Upload>>, StudioError> {
    let refs = session.references.read().expect("reference list lock");
    match ids {
        None => Ok(refs.iter().map(|(_, u)| u.clone()).collect()),
        Some(ids) => ids
            .iter()
            .map(|id| {
                refs.iter()
                    .find(|(rid, _)| rid == id)
                    .map(|(_, u)| u.clone())
                    .ok_or_else(|| StudioError::UnknownReference(id.clone()))
            })
            .collect(),
    }
}

fn style_for(model: &FrozenModel, session: &Session, req: &RenderRequest) -> Result<StyleCode, StudioError> {
    let domain = parse_domain(req.domain.as_deref(), Domain::Makeup)?;
    let alpha = req.alpha.unwrap_or(1.0);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(StudioError::Unprocessable(format!("alpha {alpha} outside [0, 1]")));
    }
    match req.mode.as_str() {
        "style" => {
            let refs = select(session, req.references.as_deref())?;
            let codes: Vec<StyleCode> = refs.iter().map(|u| u.code(domain).clone()).collect();
            if codes.is_empty() {
                return Err(InferenceError::NoReferences.into());
            }
            Ok(interpolate_styles(&codes, &req.weights)?)
        }
        "blend" => {
            let refs = select(session, req.references.as_deref())?;
            let first = refs.first().ok_or(InferenceError::NoReferences)?;
            let own = session.source.code(domain.opposite());
            Ok(blend(own, first.code(domain), alpha))
        }
        "latent" => {
            let (a, b) = req.seeds.unwrap_or((0, 1));
            let sa = model.latent_style(&LatentCode::from_seed(a), domain)?;
            let sb = model.latent_style(&LatentCode::from_seed(b), domain)?;
            Ok(blend(&sa, &sb, alpha))
        }
        other => Err(StudioError::Unprocessable(format!(
            "unknown mode {other:?}; expected style, blend or latent"
        ))),
    }
}

async fn render(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<RenderRequest>,
) -> Result<Json<RenderResponse>, StudioError> {
    st.bundle()?;
    let session = st.session(&id)?;
    let t0 = Instant::now();
    let st2 = st.clone();
    let image = blocking(move || {
        let model = &st2.bundle()?.model;
        let s = style_for(model, &session, &req)?;
        png_base64(&model.render(&session.source.face, &s)?)
    })
    .await?;
    Ok(Json(RenderResponse {
        image,
        latency_ms: t0.elapsed().as_secs_f64() * 1e3,
    }))
}

async fn sweep(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SweepRequest>,
) -> Result<Json<SweepResponse>, StudioError> {
    st.bundle()?;
    let session = st.session(&id)?;
    let t0 = Instant::now();
    let st2 = st.clone();
    let frames = blocking(move || {
        let model = &st2.bundle()?.model;
        let domain = parse_domain(req.domain.as_deref(), Domain::Makeup)?;
        let r = select(&session, Some(std::slice::from_ref(&req.reference)))?.remove(0);
        let codes = sweep_codes(session.source.code(domain.opposite()), r.code(domain), req.steps)?;
        codes
            .iter()
            .map(|s| png_base64(&model.render(&session.source.face, s)?))
            .collect::<Result<Vec<_>, _>>()
    })
    .await?;
    Ok(Json(SweepResponse {
        frames,
        latency_ms: t0.elapsed().as_secs_f64() * 1e3,
    }))
}

/// Runtime settings, normally read from the environment.
#[derive(Clone, Debug)]
pub struct StudioConfig {
    pub bundle: Option<PathBuf>,
    pub port: u16,
    /// Allowed CORS origin; any origin when unset.
    pub origin: Option<String>,
    pub body_limit: usize,
    pub session_ttl: Duration,
}

impl StudioConfig {
    /// `SLGAN_BUNDLE`, `SLGAN_PORT` (default 8080), `SLGAN_STUDIO_ORIGIN`,
    /// `SLGAN_BODY_LIMIT` (bytes) and `SLGAN_SESSION_TTL` (seconds).
    pub fn from_env() -> Result<Self, StudioError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let num = |k: &str, default: u64| -> Result<u64, StudioError> {
            var(k)
                .map(|v| v.parse().map_err(|_| StudioError::BadRequest(format!("{k}={v} is not a number"))))
                .unwrap_or(Ok(default))
        };
        Ok(Self {
            bundle: var("SLGAN_BUNDLE").map(PathBuf::from),
            port: num("SLGAN_PORT", 8080)? as u16,
            origin: var("SLGAN_STUDIO_ORIGIN"),
            body_limit: num("SLGAN_BODY_LIMIT", DEFAULT_BODY_LIMIT as u64)? as usize,
            session_ttl: Duration::from_secs(num("SLGAN_SESSION_TTL", DEFAULT_SESSION_TTL.as_secs())?),
        })
    }
}

/// The service's routes with body limit and CORS applied.
pub fn router(studio: Arc<Studio>, body_limit: usize, origin: Option<&str>) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => cors.allow_origin(o),
        None => cors.allow_origin(Any),
    };
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create_session))
        .route("/session/{id}/reference", post(add_reference))
        .route("/session/{id}/render", post(render))
        .route("/session/{id}/sweep", post(sweep))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(cors)
        .with_state(studio)
}
