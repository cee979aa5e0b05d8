//! REST facade over in-context prediction. Sessions hold example pairs in
//! memory; the model is shared read-only by every request.

mod error;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::Serialize;

use icseg::imageops::{area_downsample, rgb_from_png_bytes, rgb_to_png_bytes};
use icseg::inference::{predict_image, EnsembleSpec, InferenceError, Strategy};
use icseg::model::{ModelConfig, ModelState};
use icseg::palette::{decode, recolor, Palette};
use icseg::segmap::{SegmentMap, TaskKind};

pub use error::ApiError;

/// Response header carrying per-stage latencies in microseconds.
pub const TIMING_HEADER: &str = "x-icseg-timing";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_examples: usize,
    pub ttl: Duration,
    pub model_id: String,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_examples: 16,
            ttl: Duration::from_secs(3600),
            model_id: "default".into(),
            max_body_bytes: 32 << 20,
        }
    }
}

#[derive(Clone)]
struct Example {
    id: u64,
    source: RgbImage,
    mask: SegmentMap,
    palette: Palette,
}

struct Session {
    created_at: u64,
    last_used: Instant,
    next_id: u64,
    examples: Vec<Example>,
}

pub struct AppState {
    model: Arc<ModelState<f32>>,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

impl AppState {
    pub fn new(model: ModelState<f32>, cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: Arc::new(model),
            cfg,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        let mut map = self.sessions.lock().expect("session map poisoned");
        let now = Instant::now();
        map.retain(|_, s| s.try_lock().map_or(true, |s| now.duration_since(s.last_used) < self.cfg.ttl));
        map.get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.cfg.max_body_bytes;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/models", get(models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", delete(delete_session))
        .route("/sessions/{id}/examples", post(add_example).get(list_examples))
        .route("/sessions/{id}/examples/{eid}", delete(remove_example))
        .route("/sessions/{id}/predict", post(predict))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct ModelInfo {
    id: String,
    config: ModelConfig,
    param_count: usize,
    checksum: String,
}

async fn models(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let info = ModelInfo {
        id: st.cfg.model_id.clone(),
        config: *st.model.config(),
        param_count: st.model.param_count(),
        checksum: st.model.checksum(),
    };
    Json(serde_json::json!({ "models": [info] }))
}

#[derive(Serialize)]
struct SessionCreated {
    id: String,
    model_id: String,
    created_at: u64,
}

async fn create_session(State(st): State<Arc<AppState>>) -> impl IntoResponse {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let session = Session {
        created_at,
        last_used: Instant::now(),
        next_id: 1,
        examples: Vec::new(),
    };
    st.sessions
        .lock()
        .expect("session map poisoned")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    (
        StatusCode::CREATED,
        Json(SessionCreated {
            id,
            model_id: st.cfg.model_id.clone(),
            created_at,
        }),
    )
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    st.session(&id)?;
    st.sessions.lock().expect("session map poisoned").remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Serialize)]
struct ExampleInfo {
    id: u64,
    width: u32,
    height: u32,
    ids: Vec<u32>,
    thumbnail_png: String,
}

#[derive(Serialize)]
struct ExampleList {
    session_id: String,
    created_at: u64,
    examples: Vec<ExampleInfo>,
}

fn thumbnail(img: &RgbImage) -> String {
    let factor = (img.width().max(img.height()) / 32).max(1);
    let small = area_downsample(img, factor);
    B64.encode(rgb_to_png_bytes(&small).unwrap_or_default())
}

fn example_list(id: &str, s: &Session) -> ExampleList {
    ExampleList {
        session_id: id.to_string(),
        created_at: s.created_at,
        examples: s
            .examples
            .iter()
            .map(|e| ExampleInfo {
                id: e.id,
                width: e.source.width(),
                height: e.source.height(),
                ids: e.mask.id_set().into_iter().collect(),
                thumbnail_png: thumbnail(&e.source),
            })
            .collect(),
    }
}

async fn list_examples(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ExampleList>, ApiError> {
    let session = st.session(&id)?;
    let mut s = session.lock().await;
    s.last_used = Instant::now();
    Ok(Json(example_list(&id, &s)))
}

async fn read_fields(mut mp: Multipart) -> Result<BTreeMap<String, Vec<u8>>, ApiError> {
    let mut out = BTreeMap::new();
    while let Some(field) = mp.next_field().await? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await?;
        out.insert(name, bytes.to_vec());
    }
    Ok(out)
}

fn required<'a>(fields: &'a BTreeMap<String, Vec<u8>>, name: &str) -> Result<&'a [u8], ApiError> {
    fields
        .get(name)
        .map(Vec::as_slice)
        .ok_or_else(|| ApiError::bad_request(format!("missing multipart field `{name}`")))
}

fn text_field(fields: &BTreeMap<String, Vec<u8>>, name: &str) -> Result<Option<String>, ApiError> {
    fields
        .get(name)
        .map(|b| {
            String::from_utf8(b.clone())
                .map(|s| s.trim().to_string())
                .map_err(|_| ApiError::bad_request(format!("field `{name}` is not UTF-8")))
        })
        .transpose()
}

async fn add_example(State(st): State<Arc<AppState>>, Path(id): Path<String>, mp: Multipart) -> Result<impl IntoResponse, ApiError> {
    let session = st.session(&id)?;
    let fields = read_fields(mp).await?;
    let source = rgb_from_png_bytes(required(&fields, "source")?)
        .map_err(|e| ApiError::unprocessable(format!("source is not a decodable PNG: {e}")))?;
    let mask = SegmentMap::from_png_bytes(required(&fields, "mask")?, TaskKind::Category)
        .map_err(|e| ApiError::unprocessable(format!("mask is not a decodable 8/16-bit grayscale PNG: {e}")))?;
    let palette_text = std::str::from_utf8(required(&fields, "palette")?).map_err(|_| ApiError::bad_request("palette is not UTF-8"))?;
    let palette = Palette::from_json(palette_text).map_err(|e| ApiError::unprocessable(format!("bad palette: {e}")))?;
    let side = st.model.config().image_side();
    if source.dimensions() != (side, side) || mask.dimensions() != (side, side) {
        return Err(ApiError::unprocessable(format!(
            "source {:?} and mask {:?} must both be {side}x{side}",
            source.dimensions(),
            mask.dimensions()
        )));
    }
    if let Some(missing) = mask.id_set().into_iter().find(|&i| palette.get(i).is_none()) {
        return Err(ApiError::unprocessable(format!("palette has no color for mask id {missing}")));
    }
    let mut s = session.lock().await;
    s.last_used = Instant::now();
    if s.examples.len() >= st.cfg.max_examples {
        return Err(ApiError::too_large(format!(
            "session already holds {} examples",
            st.cfg.max_examples
        )));
    }
    let eid = s.next_id;
    s.next_id += 1;
    s.examples.push(Example {
        id: eid,
        source,
        mask,
        palette,
    });
    Ok((StatusCode::CREATED, Json(example_list(&id, &s))))
}

async fn remove_example(State(st): State<Arc<AppState>>, Path((id, eid)): Path<(String, u64)>) -> Result<Json<ExampleList>, ApiError> {
    let session = st.session(&id)?;
    let mut s = session.lock().await;
    s.last_used = Instant::now();
    let pos = s
        .examples
        .iter()
        .position(|e| e.id == eid)
        .ok_or_else(|| ApiError::not_found(format!("session {id} has no example {eid}")))?;
    s.examples.remove(pos);
    Ok(Json(example_list(&id, &s)))
}

#[derive(Serialize)]
struct PredictResponse {
    strategy: Strategy,
    task_kind: TaskKind,
    grid_n: u32,
    examples: usize,
    palette: Palette,
    prediction_png: String,
    mask_png: String,
}

/// Palette of the session: the first example that names an id decides its
/// color, so every example target is rendered consistently.
fn merged_palette(examples: &[Example]) -> Palette {
    let mut entries = BTreeMap::new();
    for e in examples {
        for id in e.palette.ids() {
            entries.entry(id).or_insert_with(|| e.palette.get(id).expect("listed id"));
        }
    }
    Palette::new(examples[0].palette.background, entries)
}

async fn predict(State(st): State<Arc<AppState>>, Path(id): Path<String>, mp: Multipart) -> Result<impl IntoResponse, ApiError> {
    let t0 = Instant::now();
    let session = st.session(&id)?;
    let fields = read_fields(mp).await?;
    let strategy: Strategy = text_field(&fields, "strategy")?
        .map(|s| s.parse().map_err(ApiError::bad_request))
        .transpose()?
        .unwrap_or_default();
    let kind: TaskKind = text_field(&fields, "task_kind")?
        .map(|s| s.parse().map_err(ApiError::bad_request))
        .transpose()?
        .unwrap_or(TaskKind::Category);
    let grid_n: Option<u32> = text_field(&fields, "grid_n")?
        .map(|s| {
            s.parse()
                .map_err(|_| ApiError::bad_request(format!("grid_n must be a positive integer, got {s:?}")))
        })
        .transpose()?;
    let query = rgb_from_png_bytes(required(&fields, "query")?)
        .map_err(|e| ApiError::unprocessable(format!("query is not a decodable PNG: {e}")))?;
    let examples = {
        let mut s = session.lock().await;
        s.last_used = Instant::now();
        s.examples.clone()
    };
    if examples.is_empty() {
        return Err(ApiError::conflict("session has no examples"));
    }
    let t_parse = t0.elapsed();

    let model = Arc::clone(&st.model);
    let result = tokio::task::spawn_blocking(move || -> Result<(PredictResponse, Duration, Duration), ApiError> {
        let t1 = Instant::now();
        let palette = merged_palette(&examples);
        let pairs = examples
            .iter()
            .map(|e| {
                Ok((
                    e.source.clone(),
                    recolor(&e.mask, &palette).map_err(|e| ApiError::unprocessable(e.to_string()))?,
                ))
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        let n = pairs.len();
        let grid_n = grid_n.unwrap_or_else(|| (n as f64).sqrt().ceil() as u32);
        let spec = match strategy {
            // a single-example request uses the first example of the session
            Strategy::Single => EnsembleSpec::single(pairs[0].0.clone(), pairs[0].1.clone()),
            _ => EnsembleSpec {
                strategy,
                examples: pairs,
                grid_n,
            },
        };
        let pred = predict_image(&model, &spec, &query, kind).map_err(|e| match e {
            InferenceError::Geometry(_) | InferenceError::Model(_) => ApiError::unprocessable(e.to_string()),
            InferenceError::InvalidSpec(_) | InferenceError::GridOverflow { .. } => ApiError::unprocessable(e.to_string()),
            other => ApiError::internal(other.to_string()),
        })?;
        let t_model = t1.elapsed();
        let t2 = Instant::now();
        let map = decode(&pred.image, &palette, kind);
        let mask_png = map.to_png_bytes().map_err(|e| ApiError::internal(e.to_string()))?;
        let prediction_png = rgb_to_png_bytes(&pred.image).map_err(|e| ApiError::internal(e.to_string()))?;
        let resp = PredictResponse {
            strategy,
            task_kind: kind,
            grid_n: if strategy == Strategy::Spatial { grid_n } else { 1 },
            examples: if strategy == Strategy::Single { 1 } else { n },
            palette,
            prediction_png: B64.encode(prediction_png),
            mask_png: B64.encode(mask_png),
        };
        Ok((resp, t_model, t2.elapsed()))
    })
    .await
    .map_err(|e| ApiError::internal(format!("prediction task failed: {e}")))?;
    let (resp, t_model, t_encode) = result?;
    let mut headers = HeaderMap::new();
    let timing = format!(
        "parse={} model={} encode={}",
        t_parse.as_micros(),
        t_model.as_micros(),
        t_encode.as_micros()
    );
    headers.insert(TIMING_HEADER, HeaderValue::from_str(&timing).expect("ascii header"));
    Ok((headers, Json(resp)))
}
