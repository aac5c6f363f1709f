//! JSON inference service for the interactive demo.
//!
//! Read-only endpoints run concurrently; every sampling request goes through a
//! single worker thread that owns the model, so at most one inference is in
//! flight at a time.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use partflow::partdecode::{decode_full, decode_guided, decode_interactive, iou, match_parts, MAX_CLICKS};
use partflow::segdit::TaskCondition;
use partflow::shapeforge::{make_full_target, render_guidance, ShapeRecord, DEFAULT_GUIDANCE_SIZE};
use partflow::voxcore::{sample_palette_default, Coord, Palette};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use crate::bundle::ModelBundle;
use crate::config::EvalConfig;
use crate::segment::{click_prompt, FlowSegmenter};

/// Upper bound on sampling steps accepted from clients.
pub const MAX_REQUEST_STEPS: usize = 1000;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShapeSummary {
    pub id: String,
    pub num_parts: u32,
    pub resolution: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShapeDetail {
    pub coords: Vec<Coord>,
    pub gt_labels: Vec<u32>,
    pub resolution: u32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RequestTask {
    Interactive,
    Full,
    Guided,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentRequest {
    pub shape_id: String,
    pub task: RequestTask,
    #[serde(default)]
    pub clicks: Vec<[i64; 3]>,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub palette_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentResponse {
    pub colors: Vec<[f32; 3]>,
    pub labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_vs_gt: Option<f64>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest", message)
    }

    fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message.to_string())
    }

    fn unknown_shape(id: &str) -> Self {
        Self::new(StatusCode::CONFLICT, "UnknownShape", format!("no shape with id {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.code.into(), message: self.message })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "InvalidRequest", r.body_text())
    }
}

/// A validated request handed to the inference worker.
struct Job {
    shape: usize,
    cond: TaskCondition,
    task: RequestTask,
    clicks: Vec<Coord>,
    palette_seed: Option<u64>,
    steps: usize,
    seed: u64,
    reply: oneshot::Sender<Result<SegmentResponse, ApiError>>,
}

#[derive(Clone)]
pub struct AppState {
    shapes: Arc<Vec<ShapeRecord>>,
    index: Arc<HashMap<String, usize>>,
    settings: Arc<EvalConfig>,
    queue: mpsc::Sender<Job>,
}

impl AppState {
    /// Starts the inference worker, which owns `bundle` until every handle
    /// to the state is dropped.
    pub fn new(bundle: ModelBundle, shapes: Vec<ShapeRecord>, settings: EvalConfig) -> Self {
        let shapes = Arc::new(shapes);
        let index = Arc::new(shapes.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect());
        let (queue, mut rx) = mpsc::channel::<Job>(64);
        let worker_shapes = Arc::clone(&shapes);
        let delta_c = settings.delta_c;
        std::thread::spawn(move || {
            while let Some(job) = rx.blocking_recv() {
                let result = run_job(&bundle, &worker_shapes[job.shape], &job, delta_c);
                // The client may have disconnected; nothing to do then.
                let _ = job.reply.send(result);
            }
        });
        Self { shapes, index, settings: Arc::new(settings), queue }
    }

    fn shape(&self, id: &str) -> Result<usize, ApiError> {
        self.index.get(id).copied().ok_or_else(|| ApiError::unknown_shape(id))
    }
}

fn run_job(bundle: &ModelBundle, shape: &ShapeRecord, job: &Job, delta_c: f64) -> Result<SegmentResponse, ApiError> {
    let seg = FlowSegmenter::new(bundle, job.steps);
    let start = Instant::now();
    let colored = seg.colorize(&shape.grid, &job.cond, job.seed).map_err(ApiError::internal)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let (labels, iou_vs_gt) = match job.task {
        RequestTask::Interactive => {
            let mask = decode_interactive(&colored);
            let part = shape.labels.labels()[shape.grid.index_of(job.clicks[0]).expect("validated click")];
            let score = iou(&mask, &shape.labels.mask(part)).map_err(ApiError::internal)?;
            (mask.iter().map(|&m| u32::from(m)).collect(), score)
        }
        RequestTask::Full | RequestTask::Guided => {
            let pred = if job.task == RequestTask::Full {
                decode_full(&colored, delta_c)
            } else {
                decode_guided(&colored, &guidance_palette(shape, job.palette_seed)?)
            };
            let score = match_parts(&pred, &shape.labels).map_err(ApiError::internal)?.mean_iou;
            (pred.labels().to_vec(), score)
        }
    };
    Ok(SegmentResponse { colors: colored.colors(), labels, iou_vs_gt: Some(iou_vs_gt), elapsed_ms })
}

fn guidance_palette(shape: &ShapeRecord, palette_seed: Option<u64>) -> Result<Palette, ApiError> {
    match palette_seed {
        Some(seed) => sample_palette_default(shape.num_parts() as usize, seed).map_err(ApiError::internal),
        None => shape.palettes().map_err(ApiError::internal)?.into_iter().next().ok_or_else(|| ApiError::internal("no palette")),
    }
}

fn validate(state: &AppState, req: &SegmentRequest) -> Result<(usize, Vec<Coord>, TaskCondition), ApiError> {
    let s = state.shape(&req.shape_id)?;
    let shape = &state.shapes[s];
    if req.clicks.len() > MAX_CLICKS {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "TooManyPoints",
            format!("{} clicks given, at most {MAX_CLICKS} allowed", req.clicks.len()),
        ));
    }
    if req.steps == 0 || req.steps > MAX_REQUEST_STEPS {
        return Err(ApiError::invalid(format!("steps must be in 1..={MAX_REQUEST_STEPS}")));
    }
    let clicks: Vec<Coord> = req
        .clicks
        .iter()
        .map(|c| {
            let coord: Option<Coord> = c.iter().map(|&v| u16::try_from(v).ok()).collect::<Option<Vec<_>>>().map(|v| [v[0], v[1], v[2]]);
            coord
                .filter(|&c| shape.grid.index_of(c).is_some())
                .ok_or_else(|| ApiError::invalid(format!("click {c:?} is not an active voxel")))
        })
        .collect::<Result<_, _>>()?;
    let cond = match req.task {
        RequestTask::Interactive => {
            if clicks.is_empty() {
                return Err(ApiError::invalid("interactive segmentation needs at least one click"));
            }
            TaskCondition::Interactive(click_prompt(&shape.grid, &clicks).map_err(ApiError::internal)?)
        }
        RequestTask::Full => TaskCondition::Full,
        RequestTask::Guided => {
            let palette = guidance_palette(shape, req.palette_seed)?;
            let target = make_full_target(&shape.grid, &shape.labels, &palette).map_err(ApiError::internal)?;
            let map = render_guidance(&shape.grid, &target, state.settings.guidance_view, DEFAULT_GUIDANCE_SIZE, DEFAULT_GUIDANCE_SIZE)
                .map_err(ApiError::internal)?;
            TaskCondition::GuidedFull(map)
        }
    };
    Ok((s, clicks, cond))
}

async fn list_shapes(State(state): State<AppState>) -> Json<Vec<ShapeSummary>> {
    Json(
        state
            .shapes
            .iter()
            .map(|s| ShapeSummary { id: s.id.clone(), num_parts: s.num_parts(), resolution: s.grid.resolution() })
            .collect(),
    )
}

async fn get_shape(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ShapeDetail>, ApiError> {
    let shape = &state.shapes[state.shape(&id)?];
    Ok(Json(ShapeDetail {
        coords: shape.grid.coords().to_vec(),
        gt_labels: shape.labels.labels().to_vec(),
        resolution: shape.grid.resolution(),
    }))
}

async fn segment(
    State(state): State<AppState>,
    payload: Result<Json<SegmentRequest>, JsonRejection>,
) -> Result<Json<SegmentResponse>, ApiError> {
    let Json(req) = payload?;
    let (shape, clicks, cond) = validate(&state, &req)?;
    let (reply, response) = oneshot::channel();
    let job = Job { shape, cond, task: req.task, clicks, palette_seed: req.palette_seed, steps: req.steps, seed: req.seed, reply };
    state.queue.send(job).await.map_err(|_| ApiError::internal("inference worker stopped"))?;
    let result = response.await.map_err(|_| ApiError::internal("inference worker dropped the request"))?;
    result.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/shapes", get(list_shapes))
        .route("/api/shape/{id}", get(get_shape))
        .route("/api/segment", post(segment))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
