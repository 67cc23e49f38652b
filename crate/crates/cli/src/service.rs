//! HTTP inference service over a directory of trained checkpoints.
//!
//! Every request is validated against the character's schema before the
//! model is touched. Inference for one character is serialized through its
//! mutex; different characters run in parallel on the blocking pool.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context};
use axum::body::Body;
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chargan_core::animation::{
    gif_bytes, render_frame, AnimationTimeline, ExportFormat, Frame, TimelineFile,
};
use chargan_core::connectivity::{KeypointMove, RefineConfig};
use chargan_core::dataset::{KeypointId, Pose};
use chargan_core::model::Model;
use chargan_core::raster::Rgb;
use chargan_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

/// Timelines longer than this are always rendered as background jobs.
pub const DEFAULT_SYNC_FRAME_LIMIT: usize = 60;
/// Upper bound on frames per animation request.
pub const MAX_FRAMES: usize = 2000;
const JOB_WORKERS: usize = 2;

pub struct Character {
    pub id: String,
    model: Mutex<Model>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

struct Job {
    status: JobStatus,
    frames_done: usize,
    total_frames: usize,
    error: Option<String>,
    result: Option<Artifact>,
}

#[derive(Clone)]
enum Artifact {
    Gif(Vec<u8>),
    Frames(FrameArchive),
}

pub struct AppState {
    characters: BTreeMap<String, Arc<Character>>,
    jobs: Mutex<HashMap<u64, Job>>,
    next_job: AtomicU64,
    inference_calls: AtomicU64,
    workers: Arc<Semaphore>,
    sync_frame_limit: usize,
}

impl AppState {
    pub fn new(models: Vec<(String, Model)>) -> anyhow::Result<Self> {
        let mut characters = BTreeMap::new();
        for (id, model) in models {
            if characters.contains_key(&id) {
                bail!("duplicate character id {id}");
            }
            characters.insert(
                id.clone(),
                Arc::new(Character {
                    id,
                    model: Mutex::new(model),
                }),
            );
        }
        Ok(Self {
            characters,
            jobs: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
            inference_calls: AtomicU64::new(0),
            workers: Arc::new(Semaphore::new(JOB_WORKERS)),
            sync_frame_limit: DEFAULT_SYNC_FRAME_LIMIT,
        })
    }

    /// Load `<dir>/<id>.safetensors` and `<dir>/<id>/model.safetensors`.
    pub fn load_dir(dir: &Path) -> anyhow::Result<Self> {
        let mut models = Vec::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            let (id, file) = if path.is_dir() {
                let f = path.join("model.safetensors");
                if !f.is_file() {
                    continue;
                }
                (path.file_name(), f)
            } else if path.extension().is_some_and(|e| e == "safetensors") {
                (path.file_stem(), path.clone())
            } else {
                continue;
            };
            let id = id.and_then(|s| s.to_str()).context("non-utf8 checkpoint name")?.to_string();
            let model = Model::load(&file).with_context(|| format!("loading {}", file.display()))?;
            log::info!("loaded character {id} from {}", file.display());
            models.push((id, model));
        }
        Self::new(models)
    }

    pub fn with_sync_frame_limit(mut self, limit: usize) -> Self {
        self.sync_frame_limit = limit;
        self
    }

    pub fn character_ids(&self) -> Vec<String> {
        self.characters.keys().cloned().collect()
    }

    /// Number of model invocations made so far.
    pub fn inference_calls(&self) -> u64 {
        self.inference_calls.load(Ordering::SeqCst)
    }

    fn character(&self, id: &str) -> Result<Arc<Character>, ApiError> {
        self.characters
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown character {id}")))
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    keypoint: Option<KeypointId>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: msg.into(),
                keypoint: None,
            },
        }
    }

    fn unprocessable(e: CoreError) -> Self {
        let keypoint = match &e {
            CoreError::Pose { keypoint, .. } => Some(*keypoint),
            _ => None,
        };
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody {
                error: e.to_string(),
                keypoint,
            },
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Serialize)]
struct KeypointSummary {
    id: KeypointId,
    name: String,
    layer: usize,
    color: Rgb,
    #[serde(skip_serializing_if = "Option::is_none")]
    state_group: Option<u32>,
}

#[derive(Serialize)]
struct SchemaSummary {
    layer_count: usize,
    keypoint_count: usize,
    reference_resolution: [usize; 2],
    schema_hash: String,
    keypoints: Vec<KeypointSummary>,
    skeleton: Vec<[KeypointId; 2]>,
}

#[derive(Serialize)]
struct CharacterSummary {
    id: String,
    name: String,
    predicts_mask: bool,
    schema: SchemaSummary,
}

fn summary(c: &Character) -> CharacterSummary {
    let model = c.model.lock().expect("model lock");
    let s = model.schema();
    CharacterSummary {
        id: c.id.clone(),
        name: s.name.clone(),
        predicts_mask: model.predicts_mask(),
        schema: SchemaSummary {
            layer_count: s.layer_count,
            keypoint_count: s.keypoints.len(),
            reference_resolution: [s.reference_resolution.0, s.reference_resolution.1],
            schema_hash: s.hash(),
            keypoints: s
                .keypoints
                .iter()
                .map(|k| KeypointSummary {
                    id: k.id,
                    name: k.name.clone(),
                    layer: k.layer_index,
                    color: k.color,
                    state_group: k.state_group,
                })
                .collect(),
            skeleton: s.skeleton.iter().map(|&(a, b)| [a, b]).collect(),
        },
    }
}

async fn list_characters(State(state): State<Arc<AppState>>) -> Json<Vec<CharacterSummary>> {
    Json(state.characters.values().map(|c| summary(c)).collect())
}

async fn get_character(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<CharacterSummary>, ApiError> {
    let c = state.character(&id)?;
    Ok(Json(summary(&c)))
}

#[derive(Clone, Debug, Deserialize)]
pub struct GenerateRequest {
    pub pose: Pose,
    #[serde(default)]
    pub schema_hash: Option<String>,
    #[serde(default)]
    pub mask_fix: bool,
    #[serde(default)]
    pub return_mask: bool,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub max_fix_iters: Option<usize>,
    /// The keypoint the user dragged; required with `mask_fix`.
    #[serde(default)]
    pub moved_keypoint: Option<KeypointId>,
    /// The drag displacement; required with `mask_fix`.
    #[serde(default)]
    pub move_vec: Option<[f64; 2]>,
}

#[derive(Debug, Serialize)]
struct RefinementBody {
    iterations: usize,
    converged: bool,
    moves: Vec<KeypointMove>,
}

#[derive(Debug, Serialize)]
struct GenerateBody {
    /// Base64 PNG.
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose: Option<Pose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    refinement: Option<RefinementBody>,
}

fn refine_config(delta: Option<f64>, max_iters: Option<usize>) -> Result<RefineConfig, ApiError> {
    let mut cfg = RefineConfig::default();
    if let Some(d) = delta {
        if !(0.0..=1.0).contains(&d) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("delta must lie in [0, 1], got {d}"),
            ));
        }
        cfg.delta = d;
    }
    if let Some(m) = max_iters {
        cfg.max_iters = m;
    }
    Ok(cfg)
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn generate(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<GenerateRequest>,
) -> Result<Response, ApiError> {
    let character = state.character(&id)?;
    // validation happens under the lock only long enough to read the schema
    let refine = {
        let model = character.model.lock().expect("model lock");
        let schema = model.schema();
        if let Some(h) = &req.schema_hash {
            if *h != schema.hash() {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("pose schema hash {h} does not match character schema {}", schema.hash()),
                ));
            }
        }
        req.pose.validate(schema).map_err(ApiError::unprocessable)?;
        if req.mask_fix && !model.predicts_mask() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "mask_fix requested but the model was trained without masks",
            ));
        }
        if req.return_mask && !model.predicts_mask() {
            return Err(ApiError::new(StatusCode::CONFLICT, "the model does not predict masks"));
        }
        if req.mask_fix {
            let (Some(kp), Some(v)) = (req.moved_keypoint, req.move_vec) else {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "mask_fix needs moved_keypoint and move_vec",
                ));
            };
            if req.pose.position(kp).is_none() {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("moved_keypoint {kp} is not positioned in the pose"),
                ));
            }
            Some((kp, v, refine_config(req.delta, req.max_fix_iters)?))
        } else {
            None
        }
    };

    let state2 = state.clone();
    let out = tokio::task::spawn_blocking(move || {
        let model = character.model.lock().expect("model lock");
        state2.inference_calls.fetch_add(1, Ordering::SeqCst);
        match &refine {
            Some((kp, v, cfg)) => model
                .generate_refined(&req.pose, *kp, *v, cfg)
                .map(|(g, r)| (g, Some(r))),
            None => model.generate(&req.pose).map(|g| (g, None)),
        }
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;

    let (generation, refinement) = out;
    let image = generation.image.encode_png().map_err(ApiError::internal)?;
    if !req.return_mask && refinement.is_none() {
        return Ok(png_response(image));
    }
    let mask = match (&generation.mask, req.return_mask) {
        (Some(m), true) => Some(B64.encode(m.encode_png().map_err(ApiError::internal)?)),
        _ => None,
    };
    let body = GenerateBody {
        image: B64.encode(image),
        mask,
        pose: refinement.as_ref().map(|r| r.pose.clone()),
        refinement: refinement.map(|r| RefinementBody {
            iterations: r.iterations,
            converged: r.converged,
            moves: r.moves,
        }),
    };
    Ok(Json(body).into_response())
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum AnimateMode {
    /// Synchronous for short timelines, a background job otherwise.
    #[default]
    Auto,
    Sync,
    Async,
}

#[derive(Clone, Debug, Deserialize)]
pub struct AnimateRequest {
    pub timeline: TimelineFile,
    #[serde(default)]
    pub format: ExportFormat,
    #[serde(default)]
    pub mode: AnimateMode,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub max_fix_iters: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
struct ArchiveFrame {
    index: usize,
    time: f64,
    /// Base64 PNG.
    image: String,
    flagged: bool,
    pose: Pose,
}

#[derive(Clone, Debug, Serialize)]
struct FrameArchive {
    fps: f64,
    frame_count: usize,
    frames: Vec<ArchiveFrame>,
}

fn artifact_response(a: Artifact) -> Response {
    match a {
        Artifact::Gif(bytes) => ([(header::CONTENT_TYPE, "image/gif")], bytes).into_response(),
        Artifact::Frames(archive) => Json(archive).into_response(),
    }
}

struct AnimateJob {
    character: Arc<Character>,
    timeline: AnimationTimeline,
    format: ExportFormat,
    refine: Option<RefineConfig>,
}

impl AnimateJob {
    /// Frames are generated one at a time so interactive requests for the
    /// same character can interleave.
    fn run(&self, state: &AppState, mut progress: impl FnMut(usize)) -> anyhow::Result<Artifact> {
        let plan = self.timeline.frame_plan()?;
        let mut frames: Vec<Frame> = Vec::with_capacity(plan.len());
        for p in &plan {
            let frame = {
                let model = self.character.model.lock().expect("model lock");
                state.inference_calls.fetch_add(1, Ordering::SeqCst);
                render_frame(&model, p, self.refine.as_ref())?
            };
            frames.push(frame);
            progress(frames.len());
        }
        Ok(match self.format {
            ExportFormat::Gif => {
                let images: Vec<_> = frames.iter().map(|f| &f.image).collect();
                Artifact::Gif(gif_bytes(&images, self.timeline.fps, self.timeline.looping)?)
            }
            ExportFormat::PngSequence => Artifact::Frames(FrameArchive {
                fps: self.timeline.fps,
                frame_count: frames.len(),
                frames: frames
                    .into_iter()
                    .map(|f| {
                        Ok(ArchiveFrame {
                            index: f.index,
                            time: f.time,
                            image: B64.encode(f.image.encode_png()?),
                            flagged: f.flagged,
                            pose: f.pose,
                        })
                    })
                    .collect::<chargan_core::Result<Vec<_>>>()?,
            }),
        })
    }
}

#[derive(Serialize)]
struct JobBody {
    id: u64,
    status: JobStatus,
    frames_done: usize,
    total_frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

async fn animate(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AnimateRequest>,
) -> Result<Response, ApiError> {
    let character = state.character(&id)?;
    if req.timeline.keyframes.iter().any(|k| k.pose_file.is_some()) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "keyframes must carry inline poses",
        ));
    }
    let timeline = req.timeline.resolve(None).map_err(ApiError::unprocessable)?;
    let refine = {
        let model = character.model.lock().expect("model lock");
        timeline.validate(model.schema()).map_err(ApiError::unprocessable)?;
        if timeline.mask_fix && !model.predicts_mask() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "mask_fix requested but the model was trained without masks",
            ));
        }
        if timeline.mask_fix {
            Some(refine_config(req.delta, req.max_fix_iters)?)
        } else {
            None
        }
    };
    let total = timeline.frame_count();
    if total > MAX_FRAMES {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("timeline has {total} frames; the limit is {MAX_FRAMES}"),
        ));
    }
    let job = AnimateJob {
        character,
        timeline,
        format: req.format,
        refine,
    };
    let background = match req.mode {
        AnimateMode::Sync => false,
        AnimateMode::Async => true,
        AnimateMode::Auto => total > state.sync_frame_limit,
    };

    if !background {
        let state2 = state.clone();
        let permit = state.workers.clone().acquire_owned().await.map_err(ApiError::internal)?;
        let artifact = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            job.run(&state2, |_| {})
        })
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
        return Ok(artifact_response(artifact));
    }

    let job_id = state.next_job.fetch_add(1, Ordering::SeqCst);
    state.jobs.lock().expect("jobs lock").insert(
        job_id,
        Job {
            status: JobStatus::Queued,
            frames_done: 0,
            total_frames: total,
            error: None,
            result: None,
        },
    );
    let state2 = state.clone();
    tokio::spawn(async move {
        let permit = match state2.workers.clone().acquire_owned().await {
            Ok(p) => p,
            Err(_) => return,
        };
        let s = state2.clone();
        let result = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            let update = |f: &mut dyn FnMut(&mut Job)| {
                if let Some(j) = s.jobs.lock().expect("jobs lock").get_mut(&job_id) {
                    f(j);
                }
            };
            update(&mut |j| j.status = JobStatus::Running);
            job.run(&s, |done| update(&mut |j| j.frames_done = done))
        })
        .await;
        let mut jobs = state2.jobs.lock().expect("jobs lock");
        if let Some(j) = jobs.get_mut(&job_id) {
            match result {
                Ok(Ok(a)) => {
                    j.status = JobStatus::Done;
                    j.result = Some(a);
                }
                Ok(Err(e)) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(format!("{e:#}"));
                }
                Err(e) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                }
            }
        }
    });
    let body = JobBody {
        id: job_id,
        status: JobStatus::Queued,
        frames_done: 0,
        total_frames: total,
        error: None,
    };
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn job_status(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<Json<JobBody>, ApiError> {
    let jobs = state.jobs.lock().expect("jobs lock");
    let j = jobs
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))?;
    Ok(Json(JobBody {
        id,
        status: j.status.clone(),
        frames_done: j.frames_done,
        total_frames: j.total_frames,
        error: j.error.clone(),
    }))
}

async fn job_result(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<Response, ApiError> {
    let jobs = state.jobs.lock().expect("jobs lock");
    let j = jobs
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))?;
    match (&j.status, &j.result) {
        (JobStatus::Done, Some(a)) => Ok(artifact_response(a.clone())),
        (JobStatus::Failed, _) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            j.error.clone().unwrap_or_default(),
        )),
        _ => Err(ApiError::new(StatusCode::CONFLICT, format!("job {id} is not finished"))),
    }
}

#[derive(Serialize)]
struct Stats {
    characters: usize,
    inference_calls: u64,
    jobs: usize,
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<Stats> {
    Json(Stats {
        characters: state.characters.len(),
        inference_calls: state.inference_calls(),
        jobs: state.jobs.lock().expect("jobs lock").len(),
    })
}

// Browser clients are usually served from another origin.
async fn cors(req: Request, next: Next) -> Response {
    if req.method() == Method::OPTIONS {
        let mut r = StatusCode::NO_CONTENT.into_response();
        add_cors_headers(&mut r);
        return r;
    }
    let mut r = next.run(req).await;
    add_cors_headers(&mut r);
    r
}

fn add_cors_headers(r: &mut Response<Body>) {
    let h = r.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
    h.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/stats", get(stats))
        .route("/characters", get(list_characters))
        .route("/characters/{id}", get(get_character))
        .route("/characters/{id}/generate", post(generate))
        .route("/characters/{id}/animate", post(animate))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/result", get(job_result))
        .layer(middleware::from_fn(cors))
        .with_state(state)
}

/// Bind `addr` and serve until the future is dropped or ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Serve on an already bound listener (tests bind port 0 first).
pub async fn serve_listener(state: Arc<AppState>, listener: tokio::net::TcpListener) -> anyhow::Result<()> {
    axum::serve(listener, router(state)).await?;
    Ok(())
}
