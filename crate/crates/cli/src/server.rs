//! JSON-over-HTTP service for the stakeholder loop.
//!
//! Routes live under `/v1`. Reads go straight to the run directories;
//! searches run on a bounded pool of blocking workers and are polled via
//! `/v1/jobs/{id}`. Every error body is `{"code", "message"}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use exagree_core::elicitation::PreferenceBackend;
use exagree_core::optim::StepDecay;
use exagree_core::{rank_of, FeatureKind, MhmnConfig, Ranking};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::error::CliError;
use crate::pipeline::{self, RunContext, TargetInput, TargetRecord};
use crate::run::{RunDir, Stage, MANIFEST};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub run_id: String,
    pub target_id: String,
    pub status: JobStatus,
    pub progress: f64,
    pub error: Option<String>,
}

pub struct ServerConfig {
    pub runs_root: PathBuf,
    pub workers: usize,
    pub backend: Option<Box<dyn PreferenceBackend + Send + Sync>>,
}

pub struct AppState {
    root: PathBuf,
    jobs: Mutex<HashMap<String, Job>>,
    contexts: Mutex<HashMap<String, Arc<RunContext>>>,
    pool: Arc<Semaphore>,
    backend: Option<Box<dyn PreferenceBackend + Send + Sync>>,
}

type Shared = Arc<AppState>;

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let message = e.to_string();
        match &e {
            CliError::NotFound(_) | CliError::NoManifest(_) => Self::new(StatusCode::NOT_FOUND, "not_found", message),
            CliError::Busy(_) => Self::new(StatusCode::CONFLICT, "busy", message),
            CliError::StageMissing(_) => Self::new(StatusCode::CONFLICT, "stage_missing", message),
            CliError::HashMismatch { .. } => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "hash_mismatch", message),
            CliError::Core(exagree_core::Error::Preference(exagree_core::PreferenceError::Backend { .. })) => {
                Self::new(StatusCode::BAD_GATEWAY, "backend_unavailable", message)
            }
            _ if e.exit_code() == 2 => Self::new(StatusCode::BAD_REQUEST, "invalid", message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_body", r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(cfg: ServerConfig) -> Router {
    let state = Arc::new(AppState {
        root: cfg.runs_root,
        jobs: Mutex::new(HashMap::new()),
        contexts: Mutex::new(HashMap::new()),
        pool: Arc::new(Semaphore::new(cfg.workers.max(1))),
        backend: cfg.backend,
    });
    Router::new()
        .route("/v1/runs", get(list_runs))
        .route("/v1/runs/{id}", get(get_run))
        .route("/v1/runs/{id}/features", get(features))
        .route("/v1/runs/{id}/attribution-ranges", get(attribution_ranges))
        .route("/v1/runs/{id}/targets", post(create_target).get(list_targets))
        .route("/v1/runs/{id}/targets/{tid}", get(get_target))
        .route("/v1/runs/{id}/targets/{tid}/search", post(start_search))
        .route("/v1/runs/{id}/targets/{tid}/result", get(get_result))
        .route("/v1/jobs/{job_id}", get(get_job))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

pub async fn serve(cfg: ServerConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(cfg)).await
}

fn run_dir(state: &AppState, id: &str) -> ApiResult<PathBuf> {
    let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
    let dir = state.root.join(id);
    if !valid || !dir.join(MANIFEST).exists() {
        return Err(ApiError::not_found(format!("unknown run {id:?}")));
    }
    Ok(dir)
}

fn open_run(state: &AppState, id: &str) -> ApiResult<RunDir> {
    Ok(RunDir::open_unverified(&run_dir(state, id)?)?)
}

/// Loads and hash-checks a run once, then serves it from memory.
fn context(state: &AppState, id: &str) -> ApiResult<Arc<RunContext>> {
    if let Some(c) = state.contexts.lock().unwrap().get(id) {
        return Ok(c.clone());
    }
    let run = RunDir::open(&run_dir(state, id)?)?;
    let ctx = Arc::new(RunContext::load(&run)?);
    state.contexts.lock().unwrap().insert(id.to_string(), ctx.clone());
    Ok(ctx)
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Serialize)]
struct RunSummary {
    run_id: String,
    dataset: Option<String>,
    n: Option<usize>,
    p: Option<usize>,
    stages: Vec<Stage>,
    created_at: String,
}

async fn list_runs(State(state): State<Shared>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let mut runs = Vec::new();
        if state.root.exists() {
            let mut dirs: Vec<_> = std::fs::read_dir(&state.root)
                .map_err(CliError::from)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().join(MANIFEST).exists())
                .collect();
            dirs.sort_by_key(|e| e.file_name());
            for e in dirs {
                let Ok(run) = RunDir::open_unverified(&e.path()) else { continue };
                let m = run.manifest;
                runs.push(RunSummary {
                    run_id: e.file_name().to_string_lossy().into_owned(),
                    dataset: m.dataset.as_ref().map(|d| d.name.clone()),
                    n: m.dataset.as_ref().map(|d| d.n),
                    p: m.dataset.as_ref().map(|d| d.p),
                    stages: m.stages.keys().copied().collect(),
                    created_at: m.created_at,
                });
            }
        }
        Ok(Json(json!({ "runs": runs })))
    })
    .await
}

async fn get_run(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let run = open_run(&state, &id)?;
        Ok(Json(serde_json::to_value(&run.manifest).map_err(CliError::from)?))
    })
    .await
}

#[derive(Serialize)]
struct FeatureRow {
    index: usize,
    name: String,
    kind: FeatureKind,
    reference_rank: Option<usize>,
    reference_attribution: Option<f64>,
}

async fn features(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ctx = context(&state, &id)?;
        let reference = ctx.reference.as_ref().map(|(_, fis)| (rank_of(fis), fis.values.clone()));
        let rows: Vec<FeatureRow> = ctx
            .ds
            .feature_meta()
            .iter()
            .enumerate()
            .map(|(i, m)| FeatureRow {
                index: i,
                name: m.name.clone(),
                kind: m.kind,
                reference_rank: reference.as_ref().map(|(r, _)| r.rank(i)),
                reference_attribution: reference.as_ref().map(|(_, v)| v[i]),
            })
            .collect();
        Ok(Json(json!({ "run_id": id, "features": rows })))
    })
    .await
}

async fn attribution_ranges(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let ctx = context(&state, &id)?;
        let att = ctx.attributions.as_ref().ok_or(CliError::StageMissing("rashomon"))?;
        let names = ctx.feature_names();
        let ranges: Vec<Value> = att
            .ranges()
            .into_iter()
            .enumerate()
            .map(|(i, (lo, hi))| json!({"index": i, "feature": names[i], "min": lo, "max": hi}))
            .collect();
        Ok(Json(json!({ "run_id": id, "samples": att.rows(), "ranges": ranges })))
    })
    .await
}

async fn create_target(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<TargetInput>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(input) = body?;
    blocking(move || {
        let ctx = context(&state, &id)?;
        let (_, fis) = ctx.reference()?;
        let names = ctx.feature_names();
        let backend = match &input {
            TargetInput::Text { .. } => state.backend.as_deref().map(|b| b as &dyn PreferenceBackend),
            TargetInput::Ranking { .. } => None,
        };
        let record = pipeline::compile_input(&input, &names, &rank_of(fis), backend)?;
        let created = pipeline::write_target(&run_dir(&state, &id)?, &record)?;
        let status = if created { StatusCode::CREATED } else { StatusCode::OK };
        Ok((status, Json(target_json(&record))))
    })
    .await
}

fn target_json(record: &TargetRecord) -> Value {
    json!({
        "target_id": record.target_id,
        "compiled_target": {
            "ranking": record.target.target_ranking.ranks(),
            "ordered_features": record.ordered_features,
            "signs": record.target.target_signs,
            "source": record.target.source,
            "stakeholder_id": record.target.stakeholder_id,
        },
        "text": record.text,
    })
}

async fn list_targets(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let dir = run_dir(&state, &id)?;
        let targets: Vec<Value> = pipeline::list_targets(&dir)?
            .into_iter()
            .map(|t| {
                let has_result = pipeline::target_dir(&dir, &t).join("result.json").exists();
                json!({"target_id": t, "has_result": has_result})
            })
            .collect();
        Ok(Json(json!({ "run_id": id, "targets": targets })))
    })
    .await
}

async fn get_target(State(state): State<Shared>, Path((id, tid)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let record = pipeline::read_target(&run_dir(&state, &id)?, &tid)?;
        Ok(Json(target_json(&record)))
    })
    .await
}

/// Search overrides accepted by `POST .../search`; anything absent keeps
/// the run's configuration.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchOverrides {
    pub heads: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_sparsity: Option<f64>,
    pub lambda_diversity: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
    pub step_size: Option<usize>,
    pub gamma: Option<f64>,
}

impl SearchOverrides {
    pub fn apply(&self, mut cfg: MhmnConfig) -> MhmnConfig {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        set!(heads, epochs, lr, lambda_sparsity, lambda_diversity, beta, tau, seed);
        if self.step_size.is_some() || self.gamma.is_some() {
            let StepDecay { step_size, gamma } = cfg.scheduler;
            cfg.scheduler = StepDecay {
                step_size: self.step_size.unwrap_or(step_size),
                gamma: self.gamma.unwrap_or(gamma),
            };
        }
        cfg
    }
}

async fn start_search(
    State(state): State<Shared>,
    Path((id, tid)): Path<(String, String)>,
    body: Option<Json<Value>>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let overrides: SearchOverrides = match body {
        Some(Json(v)) if !v.is_null() => {
            serde_json::from_value(v).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()))?
        }
        _ => SearchOverrides::default(),
    };
    let st = state.clone();
    let (dir, cfg) = blocking(move || {
        let run = open_run(&st, &id)?;
        run.require(&[Stage::Data, Stage::Reference, Stage::Rashomon, Stage::Dman])?;
        let dir = run.root().to_path_buf();
        pipeline::read_target(&dir, &tid)?;
        if pipeline::target_dir(&dir, &tid).join("result.json").exists() {
            return Err(CliError::Busy(format!("target {tid} already has a result")).into());
        }
        if pipeline::target_dir(&dir, &tid).join("search.lock").exists() {
            return Err(CliError::Busy(format!("a search for target {tid} is already running")).into());
        }
        let cfg = overrides.apply(run.manifest.config.mhmn.clone().unwrap_or_default());
        Ok(((id, tid, dir), cfg))
    })
    .await?;
    let (run_id, tid, dir) = dir;

    let job_id = uuid::Uuid::new_v4().simple().to_string();
    {
        let mut jobs = state.jobs.lock().unwrap();
        let busy = jobs.values().any(|j| {
            j.run_id == run_id && j.target_id == tid && matches!(j.status, JobStatus::Queued | JobStatus::Running)
        });
        if busy {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "busy",
                format!("a search for target {tid} is already queued or running"),
            ));
        }
        jobs.insert(
            job_id.clone(),
            Job {
                job_id: job_id.clone(),
                run_id: run_id.clone(),
                target_id: tid.clone(),
                status: JobStatus::Queued,
                progress: 0.0,
                error: None,
            },
        );
    }
    tokio::spawn(run_job(state.clone(), job_id.clone(), run_id, tid, dir, cfg));
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

fn update_job(state: &AppState, job_id: &str, f: impl FnOnce(&mut Job)) {
    if let Some(j) = state.jobs.lock().unwrap().get_mut(job_id) {
        f(j);
    }
}

async fn run_job(state: Shared, job_id: String, run_id: String, tid: String, dir: PathBuf, cfg: MhmnConfig) {
    let Ok(_permit) = state.pool.clone().acquire_owned().await else { return };
    update_job(&state, &job_id, |j| j.status = JobStatus::Running);
    let st = state.clone();
    let jid = job_id.clone();
    let outcome = blocking(move || {
        let ctx = context(&st, &run_id)?;
        let progress = |done: usize, total: usize| {
            update_job(&st, &jid, |j| j.progress = done as f64 / total.max(1) as f64);
        };
        pipeline::search_target(&dir, &ctx, &tid, cfg, false, &progress)?;
        Ok(())
    })
    .await;
    update_job(&state, &job_id, |j| match outcome {
        Ok(()) => {
            j.status = JobStatus::Succeeded;
            j.progress = 1.0;
        }
        Err(e) => {
            j.status = JobStatus::Failed;
            j.error = Some(e.message);
        }
    });
}

async fn get_job(State(state): State<Shared>, Path(job_id): Path<String>) -> ApiResult<Json<Job>> {
    state
        .jobs
        .lock()
        .unwrap()
        .get(&job_id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {job_id:?}")))
}

async fn get_result(State(state): State<Shared>, Path((id, tid)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let dir = run_dir(&state, &id)?;
        pipeline::read_target(&dir, &tid)?;
        let result = pipeline::read_result(&dir, &tid)?;
        let names = context(&state, &id)?.feature_names();
        let achieved: Vec<&str> = result.saem.achieved_ranking.order().into_iter().map(|f| names[f].as_str()).collect();
        let mut v = serde_json::to_value(&result).map_err(CliError::from)?;
        v["achieved_order"] = json!(achieved);
        v["reference_order"] = json!(order_names(&result.reference_ranking, &names));
        Ok(Json(v))
    })
    .await
}

fn order_names(r: &Ranking, names: &[String]) -> Vec<String> {
    r.order().into_iter().map(|f| names[f].clone()).collect()
}

/// Root directory whose subdirectories are run directories.
pub fn runs_root_of(path: &FsPath) -> PathBuf {
    if path.join(MANIFEST).exists() {
        path.parent().map(FsPath::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    } else {
        path.to_path_buf()
    }
}
