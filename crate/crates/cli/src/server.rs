//! Local HTTP/JSON API over a single training run. Handlers read snapshots
//! published by the training thread; the only write path into the run is
//! the learning-rate channel.

use std::path::PathBuf;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use stagewise::data::{load_manifest, Dataset};
use stagewise::metrics::EvalReport;
use stagewise::optim::LrCurve;
use stagewise::trainer::{
    EpochRecord, EventLog, LrChoice, LrMode, Position, ProtocolConfig, RunState, RunStatus, SharedState, Trainer,
};
use tower_http::cors::{Any, CorsLayer};

use crate::commands::ServeArgs;
use crate::{CliError, Preset};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiRun {
    /// 0 before the first start.
    pub run_id: u64,
    pub status: RunStatus,
    pub state: RunState,
    pub lr_curve: Option<LrCurve>,
    pub report: Option<EvalReport>,
    pub config: Option<ProtocolConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Progress {
    pub run_id: u64,
    pub status: RunStatus,
    pub epochs_completed: usize,
    pub total_epochs: usize,
    pub position: Position,
    pub history: Vec<EpochRecord>,
    pub lr_choices: Vec<LrChoice>,
    pub error: Option<String>,
}

/// Body of `POST /api/run/start`. Without `config` or `preset` the server's
/// own config is used.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    pub config: Option<ProtocolConfig>,
    pub preset: Option<Preset>,
    pub manifest: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Wait for `POST /api/run/lr` at range-test steps. Defaults to true.
    pub interactive: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrRequest {
    pub stage: usize,
    pub lr: f64,
}

struct Run {
    id: u64,
    config: ProtocolConfig,
    shared: SharedState,
    lr_tx: Option<Sender<f64>>,
    worker: JoinHandle<()>,
}

impl Run {
    fn snapshot(&self) -> RunState {
        self.shared.0.lock().expect("state lock").clone().unwrap_or_else(|| RunState::new(self.config.total_epochs()))
    }
}

pub struct ServerState {
    default_config: ProtocolConfig,
    out: Option<PathBuf>,
    run: Mutex<Option<Run>>,
}

impl ServerState {
    pub fn new(default_config: ProtocolConfig, out: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self { default_config, out, run: Mutex::new(None) })
    }
}

type Shared = Arc<ServerState>;

pub fn router(state: Shared) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/run", get(get_run))
        .route("/api/run/start", post(start))
        .route("/api/run/lrcurve", get(get_lr_curve))
        .route("/api/run/lr", post(post_lr))
        .route("/api/run/progress", get(get_progress))
        .route("/api/run/metrics", get(get_metrics))
        .layer(cors)
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

fn current(state: &ServerState) -> (u64, RunState, Option<ProtocolConfig>) {
    match &*state.run.lock().expect("run lock") {
        Some(run) => (run.id, run.snapshot(), Some(run.config.clone())),
        None => (0, RunState::new(0), None),
    }
}

async fn get_run(State(state): State<Shared>) -> Json<ApiRun> {
    let (run_id, snap, config) = current(&state);
    Json(ApiRun {
        run_id,
        status: snap.status,
        lr_curve: snap.lr_curve.clone(),
        report: snap.report.clone(),
        state: snap,
        config,
    })
}

async fn get_progress(State(state): State<Shared>) -> Json<Progress> {
    let (run_id, snap, _) = current(&state);
    Json(Progress {
        run_id,
        status: snap.status,
        epochs_completed: snap.completed_epochs,
        total_epochs: snap.total_epochs,
        position: snap.position,
        history: snap.history,
        lr_choices: snap.lr_choices,
        error: snap.error,
    })
}

async fn get_lr_curve(State(state): State<Shared>) -> Response {
    match current(&state).1.lr_curve {
        Some(c) => Json(c).into_response(),
        None => error(StatusCode::NOT_FOUND, "no learning-rate curve yet"),
    }
}

async fn get_metrics(State(state): State<Shared>) -> Response {
    match current(&state).1.report {
        Some(r) => Json(r).into_response(),
        None => error(StatusCode::NOT_FOUND, "no evaluation report yet"),
    }
}

async fn start(State(state): State<Shared>, body: Bytes) -> Response {
    let req: StartRequest = if body.iter().all(u8::is_ascii_whitespace) {
        StartRequest::default()
    } else {
        match parse(&body) {
            Ok(r) => r,
            Err(resp) => return resp,
        }
    };
    let mut config = match (req.config, req.preset) {
        (Some(c), _) => c,
        (None, Some(p)) => p.config(),
        (None, None) => state.default_config.clone(),
    };
    if let Some(m) = req.manifest {
        config.manifest = Some(m);
    }
    if let Some(s) = req.seed {
        config.seed = s;
    }
    if let Err(e) = config.validate() {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }

    let mut slot = state.run.lock().expect("run lock");
    if let Some(run) = slot.as_ref() {
        if !run.worker.is_finished() {
            return error(StatusCode::CONFLICT, format!("run {} is still active ({:?})", run.id, run.snapshot().status));
        }
    }
    let id = slot.as_ref().map_or(1, |r| r.id + 1);
    match launch(id, config, req.interactive.unwrap_or(true), state.out.as_ref()) {
        Ok(run) => {
            *slot = Some(run);
            (StatusCode::OK, Json(json!({ "run_id": id }))).into_response()
        }
        Err(e) => error(StatusCode::BAD_REQUEST, e.message),
    }
}

fn launch(id: u64, mut config: ProtocolConfig, interactive: bool, out: Option<&PathBuf>) -> Result<Run, CliError> {
    let manifest = config.manifest.clone().ok_or_else(|| CliError::input("config has no manifest"))?;
    let manifest = load_manifest(&manifest).map_err(|e| CliError::input(e.to_string()))?;
    let mut log = None;
    if let Some(dir) = out {
        let dir = dir.join(format!("run-{id}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
        if config.checkpoint_dir.is_none() {
            config.checkpoint_dir = Some(dir.clone());
        }
        log = Some(EventLog::create(&dir.join("events.jsonl"))?);
    }
    let mut trainer = Trainer::new(config.clone(), Dataset::new(manifest))?;
    let shared = SharedState::default();
    *shared.0.lock().expect("state lock") = Some(trainer.state().clone());
    trainer.add_observer(Box::new(shared.clone()));
    if let Some(log) = log {
        trainer.add_observer(Box::new(log));
    }
    let mut lr_tx = None;
    if interactive {
        let (tx, rx) = mpsc::channel();
        let timeout = Duration::from_secs_f64(config.lr_timeout_secs);
        trainer.set_lr_mode(LrMode::Interactive { choices: rx, timeout });
        lr_tx = Some(tx);
    }
    let worker = std::thread::spawn(move || match trainer.run() {
        Ok(_) => log::info!("run {id} finished"),
        Err(e) => log::error!("run {id} failed: {e}"),
    });
    Ok(Run { id, config, shared, lr_tx, worker })
}

async fn post_lr(State(state): State<Shared>, body: Bytes) -> Response {
    let req: LrRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if !(req.lr > 0.0 && req.lr.is_finite()) {
        return error(StatusCode::BAD_REQUEST, format!("learning rate must be positive and finite, got {}", req.lr));
    }
    let slot = state.run.lock().expect("run lock");
    let Some(run) = slot.as_ref() else {
        return error(StatusCode::CONFLICT, "no run has been started; state is idle");
    };
    let mut guard = run.shared.0.lock().expect("state lock");
    let Some(snap) = guard.as_mut() else {
        return error(StatusCode::CONFLICT, "run has not published a state yet");
    };
    if snap.status != RunStatus::AwaitingLr {
        let status = serde_json::to_value(snap.status).expect("status serializes");
        return (
            StatusCode::CONFLICT,
            Json(json!({ "error": format!("run is {}, not awaiting_lr", status.as_str().unwrap_or("?")), "status": status })),
        )
            .into_response();
    }
    if snap.position.stage != req.stage {
        return error(
            StatusCode::CONFLICT,
            format!("run is awaiting a rate for stage {}, not stage {}", snap.position.stage, req.stage),
        );
    }
    let Some(tx) = &run.lr_tx else {
        return error(StatusCode::CONFLICT, "run is in automatic mode");
    };
    if tx.send(req.lr).is_err() {
        return error(StatusCode::CONFLICT, "run is no longer waiting");
    }
    // Until the trainer publishes again, a second choice must be refused.
    snap.status = RunStatus::Training;
    Json(json!({ "accepted": true, "stage": req.stage, "lr": req.lr })).into_response()
}

pub fn serve(args: &ServeArgs, config: ProtocolConfig) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let addr = format!("{}:{}", args.host, args.port);
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::input(format!("cannot bind {addr}: {e}")))?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, router(ServerState::new(config, args.out.clone())))
            .await
            .map_err(|e| CliError::runtime(e.to_string()))
    })
}
