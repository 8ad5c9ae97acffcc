//! Live sessions over HTTP and WebSocket.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /sessions` | create a session from a session config document |
//! | `GET /sessions/{id}` | snapshot of scene, stack, belief and phase |
//! | `POST /sessions/{id}/gaze` | `{"x": mm, "y": mm}` |
//! | `POST /sessions/{id}/utterance` | `{"text": "..."}` |
//! | `POST /sessions/{id}/confirmation` | `{"answer": true}` |
//! | `GET /sessions/{id}/events?from=N` | WebSocket stream of events from step `N` |
//! | `GET /stats` | session count and policy cache counters |
//!
//! Every session appends its events to `<data dir>/sessions/<id>.jsonl`.
//! On start the service replays those logs to restore its sessions.

pub mod actor;
pub mod cache;
pub mod error;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use ardie_core::episode::{read_log, replay, unsolved_plans, Session, SessionConfig, TaskPlan};
use ardie_core::scene::Point;
use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use tower_http::cors::CorsLayer;

pub use actor::{Ack, SessionActor, SessionMeta, SessionView, WireEvent};
pub use cache::{CacheStats, PolicyCache};
pub use error::{ApiError, ErrorBody};

/// Environment variable naming the data directory.
pub const DATA_DIR_ENV: &str = "ARDIE_DATA_DIR";

#[derive(Debug)]
pub struct AppState {
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, SessionActor>>,
    cache: Arc<PolicyCache>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub sessions: usize,
    #[serde(flatten)]
    pub cache: CacheStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    #[serde(flatten)]
    pub view: SessionView,
    /// Events emitted while opening the session, starting at step 1.
    pub events: Vec<WireEvent>,
}

#[derive(Debug, Deserialize)]
struct UtteranceBody {
    text: String,
}

#[derive(Debug, Deserialize)]
struct ConfirmationBody {
    answer: bool,
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

impl AppState {
    /// Opens the data directory and restores every logged session.
    pub async fn open(data_dir: impl Into<PathBuf>) -> std::io::Result<Arc<AppState>> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(data_dir.join("sessions"))?;
        let state = Arc::new(AppState {
            cache: Arc::new(PolicyCache::new(data_dir.join("policies"))?),
            data_dir,
            sessions: RwLock::new(HashMap::new()),
        });
        state.restore().await?;
        Ok(state)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(format!("{id}.jsonl"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(format!("{id}.meta.json"))
    }

    pub fn stats(&self) -> ServiceStats {
        ServiceStats {
            sessions: self.sessions.read().unwrap().len(),
            cache: self.cache.stats(),
        }
    }

    fn actor(&self, id: &str) -> Result<SessionActor, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    async fn solved(&self, config: &SessionConfig, mut plans: Vec<TaskPlan>) -> Result<Vec<TaskPlan>, ApiError> {
        for plan in &mut plans {
            plan.policy = Some(self.cache.get_or_solve(plan.model.clone(), &config.solver).await?);
        }
        Ok(plans)
    }

    pub async fn create(&self, config: SessionConfig) -> Result<Created, ApiError> {
        config.solver.validate().map_err(ardie_core::episode::EpisodeError::from)?;
        let plans = unsolved_plans(&config)?;
        let plans = self.solved(&config, plans).await?;
        let meta = SessionMeta {
            id: uuid::Uuid::new_v4().to_string(),
            created_at_ms: now_ms(),
            config_digest: config.digest(),
        };
        let session = Session::start(config, plans)?;
        let meta_json = serde_json::to_vec(&meta).expect("meta serializes");
        std::fs::write(self.meta_path(&meta.id), meta_json).map_err(|e| ApiError::internal(e.to_string()))?;
        let actor = SessionActor::spawn(meta.clone(), session, self.log_path(&meta.id), 0)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let (events, _) = actor.subscribe(0).await?;
        let view = actor.view().await?;
        self.sessions.write().unwrap().insert(meta.id.clone(), actor);
        Ok(Created { view, events })
    }

    async fn restore(&self) -> std::io::Result<()> {
        let dir = self.data_dir.join("sessions");
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(id) = name.strip_suffix(".meta.json") else { continue };
            if let Err(e) = self.restore_one(id).await {
                tracing::warn!("skipping session {id}: {}", e.body.message);
            }
        }
        Ok(())
    }

    async fn restore_one(&self, id: &str) -> Result<(), ApiError> {
        let io = |e: std::io::Error| ApiError::internal(e.to_string());
        let meta: SessionMeta = serde_json::from_slice(&std::fs::read(self.meta_path(id)).map_err(io)?)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let text = std::fs::read_to_string(self.log_path(id)).map_err(io)?;
        let events = read_log(&text).map_err(|e| ApiError::internal(e.to_string()))?;
        let (report, session) = replay(&events);
        let Some(mut session) = session.filter(|_| report.consistent) else {
            return Err(ApiError::internal(report.detail.unwrap_or_default()));
        };
        let config = session.config().clone();
        let plans = self.solved(&config, session.plans().to_vec()).await?;
        session.attach_policies(plans.into_iter().filter_map(|p| p.policy).collect());
        let actor = SessionActor::spawn(meta.clone(), session, self.log_path(id), events.len()).map_err(io)?;
        self.sessions.write().unwrap().insert(meta.id, actor);
        Ok(())
    }
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let config: SessionConfig = parse(&body)?;
    let created = state.create(config).await?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(state.actor(&id)?.view().await?))
}

async fn post_gaze(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<Ack>, ApiError> {
    let actor = state.actor(&id)?;
    let point: Point = parse(&body)?;
    Ok(Json(actor.gaze(point).await?))
}

async fn post_utterance(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<Ack>, ApiError> {
    let actor = state.actor(&id)?;
    let body: UtteranceBody = parse(&body)?;
    Ok(Json(actor.utterance(body.text).await?))
}

async fn post_confirmation(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<Ack>, ApiError> {
    let actor = state.actor(&id)?;
    let body: ConfirmationBody = parse(&body)?;
    Ok(Json(actor.confirmation(body.answer).await?))
}

async fn get_stats(State(state): State<Arc<AppState>>) -> Json<ServiceStats> {
    Json(state.stats())
}

async fn events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let actor = state.actor(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_events(socket, actor, q.from)))
}

async fn send_event(socket: &mut WebSocket, event: &WireEvent) -> bool {
    let text = serde_json::to_string(event).expect("events serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn stream_events(mut socket: WebSocket, actor: SessionActor, from: u64) {
    let mut next = from;
    'resubscribe: loop {
        let Ok((backlog, mut live)) = actor.subscribe(next).await else { return };
        for e in &backlog {
            if !send_event(&mut socket, e).await {
                return;
            }
            next = e.step + 1;
        }
        loop {
            tokio::select! {
                incoming = socket.recv() => match incoming {
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => return,
                    _ => {}
                },
                event = live.recv() => match event {
                    Ok(e) if e.step < next => {}
                    Ok(e) => {
                        if !send_event(&mut socket, &e).await {
                            return;
                        }
                        next = e.step + 1;
                    }
                    Err(RecvError::Lagged(_)) => continue 'resubscribe,
                    Err(RecvError::Closed) => return,
                },
            }
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/gaze", post(post_gaze))
        .route("/sessions/{id}/utterance", post(post_utterance))
        .route("/sessions/{id}/confirmation", post(post_confirmation))
        .route("/sessions/{id}/events", get(events))
        .route("/stats", get(get_stats))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, data_dir: PathBuf) -> std::io::Result<()> {
    let state = AppState::open(data_dir).await?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
