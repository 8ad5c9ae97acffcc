//! One task per session. The task owns the [`Session`] and its log file;
//! handlers talk to it through a mailbox, so mutations never interleave.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use ardie_core::episode::{EpisodeError, Input, LogEvent, Phase, Session, SessionSnapshot};
use ardie_core::scene::Point;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};

use crate::error::ApiError;

const MAILBOX: usize = 64;
const FANOUT: usize = 1024;

/// Events sent to clients: the session's log events minus the leading
/// `session_start` record.
pub type WireEvent = LogEvent;

pub fn is_wire(event: &LogEvent) -> bool {
    event.event.kind() != "session_start"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub created_at_ms: u64,
    pub config_digest: String,
}

/// Read-consistent view of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub meta: SessionMeta,
    pub state: SessionSnapshot,
    /// Step index the next event will get.
    pub next_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub step: u64,
}

type Reply<T> = oneshot::Sender<T>;

pub type Subscription = (Vec<WireEvent>, broadcast::Receiver<WireEvent>);

enum Command {
    Input(Input, Reply<Result<Ack, ApiError>>),
    Confirm(bool, Reply<Result<Ack, ApiError>>),
    View(Reply<SessionView>),
    Subscribe(u64, Reply<Subscription>),
}

#[derive(Debug, Clone)]
pub struct SessionActor {
    pub meta: SessionMeta,
    tx: mpsc::Sender<Command>,
}

struct Owner {
    meta: SessionMeta,
    session: Session,
    log: File,
    persisted: usize,
    events: broadcast::Sender<WireEvent>,
}

impl Owner {
    /// Writes and broadcasts every event not yet published.
    fn publish(&mut self) {
        let history = self.session.history();
        for e in &history[self.persisted..] {
            let line = serde_json::to_string(e).expect("log events serialize");
            if let Err(err) = writeln!(self.log, "{line}").and_then(|_| self.log.flush()) {
                tracing::error!("session {}: log write failed: {err}", self.meta.id);
            }
            if is_wire(e) {
                let _ = self.events.send(e.clone());
            }
        }
        self.persisted = history.len();
    }

    /// Lets the agent act whenever it holds the turn.
    fn advance(&mut self) {
        while *self.session.phase() == Phase::Ready {
            if let Err(e) = self.session.step_agent() {
                self.session.record_error(e.to_string());
                break;
            }
        }
        self.publish();
    }

    fn run<F>(&mut self, op: F) -> Result<Ack, ApiError>
    where
        F: FnOnce(&mut Session) -> Result<u64, EpisodeError>,
    {
        let outcome = op(&mut self.session);
        let result = match outcome {
            Ok(step) => Ok(Ack { step }),
            Err(e) => {
                let message = e.to_string();
                let step = self.session.record_error(message).step;
                Err(ApiError::from(e).at_step(step))
            }
        };
        self.advance();
        result
    }

    fn view(&self) -> SessionView {
        SessionView {
            meta: self.meta.clone(),
            state: self.session.snapshot(),
            next_step: self.session.history().len() as u64,
        }
    }

    fn backlog(&self, from: u64) -> Vec<WireEvent> {
        self.session
            .history()
            .iter()
            .filter(|e| e.step >= from && is_wire(e))
            .cloned()
            .collect()
    }
}

impl SessionActor {
    /// Starts the owner task. `persisted` events of the session history are
    /// already in the log file at `log_path`.
    pub fn spawn(meta: SessionMeta, session: Session, log_path: PathBuf, persisted: usize) -> std::io::Result<Self> {
        let log = OpenOptions::new().create(true).append(true).open(log_path)?;
        let (events, _) = broadcast::channel(FANOUT);
        let mut owner = Owner {
            meta: meta.clone(),
            session,
            log,
            persisted,
            events,
        };
        owner.advance();
        let (tx, mut rx) = mpsc::channel::<Command>(MAILBOX);
        tokio::spawn(async move {
            while let Some(cmd) = rx.recv().await {
                match cmd {
                    Command::Input(input, reply) => {
                        let r = owner.run(|s| s.ingest_observation(input).map(|e| e.step));
                        let _ = reply.send(r);
                    }
                    Command::Confirm(answer, reply) => {
                        let r = owner.run(|s| s.handle_confirmation(answer).map(|e| e.step));
                        let _ = reply.send(r);
                    }
                    Command::View(reply) => {
                        let _ = reply.send(owner.view());
                    }
                    Command::Subscribe(from, reply) => {
                        let _ = reply.send((owner.backlog(from), owner.events.subscribe()));
                    }
                }
            }
        });
        Ok(SessionActor { meta, tx })
    }

    async fn ask<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, ApiError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(make(reply))
            .await
            .map_err(|_| ApiError::internal("session task stopped"))?;
        rx.await.map_err(|_| ApiError::internal("session task stopped"))
    }

    pub async fn gaze(&self, point: Point) -> Result<Ack, ApiError> {
        self.ask(|r| Command::Input(Input::Gaze(point), r)).await?
    }

    pub async fn utterance(&self, text: String) -> Result<Ack, ApiError> {
        self.ask(|r| Command::Input(Input::Utterance(text), r)).await?
    }

    pub async fn confirmation(&self, answer: bool) -> Result<Ack, ApiError> {
        self.ask(|r| Command::Confirm(answer, r)).await?
    }

    pub async fn view(&self) -> Result<SessionView, ApiError> {
        self.ask(Command::View).await
    }

    /// Events from step `from` on, plus a live feed of later ones. Both are
    /// taken atomically, so nothing is missed or repeated in between.
    pub async fn subscribe(&self, from: u64) -> Result<Subscription, ApiError> {
        self.ask(|r| Command::Subscribe(from, r)).await
    }
}
