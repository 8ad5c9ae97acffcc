//! Interaction loop for one human: pick an action from the policy, take in
//! gaze points and answers, project the chosen object, and commit or retry
//! on the human's confirmation.
//!
//! Every state change is appended to the session history as a [`LogEvent`].
//! The history is the JSONL event log; [`replay`] feeds a log back through a
//! fresh session and checks that it reproduces the logged beliefs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    build_model, generate_question, parse_utterance, ArdieModel, Attribute, Expected, IntentTask,
    ModelError, ObservationConfig, Prompt, RewardConfig, Utterance,
};
use crate::pomdp::{ActionKind, Belief, PolicySet, PomdpError};
use crate::scene::{
    apply_placement, check_collision, project_future_state, PlacementPlan, Point, Pose, Projection,
    Scene, SceneError, StabilityReport, StackState,
};
use crate::solver::{solve, SolveStats, SolverConfig, SolverError};

/// Default cap on loop iterations in simulated episodes.
pub const DEFAULT_STEP_CAP: usize = 200;

/// Tolerance for belief comparisons during replay.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("`{operation}` is not allowed in phase {phase:?}")]
    Phase { operation: &'static str, phase: Phase },
    #[error("step {step}: {source}")]
    Observation { step: u64, source: PomdpError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Pomdp(#[from] PomdpError),
    #[error("session has no policy for task {0}")]
    MissingPolicy(usize),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
}

fn default_discount() -> f64 {
    0.99
}

fn default_true() -> bool {
    true
}

fn default_step_cap() -> usize {
    DEFAULT_STEP_CAP
}

/// Everything needed to rebuild a session's models. Logged verbatim as the
/// first event of every session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub scene: Scene,
    pub tasks: Vec<IntentTask>,
    #[serde(default)]
    pub obs: ObservationConfig,
    #[serde(default)]
    pub rewards: RewardConfig,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Drop a rejected candidate from the retry prior.
    #[serde(default = "default_true")]
    pub exclude_rejected: bool,
    /// Commit confirmed placements even when they are unstable.
    #[serde(default)]
    pub force_unstable: bool,
    #[serde(default = "default_step_cap")]
    pub step_cap: usize,
}

impl SessionConfig {
    pub fn new(scene: Scene, tasks: Vec<IntentTask>) -> Self {
        SessionConfig {
            scene,
            tasks,
            obs: ObservationConfig::default(),
            rewards: RewardConfig::default(),
            discount: default_discount(),
            solver: SolverConfig::default(),
            exclude_rejected: true,
            force_unstable: false,
            step_cap: DEFAULT_STEP_CAP,
        }
    }

    /// Content hash of the parts that determine the task models.
    pub fn digest(&self) -> String {
        let doc = serde_json::json!({
            "scene": self.scene,
            "tasks": self.tasks,
            "obs": self.obs,
            "rewards": self.rewards,
            "discount": self.discount,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    /// Compiles one model per task; fails on the first invalid task.
    pub fn build_models(&self) -> Result<Vec<ArdieModel>, EpisodeError> {
        self.scene.validate()?;
        self.tasks
            .iter()
            .map(|t| build_model(&self.scene, t, &self.obs, &self.rewards, self.discount).map_err(Into::into))
            .collect()
    }
}

/// Cache key for a solved task policy: the model plus solver settings.
pub fn policy_key(model: &ArdieModel, solver: &SolverConfig) -> String {
    let doc = serde_json::json!({ "model": model.pomdp.to_document(), "solver": solver });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

/// Solves a task model from the uniform prior over its candidates.
pub fn solve_task(model: &ArdieModel, solver: &SolverConfig) -> Result<(PolicySet, SolveStats), EpisodeError> {
    let prior = model.prior(&vec![true; model.candidates.len()])?;
    Ok(solve(&model.pomdp, &prior, solver)?)
}

/// A compiled task and, for live or simulated play, its policy.
#[derive(Debug, Clone)]
pub struct TaskPlan {
    pub task: IntentTask,
    pub model: Arc<ArdieModel>,
    pub policy: Option<Arc<PolicySet>>,
}

/// Builds and solves every task of a config.
pub fn plan_tasks(config: &SessionConfig) -> Result<(Vec<TaskPlan>, Vec<SolveStats>), EpisodeError> {
    let models = config.build_models()?;
    let mut plans = Vec::new();
    let mut stats = Vec::new();
    for (task, model) in config.tasks.iter().zip(models) {
        let (policy, s) = solve_task(&model, &config.solver)?;
        stats.push(s);
        plans.push(TaskPlan {
            task: task.clone(),
            model: Arc::new(model),
            policy: Some(Arc::new(policy)),
        });
    }
    Ok((plans, stats))
}

/// Task models without policies, enough to replay a log.
pub fn unsolved_plans(config: &SessionConfig) -> Result<Vec<TaskPlan>, EpisodeError> {
    Ok(config
        .tasks
        .iter()
        .zip(config.build_models()?)
        .map(|(task, model)| TaskPlan {
            task: task.clone(),
            model: Arc::new(model),
            policy: None,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum Phase {
    /// Waiting for the agent to pick its next action.
    Ready,
    AwaitingGaze,
    AwaitingAnswer { attribute: Attribute },
    AwaitingConfirmation { candidate: String },
    Acting,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBelief {
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum BeliefSource {
    TaskStart,
    Gaze { point: Point, token: String },
    Utterance { text: String, token: String },
    Rejection { candidate: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "payload")]
pub enum Event {
    SessionStart {
        config: Box<SessionConfig>,
    },
    GazeRequest {
        task: usize,
        action: String,
        text: String,
    },
    Question {
        task: usize,
        action: String,
        attribute: Option<Attribute>,
        text: String,
        /// The unparsed reply that triggered a repeat of the question.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reask_after: Option<String>,
    },
    Projection {
        task: usize,
        action: String,
        candidate: String,
        projection: Box<Projection>,
        collision: bool,
        text: String,
    },
    Belief {
        task: usize,
        #[serde(flatten)]
        source: BeliefSource,
        belief: LabeledBelief,
    },
    RobotAction {
        task: usize,
        object: String,
        pose: Pose,
        report: StabilityReport,
    },
    Done {
        stack: Vec<String>,
    },
    /// A rejected input. The session state is unchanged.
    Error {
        message: String,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::SessionStart { .. } => "session_start",
            Event::GazeRequest { .. } => "gaze_request",
            Event::Question { .. } => "question",
            Event::Projection { .. } => "projection",
            Event::Belief { .. } => "belief",
            Event::RobotAction { .. } => "robot_action",
            Event::Done { .. } => "done",
            Event::Error { .. } => "error",
        }
    }
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub step: u64,
    pub phase: Phase,
    #[serde(flatten)]
    pub event: Event,
    pub belief_after: Option<Vec<f64>>,
}

/// Human input fed to the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    Gaze(Point),
    Utterance(String),
}

/// Per-task bookkeeping used for outcome and return accounting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// Actions taken, in order, as model action indices.
    pub actions: Vec<usize>,
    pub rejections: u32,
    pub projections: Vec<String>,
    pub committed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub step: u64,
    pub phase: Phase,
    pub task_index: usize,
    pub scene: Scene,
    pub stack: StackState,
    pub belief: Option<LabeledBelief>,
}

#[derive(Debug, Clone)]
pub struct Session {
    config: Arc<SessionConfig>,
    plans: Vec<TaskPlan>,
    task_index: usize,
    scene: Scene,
    stack: StackState,
    belief: Option<Belief>,
    excluded: Vec<bool>,
    phase: Phase,
    history: Vec<LogEvent>,
    records: Vec<TaskRecord>,
}

impl Session {
    /// Opens a session and emits its start events. `plans` must come from
    /// the same config.
    pub fn start(config: SessionConfig, plans: Vec<TaskPlan>) -> Result<Session, EpisodeError> {
        if plans.len() != config.tasks.len() {
            return Err(EpisodeError::InvalidConfig(format!(
                "{} task plans for {} tasks",
                plans.len(),
                config.tasks.len()
            )));
        }
        let scene = config.scene.clone();
        let stack = StackState::empty(scene.target);
        let mut session = Session {
            config: Arc::new(config.clone()),
            records: vec![TaskRecord::default(); plans.len()],
            plans,
            task_index: 0,
            scene,
            stack,
            belief: None,
            excluded: Vec::new(),
            phase: Phase::Ready,
            history: Vec::new(),
        };
        session.push(Event::SessionStart {
            config: Box::new(config),
        });
        session.begin_task()?;
        Ok(session)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn belief(&self) -> Option<&Belief> {
        self.belief.as_ref()
    }

    pub fn history(&self) -> &[LogEvent] {
        &self.history
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn stack(&self) -> &StackState {
        &self.stack
    }

    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn plans(&self) -> &[TaskPlan] {
        &self.plans
    }

    /// Step index of the most recent event.
    pub fn step(&self) -> u64 {
        self.history.len().saturating_sub(1) as u64
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Installs policies, e.g. after restoring a session from its log.
    pub fn attach_policies(&mut self, policies: Vec<Arc<PolicySet>>) {
        for (plan, p) in self.plans.iter_mut().zip(policies) {
            plan.policy = Some(p);
        }
    }

    /// Logs a rejected input without changing state.
    pub fn record_error(&mut self, message: impl Into<String>) -> &LogEvent {
        self.push(Event::Error {
            message: message.into(),
        })
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            step: self.step(),
            phase: self.phase.clone(),
            task_index: self.task_index,
            scene: self.scene.clone(),
            stack: self.stack.clone(),
            belief: self.labeled_belief(),
        }
    }

    pub fn history_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.history {
            out.push_str(&serde_json::to_string(e).expect("log events serialize"));
            out.push('\n');
        }
        out
    }

    fn plan(&self) -> &TaskPlan {
        &self.plans[self.task_index]
    }

    fn labeled_belief(&self) -> Option<LabeledBelief> {
        let b = self.belief.as_ref()?;
        Some(LabeledBelief {
            labels: self.plan().model.pomdp.states().to_vec(),
            probs: b.probs().to_vec(),
        })
    }

    fn push(&mut self, event: Event) -> &LogEvent {
        let entry = LogEvent {
            step: self.history.len() as u64,
            phase: self.phase.clone(),
            belief_after: self.belief.as_ref().map(|b| b.probs().to_vec()),
            event,
        };
        self.history.push(entry);
        self.history.last().unwrap()
    }

    fn available(&self) -> Vec<bool> {
        self.plan()
            .model
            .candidates
            .iter()
            .map(|c| !self.stack.contains(&c.id))
            .collect()
    }

    fn retry_prior(&mut self) -> Result<Belief, EpisodeError> {
        let available = self.available();
        let allowed: Vec<bool> = available
            .iter()
            .zip(&self.excluded)
            .map(|(a, e)| *a && !*e)
            .collect();
        if allowed.iter().any(|a| *a) {
            return Ok(self.plan().model.prior(&allowed)?);
        }
        // Everything was rejected; start over from the plain prior.
        self.excluded.iter_mut().for_each(|e| *e = false);
        Ok(self.plan().model.prior(&available)?)
    }

    fn begin_task(&mut self) -> Result<(), EpisodeError> {
        // Earlier wrong commits can use up every candidate of a later task.
        while self.task_index < self.plans.len() && !self.available().iter().any(|a| *a) {
            let message = format!("task {} skipped: every candidate is already stacked", self.task_index);
            self.push(Event::Error { message });
            self.task_index += 1;
        }
        if self.task_index >= self.plans.len() {
            self.belief = None;
            self.phase = Phase::Done;
            let stack = self.stack.ids().into_iter().map(String::from).collect();
            self.push(Event::Done { stack });
            return Ok(());
        }
        self.excluded = vec![false; self.plan().model.candidates.len()];
        let available = self.available();
        self.belief = Some(self.plan().model.prior(&available)?);
        self.phase = Phase::Ready;
        let belief = self.labeled_belief().unwrap();
        self.push(Event::Belief {
            task: self.task_index,
            source: BeliefSource::TaskStart,
            belief,
        });
        Ok(())
    }

    fn require(&self, operation: &'static str, ok: bool) -> Result<(), EpisodeError> {
        if ok {
            Ok(())
        } else {
            Err(EpisodeError::Phase {
                operation,
                phase: self.phase.clone(),
            })
        }
    }

    /// Lets the policy choose the next action and performs it.
    pub fn step_agent(&mut self) -> Result<&LogEvent, EpisodeError> {
        self.require("step_agent", self.phase == Phase::Ready)?;
        let policy = self
            .plan()
            .policy
            .clone()
            .ok_or(EpisodeError::MissingPolicy(self.task_index))?;
        let action = policy.best_action(self.belief.as_ref().expect("belief is set while ready"))?;
        self.apply_action(action)
    }

    /// Performs a specific model action, bypassing the policy.
    pub fn apply_action(&mut self, action: usize) -> Result<&LogEvent, EpisodeError> {
        self.require("apply_action", self.phase == Phase::Ready)?;
        let model = self.plan().model.clone();
        let label = model
            .pomdp
            .actions()
            .get(action)
            .ok_or(PomdpError::IndexOutOfRange {
                kind: "action",
                index: action,
                len: model.pomdp.num_actions(),
            })?
            .clone();
        let task = self.task_index;
        let event = match model.pomdp.action_kind(action) {
            ActionKind::Gaze => {
                self.phase = Phase::AwaitingGaze;
                Event::GazeRequest {
                    task,
                    action: label,
                    text: generate_question(&Prompt::Gaze, &self.scene),
                }
            }
            ActionKind::Ask => {
                let attribute = model.asked_attribute(action).expect("ask actions carry an attribute");
                self.phase = Phase::AwaitingAnswer { attribute };
                Event::Question {
                    task,
                    action: label,
                    attribute: Some(attribute),
                    text: generate_question(&Prompt::Ask { attribute }, &self.scene),
                    reask_after: None,
                }
            }
            ActionKind::Project => {
                let i = model.projected_candidate(action).expect("project actions name a candidate");
                let candidate = model.candidates[i].id.clone();
                let plan = PlacementPlan::new(&self.stack, candidate.clone(), self.plan().task.target);
                let projection = project_future_state(&self.scene, &self.stack, &plan)?;
                let collision = check_collision(&self.scene, &self.stack, &plan);
                let text = generate_question(
                    &Prompt::Confirm {
                        object: candidate.clone(),
                    },
                    &self.scene,
                );
                self.records[task].projections.push(candidate.clone());
                self.phase = Phase::AwaitingConfirmation {
                    candidate: candidate.clone(),
                };
                Event::Projection {
                    task,
                    action: label,
                    candidate,
                    projection: Box::new(projection),
                    collision,
                    text,
                }
            }
            ActionKind::Other => {
                return Err(EpisodeError::InvalidConfig(format!("action `{label}` has no interaction")));
            }
        };
        self.records[task].actions.push(action);
        Ok(self.push(event))
    }

    /// Maps a gaze point to the nearest candidate's token (ties go to the
    /// lexicographically smallest id).
    pub fn gaze_token(&self, point: Point) -> usize {
        let model = &self.plan().model;
        let mut best = 0;
        for (i, c) in model.candidates.iter().enumerate().skip(1) {
            let d = c.position.distance(&point);
            let db = model.candidates[best].position.distance(&point);
            if d < db || (d == db && c.id < model.candidates[best].id) {
                best = i;
            }
        }
        model.gaze_tokens[best]
    }

    fn observe(&mut self, action: usize, token: usize, source: BeliefSource) -> Result<&LogEvent, EpisodeError> {
        let model = self.plan().model.clone();
        let current = self.belief.as_ref().expect("belief is set while awaiting input");
        let next = model
            .pomdp
            .belief_update(current, action, token)
            .map_err(|source| EpisodeError::Observation {
                step: self.history.len() as u64,
                source,
            })?;
        self.belief = Some(next);
        self.phase = Phase::Ready;
        let belief = self.labeled_belief().unwrap();
        Ok(self.push(Event::Belief {
            task: self.task_index,
            source,
            belief,
        }))
    }

    /// Feeds a gaze point or an utterance to the session.
    pub fn ingest_observation(&mut self, input: Input) -> Result<&LogEvent, EpisodeError> {
        let model = self.plan().model.clone();
        match (self.phase.clone(), input) {
            (Phase::AwaitingGaze, Input::Gaze(point)) => {
                let token = self.gaze_token(point);
                let source = BeliefSource::Gaze {
                    point,
                    token: model.pomdp.observations()[token].clone(),
                };
                self.observe(model.gaze_action, token, source)
            }
            (Phase::AwaitingAnswer { attribute }, Input::Utterance(text)) => {
                let token = match parse_utterance(&text, Expected::Attribute(attribute)) {
                    Utterance::Color(c) => model.color_token(c),
                    Utterance::Size(s) => model.size_token(s),
                    _ => None,
                };
                let action = model
                    .ask_actions
                    .iter()
                    .find(|(a, _)| *a == attribute)
                    .map(|(_, i)| *i)
                    .expect("asked attribute has an action");
                match token {
                    Some(token) => {
                        let source = BeliefSource::Utterance {
                            text,
                            token: model.pomdp.observations()[token].clone(),
                        };
                        self.observe(action, token, source)
                    }
                    None => {
                        let event = Event::Question {
                            task: self.task_index,
                            action: model.pomdp.actions()[action].clone(),
                            attribute: Some(attribute),
                            text: generate_question(&Prompt::Ask { attribute }, &self.scene),
                            reask_after: Some(text),
                        };
                        Ok(self.push(event))
                    }
                }
            }
            (Phase::AwaitingConfirmation { candidate }, Input::Utterance(text)) => {
                match parse_utterance(&text, Expected::Confirmation) {
                    Utterance::Confirm(answer) => self.handle_confirmation(answer),
                    _ => {
                        let event = Event::Question {
                            task: self.task_index,
                            action: "confirm".into(),
                            attribute: None,
                            text: generate_question(&Prompt::Confirm { object: candidate }, &self.scene),
                            reask_after: Some(text),
                        };
                        Ok(self.push(event))
                    }
                }
            }
            _ => Err(EpisodeError::Phase {
                operation: "ingest_observation",
                phase: self.phase.clone(),
            }),
        }
    }

    /// Commits the projected object on `true`; re-instantiates the task
    /// belief on `false`.
    pub fn handle_confirmation(&mut self, answer: bool) -> Result<&LogEvent, EpisodeError> {
        let Phase::AwaitingConfirmation { candidate } = self.phase.clone() else {
            return Err(EpisodeError::Phase {
                operation: "handle_confirmation",
                phase: self.phase.clone(),
            });
        };
        let task = self.task_index;
        if answer {
            let plan = PlacementPlan::new(&self.stack, candidate.clone(), self.plan().task.target);
            self.phase = Phase::Acting;
            let committed = apply_placement(&self.scene, &self.stack, &plan, self.config.force_unstable);
            let (scene, stack, report) = match committed {
                Ok(c) => c,
                Err(e) => {
                    self.phase = Phase::AwaitingConfirmation { candidate };
                    return Err(e.into());
                }
            };
            let pose = stack.layers.last().expect("placement adds a layer").pose;
            self.scene = scene;
            self.stack = stack;
            self.records[task].committed = Some(candidate.clone());
            self.task_index += 1;
            self.belief = None;
            self.push(Event::RobotAction {
                task,
                object: candidate,
                pose,
                report,
            });
            let robot_step = self.history.len() - 1;
            self.begin_task()?;
            Ok(&self.history[robot_step])
        } else {
            if self.config.exclude_rejected {
                let i = self
                    .plan()
                    .model
                    .candidate_index(&candidate)
                    .expect("projected candidate belongs to the task");
                self.excluded[i] = true;
            }
            self.belief = Some(self.retry_prior()?);
            self.records[task].rejections += 1;
            self.phase = Phase::Ready;
            let belief = self.labeled_belief().unwrap();
            Ok(self.push(Event::Belief {
                task,
                source: BeliefSource::Rejection { candidate },
                belief,
            }))
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

/// Parses a JSONL event log. Blank lines are skipped; line numbers are
/// 1-based.
pub fn read_log(text: &str) -> Result<Vec<LogEvent>, LogError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LogError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub consistent: bool,
    /// The log ends with the session finished.
    pub complete: bool,
    pub events: usize,
    pub mismatch_step: Option<u64>,
    pub detail: Option<String>,
    pub snapshot: Option<SessionSnapshot>,
}

impl ReplayReport {
    pub fn verdict(&self) -> &'static str {
        if self.consistent {
            "consistent"
        } else {
            "inconsistent"
        }
    }
}

fn beliefs_match(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= REPLAY_TOLERANCE)
        }
        _ => false,
    }
}

fn compare(logged: &LogEvent, replayed: &LogEvent) -> Option<String> {
    if logged.step != replayed.step {
        return Some(format!("step {} replayed as {}", logged.step, replayed.step));
    }
    if logged.event.kind() != replayed.event.kind() {
        return Some(format!(
            "expected {} event, replay produced {}",
            logged.event.kind(),
            replayed.event.kind()
        ));
    }
    if logged.phase != replayed.phase {
        return Some(format!("phase {:?} replayed as {:?}", logged.phase, replayed.phase));
    }
    if !beliefs_match(&logged.belief_after, &replayed.belief_after) {
        return Some("belief differs from replay".into());
    }
    None
}

fn drive(session: &mut Session, logged: &LogEvent) -> Result<(), EpisodeError> {
    let action_of = |s: &Session, label: &str| s.plan().model.pomdp.action_index(label);
    match &logged.event {
        Event::GazeRequest { action, .. } | Event::Projection { action, .. } => {
            let a = action_of(session, action)?;
            session.apply_action(a)?;
        }
        Event::Question {
            reask_after: Some(text),
            ..
        } => {
            session.ingest_observation(Input::Utterance(text.clone()))?;
        }
        Event::Question { action, .. } => {
            let a = action_of(session, action)?;
            session.apply_action(a)?;
        }
        Event::Belief { source, .. } => match source {
            BeliefSource::Gaze { point, .. } => {
                session.ingest_observation(Input::Gaze(*point))?;
            }
            BeliefSource::Utterance { text, .. } => {
                session.ingest_observation(Input::Utterance(text.clone()))?;
            }
            BeliefSource::Rejection { .. } => {
                session.handle_confirmation(false)?;
            }
            BeliefSource::TaskStart => {}
        },
        Event::RobotAction { .. } => {
            session.handle_confirmation(true)?;
        }
        Event::Error { message } => {
            session.record_error(message.clone());
        }
        Event::SessionStart { .. } | Event::Done { .. } => {}
    }
    Ok(())
}

/// Re-runs a log through a fresh session. Returns the rebuilt session (no
/// policies attached) together with the verdict.
pub fn replay(events: &[LogEvent]) -> (ReplayReport, Option<Session>) {
    let fail = |step: Option<u64>, detail: String, snapshot| ReplayReport {
        consistent: false,
        complete: false,
        events: events.len(),
        mismatch_step: step,
        detail: Some(detail),
        snapshot,
    };
    let Some(first) = events.first() else {
        return (fail(None, "log is empty".into(), None), None);
    };
    let Event::SessionStart { config } = &first.event else {
        return (fail(Some(first.step), "log does not start with session_start".into(), None), None);
    };
    let mut session = match unsolved_plans(config).and_then(|p| Session::start((**config).clone(), p)) {
        Ok(s) => s,
        Err(e) => return (fail(Some(first.step), e.to_string(), None), None),
    };
    for (k, logged) in events.iter().enumerate() {
        if session.history.len() <= k {
            if let Err(e) = drive(&mut session, logged) {
                let snap = Some(session.snapshot());
                return (fail(Some(logged.step), e.to_string(), snap), Some(session));
            }
        }
        let Some(replayed) = session.history.get(k) else {
            let snap = Some(session.snapshot());
            return (fail(Some(logged.step), "event has no counterpart in replay".into(), snap), Some(session));
        };
        if let Some(detail) = compare(logged, replayed) {
            let snap = Some(session.snapshot());
            return (fail(Some(logged.step), detail, snap), Some(session));
        }
    }
    let report = ReplayReport {
        consistent: true,
        complete: session.is_done() && session.history.len() == events.len(),
        events: events.len(),
        mismatch_step: None,
        detail: None,
        snapshot: Some(session.snapshot()),
    };
    (report, Some(session))
}
