//! Compiles a scene and an intent task into the disambiguation POMDP, and
//! holds the text side of the dialogue: the answer grammar and the question
//! templates.
//!
//! States are the candidate objects plus an absorbing terminal. The agent
//! can request gaze, ask for an attribute, or project one candidate, which
//! ends the decision episode. Gaze and answers report the true property with
//! probability `p_correct`; the remainder is spread over the other tokens of
//! the same channel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pomdp::{Belief, ModelDocument, PomdpError, PomdpModel};
use crate::scene::{Color, Point, Scene, SceneError, SceneObject, Size};

pub const TERMINAL_STATE: &str = "terminal";
pub const GAZE_ACTION: &str = "gaze";
pub const NULL_OBSERVATION: &str = "null";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("task needs at least two candidates, got {0}")]
    DegenerateTask(usize),
    #[error("candidate `{0}` is not on the table")]
    UnknownCandidate(String),
    #[error("candidate `{0}` is listed twice")]
    DuplicateCandidate(String),
    #[error("`{0}` is reserved and cannot be used as an object id")]
    ReservedId(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Pomdp(#[from] PomdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Size,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeMode {
    #[default]
    UniformError,
    ProximityWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    pub p_correct: f64,
    pub gaze_mode: GazeMode,
    /// Decay length in mm for proximity-weighted gaze errors.
    pub gaze_length_scale: f64,
    /// Only offer the color question, as in the original demonstration.
    pub color_only: bool,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        ObservationConfig {
            p_correct: 0.8,
            gaze_mode: GazeMode::UniformError,
            gaze_length_scale: 100.0,
            color_only: false,
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.p_correct > 0.0 && self.p_correct <= 1.0) {
            return Err(ModelError::InvalidConfig("p_correct must be in (0, 1]".into()));
        }
        if self.gaze_mode == GazeMode::ProximityWeighted && !(self.gaze_length_scale > 0.0) {
            return Err(ModelError::InvalidConfig("gaze_length_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub r_correct: f64,
    pub r_incorrect: f64,
    pub c_gaze: f64,
    pub c_ask: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            r_correct: 100.0,
            r_incorrect: -100.0,
            c_gaze: -1.0,
            c_ask: -2.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.r_correct > 0.0 && self.r_incorrect < 0.0) {
            return Err(ModelError::InvalidConfig("need r_correct > 0 > r_incorrect".into()));
        }
        if !(self.c_gaze < 0.0 && self.c_ask < 0.0) {
            return Err(ModelError::InvalidConfig("action costs must be negative".into()));
        }
        if !(self.c_gaze.abs() < self.c_ask.abs()) {
            return Err(ModelError::InvalidConfig("gaze must cost less than asking".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> RewardConfig {
        RewardConfig {
            r_correct: self.r_correct * k,
            r_incorrect: self.r_incorrect * k,
            c_gaze: self.c_gaze * k,
            c_ask: self.c_ask * k,
        }
    }
}

/// One object choice: which table objects the human may mean, and where on
/// the stack the chosen one goes (offset from the stack center, mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentTask {
    pub candidates: Vec<String>,
    #[serde(default)]
    pub target: Point,
}

/// A compiled task model with index maps back to the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ArdieModel {
    pub pomdp: PomdpModel,
    pub candidates: Vec<SceneObject>,
    pub terminal: usize,
    pub gaze_action: usize,
    pub ask_actions: Vec<(Attribute, usize)>,
    pub project_actions: Vec<usize>,
    pub gaze_tokens: Vec<usize>,
    pub color_tokens: Vec<(Color, usize)>,
    pub size_tokens: Vec<(Size, usize)>,
    pub null_token: usize,
    /// Non-fatal findings, such as an ask channel that cannot tell
    /// candidates apart.
    pub warnings: Vec<String>,
}

impl ArdieModel {
    pub fn candidate_index(&self, id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.id == id)
    }

    /// Candidate reported by a project action.
    pub fn projected_candidate(&self, action: usize) -> Option<usize> {
        self.project_actions.iter().position(|a| *a == action)
    }

    pub fn asked_attribute(&self, action: usize) -> Option<Attribute> {
        self.ask_actions.iter().find(|(_, a)| *a == action).map(|(attr, _)| *attr)
    }

    pub fn color_token(&self, c: Color) -> Option<usize> {
        self.color_tokens.iter().find(|(k, _)| *k == c).map(|(_, t)| *t)
    }

    pub fn size_token(&self, s: Size) -> Option<usize> {
        self.size_tokens.iter().find(|(k, _)| *k == s).map(|(_, t)| *t)
    }

    /// Uniform belief over the candidates flagged available.
    pub fn prior(&self, available: &[bool]) -> Result<Belief, PomdpError> {
        let mut w = vec![0.0; self.pomdp.num_states()];
        for (i, ok) in available.iter().enumerate() {
            if *ok {
                w[i] = 1.0;
            }
        }
        Belief::from_weights(w)
    }
}

fn distinct<T: PartialEq + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Channel row: `p_correct` on the true token, the rest spread by `weights`
/// over the other tokens (uniformly when all weights are equal).
fn channel_row(n: usize, truth: usize, p_correct: f64, weights: &[f64]) -> Vec<f64> {
    let mut row = vec![0.0; n];
    if n == 1 {
        row[0] = 1.0;
        return row;
    }
    let total: f64 = (0..n).filter(|&j| j != truth).map(|j| weights[j]).sum();
    for j in 0..n {
        row[j] = if j == truth {
            p_correct
        } else if total > 0.0 {
            (1.0 - p_correct) * weights[j] / total
        } else {
            (1.0 - p_correct) / (n - 1) as f64
        };
    }
    row
}

fn resolve_candidates(scene: &Scene, task: &IntentTask) -> Result<Vec<SceneObject>, ModelError> {
    let mut out: Vec<SceneObject> = Vec::new();
    for id in &task.candidates {
        if id == TERMINAL_STATE {
            return Err(ModelError::ReservedId(id.clone()));
        }
        if out.iter().any(|o| &o.id == id) {
            return Err(ModelError::DuplicateCandidate(id.clone()));
        }
        let obj = scene
            .object(id)
            .ok_or_else(|| ModelError::UnknownCandidate(id.clone()))?;
        out.push(obj.clone());
    }
    if out.len() < 2 {
        return Err(ModelError::DegenerateTask(out.len()));
    }
    Ok(out)
}

/// Distribution over the task's gaze tokens when the human means `true_id`.
pub fn gaze_observation_row(
    scene: &Scene,
    task: &IntentTask,
    true_id: &str,
    obs: &ObservationConfig,
) -> Result<Vec<f64>, ModelError> {
    obs.validate()?;
    let cands: Vec<&SceneObject> = task
        .candidates
        .iter()
        .map(|id| scene.object(id).ok_or_else(|| ModelError::UnknownCandidate(id.clone())))
        .collect::<Result<_, _>>()?;
    let truth = task
        .candidates
        .iter()
        .position(|c| c == true_id)
        .ok_or_else(|| ModelError::UnknownCandidate(true_id.to_string()))?;
    Ok(gaze_row(&cands, truth, obs))
}

fn gaze_row(cands: &[&SceneObject], truth: usize, obs: &ObservationConfig) -> Vec<f64> {
    let weights: Vec<f64> = match obs.gaze_mode {
        GazeMode::UniformError => vec![1.0; cands.len()],
        GazeMode::ProximityWeighted => cands
            .iter()
            .map(|c| (-c.position.distance(&cands[truth].position) / obs.gaze_length_scale).exp())
            .collect(),
    };
    channel_row(cands.len(), truth, obs.p_correct, &weights)
}

/// Builds the task POMDP.
pub fn build_model(
    scene: &Scene,
    task: &IntentTask,
    obs: &ObservationConfig,
    rew: &RewardConfig,
    discount: f64,
) -> Result<ArdieModel, ModelError> {
    scene.validate()?;
    obs.validate()?;
    rew.validate()?;
    if !(0.0..1.0).contains(&discount) {
        return Err(ModelError::InvalidConfig("discount must be in [0, 1)".into()));
    }
    let cands = resolve_candidates(scene, task)?;
    let n = cands.len();
    let ns = n + 1;
    let terminal = n;
    let mut warnings = Vec::new();

    let colors = distinct(cands.iter().map(|c| c.color));
    let sizes = distinct(cands.iter().map(|c| c.size));

    let mut states: Vec<String> = cands.iter().map(|c| c.id.clone()).collect();
    states.push(TERMINAL_STATE.into());

    let mut actions = vec![GAZE_ACTION.to_string()];
    let mut ask_actions = vec![(Attribute::Color, 1)];
    actions.push("ask_color".into());
    if !obs.color_only {
        ask_actions.push((Attribute::Size, actions.len()));
        actions.push("ask_size".into());
    }
    let project_actions: Vec<usize> = (0..n).map(|i| actions.len() + i).collect();
    actions.extend(cands.iter().map(|c| format!("project_{}", c.id)));

    let mut observations: Vec<String> = cands.iter().map(|c| format!("gaze_{}", c.id)).collect();
    let gaze_tokens: Vec<usize> = (0..n).collect();
    let color_tokens: Vec<(Color, usize)> = colors
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, n + i))
        .collect();
    observations.extend(colors.iter().map(|c| format!("color_{}", c.name())));
    let size_tokens: Vec<(Size, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, n + colors.len() + i))
        .collect();
    observations.extend(sizes.iter().map(|s| format!("size_{}", s.name())));
    let null_token = observations.len();
    observations.push(NULL_OBSERVATION.into());
    let nz = observations.len();

    let identity: Vec<Vec<f64>> = (0..ns)
        .map(|s| (0..ns).map(|t| if s == t { 1.0 } else { 0.0 }).collect())
        .collect();
    let to_terminal: Vec<Vec<f64>> = (0..ns)
        .map(|_| (0..ns).map(|t| if t == terminal { 1.0 } else { 0.0 }).collect())
        .collect();
    let null_row: Vec<f64> = (0..nz).map(|z| if z == null_token { 1.0 } else { 0.0 }).collect();

    let cand_refs: Vec<&SceneObject> = cands.iter().collect();
    let embed = |offset: usize, row: Vec<f64>| {
        let mut full = vec![0.0; nz];
        full[offset..offset + row.len()].copy_from_slice(&row);
        full
    };

    let mut transition = Vec::new();
    let mut observation_fn = Vec::new();
    let mut reward = vec![vec![0.0; actions.len()]; ns];

    // gaze
    transition.push(identity.clone());
    observation_fn.push(
        (0..ns)
            .map(|s| {
                if s == terminal {
                    null_row.clone()
                } else {
                    embed(0, gaze_row(&cand_refs, s, obs))
                }
            })
            .collect(),
    );
    // asks
    for (attr, _) in &ask_actions {
        transition.push(identity.clone());
        let rows = (0..ns)
            .map(|s| {
                if s == terminal {
                    return null_row.clone();
                }
                match attr {
                    Attribute::Color => {
                        let truth = colors.iter().position(|c| *c == cands[s].color).unwrap();
                        embed(n, channel_row(colors.len(), truth, obs.p_correct, &vec![1.0; colors.len()]))
                    }
                    Attribute::Size => {
                        let truth = sizes.iter().position(|c| *c == cands[s].size).unwrap();
                        embed(n + colors.len(), channel_row(sizes.len(), truth, obs.p_correct, &vec![1.0; sizes.len()]))
                    }
                }
            })
            .collect();
        observation_fn.push(rows);
        let (count, name) = match attr {
            Attribute::Color => (colors.len(), "color"),
            Attribute::Size => (sizes.len(), "size"),
        };
        if count < n {
            warnings.push(format!(
                "ask_{name}: {n} candidates share {count} distinct values; some cannot be told apart by this question"
            ));
        }
    }
    // projections
    for _ in 0..n {
        transition.push(to_terminal.clone());
        observation_fn.push(vec![null_row.clone(); ns]);
    }

    for s in 0..n {
        reward[s][0] = rew.c_gaze;
        for (_, a) in &ask_actions {
            reward[s][*a] = rew.c_ask;
        }
        for (i, a) in project_actions.iter().enumerate() {
            reward[s][*a] = if i == s { rew.r_correct } else { rew.r_incorrect };
        }
    }

    let pomdp = PomdpModel::try_from(ModelDocument {
        states,
        actions,
        observations,
        transition,
        observation_fn,
        reward,
        discount,
    })?;

    Ok(ArdieModel {
        pomdp,
        candidates: cands,
        terminal,
        gaze_action: 0,
        ask_actions,
        project_actions,
        gaze_tokens,
        color_tokens,
        size_tokens,
        null_token,
        warnings,
    })
}

/// What the agent is waiting to hear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    Attribute(Attribute),
    Confirmation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Utterance {
    Color(Color),
    Size(Size),
    Confirm(bool),
    Unknown,
}

const FILLER: &[&str] = &["the", "a", "one", "block", "please"];

fn word_meaning(word: &str) -> Option<Utterance> {
    let u = match word {
        "red" => Utterance::Color(Color::Red),
        "green" => Utterance::Color(Color::Green),
        "blue" => Utterance::Color(Color::Blue),
        "yellow" => Utterance::Color(Color::Yellow),
        "small" | "little" | "tiny" => Utterance::Size(Size::Small),
        "large" | "big" | "huge" => Utterance::Size(Size::Large),
        "yes" | "yeah" | "correct" | "confirm" => Utterance::Confirm(true),
        "no" | "nope" | "wrong" | "cancel" => Utterance::Confirm(false),
        _ => return None,
    };
    Some(u)
}

fn fits(u: Utterance, expected: Expected) -> bool {
    matches!(
        (u, expected),
        (Utterance::Color(_), Expected::Attribute(Attribute::Color))
            | (Utterance::Size(_), Expected::Attribute(Attribute::Size))
            | (Utterance::Confirm(_), Expected::Confirmation)
    )
}

/// Maps a typed or transcribed answer onto the grammar. Every content word
/// must agree on one value of the expected kind; anything else is
/// `Unknown`.
pub fn parse_utterance(text: &str, expected: Expected) -> Utterance {
    let lowered = text.trim().to_lowercase();
    let mut found: Option<Utterance> = None;
    for word in lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !FILLER.contains(w))
    {
        match word_meaning(word) {
            Some(u) if fits(u, expected) && found.is_none_or(|f| f == u) => found = Some(u),
            _ => return Utterance::Unknown,
        }
    }
    found.unwrap_or(Utterance::Unknown)
}

/// Agent prompts that turn into text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Prompt {
    Gaze,
    Ask { attribute: Attribute },
    Confirm { object: String },
}

pub fn generate_question(prompt: &Prompt, scene: &Scene) -> String {
    match prompt {
        Prompt::Gaze => "Please look at the object you want next.".into(),
        Prompt::Ask {
            attribute: Attribute::Color,
        } => "What color is the object you want?".into(),
        Prompt::Ask {
            attribute: Attribute::Size,
        } => "What size is the object you want?".into(),
        Prompt::Confirm { object } => match scene.object(object) {
            Some(o) => format!(
                "Place the {} {} block here — is this correct?",
                o.size.name(),
                o.color.name()
            ),
            None => format!("Place {object} here — is this correct?"),
        },
    }
}
