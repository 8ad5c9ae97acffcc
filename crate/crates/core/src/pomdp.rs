//! Finite discrete POMDPs: model tensors, beliefs and alpha-vector value
//! functions.
//!
//! Tensors are dense and indexed as `transition[a][s][s']`,
//! `observation_fn[a][s'][z]` and `reward[s][a]`. Beliefs are plain
//! probability vectors aligned with the state list.
//!
//! The belief update is the usual Bayes filter
//!
//! ```text
//! b'(s') = O(z|s',a) * sum_s T(s'|s,a) b(s) / p(z|b,a)
//! ```
//!
//! and the value of a belief under a set of alpha-vectors is
//! `V(b) = max_alpha alpha . b`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row-sum tolerance for stochastic tensors and beliefs.
pub const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PomdpError {
    #[error("unknown {kind} `{label}`")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("{kind} index {index} out of range ({len} defined)")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        len: usize,
    },
    #[error("shape mismatch: expected length {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("observation `{observation}` is impossible after action `{action}` from this belief")]
    ImpossibleObservation { action: String, observation: String },
    #[error("invalid belief: {0}")]
    InvalidBelief(String),
    #[error("invalid model: {}", format_violations(.0))]
    InvalidModel(Vec<Violation>),
    #[error("policy set is empty")]
    EmptyPolicy,
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, PomdpError>;

/// Coarse role of an action, derived from its label prefix
/// (`gaze*`, `ask*`, `project*`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Gaze,
    Ask,
    Project,
    Other,
}

impl ActionKind {
    pub fn from_label(label: &str) -> Self {
        if label.starts_with("gaze") {
            ActionKind::Gaze
        } else if label.starts_with("ask") {
            ActionKind::Ask
        } else if label.starts_with("project") {
            ActionKind::Project
        } else {
            ActionKind::Other
        }
    }
}

/// One broken model invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub tensor: String,
    pub index: Vec<usize>,
    pub magnitude: f64,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}: {} ({})", self.tensor, self.index, self.detail, self.magnitude)
    }
}

/// Serialized form of a model. Field names are part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub observations: Vec<String>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub observation_fn: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
}

fn check_labels(name: &str, labels: &[String], out: &mut Vec<Violation>) {
    if labels.is_empty() {
        out.push(Violation {
            tensor: name.into(),
            index: vec![],
            magnitude: 0.0,
            detail: "label list is empty".into(),
        });
    }
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            out.push(Violation {
                tensor: name.into(),
                index: vec![i],
                magnitude: 0.0,
                detail: format!("duplicate label `{l}`"),
            });
        }
    }
}

fn check_stochastic(
    name: &str,
    tensor: &[Vec<Vec<f64>>],
    dims: (usize, usize, usize),
    out: &mut Vec<Violation>,
) {
    if tensor.len() != dims.0 {
        out.push(Violation {
            tensor: name.into(),
            index: vec![],
            magnitude: tensor.len() as f64,
            detail: format!("expected {} slices", dims.0),
        });
        return;
    }
    for (i, slice) in tensor.iter().enumerate() {
        if slice.len() != dims.1 {
            out.push(Violation {
                tensor: name.into(),
                index: vec![i],
                magnitude: slice.len() as f64,
                detail: format!("expected {} rows", dims.1),
            });
            continue;
        }
        for (j, row) in slice.iter().enumerate() {
            if row.len() != dims.2 {
                out.push(Violation {
                    tensor: name.into(),
                    index: vec![i, j],
                    magnitude: row.len() as f64,
                    detail: format!("expected {} entries", dims.2),
                });
                continue;
            }
            for (k, &p) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    out.push(Violation {
                        tensor: name.into(),
                        index: vec![i, j, k],
                        magnitude: p,
                        detail: "probability outside [0, 1]".into(),
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOLERANCE || !sum.is_finite() {
                out.push(Violation {
                    tensor: name.into(),
                    index: vec![i, j],
                    magnitude: sum,
                    detail: "row does not sum to 1".into(),
                });
            }
        }
    }
}

/// Checks every model invariant and reports all violations found.
pub fn validate_model(doc: &ModelDocument) -> Vec<Violation> {
    let mut out = Vec::new();
    check_labels("states", &doc.states, &mut out);
    check_labels("actions", &doc.actions, &mut out);
    check_labels("observations", &doc.observations, &mut out);
    let (ns, na, nz) = (doc.states.len(), doc.actions.len(), doc.observations.len());
    check_stochastic("transition", &doc.transition, (na, ns, ns), &mut out);
    check_stochastic("observation_fn", &doc.observation_fn, (na, ns, nz), &mut out);
    if doc.reward.len() != ns {
        out.push(Violation {
            tensor: "reward".into(),
            index: vec![],
            magnitude: doc.reward.len() as f64,
            detail: format!("expected {ns} rows"),
        });
    } else {
        for (s, row) in doc.reward.iter().enumerate() {
            if row.len() != na {
                out.push(Violation {
                    tensor: "reward".into(),
                    index: vec![s],
                    magnitude: row.len() as f64,
                    detail: format!("expected {na} entries"),
                });
            }
            for (a, r) in row.iter().enumerate() {
                if !r.is_finite() {
                    out.push(Violation {
                        tensor: "reward".into(),
                        index: vec![s, a],
                        magnitude: *r,
                        detail: "reward is not finite".into(),
                    });
                }
            }
        }
    }
    if !(0.0..1.0).contains(&doc.discount) {
        out.push(Violation {
            tensor: "discount".into(),
            index: vec![],
            magnitude: doc.discount,
            detail: "discount outside [0, 1)".into(),
        });
    }
    out
}

/// A validated finite POMDP. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PomdpModel {
    states: Vec<String>,
    actions: Vec<String>,
    kinds: Vec<ActionKind>,
    observations: Vec<String>,
    // flat [a][s][s']
    transition: Vec<f64>,
    // flat [a][s'][z]
    observation_fn: Vec<f64>,
    // flat [s][a]
    reward: Vec<f64>,
    discount: f64,
    terminal: Vec<bool>,
}

impl TryFrom<ModelDocument> for PomdpModel {
    type Error = PomdpError;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let violations = validate_model(&doc);
        if !violations.is_empty() {
            return Err(PomdpError::InvalidModel(violations));
        }
        let kinds = doc.actions.iter().map(|l| ActionKind::from_label(l)).collect();
        let flatten3 = |t: Vec<Vec<Vec<f64>>>| t.into_iter().flatten().flatten().collect();
        let mut model = PomdpModel {
            transition: flatten3(doc.transition),
            observation_fn: flatten3(doc.observation_fn),
            reward: doc.reward.into_iter().flatten().collect(),
            states: doc.states,
            actions: doc.actions,
            kinds,
            observations: doc.observations,
            discount: doc.discount,
            terminal: Vec::new(),
        };
        model.terminal = (0..model.num_states())
            .map(|s| {
                (0..model.num_actions())
                    .all(|a| model.transition(a, s, s) == 1.0 && model.reward(s, a) == 0.0)
            })
            .collect();
        Ok(model)
    }
}

impl PomdpModel {
    pub fn to_document(&self) -> ModelDocument {
        let (ns, na) = (self.num_states(), self.num_actions());
        ModelDocument {
            states: self.states.clone(),
            actions: self.actions.clone(),
            observations: self.observations.clone(),
            transition: (0..na)
                .map(|a| (0..ns).map(|s| self.transition_row(a, s).to_vec()).collect())
                .collect(),
            observation_fn: (0..na)
                .map(|a| (0..ns).map(|s| self.observation_row(a, s).to_vec()).collect())
                .collect(),
            reward: (0..ns).map(|s| self.reward[s * na..(s + 1) * na].to_vec()).collect(),
            discount: self.discount,
        }
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn observations(&self) -> &[String] {
        &self.observations
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn action_kind(&self, a: usize) -> ActionKind {
        self.kinds[a]
    }

    /// Absorbing zero-reward states. Episodes end when one is entered.
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn state_index(&self, label: &str) -> Result<usize> {
        lookup("state", &self.states, label)
    }

    pub fn action_index(&self, label: &str) -> Result<usize> {
        lookup("action", &self.actions, label)
    }

    pub fn observation_index(&self, label: &str) -> Result<usize> {
        lookup("observation", &self.observations, label)
    }

    #[inline]
    pub fn transition(&self, a: usize, s: usize, next: usize) -> f64 {
        let ns = self.num_states();
        self.transition[(a * ns + s) * ns + next]
    }

    #[inline]
    pub fn transition_row(&self, a: usize, s: usize) -> &[f64] {
        let ns = self.num_states();
        &self.transition[(a * ns + s) * ns..(a * ns + s + 1) * ns]
    }

    #[inline]
    pub fn observation_prob(&self, a: usize, next: usize, z: usize) -> f64 {
        let (ns, nz) = (self.num_states(), self.num_observations());
        self.observation_fn[(a * ns + next) * nz + z]
    }

    #[inline]
    pub fn observation_row(&self, a: usize, next: usize) -> &[f64] {
        let (ns, nz) = (self.num_states(), self.num_observations());
        &self.observation_fn[(a * ns + next) * nz..(a * ns + next + 1) * nz]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions() + a]
    }

    pub fn reward_bounds(&self) -> (f64, f64) {
        self.reward
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)))
    }

    fn check_action(&self, a: usize) -> Result<()> {
        check_index("action", a, self.num_actions())
    }

    fn check_observation(&self, z: usize) -> Result<()> {
        check_index("observation", z, self.num_observations())
    }

    fn check_belief(&self, b: &Belief) -> Result<()> {
        if b.len() != self.num_states() {
            return Err(PomdpError::Shape {
                expected: self.num_states(),
                actual: b.len(),
            });
        }
        Ok(())
    }

    /// Predicted next-state distribution `sum_s T(s'|s,a) b(s)`.
    pub fn predict(&self, b: &[f64], a: usize) -> Vec<f64> {
        let ns = self.num_states();
        let mut out = vec![0.0; ns];
        for (s, &bs) in b.iter().enumerate() {
            if bs == 0.0 {
                continue;
            }
            for (o, &t) in out.iter_mut().zip(self.transition_row(a, s)) {
                *o += t * bs;
            }
        }
        out
    }

    /// Unnormalized posterior `O(z|s',a) * predicted(s')` and its mass.
    pub fn unnormalized_update(&self, predicted: &[f64], a: usize, z: usize) -> (Vec<f64>, f64) {
        let post: Vec<f64> = predicted
            .iter()
            .enumerate()
            .map(|(next, &p)| p * self.observation_prob(a, next, z))
            .collect();
        let mass = post.iter().sum();
        (post, mass)
    }

    /// `p(z | b, a)`.
    pub fn observation_probability(&self, b: &Belief, a: usize, z: usize) -> Result<f64> {
        self.check_belief(b)?;
        self.check_action(a)?;
        self.check_observation(z)?;
        let predicted = self.predict(b.probs(), a);
        Ok(self.unnormalized_update(&predicted, a, z).1.clamp(0.0, 1.0))
    }

    /// Bayes update of `b` after acting with `a` and observing `z`.
    pub fn belief_update(&self, b: &Belief, a: usize, z: usize) -> Result<Belief> {
        self.check_belief(b)?;
        self.check_action(a)?;
        self.check_observation(z)?;
        let predicted = self.predict(b.probs(), a);
        let (post, mass) = self.unnormalized_update(&predicted, a, z);
        if mass <= 0.0 {
            return Err(PomdpError::ImpossibleObservation {
                action: self.actions[a].clone(),
                observation: self.observations[z].clone(),
            });
        }
        Ok(Belief::normalized_from(post, mass))
    }

    /// Belief-weighted immediate reward `sum_s b(s) R(s,a)`.
    pub fn expected_reward(&self, b: &Belief, a: usize) -> Result<f64> {
        self.check_belief(b)?;
        self.check_action(a)?;
        Ok(self.expected_reward_unchecked(b.probs(), a))
    }

    #[inline]
    pub(crate) fn expected_reward_unchecked(&self, b: &[f64], a: usize) -> f64 {
        b.iter().enumerate().map(|(s, &p)| p * self.reward(s, a)).sum()
    }

    /// Discounted return `sum_t discount^t R(s_t, a_t)` of a state/action trace.
    pub fn discounted_return(&self, trace: &[(usize, usize)]) -> f64 {
        let mut total = 0.0;
        let mut weight = 1.0;
        for &(s, a) in trace {
            total += weight * self.reward(s, a);
            weight *= self.discount;
        }
        total
    }
}

fn lookup(kind: &'static str, labels: &[String], label: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| PomdpError::UnknownLabel {
            kind,
            label: label.to_string(),
        })
}

fn check_index(kind: &'static str, index: usize, len: usize) -> Result<()> {
    if index < len {
        Ok(())
    } else {
        Err(PomdpError::IndexOutOfRange { kind, index, len })
    }
}

/// Probability distribution over the model's states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(PomdpError::InvalidBelief("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(PomdpError::InvalidBelief(format!("entry {p} is negative or not finite")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(PomdpError::InvalidBelief(format!("entries sum to {sum}")));
        }
        Ok(Belief(probs))
    }

    /// Normalizes nonnegative weights into a belief.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(PomdpError::InvalidBelief("weights must be nonnegative".into()));
        }
        let mass: f64 = weights.iter().sum();
        if mass <= 0.0 {
            return Err(PomdpError::InvalidBelief("weights have zero mass".into()));
        }
        Ok(Belief::normalized_from(weights, mass))
    }

    pub(crate) fn normalized_from(mut weights: Vec<f64>, mass: f64) -> Self {
        for w in &mut weights {
            *w /= mass;
        }
        Belief(weights)
    }

    pub fn uniform(n: usize) -> Self {
        Belief(vec![1.0 / n as f64; n])
    }

    pub fn point(n: usize, s: usize) -> Self {
        let mut v = vec![0.0; n];
        v[s] = 1.0;
        Belief(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Belief {
    type Error = PomdpError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Belief::new(v)
    }
}

impl From<Belief> for Vec<f64> {
    fn from(b: Belief) -> Self {
        b.0
    }
}

/// Linear value function over states, tagged with the action that starts
/// the conditional plan it represents.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    pub values: Vec<f64>,
    pub action: usize,
}

impl AlphaVector {
    pub fn new(values: Vec<f64>, action: usize) -> Self {
        AlphaVector { values, action }
    }

    #[inline]
    pub fn dot(&self, b: &[f64]) -> f64 {
        self.values.iter().zip(b).map(|(v, p)| v * p).sum()
    }
}

/// One entry of a serialized policy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaDocument {
    pub action: String,
    pub values: Vec<f64>,
}

/// Piecewise-linear convex value function. Non-empty, all vectors the
/// same length.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    vectors: Vec<AlphaVector>,
}

impl PolicySet {
    pub fn new(vectors: Vec<AlphaVector>) -> Result<Self> {
        let first = vectors.first().ok_or(PomdpError::EmptyPolicy)?;
        let n = first.values.len();
        if let Some(bad) = vectors.iter().find(|v| v.values.len() != n) {
            return Err(PomdpError::Shape {
                expected: n,
                actual: bad.values.len(),
            });
        }
        Ok(PolicySet { vectors })
    }

    pub fn vectors(&self) -> &[AlphaVector] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.vectors[0].values.len()
    }

    pub(crate) fn push(&mut self, v: AlphaVector) {
        self.vectors.push(v);
    }

    pub(crate) fn retain_indices(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.vectors.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    }

    /// Index and value of the maximizing vector. Exact ties go to the
    /// vector with the lowest action index, then the earliest vector.
    pub(crate) fn best_index(&self, b: &[f64]) -> (usize, f64) {
        let mut best = (0, self.vectors[0].dot(b));
        for (i, v) in self.vectors.iter().enumerate().skip(1) {
            let val = v.dot(b);
            if val > best.1 || (val == best.1 && v.action < self.vectors[best.0].action) {
                best = (i, val);
            }
        }
        best
    }

    fn check(&self, b: &Belief) -> Result<()> {
        if b.len() != self.dimension() {
            return Err(PomdpError::Shape {
                expected: self.dimension(),
                actual: b.len(),
            });
        }
        Ok(())
    }

    /// `max_alpha alpha . b`.
    pub fn value(&self, b: &Belief) -> Result<f64> {
        self.check(b)?;
        Ok(self.best_index(b.probs()).1)
    }

    /// Action of an arg-max vector, lowest action index on ties.
    pub fn best_action(&self, b: &Belief) -> Result<usize> {
        self.check(b)?;
        Ok(self.vectors[self.best_index(b.probs()).0].action)
    }

    pub fn to_document(&self, model: &PomdpModel) -> Vec<AlphaDocument> {
        self.vectors
            .iter()
            .map(|v| AlphaDocument {
                action: model.actions()[v.action].clone(),
                values: v.values.clone(),
            })
            .collect()
    }

    pub fn from_document(model: &PomdpModel, doc: &[AlphaDocument]) -> Result<Self> {
        let vectors = doc
            .iter()
            .map(|d| {
                if d.values.len() != model.num_states() {
                    return Err(PomdpError::Shape {
                        expected: model.num_states(),
                        actual: d.values.len(),
                    });
                }
                Ok(AlphaVector::new(d.values.clone(), model.action_index(&d.action)?))
            })
            .collect::<Result<Vec<_>>>()?;
        PolicySet::new(vectors)
    }
}

/// Draws an index from a discrete distribution given a uniform `u` in [0, 1).
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
