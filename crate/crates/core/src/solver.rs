//! Offline point-based solver.
//!
//! Keeps a lower bound as a set of alpha-vectors and an upper bound as MDP
//! corner values refined by sawtooth interpolation over sampled points.
//! Each trial walks down from the root belief, picking the action with the
//! best upper bound and the observation whose child has the largest
//! weighted excess gap, then backs up both bounds along the path.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::pomdp::{sample_index, AlphaVector, Belief, PolicySet, PomdpError, PomdpModel};

/// Sup-norm accuracy of the blind and MDP fixed points.
const FIXED_POINT_TOLERANCE: f64 = 1e-6;
const PRUNE_EVERY: u64 = 50;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pomdp(#[from] PomdpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Target gap between the bounds at the root, in reward units.
    pub epsilon: f64,
    /// `None` means unbounded.
    pub max_backups: Option<u64>,
    /// Wall-clock budget in seconds; `None` means unbounded.
    pub max_seconds: Option<f64>,
    pub seed: u64,
    pub max_depth: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 0.5,
            max_backups: Some(500_000),
            max_seconds: Some(60.0),
            seed: 0,
            max_depth: 200,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.epsilon > 0.0) {
            return Err(SolverError::InvalidConfig("epsilon must be positive".into()));
        }
        if self.max_depth < 1 {
            return Err(SolverError::InvalidConfig("max_depth must be at least 1".into()));
        }
        if self.max_backups.is_none() && self.max_seconds.is_none() {
            return Err(SolverError::InvalidConfig(
                "at least one of max_backups and max_seconds must be set".into(),
            ));
        }
        if matches!(self.max_seconds, Some(s) if !(s > 0.0)) {
            return Err(SolverError::InvalidConfig("max_seconds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub root_lower: f64,
    pub root_upper: f64,
    pub backups_done: u64,
    pub beliefs_sampled: u64,
    pub elapsed: f64,
    pub converged: bool,
    pub vectors: usize,
}

/// Value of repeating each action forever, one vector per action.
pub fn blind_lower_bound(model: &PomdpModel) -> PolicySet {
    let ns = model.num_states();
    let gamma = model.discount();
    let vectors = (0..model.num_actions())
        .map(|a| {
            // Start below the fixed point so every iterate stays a lower bound.
            let floor = (0..ns).map(|s| model.reward(s, a)).fold(f64::INFINITY, f64::min);
            let mut alpha = vec![floor / (1.0 - gamma); ns];
            loop {
                let next: Vec<f64> = (0..ns)
                    .map(|s| {
                        let cont: f64 = model
                            .transition_row(a, s)
                            .iter()
                            .zip(&alpha)
                            .map(|(t, v)| t * v)
                            .sum();
                        model.reward(s, a) + gamma * cont
                    })
                    .collect();
                let diff = sup_diff(&next, &alpha);
                alpha = next;
                if converged(diff, gamma) {
                    break;
                }
            }
            AlphaVector::new(alpha, a)
        })
        .collect();
    PolicySet::new(vectors).expect("model has at least one action")
}

/// Optimal values of the fully observable relaxation.
pub fn mdp_upper_bound(model: &PomdpModel) -> Vec<f64> {
    let ns = model.num_states();
    let gamma = model.discount();
    let (_, rmax) = model.reward_bounds();
    // Start above the fixed point so every iterate stays an upper bound.
    let mut values = vec![rmax / (1.0 - gamma); ns];
    loop {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                (0..model.num_actions())
                    .map(|a| {
                        let cont: f64 = model
                            .transition_row(a, s)
                            .iter()
                            .zip(&values)
                            .map(|(t, v)| t * v)
                            .sum();
                        model.reward(s, a) + gamma * cont
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let diff = sup_diff(&next, &values);
        values = next;
        if converged(diff, gamma) {
            return values;
        }
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn converged(diff: f64, gamma: f64) -> bool {
    // Distance to the fixed point is at most gamma/(1-gamma) times the step.
    gamma == 0.0 || diff * gamma <= FIXED_POINT_TOLERANCE * (1.0 - gamma)
}

/// Point-based Bellman backup of `policy` at `b`.
pub fn backup(model: &PomdpModel, policy: &PolicySet, b: &Belief) -> AlphaVector {
    backup_at(model, policy, b.probs()).0
}

fn backup_at(model: &PomdpModel, policy: &PolicySet, b: &[f64]) -> (AlphaVector, f64) {
    let ns = model.num_states();
    let gamma = model.discount();
    let mut best: Option<(AlphaVector, f64)> = None;
    for a in 0..model.num_actions() {
        let predicted = model.predict(b, a);
        let mut g: Vec<f64> = (0..ns).map(|s| model.reward(s, a)).collect();
        for z in 0..model.num_observations() {
            let (post, mass) = model.unnormalized_update(&predicted, a, z);
            let chosen = if mass > 0.0 {
                policy.best_index(&post).0
            } else {
                // Unreachable from b; any member keeps the bound valid.
                let weights: Vec<f64> = (0..ns).map(|next| model.observation_prob(a, next, z)).collect();
                if weights.iter().all(|w| *w == 0.0) {
                    continue;
                }
                policy.best_index(&weights).0
            };
            let alpha = &policy.vectors()[chosen].values;
            // projected(s') = O(z|s',a) alpha(s')
            let projected: Vec<f64> =
                (0..ns).map(|next| model.observation_prob(a, next, z) * alpha[next]).collect();
            for (s, gs) in g.iter_mut().enumerate() {
                let cont: f64 = model
                    .transition_row(a, s)
                    .iter()
                    .zip(&projected)
                    .map(|(t, p)| t * p)
                    .sum();
                *gs += gamma * cont;
            }
        }
        let candidate = AlphaVector::new(g, a);
        let value = candidate.dot(b);
        if best.as_ref().is_none_or(|(_, v)| value > *v) {
            best = Some((candidate, value));
        }
    }
    best.expect("model has at least one action")
}

/// Sawtooth upper bound: corner values plus interior points.
#[derive(Debug, Clone)]
struct UpperBound {
    corners: Vec<f64>,
    points: Vec<(Vec<f64>, f64)>,
}

impl UpperBound {
    fn value(&self, b: &[f64]) -> f64 {
        let base: f64 = b.iter().zip(&self.corners).map(|(p, v)| p * v).sum();
        let mut best = base;
        for (point, v) in &self.points {
            let mut ratio = f64::INFINITY;
            let mut point_base = 0.0;
            for ((&bp, &pp), &c) in b.iter().zip(point).zip(&self.corners) {
                if pp > 0.0 {
                    ratio = ratio.min(bp / pp);
                    point_base += pp * c;
                }
            }
            let candidate = base + ratio * (v - point_base);
            if candidate < best {
                best = candidate;
            }
        }
        best
    }
}

struct Child {
    belief: Vec<f64>,
    prob: f64,
}

fn children(model: &PomdpModel, b: &[f64], a: usize) -> Vec<Option<Child>> {
    let predicted = model.predict(b, a);
    (0..model.num_observations())
        .map(|z| {
            let (post, mass) = model.unnormalized_update(&predicted, a, z);
            (mass > 0.0).then(|| Child {
                belief: post.into_iter().map(|p| p / mass).collect(),
                prob: mass,
            })
        })
        .collect()
}

fn belief_key(b: &[f64]) -> Vec<u64> {
    b.iter().map(|p| p.to_bits()).collect()
}

struct Search<'m> {
    model: &'m PomdpModel,
    lower: PolicySet,
    upper: UpperBound,
    sampled: Vec<Vec<f64>>,
    seen: HashSet<Vec<u64>>,
    rng: ChaCha8Rng,
    backups: u64,
}

impl<'m> Search<'m> {
    fn lower_value(&self, b: &[f64]) -> f64 {
        self.lower.best_index(b).1
    }

    fn upper_q(&self, b: &[f64], a: usize) -> f64 {
        let gamma = self.model.discount();
        let cont: f64 = children(self.model, b, a)
            .iter()
            .flatten()
            .map(|c| c.prob * self.upper.value(&c.belief))
            .sum();
        self.model.expected_reward_unchecked(b, a) + gamma * cont
    }

    fn best_upper_action(&self, b: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..self.model.num_actions() {
            let q = self.upper_q(b, a);
            if q > best.1 {
                best = (a, q);
            }
        }
        best
    }

    fn remember(&mut self, b: &[f64]) {
        if self.seen.insert(belief_key(b)) {
            self.sampled.push(b.to_vec());
        }
    }

    fn sample_path(&mut self, root: &[f64], epsilon: f64, max_depth: usize) -> Vec<Vec<f64>> {
        let gamma = self.model.discount();
        let mut path = vec![root.to_vec()];
        let mut target = epsilon;
        for _ in 0..max_depth {
            let b = path.last().unwrap();
            if self.upper.value(b) - self.lower_value(b) <= target {
                break;
            }
            let (a, _) = self.best_upper_action(b);
            let child_target = if gamma > 0.0 { target / gamma } else { f64::INFINITY };
            let kids = children(self.model, b, a);
            let scores: Vec<f64> = kids
                .iter()
                .map(|c| match c {
                    Some(c) => {
                        let gap = self.upper.value(&c.belief) - self.lower_value(&c.belief);
                        c.prob * (gap - child_target)
                    }
                    None => f64::NEG_INFINITY,
                })
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(top > 0.0) {
                break;
            }
            let ties: Vec<usize> = (0..scores.len()).filter(|&z| scores[z] == top).collect();
            let z = if ties.len() == 1 {
                ties[0]
            } else {
                ties[self.rng.random_range(0..ties.len())]
            };
            let next = kids[z].as_ref().unwrap().belief.clone();
            path.push(next);
            target = child_target;
        }
        path
    }

    fn update_at(&mut self, b: &[f64]) {
        let (alpha, value) = backup_at(self.model, &self.lower, b);
        if value > self.lower_value(b) {
            self.lower.push(alpha);
        }
        let (_, q) = self.best_upper_action(b);
        if q < self.upper.value(b) {
            self.upper.points.push((b.to_vec(), q));
        }
        self.backups += 1;
        if self.backups % PRUNE_EVERY == 0 {
            self.prune();
        }
    }

    fn prune(&mut self) {
        let n = self.lower.len();
        let vectors = self.lower.vectors();
        let mut keep = vec![true; n];
        for j in 0..n {
            for i in 0..n {
                if i == j || !keep[i] {
                    continue;
                }
                let (vi, vj) = (&vectors[i], &vectors[j]);
                let dominates = vi.action <= vj.action
                    && vi.values.iter().zip(&vj.values).all(|(x, y)| x >= y)
                    && (vi.values != vj.values || i < j);
                if dominates {
                    keep[j] = false;
                    break;
                }
            }
        }
        self.lower.retain_indices(&keep);
        let mut used = vec![false; self.lower.len()];
        for b in &self.sampled {
            used[self.lower.best_index(b).0] = true;
        }
        self.lower.retain_indices(&used);
    }
}

/// Runs the point-based search from `b0` until the root gap drops to
/// `config.epsilon` or the budget runs out. Budget exhaustion is reported
/// through `SolveStats::converged`, not as an error.
pub fn solve(
    model: &PomdpModel,
    b0: &Belief,
    config: &SolverConfig,
) -> Result<(PolicySet, SolveStats), SolverError> {
    config.validate()?;
    if b0.len() != model.num_states() {
        return Err(PomdpError::Shape {
            expected: model.num_states(),
            actual: b0.len(),
        }
        .into());
    }
    let start = Instant::now();
    let mut search = Search {
        model,
        lower: blind_lower_bound(model),
        upper: UpperBound {
            corners: mdp_upper_bound(model),
            points: Vec::new(),
        },
        sampled: Vec::new(),
        seen: HashSet::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        backups: 0,
    };
    let root = b0.probs().to_vec();
    search.remember(&root);

    let mut converged = false;
    loop {
        let gap = search.upper.value(&root) - search.lower_value(&root);
        if gap <= config.epsilon {
            converged = true;
            break;
        }
        if config.max_backups.is_some_and(|m| search.backups >= m)
            || config
                .max_seconds
                .is_some_and(|s| start.elapsed().as_secs_f64() >= s)
        {
            break;
        }
        let path = search.sample_path(&root, config.epsilon, config.max_depth);
        for b in &path {
            search.remember(b);
        }
        for b in path.iter().rev() {
            search.update_at(b);
        }
    }
    search.prune();

    let stats = SolveStats {
        root_lower: search.lower_value(&root),
        root_upper: search.upper.value(&root),
        backups_done: search.backups,
        beliefs_sampled: search.sampled.len() as u64,
        elapsed: start.elapsed().as_secs_f64(),
        converged,
        vectors: search.lower.len(),
    };
    Ok((search.lower, stats))
}

/// Monte Carlo estimate of a policy's discounted return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: f64,
    pub stderr: f64,
    pub episodes: usize,
}

/// Step cap for one rollout: far enough that the remaining discounted
/// reward is negligible.
fn rollout_horizon(model: &PomdpModel) -> usize {
    let gamma = model.discount();
    if gamma == 0.0 {
        return 1;
    }
    let (lo, hi) = model.reward_bounds();
    let scale = lo.abs().max(hi.abs()).max(1e-12) / (1.0 - gamma);
    let steps = ((1e-9 / scale).ln() / gamma.ln()).ceil();
    (steps.max(1.0) as usize).min(100_000)
}

/// Simulates `episodes` rollouts acting greedily on the tracked belief.
/// Episode `i` draws from stream `i` of a generator seeded with `seed`, so
/// results do not depend on how episodes are scheduled.
pub fn evaluate_policy(
    model: &PomdpModel,
    policy: &PolicySet,
    b0: &Belief,
    episodes: usize,
    seed: u64,
) -> Result<Evaluation, SolverError> {
    if episodes == 0 {
        return Err(SolverError::InvalidConfig("episodes must be at least 1".into()));
    }
    if b0.len() != model.num_states() || policy.dimension() != model.num_states() {
        return Err(PomdpError::Shape {
            expected: model.num_states(),
            actual: b0.len(),
        }
        .into());
    }
    let horizon = rollout_horizon(model);
    let returns = par::map_range(episodes, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        rollout(model, policy, b0, horizon, &mut rng)
    });
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let stderr = if episodes > 1 {
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(Evaluation {
        mean,
        stderr,
        episodes,
    })
}

fn rollout(
    model: &PomdpModel,
    policy: &PolicySet,
    b0: &Belief,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let gamma = model.discount();
    let mut state = sample_index(b0.probs(), rng.random());
    let mut belief = b0.probs().to_vec();
    let mut total = 0.0;
    let mut weight = 1.0;
    for _ in 0..horizon {
        if model.is_terminal(state) {
            break;
        }
        let a = policy.vectors()[policy.best_index(&belief).0].action;
        total += weight * model.reward(state, a);
        weight *= gamma;
        let next = sample_index(model.transition_row(a, state), rng.random());
        let z = sample_index(model.observation_row(a, next), rng.random());
        let predicted = model.predict(&belief, a);
        let (post, mass) = model.unnormalized_update(&predicted, a, z);
        // z was drawn from the true state, so it has positive mass under any
        // belief that gives that state positive mass.
        belief = post.into_iter().map(|p| p / mass).collect();
        state = next;
    }
    total
}
