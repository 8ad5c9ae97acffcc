//! Simulated humans and batch evaluation of the full interaction loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{plan_tasks, EpisodeError, Input, Phase, Session, SessionConfig, TaskPlan};
use crate::model::{ArdieModel, Attribute, GazeMode};
use crate::par;
use crate::pomdp::{sample_index, ActionKind};
use crate::scene::{SceneError, StackState};

/// How the simulated human answers a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmMode {
    /// Says yes exactly when the projected object is the intended one.
    #[default]
    Truthful,
    AlwaysYes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanConfig {
    pub gaze_accuracy: f64,
    pub answer_accuracy: f64,
    pub confirm: ConfirmMode,
    /// Intended object per task. When absent, each task's intent is drawn
    /// uniformly from its candidates still on the table.
    pub intents: Option<Vec<String>>,
}

impl Default for HumanConfig {
    fn default() -> Self {
        HumanConfig {
            gaze_accuracy: 0.8,
            answer_accuracy: 0.8,
            confirm: ConfirmMode::Truthful,
            intents: None,
        }
    }
}

impl HumanConfig {
    pub fn validate(&self, tasks: usize) -> Result<(), EpisodeError> {
        for (name, p) in [("gaze_accuracy", self.gaze_accuracy), ("answer_accuracy", self.answer_accuracy)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EpisodeError::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if let Some(intents) = &self.intents {
            if intents.len() != tasks {
                return Err(EpisodeError::InvalidConfig(format!(
                    "{} intents for {tasks} tasks",
                    intents.len()
                )));
            }
        }
        Ok(())
    }
}

/// A session config plus the simulated human driving it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    #[serde(flatten)]
    pub session: SessionConfig,
    #[serde(default)]
    pub human: HumanConfig,
}

/// Stochastic stand-in for a person at the table.
#[derive(Debug)]
pub struct SimulatedHuman<'a> {
    config: &'a HumanConfig,
    gaze_mode: GazeMode,
    length_scale: f64,
    rng: ChaCha8Rng,
}

impl<'a> SimulatedHuman<'a> {
    pub fn new(config: &'a HumanConfig, session: &SessionConfig, rng: ChaCha8Rng) -> Self {
        SimulatedHuman {
            config,
            gaze_mode: session.obs.gaze_mode,
            length_scale: session.obs.gaze_length_scale,
            rng,
        }
    }

    fn choose_intent(&mut self, task: usize, model: &ArdieModel, stack: &StackState) -> String {
        if let Some(intents) = &self.config.intents {
            return intents[task].clone();
        }
        let open: Vec<&str> = model
            .candidates
            .iter()
            .filter(|c| !stack.contains(&c.id))
            .map(|c| c.id.as_str())
            .collect();
        open[self.rng.random_range(0..open.len())].to_string()
    }

    /// Index of the candidate looked at.
    fn gaze(&mut self, model: &ArdieModel, stack: &StackState, intent: &str) -> usize {
        let open: Vec<usize> = (0..model.candidates.len())
            .filter(|&i| !stack.contains(&model.candidates[i].id))
            .collect();
        let target = model.candidate_index(intent).filter(|i| open.contains(i));
        let Some(target) = target else {
            return open[self.rng.random_range(0..open.len())];
        };
        let others: Vec<usize> = open.iter().copied().filter(|&i| i != target).collect();
        if others.is_empty() || self.rng.random::<f64>() < self.config.gaze_accuracy {
            return target;
        }
        let weights: Vec<f64> = match self.gaze_mode {
            GazeMode::UniformError => vec![1.0; others.len()],
            GazeMode::ProximityWeighted => {
                let at = model.candidates[target].position;
                others
                    .iter()
                    .map(|&i| (-model.candidates[i].position.distance(&at) / self.length_scale).exp())
                    .collect()
            }
        };
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        others[sample_index(&probs, self.rng.random())]
    }

    fn answer(&mut self, model: &ArdieModel, attribute: Attribute, intent: &str) -> String {
        let words: Vec<&'static str> = match attribute {
            Attribute::Color => model.color_tokens.iter().map(|(c, _)| c.name()).collect(),
            Attribute::Size => model.size_tokens.iter().map(|(s, _)| s.name()).collect(),
        };
        let truth = model.candidate_index(intent).map(|i| {
            let c = &model.candidates[i];
            match attribute {
                Attribute::Color => c.color.name(),
                Attribute::Size => c.size.name(),
            }
        });
        let Some(truth) = truth else {
            return words[self.rng.random_range(0..words.len())].to_string();
        };
        let others: Vec<&str> = words.iter().copied().filter(|w| *w != truth).collect();
        if others.is_empty() || self.rng.random::<f64>() < self.config.answer_accuracy {
            truth.to_string()
        } else {
            others[self.rng.random_range(0..others.len())].to_string()
        }
    }

    fn confirm(&self, projected: &str, intent: &str) -> bool {
        match self.config.confirm {
            ConfirmMode::Truthful => projected == intent,
            ConfirmMode::AlwaysYes => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub intent: String,
    pub committed: Option<String>,
    pub correct: bool,
    pub projections: u32,
    pub rejections: u32,
    pub first_projection_correct: Option<bool>,
    pub discounted_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub tasks: Vec<TaskOutcome>,
    /// Every task ended with its intended object committed.
    pub success: bool,
    pub wrong_commits: u32,
    pub gaze_requests: u32,
    pub questions: u32,
    pub reasks: u32,
    pub projections: u32,
    pub refused_placements: u32,
    pub impossible_observations: u32,
    pub steps: usize,
    pub truncated: bool,
    /// Sum over tasks of the per-task discounted return.
    pub discounted_return: f64,
}

/// Discounted return of one task's action sequence when the human wanted
/// `intent`. Time restarts at zero for every task.
pub fn task_return(model: &ArdieModel, actions: &[usize], intent: &str, rewards: &crate::model::RewardConfig) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    for &a in actions {
        let r = match model.pomdp.action_kind(a) {
            ActionKind::Gaze => rewards.c_gaze,
            ActionKind::Ask => rewards.c_ask,
            ActionKind::Project => {
                let i = model.projected_candidate(a).expect("project action");
                if model.candidates[i].id == intent {
                    rewards.r_correct
                } else {
                    rewards.r_incorrect
                }
            }
            ActionKind::Other => 0.0,
        };
        total += weight * r;
        weight *= model.pomdp.discount();
    }
    total
}

/// Plays one episode with a simulated human. Returns the finished session
/// so callers can inspect or persist its log.
pub fn run_episode(
    plans: &[TaskPlan],
    config: &SessionConfig,
    human: &HumanConfig,
    rng: ChaCha8Rng,
) -> Result<(EpisodeResult, Session), EpisodeError> {
    human.validate(config.tasks.len())?;
    let mut session = Session::start(config.clone(), plans.to_vec())?;
    let mut person = SimulatedHuman::new(human, config, rng);
    let mut intents: Vec<Option<String>> = Vec::new();
    let mut result = EpisodeResult {
        tasks: Vec::new(),
        success: false,
        wrong_commits: 0,
        gaze_requests: 0,
        questions: 0,
        reasks: 0,
        projections: 0,
        refused_placements: 0,
        impossible_observations: 0,
        steps: 0,
        truncated: false,
        discounted_return: 0.0,
    };

    while !session.is_done() {
        if result.steps >= config.step_cap {
            result.truncated = true;
            break;
        }
        result.steps += 1;
        let task = session.task_index();
        let model = session.plans()[task].model.clone();
        intents.resize(task + 1, None);
        let intent = intents[task]
            .get_or_insert_with(|| person.choose_intent(task, &model, session.stack()))
            .clone();
        let outcome = match session.phase().clone() {
            Phase::Ready => session.step_agent().map(|e| match e.event.kind() {
                "gaze_request" => result.gaze_requests += 1,
                "question" => result.questions += 1,
                _ => result.projections += 1,
            }),
            Phase::AwaitingGaze => {
                let i = person.gaze(&model, session.stack(), &intent);
                let point = model.candidates[i].position;
                session.ingest_observation(Input::Gaze(point)).map(drop)
            }
            Phase::AwaitingAnswer { attribute } => {
                let text = person.answer(&model, attribute, &intent);
                session.ingest_observation(Input::Utterance(text)).map(|e| {
                    if e.event.kind() == "question" {
                        result.reasks += 1;
                    }
                })
            }
            Phase::AwaitingConfirmation { candidate } => {
                let yes = person.confirm(&candidate, &intent);
                match session.handle_confirmation(yes) {
                    Err(EpisodeError::Scene(SceneError::StabilityRefused { .. })) => {
                        result.refused_placements += 1;
                        session.handle_confirmation(false).map(drop)
                    }
                    other => other.map(drop),
                }
            }
            Phase::Acting | Phase::Done => unreachable!("transient phases are never observed"),
        };
        match outcome {
            Ok(()) => {}
            Err(EpisodeError::Observation { .. }) => result.impossible_observations += 1,
            Err(e) => return Err(e),
        }
    }

    for (task, record) in session.records().iter().enumerate() {
        if task > session.task_index() {
            break;
        }
        // Skipped tasks never asked for an intent.
        let intent = match intents.get(task).cloned().flatten() {
            Some(i) => i,
            None => human.intents.as_ref().map(|v| v[task].clone()).unwrap_or_default(),
        };
        let intent = &intent;
        let model = &session.plans()[task].model;
        let committed = record.committed.clone();
        let correct = committed.as_deref() == Some(intent.as_str());
        if committed.is_some() && !correct {
            result.wrong_commits += 1;
        }
        let ret = task_return(model, &record.actions, intent, &config.rewards);
        result.discounted_return += ret;
        result.tasks.push(TaskOutcome {
            intent: intent.clone(),
            committed,
            correct,
            projections: record.projections.len() as u32,
            rejections: record.rejections,
            first_projection_correct: record.projections.first().map(|p| p == intent),
            discounted_return: ret,
        });
    }
    result.success = !result.truncated
        && result.tasks.len() == config.tasks.len()
        && result.tasks.iter().all(|t| t.correct);
    Ok((result, session))
}

/// Episode `i` of a batch draws from stream `i` of the seed.
pub fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

/// 95% Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize) -> [f64; 2] {
    if n == 0 {
        return [0.0, 1.0];
    }
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) + z * z / (4.0 * n)) / n).sqrt() / denom;
    [(center - half).max(0.0), (center + half).min(1.0)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub config_digest: String,
    pub episodes: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub success_ci95: [f64; 2],
    pub task_success_rate: f64,
    pub wrong_commit_episodes: usize,
    pub wrong_commits: u64,
    /// Share of tasks whose first projection showed the intended object,
    /// among tasks with at least one projection.
    pub first_projection_accuracy: f64,
    pub mean_rejections_per_task: f64,
    pub mean_gaze_requests: f64,
    pub mean_questions: f64,
    pub mean_reasks: f64,
    pub mean_projections: f64,
    pub mean_steps: f64,
    pub mean_discounted_return: f64,
    pub stderr_discounted_return: f64,
    pub truncated_episodes: usize,
    pub refused_placements: u64,
    pub impossible_observations: u64,
}

pub fn summarize(config_digest: String, seed: u64, results: &[EpisodeResult]) -> BatchStats {
    let n = results.len();
    let nf = n.max(1) as f64;
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / nf;
    let successes = results.iter().filter(|r| r.success).count();
    let tasks: Vec<&TaskOutcome> = results.iter().flat_map(|r| &r.tasks).collect();
    let task_count = tasks.len().max(1) as f64;
    let projected: Vec<bool> = tasks.iter().filter_map(|t| t.first_projection_correct).collect();
    let mean_return = mean(&|r| r.discounted_return);
    let stderr = if n > 1 {
        let var = results
            .iter()
            .map(|r| (r.discounted_return - mean_return).powi(2))
            .sum::<f64>()
            / (nf - 1.0);
        (var / nf).sqrt()
    } else {
        0.0
    };
    BatchStats {
        config_digest,
        episodes: n,
        seed,
        success_rate: successes as f64 / nf,
        success_ci95: wilson_interval(successes, n),
        task_success_rate: tasks.iter().filter(|t| t.correct).count() as f64 / task_count,
        wrong_commit_episodes: results.iter().filter(|r| r.wrong_commits > 0).count(),
        wrong_commits: results.iter().map(|r| r.wrong_commits as u64).sum(),
        first_projection_accuracy: if projected.is_empty() {
            0.0
        } else {
            projected.iter().filter(|c| **c).count() as f64 / projected.len() as f64
        },
        mean_rejections_per_task: tasks.iter().map(|t| t.rejections as f64).sum::<f64>() / task_count,
        mean_gaze_requests: mean(&|r| r.gaze_requests as f64),
        mean_questions: mean(&|r| r.questions as f64),
        mean_reasks: mean(&|r| r.reasks as f64),
        mean_projections: mean(&|r| r.projections as f64),
        mean_steps: mean(&|r| r.steps as f64),
        mean_discounted_return: mean_return,
        stderr_discounted_return: stderr,
        truncated_episodes: results.iter().filter(|r| r.truncated).count(),
        refused_placements: results.iter().map(|r| r.refused_placements as u64).sum(),
        impossible_observations: results.iter().map(|r| r.impossible_observations as u64).sum(),
    }
}

/// Runs `episodes` independent episodes against already solved plans.
pub fn simulate_with_plans(
    config: &SimulationConfig,
    plans: &[TaskPlan],
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeResult>, EpisodeError> {
    simulate_observed(config, plans, episodes, seed, |_, _| {})
}

/// Like [`simulate_with_plans`], handing each finished session and its
/// episode index to `observe` (possibly from several threads).
pub fn simulate_observed<F>(
    config: &SimulationConfig,
    plans: &[TaskPlan],
    episodes: usize,
    seed: u64,
    observe: F,
) -> Result<Vec<EpisodeResult>, EpisodeError>
where
    F: Fn(usize, &Session) + Sync + Send,
{
    config.human.validate(config.session.tasks.len())?;
    par::map_range(episodes, |i| {
        run_episode(plans, &config.session, &config.human, episode_rng(seed, i)).map(|(r, session)| {
            observe(i, &session);
            r
        })
    })
    .into_iter()
    .collect()
}

/// Solves the configured tasks and summarizes a batch of simulated episodes.
/// The output depends only on the config, the episode count and the seed.
pub fn batch_simulate(config: &SimulationConfig, episodes: usize, seed: u64) -> Result<BatchStats, EpisodeError> {
    config.human.validate(config.session.tasks.len())?;
    let (plans, _) = plan_tasks(&config.session)?;
    let results = simulate_with_plans(config, &plans, episodes, seed)?;
    Ok(summarize(config.session.digest(), seed, &results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::testing::demo_config;
    use approx::assert_abs_diff_eq;

    fn sim(confirm: ConfirmMode) -> SimulationConfig {
        SimulationConfig {
            session: demo_config(),
            human: HumanConfig {
                confirm,
                intents: Some(vec!["green".into(), "red".into(), "blue".into()]),
                ..HumanConfig::default()
            },
        }
    }

    #[test]
    fn wilson_reference_values() {
        let [lo, hi] = wilson_interval(90, 100);
        assert_abs_diff_eq!(lo, 0.825_633, epsilon = 1e-5);
        assert_abs_diff_eq!(hi, 0.944_775, epsilon = 1e-5);
        assert_eq!(wilson_interval(0, 0), [0.0, 1.0]);
        let [lo, hi] = wilson_interval(10, 10);
        assert!(lo > 0.72 && hi > 1.0 - 1e-12);
    }

    #[test]
    fn perfect_human_always_succeeds() {
        let mut config = sim(ConfirmMode::Truthful);
        config.human.gaze_accuracy = 1.0;
        config.human.answer_accuracy = 1.0;
        let (plans, _) = plan_tasks(&config.session).unwrap();
        let results = simulate_with_plans(&config, &plans, 20, 3).unwrap();
        for r in &results {
            assert!(r.success, "{r:?}");
            assert_eq!(r.wrong_commits, 0);
            assert_eq!(r.tasks.len(), 3);
        }
    }

    #[test]
    fn episode_return_matches_model_accounting() {
        let config = sim(ConfirmMode::Truthful);
        let (plans, _) = plan_tasks(&config.session).unwrap();
        for i in 0..20 {
            let (result, session) = run_episode(&plans, &config.session, &config.human, episode_rng(11, i)).unwrap();
            for (t, record) in session.records().iter().enumerate() {
                let model = &plans[t].model;
                let s = model.candidate_index(&result.tasks[t].intent).unwrap();
                let trace: Vec<(usize, usize)> = record.actions.iter().map(|&a| (s, a)).collect();
                assert_abs_diff_eq!(
                    result.tasks[t].discounted_return,
                    model.pomdp.discounted_return(&trace),
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn truthful_human_never_gets_a_wrong_commit() {
        let config = sim(ConfirmMode::Truthful);
        let stats = batch_simulate(&config, 50, 1).unwrap();
        assert_eq!(stats.wrong_commits, 0);
        assert_eq!(stats.truncated_episodes, 0);
        assert_eq!(stats.success_rate, 1.0);
    }

    #[test]
    fn batch_is_deterministic() {
        let config = sim(ConfirmMode::AlwaysYes);
        let a = serde_json::to_string(&batch_simulate(&config, 40, 9).unwrap()).unwrap();
        let b = serde_json::to_string(&batch_simulate(&config, 40, 9).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_intents_stay_on_the_table() {
        let mut config = sim(ConfirmMode::Truthful);
        config.human.intents = None;
        // with three tasks, random picks could leave the last task empty
        config.session.tasks.truncate(2);
        let (plans, _) = plan_tasks(&config.session).unwrap();
        for r in simulate_with_plans(&config, &plans, 30, 5).unwrap() {
            let mut seen: Vec<&str> = r.tasks.iter().map(|t| t.intent.as_str()).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), r.tasks.len());
        }
    }

    #[test]
    fn intent_count_is_checked() {
        let mut config = sim(ConfirmMode::Truthful);
        config.human.intents = Some(vec!["green".into()]);
        assert!(matches!(batch_simulate(&config, 1, 0), Err(EpisodeError::InvalidConfig(_))));
    }
}
