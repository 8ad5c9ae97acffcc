//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p ardie-cli --test acceptance` (add `--release` for
//! headroom on the time limits).

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ardie_core::episode::{plan_tasks, replay, Input, Phase, Session, SessionConfig};
use ardie_core::model::{build_model, Attribute, IntentTask};
use ardie_core::pomdp::{Belief, ModelDocument, PomdpError, PomdpModel};
use ardie_core::scene::{check_stability, Color, Footprint, Layer, Point, Pose, SceneObject, Shape, Size, StackState};
use ardie_core::sim::{simulate_with_plans, summarize, ConfirmMode, SimulationConfig};
use ardie_core::solver::{solve, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BAYES_ENTRY_TOL: f64 = 1e-12;
const BAYES_SUM_TOL: f64 = 1e-9;
const SOLVER_VALUE_TOL: f64 = 0.05;
/// Regression snapshot of the always-yes first-projection accuracy for
/// `configs/simulation.json`, 1000 episodes, seed 0.
const ALWAYS_YES_FIRST_PROJECTION: f64 = 0.9803333333333333;
const FIRST_PROJECTION_FLOOR: f64 = 0.9;

type Outcome = Result<String, String>;

fn configs(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load<T: serde::de::DeserializeOwned>(name: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(configs(name)).unwrap()).unwrap()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Random model generation

fn random_row(rng: &mut ChaCha8Rng, n: usize, sparsity: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(sparsity) { 0.0 } else { rng.random::<f64>() + 1e-3 })
        .collect();
    if w.iter().all(|x| *x == 0.0) {
        w[rng.random_range(0..n)] = 1.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn random_model(rng: &mut ChaCha8Rng, max_s: usize, max_a: usize, max_z: usize, discount: f64) -> PomdpModel {
    let ns = rng.random_range(1..=max_s);
    let na = rng.random_range(1..=max_a);
    let nz = rng.random_range(1..=max_z);
    let doc = ModelDocument {
        states: (0..ns).map(|i| format!("s{i}")).collect(),
        actions: (0..na).map(|i| format!("a{i}")).collect(),
        observations: (0..nz).map(|i| format!("z{i}")).collect(),
        transition: (0..na)
            .map(|_| (0..ns).map(|_| random_row(rng, ns, 0.4)).collect())
            .collect(),
        observation_fn: (0..na)
            .map(|_| (0..ns).map(|_| random_row(rng, nz, 0.4)).collect())
            .collect(),
        reward: (0..ns)
            .map(|_| (0..na).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect(),
        discount,
    };
    PomdpModel::try_from(doc).expect("generated model is valid")
}

// ---------------------------------------------------------------------------
// Bayes oracle

/// Posterior by enumerating every (s, s') pair of the joint
/// `b(s) T(s'|s,a) O(z|s',a)`.
fn brute_force_posterior(m: &PomdpModel, b: &[f64], a: usize, z: usize) -> Option<Vec<f64>> {
    let n = m.num_states();
    let mut joint = vec![vec![0.0; n]; n];
    for (s, row) in joint.iter_mut().enumerate() {
        for (next, cell) in row.iter_mut().enumerate() {
            *cell = b[s] * m.transition(a, s, next) * m.observation_prob(a, next, z);
        }
    }
    let evidence: f64 = joint.iter().flatten().sum();
    if evidence == 0.0 {
        return None;
    }
    Some((0..n).map(|next| (0..n).map(|s| joint[s][next]).sum::<f64>() / evidence).collect())
}

fn bayes_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut checked, mut impossible) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for model_index in 0..1000 {
        let m = random_model(&mut rng, 6, 5, 6, 0.9);
        for _ in 0..3 {
            let b = Belief::from_weights(random_row(&mut rng, m.num_states(), 0.3)).unwrap();
            for a in 0..m.num_actions() {
                for z in 0..m.num_observations() {
                    let got = m.belief_update(&b, a, z);
                    match (brute_force_posterior(&m, b.probs(), a, z), got) {
                        (None, Err(PomdpError::ImpossibleObservation { .. })) => impossible += 1,
                        (None, other) => {
                            return Err(format!("model {model_index}: expected impossible observation, got {other:?}"))
                        }
                        (Some(_), Err(e)) => return Err(format!("model {model_index}: unexpected error {e}")),
                        (Some(want), Ok(post)) => {
                            for (x, y) in post.probs().iter().zip(&want) {
                                worst = worst.max((x - y).abs());
                            }
                            let sum: f64 = post.probs().iter().sum();
                            ensure((sum - 1.0).abs() <= BAYES_SUM_TOL, || {
                                format!("model {model_index}: posterior sums to {sum}")
                            })?;
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    ensure(worst <= BAYES_ENTRY_TOL, || format!("max entry error {worst:e} > {BAYES_ENTRY_TOL:e}"))?;
    Ok(format!(
        "1000 models, {checked} updates, {impossible} impossible observations; max entry error {worst:.1e} <= {BAYES_ENTRY_TOL:e}"
    ))
}

// ---------------------------------------------------------------------------
// Solver against exhaustive expectimax

const ORACLE_DEPTH: usize = 8;
const ORACLE_SWEEPS: usize = 400;

/// Fixed point of the blind policies, iterated from below.
fn oracle_blind(m: &PomdpModel) -> Vec<Vec<f64>> {
    let (lo, _) = m.reward_bounds();
    let g = m.discount();
    let n = m.num_states();
    (0..m.num_actions())
        .map(|a| {
            let mut v = vec![lo / (1.0 - g); n];
            for _ in 0..ORACLE_SWEEPS {
                v = (0..n)
                    .map(|s| m.reward(s, a) + g * (0..n).map(|t| m.transition(a, s, t) * v[t]).sum::<f64>())
                    .collect();
            }
            v
        })
        .collect()
}

/// Fully observable value function, iterated from above.
fn oracle_mdp(m: &PomdpModel) -> Vec<f64> {
    let (_, hi) = m.reward_bounds();
    let g = m.discount();
    let n = m.num_states();
    let mut v = vec![hi / (1.0 - g); n];
    for _ in 0..ORACLE_SWEEPS {
        v = (0..n)
            .map(|s| {
                (0..m.num_actions())
                    .map(|a| m.reward(s, a) + g * (0..n).map(|t| m.transition(a, s, t) * v[t]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
    }
    v
}

struct Oracle<'a> {
    m: &'a PomdpModel,
    blind: Vec<Vec<f64>>,
    mdp: Vec<f64>,
}

impl Oracle<'_> {
    fn leaf(&self, b: &[f64]) -> (f64, f64) {
        let dot = |v: &[f64]| v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let lo = self.blind.iter().map(|v| dot(v)).fold(f64::NEG_INFINITY, f64::max);
        (lo, dot(&self.mdp))
    }

    /// Lower and upper Q bounds of `a` at `b` with `depth` steps left.
    fn q(&self, b: &[f64], a: usize, depth: usize) -> (f64, f64) {
        let m = self.m;
        let n = m.num_states();
        let r: f64 = (0..n).map(|s| b[s] * m.reward(s, a)).sum();
        let mut predicted = vec![0.0; n];
        for s in 0..n {
            for (t, p) in predicted.iter_mut().enumerate() {
                *p += b[s] * m.transition(a, s, t);
            }
        }
        let (mut lo, mut hi) = (0.0, 0.0);
        for z in 0..m.num_observations() {
            let joint: Vec<f64> = (0..n).map(|t| predicted[t] * m.observation_prob(a, t, z)).collect();
            let pz: f64 = joint.iter().sum();
            if pz <= 0.0 {
                continue;
            }
            let next: Vec<f64> = joint.iter().map(|x| x / pz).collect();
            let (l, h) = self.value(&next, depth - 1);
            lo += pz * l;
            hi += pz * h;
        }
        (r + m.discount() * lo, r + m.discount() * hi)
    }

    fn value(&self, b: &[f64], depth: usize) -> (f64, f64) {
        if depth == 0 {
            return self.leaf(b);
        }
        (0..self.m.num_actions())
            .map(|a| self.q(b, a, depth))
            .fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |(l, h), (ql, qh)| (l.max(ql), h.max(qh)))
    }
}

fn solver_oracle() -> Outcome {
    const MODELS: usize = 24;
    let results = ardie_core::par::map_range(MODELS, |i| -> Result<f64, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + i as u64);
        let m = random_model(&mut rng, 3, 3, 3, 0.9);
        let b0 = Belief::from_weights(random_row(&mut rng, m.num_states(), 0.2)).unwrap();
        let config = SolverConfig {
            epsilon: 1e-3,
            max_seconds: None,
            seed: i as u64,
            ..SolverConfig::default()
        };
        let (policy, stats) = solve(&m, &b0, &config).map_err(|e| format!("model {i}: {e}"))?;
        let oracle = Oracle {
            m: &m,
            blind: oracle_blind(&m),
            mdp: oracle_mdp(&m),
        };
        let qs: Vec<(f64, f64)> = (0..m.num_actions()).map(|a| oracle.q(b0.probs(), a, ORACLE_DEPTH)).collect();
        let v_lo = qs.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
        let v_hi = qs.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
        let chosen = policy.best_action(&b0).unwrap();
        ensure(qs[chosen].1 >= v_lo - config.epsilon, || {
            format!("model {i}: action {chosen} has Q <= {:.6} but the optimum is >= {v_lo:.6}", qs[chosen].1)
        })?;
        ensure(
            stats.root_lower >= v_lo - SOLVER_VALUE_TOL && stats.root_lower <= v_hi + 1e-9,
            || format!("model {i}: root_lower {:.6} outside [{v_lo:.6} - {SOLVER_VALUE_TOL}, {v_hi:.6}]", stats.root_lower),
        )?;
        ensure(stats.root_upper >= v_lo - 1e-9, || {
            format!("model {i}: root_upper {:.6} below the oracle lower value {v_lo:.6}", stats.root_upper)
        })?;
        ensure(stats.converged, || format!("model {i}: solver did not converge"))?;
        Ok(v_hi - v_lo)
    });
    let widths = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let widest = widths.iter().copied().fold(0.0, f64::max);
    Ok(format!(
        "{MODELS} models, depth-{ORACLE_DEPTH} expectimax; best actions admissible, root_lower within {SOLVER_VALUE_TOL} of the oracle (widest oracle bracket {widest:.2e})"
    ))
}

// ---------------------------------------------------------------------------
// Reference-parameter policy

/// Exact optimal values for the two-candidate model along one line of
/// beliefs: every look multiplies the odds by a fixed likelihood ratio, so
/// the reachable beliefs from `p0` form a lattice in log-odds.
struct TwoCandidateOracle {
    p_correct: f64,
    discount: f64,
    r_correct: f64,
    r_incorrect: f64,
    look_costs: Vec<f64>,
}

impl TwoCandidateOracle {
    fn project_value(&self, p: f64) -> f64 {
        let best = p.max(1.0 - p);
        best * self.r_correct + (1.0 - best) * self.r_incorrect
    }

    /// Q of the cheapest look and of projecting at `p0`.
    fn q_at(&self, p0: f64) -> (f64, f64) {
        const K: i32 = 40;
        let project0 = self.project_value(p0);
        let cost = self.look_costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if p0 == 0.0 || p0 == 1.0 {
            return (cost + self.discount * project0, project0);
        }
        let step = (self.p_correct / (1.0 - self.p_correct)).ln();
        let l0 = (p0 / (1.0 - p0)).ln();
        let ps: Vec<f64> = (-K..=K).map(|k| 1.0 / (1.0 + (-(l0 + k as f64 * step)).exp())).collect();
        let proj: Vec<f64> = ps.iter().map(|p| self.project_value(*p)).collect();
        let look = |v: &[f64], i: usize| {
            let p = ps[i];
            let up = self.p_correct * p + (1.0 - self.p_correct) * (1.0 - p);
            cost + self.discount * (up * v[i + 1] + (1.0 - up) * v[i - 1])
        };
        let mut v = proj.clone();
        loop {
            let mut next = proj.clone();
            for i in 1..ps.len() - 1 {
                next[i] = proj[i].max(look(&v, i));
            }
            let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if diff < 1e-13 {
                break;
            }
        }
        (look(&v, K as usize), project0)
    }
}

fn reference_policy() -> Outcome {
    let session: SessionConfig = load("session.json");
    let obs = &session.obs;
    let rew = &session.rewards;
    ensure(obs.p_correct == 0.8, || format!("p_correct is {}, expected 0.8", obs.p_correct))?;
    ensure(session.discount == 0.99, || format!("discount is {}, expected 0.99", session.discount))?;

    let solver = SolverConfig {
        epsilon: 1e-3,
        ..SolverConfig::default()
    };

    let three = IntentTask {
        candidates: vec!["green".into(), "red".into(), "blue".into()],
        ..session.tasks[0].clone()
    };
    let model = build_model(&session.scene, &three, obs, rew, session.discount).map_err(|e| e.to_string())?;
    let uniform = model.prior(&[true, true, true]).unwrap();
    let (policy, _) = solve(&model.pomdp, &uniform, &solver).map_err(|e| e.to_string())?;
    let first = policy.best_action(&uniform).unwrap();
    ensure(model.projected_candidate(first).is_none(), || {
        format!("uniform belief chose {}", model.pomdp.actions()[first])
    })?;

    let pair = IntentTask {
        candidates: vec!["green".into(), "red".into()],
        ..session.tasks[0].clone()
    };
    let model = build_model(&session.scene, &pair, obs, rew, session.discount).map_err(|e| e.to_string())?;
    let mut look_costs = vec![rew.c_gaze];
    look_costs.extend(model.ask_actions.iter().map(|_| rew.c_ask));
    let oracle = TwoCandidateOracle {
        p_correct: obs.p_correct,
        discount: session.discount,
        r_correct: rew.r_correct,
        r_incorrect: rew.r_incorrect,
        look_costs,
    };
    let rows = ardie_core::par::map_range(101, |i| -> Result<(bool, f64, f64), String> {
        let p = i as f64 / 100.0;
        let b = Belief::new(vec![p, 1.0 - p, 0.0]).unwrap();
        let (policy, _) = solve(&model.pomdp, &b, &solver).map_err(|e| format!("p = {p}: {e}"))?;
        let action = policy.best_action(&b).unwrap();
        let (q_look, q_project) = oracle.q_at(p);
        let want_project = q_project >= q_look;
        let got = model.projected_candidate(action);
        ensure(got.is_some() == want_project, || {
            format!(
                "p(green) = {p}: solver chose {}, oracle projects = {want_project} (Q_project {q_project:.6}, Q_look {q_look:.6})",
                model.pomdp.actions()[action]
            )
        })?;
        if let Some(c) = got {
            let want = if p >= 0.5 { 0 } else { 1 };
            ensure(c == want, || format!("p(green) = {p}: projected candidate {c}"))?;
        }
        Ok((want_project, q_project - q_look, p))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let closest = rows.iter().map(|r| r.1.abs()).fold(f64::INFINITY, f64::min);
    ensure(closest > solver.epsilon, || {
        format!("a grid point lies within the solver tolerance of a tie ({closest:e})")
    })?;
    let projecting = rows.iter().filter(|r| r.0).count();
    let threshold = rows.iter().filter(|r| r.0 && r.2 >= 0.5).map(|r| r.2).fold(1.0, f64::min);
    Ok(format!(
        "uniform 3-way belief looks first; 101/101 grid beliefs match the lattice oracle ({projecting} project, threshold p(green) = {threshold}, closest tie gap {closest:.3})"
    ))
}

// ---------------------------------------------------------------------------
// Scripted demonstration

fn demo_log() -> Result<(Session, String), String> {
    let config: SessionConfig = load("session.json");
    let intents = ["green", "red", "blue"];
    let (plans, _) = plan_tasks(&config).map_err(|e| e.to_string())?;
    let mut session = Session::start(config.clone(), plans).map_err(|e| e.to_string())?;
    let mut turns = 0;
    while !session.is_done() {
        turns += 1;
        ensure(turns < 500, || "session did not finish".into())?;
        let intent = config.scene.object(intents[session.task_index()]).unwrap().clone();
        let step = match session.phase().clone() {
            Phase::Ready => session.step_agent().map(drop),
            Phase::AwaitingGaze => session.ingest_observation(Input::Gaze(intent.position)).map(drop),
            Phase::AwaitingAnswer { attribute } => {
                let word = match attribute {
                    Attribute::Color => intent.color.name(),
                    Attribute::Size => intent.size.name(),
                };
                session.ingest_observation(Input::Utterance(word.into())).map(drop)
            }
            Phase::AwaitingConfirmation { candidate } => session.handle_confirmation(candidate == intent.id).map(drop),
            other => return Err(format!("unexpected phase {other:?}")),
        };
        step.map_err(|e| e.to_string())?;
    }
    let log = session.history_jsonl();
    Ok((session, log))
}

fn demonstration() -> Outcome {
    let (session, log) = demo_log()?;
    let ids = session.stack().ids();
    ensure(ids == ["green", "red", "blue"], || format!("stack is {ids:?}"))?;
    let report = check_stability(session.stack());
    ensure(report.margins.iter().all(|m| *m > 0.0), || format!("margins {:?}", report.margins))?;
    let rejections: u32 = session.records().iter().map(|r| r.rejections).sum();
    let wrong = session
        .records()
        .iter()
        .zip(["green", "red", "blue"])
        .filter(|(r, want)| r.committed.as_deref() != Some(*want))
        .count();
    ensure(wrong == 0 && rejections == 0, || format!("{wrong} wrong commits, {rejections} rejections"))?;
    let (_, again) = demo_log()?;
    ensure(log == again, || "two scripted runs produced different logs".into())?;
    let events = ardie_core::episode::read_log(&log).map_err(|e| e.to_string())?;
    let (verdict, _) = replay(&events);
    ensure(verdict.consistent && verdict.complete, || format!("replay: {:?}", verdict.detail))?;
    Ok(format!(
        "stack {ids:?}, margins {:?}, 0 wrong commits, log replays ({} events)",
        report.margins,
        events.len()
    ))
}

// ---------------------------------------------------------------------------
// Noisy batch

fn noisy_batch() -> Outcome {
    let config: SimulationConfig = load("simulation.json");
    ensure(config.human.confirm == ConfirmMode::Truthful, || "shipped config is not truthful".into())?;
    let (plans, _) = plan_tasks(&config.session).map_err(|e| e.to_string())?;
    let results = simulate_with_plans(&config, &plans, 1000, 0).map_err(|e| e.to_string())?;
    let wrong = results.iter().filter(|r| r.wrong_commits > 0).count();
    ensure(wrong == 0, || format!("{wrong} truthful episodes committed a wrong object"))?;
    let truthful = summarize(config.session.digest(), 0, &results);
    ensure(truthful.success_rate == 1.0, || format!("truthful success rate {}", truthful.success_rate))?;

    let mut yes = config.clone();
    yes.human.confirm = ConfirmMode::AlwaysYes;
    let results = simulate_with_plans(&yes, &plans, 1000, 0).map_err(|e| e.to_string())?;
    let always = summarize(yes.session.digest(), 0, &results);
    let acc = always.first_projection_accuracy;
    ensure(acc >= FIRST_PROJECTION_FLOOR, || format!("first-projection accuracy {acc} < {FIRST_PROJECTION_FLOOR}"))?;
    ensure((acc - ALWAYS_YES_FIRST_PROJECTION).abs() <= 1e-12, || {
        format!("first-projection accuracy {acc} drifted from the snapshot {ALWAYS_YES_FIRST_PROJECTION}")
    })?;
    Ok(format!(
        "truthful: 0/1000 wrong commits, success 1.0 (mean {:.2} looks); always-yes: first-projection accuracy {acc} (>= {FIRST_PROJECTION_FLOOR}, snapshot matched)",
        truthful.mean_gaze_requests + truthful.mean_questions
    ))
}

// ---------------------------------------------------------------------------
// Stability

fn block(id: &str, side: f64, height: f64) -> SceneObject {
    SceneObject {
        id: id.into(),
        color: Color::Red,
        size: Size::Small,
        shape: Shape::Block,
        footprint: Footprint { width: side, depth: side },
        height,
        position: Point::new(0.0, 0.0),
    }
}

fn tower(target: Point, offsets: &[(f64, f64)], side: f64) -> StackState {
    let mut stack = StackState::empty(target);
    for (k, (dx, dy)) in offsets.iter().enumerate() {
        let z = stack.height();
        stack.layers.push(Layer {
            object: block(&format!("b{k}"), side, 32.0),
            pose: Pose {
                x: target.x + dx,
                y: target.y + dy,
                z,
                yaw: 0.0,
            },
            ghost: false,
        });
    }
    stack
}

fn stability() -> Outcome {
    let target = Point::new(512.0, 384.0);
    let side = 40.0;
    let half = side / 2.0;
    let mut cases = 0;
    for depth in 1..=10 {
        let stack = tower(target, &vec![(0.0, 0.0); depth], side);
        let report = check_stability(&stack);
        ensure(report.stable && report.margins.iter().all(|m| *m == half), || {
            format!("centered depth {depth}: {:?}", report.margins)
        })?;
        cases += 1;
    }
    for depth in 2..=10 {
        for overhang in [0.25, 1.0, 4.5, 10.0] {
            for dir in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                let d = half + overhang;
                let mut offsets = vec![(0.0, 0.0); depth];
                offsets[depth - 1] = (dir.0 * d, dir.1 * d);
                let stack = tower(target, &offsets, side);
                let report = check_stability(&stack);
                let top = report.margins[depth - 1];
                ensure(!report.stable && top == -overhang, || {
                    format!("depth {depth}, overhang {overhang}: stable {}, top margin {top}", report.stable)
                })?;
                for (dx, dy) in [(123.5, -64.25), (-300.0, 17.75), (0.5, 0.5)] {
                    let moved = check_stability(&stack.translated(dx, dy));
                    ensure(moved == report, || format!("translation by ({dx}, {dy}) changed the report: {report:?} vs {moved:?}"))?;
                }
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} stacks: centered depths 1..10 stable, every overhang gives margin = -overhang, reports bitwise translation invariant"
    ))
}

// ---------------------------------------------------------------------------
// Determinism through the binary

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("ardie-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let result = (|| {
        let mut outputs = Vec::new();
        for run in ["a", "b"] {
            let out = Command::new(env!("CARGO_BIN_EXE_ardie"))
                .args(["simulate", "--config"])
                .arg(configs("simulation.json"))
                .args(["--episodes", "200", "--seed", "11", "--log-dir"])
                .arg(dir.join(format!("logs-{run}")))
                .output()
                .map_err(|e| e.to_string())?;
            ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
            outputs.push(out.stdout);
        }
        ensure(outputs[0] == outputs[1], || "two simulate runs differ".into())?;
        let mut replayed = 0;
        for i in 0..200 {
            let a = std::fs::read(dir.join(format!("logs-a/episode-{i}.jsonl"))).map_err(|e| e.to_string())?;
            let b = std::fs::read(dir.join(format!("logs-b/episode-{i}.jsonl"))).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("episode {i} logs differ"))?;
            let out = Command::new(env!("CARGO_BIN_EXE_ardie"))
                .args(["replay", "--log"])
                .arg(dir.join(format!("logs-a/episode-{i}.jsonl")))
                .output()
                .map_err(|e| e.to_string())?;
            let text = String::from_utf8_lossy(&out.stdout);
            let verdict = text.lines().last().unwrap_or("");
            ensure(out.status.success() && verdict.starts_with("consistent ("), || {
                format!("episode {i}: {verdict}")
            })?;
            replayed += 1;
        }
        Ok(format!(
            "two simulate runs byte-identical ({} bytes), {replayed}/200 logs identical and replay consistent",
            outputs[0].len()
        ))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 7] = [
        ("bayes-oracle", bayes_oracle, 10),
        ("solver-vs-expectimax", solver_oracle, 300),
        ("reference-parameter-policy", reference_policy, 120),
        ("three-block-demonstration", demonstration, 5),
        ("noisy-batch", noisy_batch, 60),
        ("stability", stability, 10),
        ("determinism", determinism, 120),
    ];
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(limit) => {
                Err(format!("{detail}; took {:.1}s, limit {limit}s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({:.2}s < {limit}s)", elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} ({:.2}s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
