//! Subcommands behind the `ardie` binary. Each returns the process exit
//! code: 0 on success, 1 on bad input, 2 when a solve ran out of budget.

use std::fmt::Display;
use std::io::Write;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ardie_core::episode::{plan_tasks, read_log, replay, SessionConfig};
use ardie_core::model::{IntentTask, ObservationConfig, RewardConfig};
use ardie_core::scene::Scene;
use ardie_core::sim::{simulate_observed, summarize, SimulationConfig};
use ardie_core::solver::SolverConfig;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;

/// Gaze-and-dialogue intent disambiguation for tabletop stacking.
#[derive(Debug, Parser)]
#[command(name = "ardie", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the model for each task and write its solved policy.
    Solve(SolveArgs),
    /// Run simulated-human episodes and write aggregate statistics.
    Simulate(SimulateArgs),
    /// Start the HTTP/WebSocket session service.
    Serve(ServeArgs),
    /// Re-run an event log and check it against the recorded beliefs.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Scene document (JSON).
    #[arg(long)]
    pub scene: PathBuf,
    /// Task document: one task or an array of tasks (JSON).
    #[arg(long)]
    pub tasks: PathBuf,
    /// Observation config (JSON); defaults to p_correct 0.8, uniform gaze error.
    #[arg(long)]
    pub obs: Option<PathBuf>,
    /// Reward config (JSON); defaults to +100/-100/-1/-2.
    #[arg(long)]
    pub rewards: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    pub discount: f64,
    /// Target gap between the value bounds at the initial belief.
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Wall-clock budget per task; exit code 2 if it runs out first.
    #[arg(long, default_value_t = 60.0)]
    pub max_seconds: f64,
    /// Policy file. With several tasks, task K is written to NAME.K.EXT.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config: a session config plus a `human` section (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Statistics document; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write each episode's event log to DIR/episode-N.jsonl.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Where session logs and cached policies are kept.
    #[arg(long, env = "ARDIE_DATA_DIR", default_value = "ardie-data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Event log (JSONL).
    #[arg(long)]
    pub log: PathBuf,
}

fn fail(message: impl Display) -> i32 {
    eprintln!("error: {message}");
    EXIT_INPUT
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TaskDocument {
    One(IntentTask),
    Many(Vec<IntentTask>),
}

/// Where the policy of task `k` out of `n` goes.
pub fn policy_path(out: &Path, k: usize, n: usize) -> PathBuf {
    if n == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("policy");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{k}.{ext}"),
        None => format!("{stem}.{k}"),
    };
    out.with_file_name(name)
}

#[derive(Serialize)]
struct SolveLine<'a> {
    task: usize,
    policy: String,
    #[serde(flatten)]
    stats: &'a ardie_core::solver::SolveStats,
}

pub fn cmd_solve(args: &SolveArgs) -> i32 {
    let inputs = (|| -> Result<SessionConfig, String> {
        let scene: Scene = read_json(&args.scene)?;
        let tasks = match read_json(&args.tasks)? {
            TaskDocument::One(t) => vec![t],
            TaskDocument::Many(ts) => ts,
        };
        let mut config = SessionConfig::new(scene, tasks);
        if let Some(p) = &args.obs {
            config.obs = read_json::<ObservationConfig>(p)?;
        }
        if let Some(p) = &args.rewards {
            config.rewards = read_json::<RewardConfig>(p)?;
        }
        config.discount = args.discount;
        config.solver = SolverConfig {
            epsilon: args.epsilon,
            seed: args.seed,
            max_seconds: Some(args.max_seconds),
            ..SolverConfig::default()
        };
        Ok(config)
    })();
    let config = match inputs {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Err(e) = config.solver.validate() {
        return fail(e);
    }
    let models = match config.build_models() {
        Ok(m) => m,
        Err(e) => {
            if let ardie_core::episode::EpisodeError::Model(ardie_core::model::ModelError::Pomdp(
                ardie_core::pomdp::PomdpError::InvalidModel(violations),
            )) = &e
            {
                for v in violations {
                    eprintln!("violation: {}", serde_json::to_string(v).unwrap());
                }
            }
            return fail(e);
        }
    };
    let mut code = EXIT_OK;
    let n = models.len();
    for (k, model) in models.iter().enumerate() {
        for w in &model.warnings {
            eprintln!("warning: task {k}: {w}");
        }
        let (policy, stats) = match ardie_core::episode::solve_task(model, &config.solver) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let path = policy_path(&args.out, k, n);
        let doc = serde_json::to_string_pretty(&policy.to_document(&model.pomdp)).unwrap() + "\n";
        if let Err(e) = std::fs::write(&path, doc) {
            return fail(format!("{}: {e}", path.display()));
        }
        let line = SolveLine {
            task: k,
            policy: path.display().to_string(),
            stats: &stats,
        };
        let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(&line).unwrap());
        if !stats.converged {
            code = EXIT_BUDGET;
        }
    }
    code
}

pub fn cmd_simulate(args: &SimulateArgs) -> i32 {
    if args.episodes == 0 {
        return fail("--episodes must be at least 1");
    }
    let config: SimulationConfig = match read_json(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Err(e) = config.human.validate(config.session.tasks.len()) {
        return fail(e);
    }
    let plans = match plan_tasks(&config.session) {
        Ok((plans, _)) => plans,
        Err(e) => return fail(e),
    };
    if let Some(dir) = &args.log_dir {
        if let Err(e) = std::fs::create_dir_all(dir) {
            return fail(format!("{}: {e}", dir.display()));
        }
    }
    let write_errors = Mutex::new(Vec::new());
    let results = simulate_observed(&config, &plans, args.episodes, args.seed, |i, session| {
        if let Some(dir) = &args.log_dir {
            let path = dir.join(format!("episode-{i}.jsonl"));
            if let Err(e) = std::fs::write(&path, session.history_jsonl()) {
                write_errors.lock().unwrap().push(format!("{}: {e}", path.display()));
            }
        }
    });
    let results = match results {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    if let Some(e) = write_errors.into_inner().unwrap().into_iter().next() {
        return fail(e);
    }
    let stats = summarize(config.session.digest(), args.seed, &results);
    let doc = serde_json::to_string_pretty(&stats).unwrap() + "\n";
    match &args.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, doc) {
                return fail(format!("{}: {e}", path.display()));
            }
        }
        None => {
            let _ = std::io::stdout().write_all(doc.as_bytes());
        }
    }
    EXIT_OK
}

pub fn cmd_serve(args: &ServeArgs) -> i32 {
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, args.port));
    eprintln!("serving on http://{addr} with data in {}", args.data_dir.display());
    match runtime.block_on(ardie_service::serve(addr, args.data_dir.clone())) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(e),
    }
}

pub fn cmd_replay(args: &ReplayArgs) -> i32 {
    let text = match std::fs::read_to_string(&args.log) {
        Ok(t) => t,
        Err(e) => return fail(format!("{}: {e}", args.log.display())),
    };
    let events = match read_log(&text) {
        Ok(ev) => ev,
        Err(e) => return fail(e),
    };
    let (report, _) = replay(&events);
    if let Some(snapshot) = &report.snapshot {
        println!("{}", serde_json::to_string_pretty(snapshot).unwrap());
    }
    if report.consistent {
        if report.complete {
            println!("consistent ({} events)", report.events);
        } else {
            println!("consistent prefix ({} events, session not finished)", report.events);
        }
        EXIT_OK
    } else {
        let step = report.mismatch_step.map_or("start".to_string(), |s| s.to_string());
        println!("inconsistent at step {step}: {}", report.detail.unwrap_or_default());
        EXIT_INPUT
    }
}

pub fn run(cli: &Cli) -> i32 {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Replay(a) => cmd_replay(a),
    }
}
