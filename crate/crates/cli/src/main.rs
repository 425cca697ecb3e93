//! `crossing`: run simulations, the traffic manager, agents and reports.
//!
//! Exit codes: 0 success, 1 validation, 2 safety violation, 3 runtime fault.
//! Log verbosity follows `CROSSING_LOG` (env_logger syntax, default `warn`).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use crossing_core::io::{self as artifacts, IoError, TrajectoryRow};
use crossing_core::live::{self, LiveAgentOptions, LiveError, ServeOptions, StateSource};
use crossing_core::metrics::{DEFAULT_SETTLING_HOLD_S, DEFAULT_SETTLING_THRESHOLD_M};
use crossing_core::runner::{RunError, RunMode, RunOptions};
use crossing_core::scenario::{Scenario, ScenarioError};
use crossing_core::{LatencyModel, VehicleState};

#[derive(Parser)]
#[command(name = "crossing", version, about = "Cooperative intersection crossing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario under the virtual clock and write its artifacts.
    Simulate {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the network seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Constant-velocity counterfactual (no control).
        #[arg(long, conflicts_with = "ideal")]
        uncontrolled: bool,
        /// Synchronous zero-delay state exchange instead of the network.
        #[arg(long)]
        ideal: bool,
        /// One-way delay mean; replaces the scenario network model.
        #[arg(long)]
        mean_ms: Option<f64>,
        /// One-way delay spread; with --mean-ms selects a normal model.
        #[arg(long, requires = "mean_ms")]
        std_ms: Option<f64>,
    },
    /// Run the traffic manager on a TCP socket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7300")]
        bind: String,
        #[arg(long, default_value_t = 20.0)]
        rate_hz: f64,
        #[arg(long, default_value_t = 500)]
        stale_ms: u64,
        /// Exit once all clients have left.
        #[arg(long)]
        exit_when_idle: bool,
        #[arg(long)]
        max_runtime_s: Option<f64>,
        /// Directory for the server summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one vehicle agent against a manager.
    Agent {
        scenario: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "127.0.0.1:7300")]
        manager: String,
        #[arg(long, value_enum, default_value_t = AgentMode::Sim)]
        mode: AgentMode,
        /// Run length in sim mode; defaults to the scenario duration.
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics over an output directory.
    Report {
        dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SETTLING_THRESHOLD_M)]
        threshold_m: f64,
        #[arg(long, default_value_t = DEFAULT_SETTLING_HOLD_S)]
        hold_s: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentMode {
    /// Integrate local dynamics.
    Sim,
    /// Read own state rows (trajectory CSV schema) from standard input.
    Live,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(m: impl ToString) -> Self {
        Self { code: 1, message: m.to_string() }
    }
    fn safety(m: impl ToString) -> Self {
        Self { code: 2, message: m.to_string() }
    }
    fn runtime(m: impl ToString) -> Self {
        Self { code: 3, message: m.to_string() }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::validation(e)
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::runtime(e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Scenario(e) => Failure::validation(e),
            other => Failure::runtime(other),
        }
    }
}

impl From<LiveError> for Failure {
    fn from(e: LiveError) -> Self {
        Failure::runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROSSING_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { scenario, out, seed, uncontrolled, ideal, mean_ms, std_ms } => {
            let mode = if uncontrolled {
                RunMode::Uncontrolled
            } else if ideal {
                RunMode::Ideal
            } else {
                RunMode::Distributed
            };
            let network = mean_ms.map(|m| match std_ms {
                Some(s) => LatencyModel::normal(m, s, 0),
                None => LatencyModel::constant(m),
            });
            cmd_simulate(&scenario, &out, mode, network, seed)
        }
        Command::Serve { bind, rate_hz, stale_ms, exit_when_idle, max_runtime_s, out } => {
            cmd_serve(bind, rate_hz, stale_ms, exit_when_idle, max_runtime_s, out.as_deref())
        }
        Command::Agent { scenario, id, name, manager, mode, duration_s, out } => {
            cmd_agent(&scenario, &id, name, manager, mode, duration_s, out.as_deref())
        }
        Command::Report { dir, threshold_m, hold_s } => cmd_report(&dir, threshold_m, hold_s),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_simulate(
    path: &Path,
    out: &Path,
    mode: RunMode,
    network: Option<LatencyModel>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let scenario = Scenario::load(path)?;
    let mut net = network;
    if let (Some(n), None) = (net.as_mut(), seed) {
        n.seed = scenario.network.seed;
    }
    let opts = RunOptions { mode, network: net, seed, ..Default::default() };
    let run = crossing_core::simulate(&scenario, &opts)?;
    artifacts::write_run(out, &run, &scenario.specs(), &scenario.junction)?;
    let r = &run.report;
    println!("mode: {}", r.mode);
    match r.settling_time_s {
        Some(t) => println!("settling_time_s: {t:.2} (|e| <= {} m held {} s)", r.settling_threshold_m, r.settling_hold_s),
        None => println!("settling_time_s: none"),
    }
    println!("mutual_exclusion_violations: {}", r.safety.exclusion_violations);
    for c in &r.safety.collision_classifications {
        println!("collision {} -> {}: {}", c.leader, c.follower, c.class);
    }
    if let Some(s) = r.delay_stats.get(&crossing_core::DelayKind::StateRtt) {
        println!("state_rtt_ms: mean {:.1} std {:.1} p95 {:.1}", s.mean, s.std, s.p95);
    }
    println!("artifacts: {}", out.display());
    if !r.mutual_exclusion_ok {
        return Err(Failure::safety(format!(
            "{} mutual-exclusion violations (first at t = {:.2} s)",
            r.safety.exclusion_violations,
            r.safety.first_violation_s.unwrap_or(f64::NAN)
        )));
    }
    if !r.settled() {
        return Err(Failure::safety("formation did not settle"));
    }
    Ok(())
}

fn cmd_serve(
    bind: String,
    rate_hz: f64,
    stale_ms: u64,
    exit_when_idle: bool,
    max_runtime_s: Option<f64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(Failure::validation("--rate-hz must be positive"));
    }
    let handle = live::start_server(ServeOptions {
        bind,
        broadcast_rate_hz: rate_hz,
        stale_timeout_ms: stale_ms,
        exit_when_idle,
        max_runtime: max_runtime_s.map(Duration::from_secs_f64),
    })
    .map_err(|e| match e {
        LiveError::Manager(m) => Failure::validation(m),
        other => Failure::runtime(other),
    })?;
    println!("listening on {}", handle.addr);
    let _ = std::io::stdout().flush();
    let summary = handle.join()?;
    let intervals = &summary.tick_intervals_ms;
    if !intervals.is_empty() {
        let mean = intervals.iter().sum::<f64>() / intervals.len() as f64;
        println!("broadcasts: {} mean_interval_ms: {mean:.2}", summary.broadcasts);
    }
    println!("protocol_violations: {}", summary.protocol_violations);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(Failure::runtime)?;
        let text = serde_json::to_string_pretty(&summary).map_err(Failure::runtime)?;
        std::fs::write(dir.join("serve_summary.json"), text).map_err(Failure::runtime)?;
    }
    Ok(())
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(Failure::runtime)?;
    for r in rows {
        w.serialize(r).map_err(Failure::runtime)?;
    }
    w.flush().map_err(Failure::runtime)
}

fn cmd_agent(
    path: &Path,
    id: &str,
    name: Option<String>,
    manager: String,
    mode: AgentMode,
    duration_s: Option<f64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let scenario = Scenario::load(path)?;
    let mut cfg = scenario.agent_config(id)?;
    if let Some(n) = name {
        cfg.name = n;
    }
    let v = scenario.vehicles.iter().find(|v| v.id == id).expect("agent_config checked the id");
    let opts = LiveAgentOptions {
        manager,
        duration_s: duration_s.unwrap_or(scenario.sim.duration_s),
        input_clamp_mps2: scenario.sim.input_clamp_mps2,
        ack_timeout: Duration::from_secs(5),
    };
    let output = match mode {
        AgentMode::Sim => {
            let source = StateSource::Simulated { initial: VehicleState::new(v.p0, v.v0) };
            live::run_live_agent(cfg, source, &opts, |_| {})?
        }
        AgentMode::Live => {
            let (tx, rx) = mpsc::channel();
            let own = id.to_string();
            std::thread::spawn(move || {
                let mut r = csv::Reader::from_reader(std::io::stdin());
                for row in r.deserialize::<TrajectoryRow>() {
                    match row {
                        Ok(row) if row.vehicle_id == own => {
                            if tx.send(VehicleState::new(row.p_m, row.v_mps)).is_err() {
                                break;
                            }
                        }
                        Ok(_) => {}
                        Err(e) => log::warn!("event=bad_state_row error={e}"),
                    }
                }
            });
            let mut stdout = csv::Writer::from_writer(std::io::stdout());
            let out = live::run_live_agent(cfg, StateSource::External(rx), &opts, |row| {
                let _ = stdout.serialize(row);
                let _ = stdout.flush();
            })?;
            out
        }
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(Failure::runtime)?;
        write_csv(&dir.join(format!("trajectory_{id}.csv")), &output.rows)?;
        write_csv(&dir.join(format!("delays_{id}.csv")), &output.delays)?;
        let seqs: Vec<artifacts::SequenceRow> = output
            .accepted
            .iter()
            .map(|&(receive_ms, global_sequence)| artifacts::SequenceRow {
                vehicle_id: id.to_string(),
                receive_ms,
                global_sequence,
            })
            .collect();
        write_csv(&dir.join(format!("sequences_{id}.csv")), &seqs)?;
    }
    if let AgentMode::Sim = mode {
        let last = output.rows.last();
        println!(
            "agent {id}: ticks {} accepted_updates {} fallback_ticks {} final_e_pred_m {}",
            output.rows.len(),
            output.accepted.len(),
            output.fallback_ticks,
            last.and_then(|r| r.e_pred_m).map_or("n/a".to_string(), |e| format!("{e:.3}"))
        );
    }
    Ok(())
}

fn cmd_report(dir: &Path, threshold_m: f64, hold_s: f64) -> Result<(), Failure> {
    if !dir.join(artifacts::TRAJECTORY_FILE).exists() {
        return Err(Failure::validation(format!("no {} in {}", artifacts::TRAJECTORY_FILE, dir.display())));
    }
    let summary = artifacts::summarize_dir(dir, threshold_m, hold_s)?;
    let text = serde_json::to_string_pretty(&summary).map_err(Failure::runtime)?;
    println!("{text}");
    if summary.ca_conflict_samples > 0 {
        return Err(Failure::safety(format!("{} samples with shared CA occupancy", summary.ca_conflict_samples)));
    }
    Ok(())
}
