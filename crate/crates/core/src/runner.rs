//! One-call orchestration of a scenario run into a trajectory log, delay
//! samples and a [`RunReport`].

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::control::{estimate_c, settling_time_bound};
use crate::distsim::{run_distributed, DistSimError};
use crate::metrics::{
    detect_settling, evaluate_safety, sequence_progression, stats, DelaySample, LyapunovSummary, MetricsError,
    RunReport, DEFAULT_SETTLING_HOLD_S, DEFAULT_SETTLING_THRESHOLD_M,
};
use crate::net::LatencyModel;
use crate::scenario::{Scenario, ScenarioError};
use crate::sim::{run_closed_loop, run_uncontrolled, Formation, SimError, TrajectoryLog};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Dist(#[from] DistSimError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Manager and agents over the simulated network.
    Distributed,
    /// Synchronous zero-delay state exchange.
    Ideal,
    /// `u ≡ 0` counterfactual.
    Uncontrolled,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Distributed => "distributed",
            RunMode::Ideal => "ideal",
            RunMode::Uncontrolled => "uncontrolled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: RunMode,
    /// Replaces the scenario's network model.
    pub network: Option<LatencyModel>,
    /// Replaces the network seed.
    pub seed: Option<u64>,
    pub settling_threshold_m: f64,
    pub settling_hold_s: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: RunMode::Distributed,
            network: None,
            seed: None,
            settling_threshold_m: DEFAULT_SETTLING_THRESHOLD_M,
            settling_hold_s: DEFAULT_SETTLING_HOLD_S,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub log: TrajectoryLog,
    pub delays: Vec<DelaySample>,
    pub accepted: BTreeMap<String, Vec<(u64, u64)>>,
    pub report: RunReport,
}

pub fn simulate(scenario: &Scenario, opts: &RunOptions) -> Result<RunArtifacts, RunError> {
    scenario.validate()?;
    let started = Instant::now();
    let mut network = opts.network.unwrap_or(scenario.network);
    if let Some(seed) = opts.seed {
        network.seed = seed;
    }
    let order = scenario.initial_order();
    let graph = scenario
        .graph()
        .map_err(|e| ScenarioError::Field { field: "topology".into(), message: e.to_string() })?;
    let formation = Formation { order: &order, graph: &graph, params: scenario.params()?, spacing: scenario.spacing()? };
    let members = scenario.members();

    let mut delays = Vec::new();
    let mut accepted = BTreeMap::new();
    let mut broadcast_interval_ms = None;
    let mut fallback_ticks = 0;
    let mut protocol_violations = 0;
    let log = match opts.mode {
        RunMode::Distributed => {
            let out = run_distributed(scenario, &network)?;
            let gaps: Vec<f64> = out.broadcast_times_ms.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
            broadcast_interval_ms = stats(&gaps).ok();
            delays = out.delays;
            accepted = out.accepted;
            fallback_ticks = out.fallback_ticks;
            protocol_violations = out.protocol_violations;
            out.log
        }
        RunMode::Ideal => run_closed_loop(&members, &formation, &scenario.sim)?,
        RunMode::Uncontrolled => run_uncontrolled(&members, Some(&formation), &scenario.sim)?,
    };

    let safety = evaluate_safety(&log, &scenario.specs(), &scenario.junction)?;
    let settling_time_s = match opts.mode {
        RunMode::Uncontrolled => None,
        _ => detect_settling(&log.times, &log.edge_errors, opts.settling_threshold_m, opts.settling_hold_s)?,
    };
    let max_final_error_m = log.max_abs_edge_error().last().copied();
    let lyapunov = log.lyapunov.as_ref().and_then(|v| {
        // Only the convergent portion: after settling the discrete-time chatter floor makes V jitter.
        let end = settling_time_s.unwrap_or(f64::INFINITY);
        let series: Vec<(f64, f64)> =
            log.times.iter().copied().zip(v.iter().copied()).take_while(|&(t, v)| t <= end && v > 0.0).collect();
        let c_hat = estimate_c(&series, &formation.params).ok()?;
        let bound = settling_time_bound(v[0], c_hat, &formation.params).ok()?;
        Some(LyapunovSummary { v0: v[0], c_hat, settling_bound_s: bound })
    });
    let sequence = accepted.iter().map(|(id, seqs)| (id.clone(), sequence_progression(seqs))).collect();
    let report = RunReport {
        scenario: scenario.name.clone(),
        mode: opts.mode.as_str().to_string(),
        seed: network.seed,
        duration_s: scenario.sim.duration_s,
        settling_threshold_m: opts.settling_threshold_m,
        settling_hold_s: opts.settling_hold_s,
        settling_time_s,
        max_final_error_m,
        mutual_exclusion_ok: safety.mutual_exclusion_ok(),
        safety,
        lyapunov,
        delay_stats: RunReport::delay_table(&delays),
        sequence,
        broadcast_interval_ms,
        fallback_ticks,
        protocol_violations,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok(RunArtifacts { log, delays, accepted, report })
}
