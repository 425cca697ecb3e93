//! Delay statistics, sequence analysis, settling detection and run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::junction::{
    assign_crossing_order, collision_region_trace, mutual_exclusion_violations, CollisionClass, JunctionError,
    JunctionGeometry, VehicleSpec,
};
use crate::control::VehicleState;
use crate::sim::TrajectoryLog;

pub const DEFAULT_SETTLING_THRESHOLD_M: f64 = 0.1;
pub const DEFAULT_SETTLING_HOLD_S: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("timestamps not sorted at index {0}")]
    Unsorted(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Junction(#[from] JunctionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayKind {
    TransportRtt,
    WsAck,
    StateRtt,
    Ttp,
}

impl DelayKind {
    pub const ALL: [DelayKind; 4] = [DelayKind::TransportRtt, DelayKind::WsAck, DelayKind::StateRtt, DelayKind::Ttp];

    pub fn as_str(&self) -> &'static str {
        match self {
            DelayKind::TransportRtt => "transport_rtt",
            DelayKind::WsAck => "ws_ack",
            DelayKind::StateRtt => "state_rtt",
            DelayKind::Ttp => "ttp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySample {
    pub kind: DelayKind,
    pub vehicle_id: String,
    pub timestamp_ms: u64,
    pub value_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (N - 1 divisor).
    pub std: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

/// Linear interpolation between closest ranks on sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Two-pass mean and N - 1 standard deviation with linear percentiles.
pub fn stats(samples: &[f64]) -> Result<DelayStats, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::InsufficientSamples { needed: 2, got: samples.len() });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::Invalid("non-finite sample".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(DelayStats {
        count: samples.len(),
        mean,
        std: var.sqrt(),
        p50: percentile(&sorted, 0.5),
        p95: percentile(&sorted, 0.95),
        max: sorted[sorted.len() - 1],
    })
}

/// One-pass (Welford) mean and N - 1 standard deviation.
pub fn welford(samples: &[f64]) -> Result<(f64, f64), MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::InsufficientSamples { needed: 2, got: samples.len() });
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, &x) in samples.iter().enumerate() {
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    Ok((mean, (m2 / (samples.len() - 1) as f64).sqrt()))
}

/// Intervals between consecutive receive timestamps.
pub fn ttp_series(receive_ms: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if let Some(k) = receive_ms.windows(2).position(|w| w[1] < w[0]) {
        return Err(MetricsError::Unsorted(k + 1));
    }
    Ok(receive_ms.windows(2).map(|w| w[1] - w[0]).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceGap {
    pub after: u64,
    pub next: u64,
    pub missing: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub accepted: usize,
    pub monotone: bool,
    pub gaps: Vec<SequenceGap>,
    pub total_missing: u64,
}

/// Checks that accepted `(time, seq)` pairs strictly increase and lists
/// holes left by discarded or skipped sequence numbers.
pub fn sequence_progression(accepted: &[(u64, u64)]) -> SequenceReport {
    let mut monotone = true;
    let mut gaps = Vec::new();
    for w in accepted.windows(2) {
        let (a, b) = (w[0].1, w[1].1);
        if b <= a {
            monotone = false;
        } else if b > a + 1 {
            gaps.push(SequenceGap { after: a, next: b, missing: b - a - 1 });
        }
    }
    let total_missing = gaps.iter().map(|g| g.missing).sum();
    SequenceReport { accepted: accepted.len(), monotone, gaps, total_missing }
}

/// Earliest sample time after which every series stays within `threshold`
/// for a fully observed window of `hold_s` seconds.
pub fn detect_settling(
    times: &[f64],
    series: &[Vec<f64>],
    threshold_m: f64,
    hold_s: f64,
) -> Result<Option<f64>, MetricsError> {
    if !(threshold_m > 0.0) || !(hold_s >= 0.0) {
        return Err(MetricsError::Invalid("threshold must be > 0 and hold >= 0".into()));
    }
    if let Some(s) = series.iter().find(|s| s.len() != times.len()) {
        return Err(MetricsError::Invalid(format!("series length {} != {}", s.len(), times.len())));
    }
    let n = times.len();
    if n == 0 {
        return Ok(None);
    }
    let ok: Vec<bool> = (0..n).map(|k| series.iter().all(|s| s[k].abs() <= threshold_m)).collect();
    let end = times[n - 1];
    let eps = 1e-9;
    let mut next_bad = n;
    let mut best = None;
    for k in (0..n).rev() {
        if !ok[k] {
            next_bad = k;
            continue;
        }
        let window_end = times[k] + hold_s;
        let observed = end + eps >= window_end;
        let clean = next_bad == n || times[next_bad] > window_end + eps;
        if observed && clean {
            best = Some(times[k]);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairClassification {
    pub leader: String,
    pub follower: String,
    pub class: CollisionClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySummary {
    pub exclusion_violations: usize,
    pub first_violation_s: Option<f64>,
    pub collision_classifications: Vec<PairClassification>,
}

impl SafetySummary {
    pub fn mutual_exclusion_ok(&self) -> bool {
        self.exclusion_violations == 0
    }

    pub fn any_enters(&self) -> bool {
        self.collision_classifications.iter().any(|c| c.class == CollisionClass::Enters)
    }
}

/// Exclusion check plus a collision trace for every vehicle pair, ordered
/// by the initial distance to the centre.
pub fn evaluate_safety(
    log: &TrajectoryLog,
    specs: &[VehicleSpec],
    geom: &JunctionGeometry,
) -> Result<SafetySummary, MetricsError> {
    let violations = mutual_exclusion_violations(&log.times, specs, &log.progress, geom)?;
    let initial: Vec<(String, VehicleState)> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), VehicleState::new(log.progress[i][0], log.speed[i][0])))
        .collect();
    let by_rank = assign_crossing_order(&initial).indices_by_rank();
    let mut classes = Vec::new();
    for (a, &lead) in by_rank.iter().enumerate() {
        for &follow in &by_rank[a + 1..] {
            let class =
                collision_region_trace(&log.progress[lead], &log.progress[follow], &specs[lead], &specs[follow], geom)?;
            classes.push(PairClassification {
                leader: specs[lead].id.clone(),
                follower: specs[follow].id.clone(),
                class,
            });
        }
    }
    Ok(SafetySummary {
        exclusion_violations: violations.len(),
        first_violation_s: violations.first().map(|v| v.time_s),
        collision_classifications: classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSummary {
    pub v0: f64,
    pub c_hat: f64,
    pub settling_bound_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub duration_s: f64,
    pub settling_threshold_m: f64,
    pub settling_hold_s: f64,
    pub settling_time_s: Option<f64>,
    pub max_final_error_m: Option<f64>,
    pub mutual_exclusion_ok: bool,
    pub safety: SafetySummary,
    pub lyapunov: Option<LyapunovSummary>,
    pub delay_stats: BTreeMap<DelayKind, DelayStats>,
    pub sequence: BTreeMap<String, SequenceReport>,
    pub broadcast_interval_ms: Option<DelayStats>,
    pub fallback_ticks: usize,
    pub protocol_violations: usize,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn settled(&self) -> bool {
        self.settling_time_s.is_some()
    }

    /// Per-kind statistics for every kind with at least two samples.
    pub fn delay_table(samples: &[DelaySample]) -> BTreeMap<DelayKind, DelayStats> {
        let mut out = BTreeMap::new();
        for kind in DelayKind::ALL {
            let v: Vec<f64> = samples.iter().filter(|s| s.kind == kind).map(|s| s.value_ms).collect();
            if let Ok(s) = stats(&v) {
                out.insert(kind, s);
            }
        }
        out
    }
}
