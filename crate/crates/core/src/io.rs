//! Run artifacts on disk: the canonical trajectory CSV, delay samples,
//! accepted sequences, the JSON report and plot-ready series.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::junction::{occupies, JunctionGeometry, VehicleSpec};
use crate::metrics::{
    detect_settling, sequence_progression, DelayKind, DelaySample, PairClassification, RunReport, SequenceReport,
};
use crate::runner::RunArtifacts;
use crate::sim::TrajectoryLog;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const DELAYS_FILE: &str = "delays.csv";
pub const SEQUENCES_FILE: &str = "sequences.csv";
pub const REPORT_FILE: &str = "report.json";
pub const LYAPUNOV_FILE: &str = "lyapunov.csv";
pub const EDGE_ERRORS_FILE: &str = "edge_errors.csv";
pub const COLLISION_TRACES_FILE: &str = "collision_traces.csv";
pub const DELAY_HISTOGRAM_FILE: &str = "delay_histogram.csv";
pub const HISTOGRAM_BIN_MS: f64 = 5.0;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.display().to_string(), source }
}

/// One row of the canonical trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t_s: f64,
    pub vehicle_id: String,
    pub p_m: f64,
    pub v_mps: f64,
    pub u_mps2: f64,
    pub e_pred_m: Option<f64>,
    pub in_ca: bool,
    pub global_seq_used: Option<u64>,
}

pub fn trajectory_rows(log: &TrajectoryLog, specs: &[VehicleSpec], geom: &JunctionGeometry) -> Vec<TrajectoryRow> {
    let mut rows = Vec::with_capacity(log.len() * log.ids.len());
    for (k, &t) in log.times.iter().enumerate() {
        for (i, id) in log.ids.iter().enumerate() {
            rows.push(TrajectoryRow {
                t_s: t,
                vehicle_id: id.clone(),
                p_m: log.progress[i][k],
                v_mps: log.speed[i][k],
                u_mps2: log.input[i][k],
                e_pred_m: log.pred_errors[i].get(k).copied().flatten(),
                in_ca: occupies(log.progress[i][k], specs[i].length_m, geom),
                global_seq_used: log.global_seq_used.as_ref().and_then(|g| g[i][k]),
            });
        }
    }
    rows
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IoError::File { path: path.display().to_string(), source })
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err(path))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>, IoError> {
    read_rows(path)
}

pub fn read_delays_csv(path: &Path) -> Result<Vec<DelaySample>, IoError> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub vehicle_id: String,
    pub receive_ms: u64,
    pub global_sequence: u64,
}

pub fn read_sequences_csv(path: &Path) -> Result<Vec<SequenceRow>, IoError> {
    read_rows(path)
}

pub fn read_report(path: &Path) -> Result<RunReport, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::File { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.display().to_string(), source })
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(report).map_err(|source| IoError::Json { path: path.display().to_string(), source })?;
    std::fs::write(path, text + "\n").map_err(|source| IoError::File { path: path.display().to_string(), source })
}

#[derive(Serialize)]
struct HistogramRow {
    kind: DelayKind,
    bin_lo_ms: f64,
    bin_hi_ms: f64,
    count: usize,
}

fn histogram(samples: &[DelaySample]) -> Vec<HistogramRow> {
    let mut bins: BTreeMap<(DelayKind, i64), usize> = BTreeMap::new();
    for s in samples {
        *bins.entry((s.kind, (s.value_ms / HISTOGRAM_BIN_MS).floor() as i64)).or_default() += 1;
    }
    bins.into_iter()
        .map(|((kind, b), count)| HistogramRow {
            kind,
            bin_lo_ms: b as f64 * HISTOGRAM_BIN_MS,
            bin_hi_ms: (b + 1) as f64 * HISTOGRAM_BIN_MS,
            count,
        })
        .collect()
}

/// Writes every artifact of a run into `dir`, creating it if needed.
pub fn write_run(dir: &Path, run: &RunArtifacts, specs: &[VehicleSpec], geom: &JunctionGeometry) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|source| IoError::File { path: dir.display().to_string(), source })?;
    let log = &run.log;
    write_rows(&dir.join(TRAJECTORY_FILE), trajectory_rows(log, specs, geom))?;
    write_rows(&dir.join(DELAYS_FILE), &run.delays)?;
    write_rows(
        &dir.join(SEQUENCES_FILE),
        run.accepted.iter().flat_map(|(id, seqs)| {
            seqs.iter().map(move |&(receive_ms, global_sequence)| SequenceRow {
                vehicle_id: id.clone(),
                receive_ms,
                global_sequence,
            })
        }),
    )?;
    write_report(&dir.join(REPORT_FILE), &run.report)?;

    #[derive(Serialize)]
    struct VRow {
        t_s: f64,
        v: f64,
    }
    let v = log.lyapunov.as_deref().unwrap_or(&[]);
    write_rows(&dir.join(LYAPUNOV_FILE), log.times.iter().zip(v).map(|(&t_s, &v)| VRow { t_s, v }))?;

    #[derive(Serialize)]
    struct ERow<'a> {
        t_s: f64,
        follower: &'a str,
        leader: &'a str,
        e_m: f64,
    }
    let mut erows = Vec::new();
    for (k, &t_s) in log.times.iter().enumerate() {
        for (m, &(f, l)) in log.edges.iter().enumerate() {
            erows.push(ERow { t_s, follower: &log.ids[f], leader: &log.ids[l], e_m: log.edge_errors[m][k] });
        }
    }
    write_rows(&dir.join(EDGE_ERRORS_FILE), erows)?;

    #[derive(Serialize)]
    struct CRow<'a> {
        t_s: f64,
        leader: &'a str,
        follower: &'a str,
        p_leader_m: f64,
        p_follower_m: f64,
    }
    let index: BTreeMap<&str, usize> = log.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut crows = Vec::new();
    for PairClassification { leader, follower, .. } in &run.report.safety.collision_classifications {
        let (a, b) = (index[leader.as_str()], index[follower.as_str()]);
        for (k, &t_s) in log.times.iter().enumerate() {
            crows.push(CRow { t_s, leader, follower, p_leader_m: log.progress[a][k], p_follower_m: log.progress[b][k] });
        }
    }
    write_rows(&dir.join(COLLISION_TRACES_FILE), crows)?;
    write_rows(&dir.join(DELAY_HISTOGRAM_FILE), histogram(&run.delays))
}

/// Metrics recomputed from the CSV artifacts of an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectorySummary {
    pub vehicles: Vec<String>,
    pub samples: usize,
    pub ca_conflict_samples: usize,
    pub settling_time_s: Option<f64>,
    pub delay_stats: BTreeMap<DelayKind, crate::metrics::DelayStats>,
    pub sequence: BTreeMap<String, SequenceReport>,
}

pub fn summarize_dir(dir: &Path, threshold_m: f64, hold_s: f64) -> Result<DirectorySummary, IoError> {
    let tpath = dir.join(TRAJECTORY_FILE);
    let rows = read_trajectory_csv(&tpath)?;
    let mut vehicles: Vec<String> = Vec::new();
    let mut by_time: BTreeMap<u64, Vec<&TrajectoryRow>> = BTreeMap::new();
    for r in &rows {
        if !vehicles.contains(&r.vehicle_id) {
            vehicles.push(r.vehicle_id.clone());
        }
        if !r.t_s.is_finite() {
            return Err(IoError::Schema { path: tpath.display().to_string(), message: "non-finite t_s".into() });
        }
        by_time.entry(r.t_s.to_bits()).or_default();
    }
    // Group by time in file order; t_s is non-negative so bit order is numeric order.
    for r in &rows {
        by_time.get_mut(&r.t_s.to_bits()).expect("inserted").push(r);
    }
    let times: Vec<f64> = by_time.keys().map(|b| f64::from_bits(*b)).collect();
    let ca_conflict_samples = by_time.values().filter(|rs| rs.iter().filter(|r| r.in_ca).count() > 1).count();
    let mut series: Vec<Vec<f64>> = Vec::new();
    for id in &vehicles {
        let s: Vec<Option<f64>> =
            by_time.values().map(|rs| rs.iter().find(|r| &r.vehicle_id == id).and_then(|r| r.e_pred_m)).collect();
        if s.iter().all(Option::is_some) {
            series.push(s.into_iter().map(Option::unwrap).collect());
        }
    }
    let settling_time_s = detect_settling(&times, &series, threshold_m, hold_s)
        .map_err(|e| IoError::Schema { path: tpath.display().to_string(), message: e.to_string() })?;

    let delays = read_delays_csv(&dir.join(DELAYS_FILE))?;
    let seq_path = dir.join(SEQUENCES_FILE);
    let mut sequence = BTreeMap::new();
    if seq_path.exists() {
        let mut per: BTreeMap<String, Vec<(u64, u64)>> = BTreeMap::new();
        for r in read_sequences_csv(&seq_path)? {
            per.entry(r.vehicle_id).or_default().push((r.receive_ms, r.global_sequence));
        }
        sequence = per.into_iter().map(|(k, v)| (k, sequence_progression(&v))).collect();
    }
    Ok(DirectorySummary {
        vehicles,
        samples: times.len(),
        ca_conflict_samples,
        settling_time_s,
        delay_stats: RunReport::delay_table(&delays),
        sequence,
    })
}
