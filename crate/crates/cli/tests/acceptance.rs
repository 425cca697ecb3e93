//! Acceptance checks for the whole toolkit. Every test prints one
//! `PASS ACn ...` or `FAIL ACn ...` line before asserting, so
//! `cargo test --test acceptance -- --nocapture` gives a readable scorecard.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use crossing_core::control::{estimate_c, settling_time_bound, sig, ControllerParams, SpacingPolicy, VehicleState};
use crossing_core::io::{read_report, read_sequences_csv, read_trajectory_csv};
use crossing_core::junction::{assign_crossing_order, CollisionClass, VehicleSpec};
use crossing_core::live::ServeSummary;
use crossing_core::metrics::{detect_settling, DelayKind, RunReport};
use crossing_core::protocol::{accept_packet, PacketDecision};
use crossing_core::sim::{run_closed_loop, FleetMember, Formation, Integrator, SimConfig};
use crossing_core::topology::{NamedTopology, TopologySpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_crossing");

fn table2() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/table2.scenario")
}

fn verdict(ac: &str, ok: bool, detail: impl AsRef<str>) {
    println!("{} {ac} {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "{ac}: {}", detail.as_ref());
}

/// Runs `crossing simulate` on the bundled scenario and returns the report and wall time.
fn simulate(extra: &[&str]) -> (RunReport, f64) {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = Command::new(BIN)
        .arg("simulate")
        .arg(table2())
        .arg("--out")
        .arg(dir.path())
        .args(extra)
        .output()
        .unwrap();
    let wall = t0.elapsed().as_secs_f64();
    assert!(matches!(out.status.code(), Some(0 | 2)), "simulate failed: {}", String::from_utf8_lossy(&out.stderr));
    (read_report(&dir.path().join("report.json")).unwrap(), wall)
}

fn controlled_pairs_safe(r: &RunReport) -> bool {
    r.safety.collision_classifications.iter().all(|c| c.class != CollisionClass::Enters)
}

fn classes(r: &RunReport) -> String {
    r.safety
        .collision_classifications
        .iter()
        .map(|c| format!("{}->{}:{}", c.leader, c.follower, c.class))
        .collect::<Vec<_>>()
        .join(",")
}

#[test]
fn ac1_table2_reproduction() {
    let (r, wall) = simulate(&[]);
    let t = r.settling_time_s;
    let in_window = t.is_some_and(|t| (15.0..=25.0).contains(&t));
    let ok = in_window && r.safety.exclusion_violations == 0 && wall < 10.0;
    verdict(
        "AC1",
        ok,
        format!(
            "settling_s={t:?} window=[15,25] exclusion_violations={} wall_s={wall:.2}",
            r.safety.exclusion_violations
        ),
    );
}

#[test]
fn ac2_collision_counterfactual() {
    let (free, _) = simulate(&["--uncontrolled"]);
    let (ctl, _) = simulate(&[]);
    let enters = free.safety.collision_classifications.iter().any(|c| c.class == CollisionClass::Enters);
    let ok = enters && controlled_pairs_safe(&ctl);
    verdict("AC2", ok, format!("uncontrolled=[{}] controlled=[{}]", classes(&free), classes(&ctl)));
}

struct Case {
    members: Vec<FleetMember>,
    spacing: SpacingPolicy,
}

fn random_case(n: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speeds: Vec<f64> = (0..n).map(|_| 10.0 + rng.gen_range(-2.5..=2.5)).collect();
    let vref = speeds.iter().sum::<f64>() / n as f64;
    let gap = 10.0 + 0.8 * vref;
    let mut p = -150.0;
    let mut members = Vec::new();
    for (k, &v) in speeds.iter().enumerate() {
        if k > 0 {
            p -= gap + rng.gen_range(-30.0..=30.0);
        }
        members.push(FleetMember { spec: VehicleSpec::new(format!("v{k}"), 4.6).unwrap(), initial: VehicleState::new(p, v) });
    }
    Case { members, spacing: SpacingPolicy::constant_gap(10.0, 0.8, vref).unwrap() }
}

fn lyapunov_run(c: &Case) -> Result<(f64, f64), String> {
    let states: Vec<(String, VehicleState)> = c.members.iter().map(|m| (m.spec.id.clone(), m.initial)).collect();
    let order = assign_crossing_order(&states);
    let graph = TopologySpec::Named(NamedTopology::Chain).resolve(c.members.len(), &order).unwrap();
    let params = ControllerParams::new(0.5).unwrap();
    let f = Formation { order: &order, graph: &graph, params, spacing: c.spacing };
    let cfg = SimConfig { dt_s: 0.001, duration_s: 40.0, integrator: Integrator::SemiImplicitEuler, input_clamp_mps2: None, ..Default::default() };
    let log = run_closed_loop(&c.members, &f, &cfg).map_err(|e| e.to_string())?;
    let v = log.lyapunov.as_ref().ok_or("no V")?;
    if v.windows(2).any(|w| w[1] > w[0] + 1e-6 * v[0]) {
        return Err("V increased".into());
    }
    let s0: f64 = log.speed.iter().map(|s| s[0]).sum();
    for k in 0..log.len() {
        let s: f64 = log.speed.iter().map(|s| s[k]).sum();
        if (s - s0).abs() > 1e-6 * s0.abs() {
            return Err(format!("sum of speeds drifted at step {k}"));
        }
    }
    let settle = detect_settling(&log.times, &log.edge_errors, 0.1, 2.0).unwrap().ok_or("not settled")?;
    let window: Vec<(f64, f64)> = log.times.iter().copied().zip(v.iter().copied()).take_while(|&(t, _)| t <= settle).collect();
    let c_hat = estimate_c(&window, &params).map_err(|e| e.to_string())?;
    if c_hat <= 0.0 {
        return Err(format!("c_hat={c_hat}"));
    }
    let bound = settling_time_bound(v[0], c_hat, &params).map_err(|e| e.to_string())?;
    if settle > bound {
        return Err(format!("settled {settle:.2} s > bound {bound:.2} s"));
    }
    Ok((settle, bound))
}

#[test]
fn ac3_lyapunov_suite() {
    let mut failures = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for n in 2..=4 {
        for seed in 0..20 {
            match lyapunov_run(&random_case(n, 1000 + seed)) {
                Ok((t, b)) => worst_ratio = worst_ratio.max(t / b),
                Err(e) => failures.push(format!("n={n} seed={seed}: {e}")),
            }
        }
    }
    verdict("AC3", failures.is_empty(), format!("runs=60 max_settle_over_bound={worst_ratio:.3} failures={failures:?}"));
}

#[test]
fn ac4_sig_properties() {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut odd = true;
    for a in [0.3, 0.5, 0.9] {
        for x in [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0f64] {
            odd &= sig(-x, a).unwrap() == -sig(x, a).unwrap();
            let d = (sig(x + h, a).unwrap() - sig(x - h, a).unwrap()) / (2.0 * h);
            let want = a * x.abs().powf(a - 1.0);
            worst = worst.max(((d - want) / want).abs());
            let g = |y: f64| y.abs().powf(a + 1.0);
            let d2 = (g(x + h) - g(x - h)) / (2.0 * h);
            let want2 = (a + 1.0) * sig(x, a).unwrap();
            worst = worst.max(((d2 - want2) / want2).abs());
        }
    }
    verdict("AC4", odd && worst <= 1e-6, format!("odd={odd} max_rel_err={worst:.2e}"));
}

#[test]
fn ac5_protocol_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for _ in 0..1000 {
        let mut seqs: Vec<u64> = (0..50).collect();
        seqs.shuffle(&mut rng);
        let mut last = None;
        let mut acc = Vec::new();
        for s in seqs {
            if accept_packet(last, s) == PacketDecision::Accept {
                acc.push(s);
                last = Some(s);
            }
        }
        if !(acc.windows(2).all(|w| w[0] < w[1]) && acc.last() == Some(&49)) {
            bad += 1;
        }
    }
    verdict("AC5", bad == 0, format!("permutations=1000 packets=50 violations={bad}"));
}

fn state_rtt_mean(r: &RunReport) -> Option<f64> {
    r.delay_stats.get(&DelayKind::StateRtt).map(|s| s.mean)
}

#[test]
fn ac6_delay_regimes() {
    let (normal, _) = simulate(&["--mean-ms", "35", "--std-ms", "10"]);
    let (cloud, _) = simulate(&["--mean-ms", "100"]);
    let (a, b) = (state_rtt_mean(&normal), state_rtt_mean(&cloud));
    let ok = a.is_some_and(|m| (60.0..=80.0).contains(&m)) && b.is_some_and(|m| (190.0..=220.0).contains(&m));
    verdict("AC6", ok, format!("normal35_state_rtt_ms={a:?} in [60,80]; const100_state_rtt_ms={b:?} in [190,220]"));
}

#[test]
fn ac7_robust_under_delay() {
    let (r, _) = simulate(&["--mean-ms", "35", "--std-ms", "10"]);
    let t = r.settling_time_s;
    let ok = t.is_some_and(|t| (15.0..=30.0).contains(&t)) && r.safety.exclusion_violations == 0 && controlled_pairs_safe(&r);
    verdict(
        "AC7",
        ok,
        format!("settling_s={t:?} window=[15,30] exclusion_violations={} pairs=[{}]", r.safety.exclusion_violations, classes(&r)),
    );
}

#[test]
fn ac8_live_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = Command::new(BIN)
        .args(["serve", "--bind", "127.0.0.1:0", "--exit-when-idle", "--max-runtime-s", "120", "--out"])
        .arg(dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stdout.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited before listening").unwrap();
        if let Some(a) = line.strip_prefix("listening on ") {
            break a.trim().to_string();
        }
    };
    let agents: Vec<_> = ["1", "2", "3"]
        .iter()
        .map(|id| {
            Command::new(BIN)
                .arg("agent")
                .arg(table2())
                .args(["--id", id, "--manager", &addr, "--out"])
                .arg(dir.path())
                .stdout(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    let agents_ok = agents.into_iter().all(|mut a| a.wait().unwrap().success());
    let _rest: Vec<_> = lines.collect();
    let server_ok = server.wait().unwrap().success();

    let summary: ServeSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("serve_summary.json")).unwrap()).unwrap();
    let iv = &summary.tick_intervals_ms;
    let mean = iv.iter().sum::<f64>() / iv.len().max(1) as f64;

    let mut monotone = true;
    let mut converged = true;
    for id in ["1", "2", "3"] {
        let seqs = read_sequences_csv(&dir.path().join(format!("sequences_{id}.csv"))).unwrap();
        monotone &= !seqs.is_empty() && seqs.windows(2).all(|w| w[0].global_sequence < w[1].global_sequence);
        let rows = read_trajectory_csv(&dir.path().join(format!("trajectory_{id}.csv"))).unwrap();
        let end = rows.last().map_or(0.0, |r| r.t_s);
        converged &= rows.iter().filter(|r| r.t_s >= end - 2.0).all(|r| r.e_pred_m.map_or(true, |e| e.abs() <= 0.1));
    }
    let ok = agents_ok
        && server_ok
        && summary.protocol_violations == 0
        && (45.0..=55.0).contains(&mean)
        && monotone
        && converged;
    verdict(
        "AC8",
        ok,
        format!(
            "agents_ok={agents_ok} server_ok={server_ok} violations={} mean_interval_ms={mean:.2} monotone={monotone} converged={converged}",
            summary.protocol_violations
        ),
    );
}
