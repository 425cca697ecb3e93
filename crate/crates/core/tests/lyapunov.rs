//! Constant-gap closed loop: the Lyapunov value decays, the mean speed is
//! conserved and the empirical settling bound holds.

use crossing_core::control::{estimate_c, settling_time_bound, ControllerParams, SpacingPolicy, VehicleState};
use crossing_core::junction::{assign_crossing_order, VehicleSpec};
use crossing_core::metrics::detect_settling;
use crossing_core::sim::{run_closed_loop, FleetMember, Formation, Integrator, SimConfig, TrajectoryLog};
use crossing_core::topology::{NamedTopology, TopologySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHA: f64 = 0.5;
const R: f64 = 10.0;
const H: f64 = 0.8;

struct Case {
    members: Vec<FleetMember>,
    spacing: SpacingPolicy,
}

/// Random platoon in rank order with |e| <= 30 m and |Δv| <= 5 m/s.
fn case(n: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speeds: Vec<f64> = (0..n).map(|_| 10.0 + rng.gen_range(-2.5..=2.5)).collect();
    let vref = speeds.iter().sum::<f64>() / n as f64;
    let gap = R + H * vref;
    let mut p = -150.0;
    let mut members = Vec::new();
    for (k, &v) in speeds.iter().enumerate() {
        if k > 0 {
            p -= gap + rng.gen_range(-30.0..=30.0);
        }
        members.push(FleetMember {
            spec: VehicleSpec::new(format!("v{k}"), 4.6).unwrap(),
            initial: VehicleState::new(p, v),
        });
    }
    Case { members, spacing: SpacingPolicy::constant_gap(R, H, vref).unwrap() }
}

fn run(c: &Case, topology: NamedTopology, integrator: Integrator) -> (TrajectoryLog, ControllerParams) {
    let states: Vec<(String, VehicleState)> = c.members.iter().map(|m| (m.spec.id.clone(), m.initial)).collect();
    let order = assign_crossing_order(&states);
    let graph = TopologySpec::Named(topology).resolve(c.members.len(), &order).unwrap();
    let params = ControllerParams::new(ALPHA).unwrap();
    let f = Formation { order: &order, graph: &graph, params, spacing: c.spacing };
    let cfg = SimConfig { dt_s: 0.001, duration_s: 40.0, integrator, input_clamp_mps2: None, ..Default::default() };
    (run_closed_loop(&c.members, &f, &cfg).unwrap(), params)
}

fn check(log: &TrajectoryLog, params: &ControllerParams) -> Result<(), String> {
    let v = log.lyapunov.as_ref().ok_or("no Lyapunov series")?;
    let v0 = v[0];
    if let Some(k) = v.windows(2).position(|w| w[1] > w[0] + 1e-6 * v0) {
        return Err(format!("V increased at step {k}: {} -> {}", v[k], v[k + 1]));
    }
    let sum0: f64 = log.speed.iter().map(|s| s[0]).sum();
    for k in 0..log.len() {
        let sum: f64 = log.speed.iter().map(|s| s[k]).sum();
        if (sum - sum0).abs() > 1e-6 * sum0.abs() {
            return Err(format!("sum of speeds drifted at step {k}: {sum} vs {sum0}"));
        }
    }
    let settle = detect_settling(&log.times, &log.edge_errors, 0.1, 2.0).unwrap().ok_or("did not settle")?;
    let window: Vec<(f64, f64)> =
        log.times.iter().copied().zip(v.iter().copied()).take_while(|&(t, _)| t <= settle).collect();
    let c_hat = estimate_c(&window, params).map_err(|e| e.to_string())?;
    if !(c_hat > 0.0) {
        return Err(format!("c_hat = {c_hat}"));
    }
    let bound = settling_time_bound(v0, c_hat, params).unwrap();
    if settle > bound {
        return Err(format!("settled at {settle} s beyond bound {bound} s"));
    }
    Ok(())
}

#[test]
fn lyapunov_suite_chain_semi_implicit() {
    for n in 2..=4 {
        for seed in 0..20 {
            let c = case(n, seed);
            let (log, p) = run(&c, NamedTopology::Chain, Integrator::SemiImplicitEuler);
            check(&log, &p).unwrap_or_else(|e| panic!("n={n} seed={seed}: {e}"));
        }
    }
}

#[test]
fn lyapunov_suite_complete_rk4() {
    for n in [3, 4] {
        for seed in 100..105 {
            let c = case(n, seed);
            let (log, p) = run(&c, NamedTopology::Complete, Integrator::Rk4);
            check(&log, &p).unwrap_or_else(|e| panic!("n={n} seed={seed}: {e}"));
        }
    }
}
