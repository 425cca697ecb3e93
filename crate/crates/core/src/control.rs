//! Finite-time distributed formation controller for a virtual platoon.
//!
//! Every vehicle drives a double integrator and computes its own input from
//! the relative position and velocity of its communication neighbours:
//!
//! ```text
//! u_i = -Σ_j sig(p_i - p_j - p*_ij)^(2α/(1+α)) - Σ_j sig(v_i - v_j)^α
//! ```
//!
//! where `sig(x)^a = sign(x)·|x|^a`. The module also carries the Lyapunov
//! diagnostic used to certify convergence and the resulting settling-time
//! bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lyapunov diagnostic is only valid with a constant spacing policy")]
    DiagnosticInvalid,
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
}

/// Signed power `sign(x)·|x|^alpha`.
pub fn sig(x: f64, alpha: f64) -> Result<f64, ControlError> {
    if !x.is_finite() {
        return Err(ControlError::Domain(format!("sig argument {x} is not finite")));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(ControlError::Domain(format!("sig exponent {alpha} must be positive")));
    }
    Ok(sig_unchecked(x, alpha))
}

#[inline]
pub(crate) fn sig_unchecked(x: f64, alpha: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powf(alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    alpha: f64,
}

impl ControllerParams {
    pub fn new(alpha: f64) -> Result<Self, ControlError> {
        if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
            Ok(Self { alpha })
        } else {
            Err(ControlError::Domain(format!("alpha must lie in (0, 1), got {alpha}")))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Exponent applied to the position errors, `2α/(1+α)`.
    pub fn position_exponent(&self) -> f64 {
        2.0 * self.alpha / (1.0 + self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpacingMode {
    /// Gap grows with the live follower speed.
    HeadwayLiteral,
    /// Gap uses a frozen reference speed, so `p*_ij` is constant.
    ConstantGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingPolicy {
    pub standstill_gap_m: f64,
    pub headway_s: f64,
    pub mode: SpacingMode,
    /// Speed substituted for the follower speed in `ConstantGap` mode.
    pub reference_speed_mps: f64,
}

impl SpacingPolicy {
    pub fn headway_literal(standstill_gap_m: f64, headway_s: f64) -> Result<Self, ControlError> {
        Self::new(standstill_gap_m, headway_s, SpacingMode::HeadwayLiteral, 0.0)
    }

    pub fn constant_gap(
        standstill_gap_m: f64,
        headway_s: f64,
        reference_speed_mps: f64,
    ) -> Result<Self, ControlError> {
        Self::new(standstill_gap_m, headway_s, SpacingMode::ConstantGap, reference_speed_mps)
    }

    pub fn new(
        standstill_gap_m: f64,
        headway_s: f64,
        mode: SpacingMode,
        reference_speed_mps: f64,
    ) -> Result<Self, ControlError> {
        if !(standstill_gap_m.is_finite() && standstill_gap_m > 0.0) {
            return Err(ControlError::Domain(format!(
                "standstill gap must be positive, got {standstill_gap_m}"
            )));
        }
        if !(headway_s.is_finite() && headway_s >= 0.0) {
            return Err(ControlError::Domain(format!("headway must be >= 0, got {headway_s}")));
        }
        if !reference_speed_mps.is_finite() {
            return Err(ControlError::Domain("reference speed must be finite".into()));
        }
        Ok(Self { standstill_gap_m, headway_s, mode, reference_speed_mps })
    }

    pub fn is_constant(&self) -> bool {
        self.mode == SpacingMode::ConstantGap
    }
}

/// Desired signed gap `p*_ij = (n_j - n_i)·(r + h·v)` for a pair whose
/// crossing ranks differ by `rank_offset = n_j - n_i`.
///
/// `follower_speed` is the speed of the pair member with the larger rank.
/// In `ConstantGap` mode the policy's reference speed is used instead.
pub fn desired_gap(
    policy: &SpacingPolicy,
    follower_speed: f64,
    rank_offset: i64,
) -> Result<f64, ControlError> {
    if rank_offset == 0 {
        return Err(ControlError::Domain("self-gap is undefined (rank offset 0)".into()));
    }
    let speed = match policy.mode {
        SpacingMode::HeadwayLiteral => follower_speed,
        SpacingMode::ConstantGap => policy.reference_speed_mps,
    };
    Ok(rank_offset as f64 * (policy.standstill_gap_m + policy.headway_s * speed))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub progress_m: f64,
    pub speed_mps: f64,
    pub input_mps2: f64,
}

impl VehicleState {
    pub fn new(progress_m: f64, speed_mps: f64) -> Self {
        Self { progress_m, speed_mps, input_mps2: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.progress_m.is_finite() && self.speed_mps.is_finite() && self.input_mps2.is_finite()
    }
}

/// What vehicle `i` knows about one neighbour `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub progress_m: f64,
    pub speed_mps: f64,
    pub desired_gap_m: f64,
}

/// The neighbour set of one vehicle, kept sorted by id so that summation
/// order does not depend on how the caller enumerated the neighbours.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborView {
    neighbors: Vec<Neighbor>,
}

impl NeighborView {
    pub fn new(mut neighbors: Vec<Neighbor>) -> Self {
        neighbors.sort_by_key(|n| n.id);
        Self { neighbors }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Neighbor> {
        self.neighbors.iter()
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

impl FromIterator<Neighbor> for NeighborView {
    fn from_iter<T: IntoIterator<Item = Neighbor>>(iter: T) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Distributed control input for one vehicle.
pub fn control_input(
    own: &VehicleState,
    neighbors: &NeighborView,
    params: &ControllerParams,
) -> Result<f64, ControlError> {
    if neighbors.is_empty() {
        return Err(ControlError::Config("vehicle has no communication neighbours".into()));
    }
    if !own.progress_m.is_finite() || !own.speed_mps.is_finite() {
        return Err(ControlError::Domain("own state is not finite".into()));
    }
    let beta = params.position_exponent();
    let alpha = params.alpha();
    let mut u = 0.0;
    for n in neighbors.iter() {
        if !(n.progress_m.is_finite() && n.speed_mps.is_finite() && n.desired_gap_m.is_finite()) {
            return Err(ControlError::Domain(format!("neighbour {} state is not finite", n.id)));
        }
        let e = own.progress_m - n.progress_m - n.desired_gap_m;
        u -= sig_unchecked(e, beta);
        u -= sig_unchecked(own.speed_mps - n.speed_mps, alpha);
    }
    Ok(u)
}

/// One formation-error term of the Lyapunov function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeError {
    pub error_m: f64,
    pub weight: f64,
}

impl EdgeError {
    pub fn new(error_m: f64) -> Self {
        Self { error_m, weight: 1.0 }
    }
}

/// Lyapunov value `Σ a·|e|^(1+β)/(1+β) + Σ v²/2`, `β = 2α/(1+α)`.
///
/// The caller chooses what goes in: the closed loop only has a
/// non-increasing value when every undirected edge appears once and the
/// speeds are taken relative to the fleet mean.
pub fn lyapunov_value(
    errors: &[EdgeError],
    speeds: &[f64],
    params: &ControllerParams,
    policy: &SpacingPolicy,
) -> Result<f64, ControlError> {
    if !policy.is_constant() {
        return Err(ControlError::DiagnosticInvalid);
    }
    let beta = params.position_exponent();
    let potential: f64 = errors
        .iter()
        .map(|e| e.weight * e.error_m.abs().powf(1.0 + beta) / (1.0 + beta))
        .sum();
    let kinetic: f64 = speeds.iter().map(|v| 0.5 * v * v).sum();
    Ok(potential + kinetic)
}

/// Upper bound on the settling time, `2/(c(1-α)) · V0^((1-α)/2)`.
pub fn settling_time_bound(
    v0: f64,
    c: f64,
    params: &ControllerParams,
) -> Result<f64, ControlError> {
    if !(c.is_finite() && c > 0.0) {
        return Err(ControlError::Domain(format!("decay constant must be positive, got {c}")));
    }
    if !(v0.is_finite() && v0 >= 0.0) {
        return Err(ControlError::Domain(format!("initial Lyapunov value must be >= 0, got {v0}")));
    }
    let a = params.alpha();
    Ok(2.0 / (c * (1.0 - a)) * v0.powf((1.0 - a) / 2.0))
}

/// Empirical decay constant: the smallest observed
/// `(-ΔV/Δt) / V^((1+α)/2)` over consecutive samples, floored at zero.
///
/// `series` holds `(time_s, V)` pairs in time order.
pub fn estimate_c(series: &[(f64, f64)], params: &ControllerParams) -> Result<f64, ControlError> {
    if series.len() < 2 {
        return Err(ControlError::InsufficientData { needed: 2, got: series.len() });
    }
    let exponent = (1.0 + params.alpha()) / 2.0;
    let mut c_hat = f64::INFINITY;
    for w in series.windows(2) {
        let (t0, v0) = w[0];
        let (t1, v1) = w[1];
        let dt = t1 - t0;
        if !(dt > 0.0) || !(v0 > 0.0) {
            return Err(ControlError::Domain(
                "series must be strictly positive and strictly increasing in time".into(),
            ));
        }
        let ratio = -(v1 - v0) / dt / v0.powf(exponent);
        c_hat = c_hat.min(ratio);
    }
    Ok(c_hat.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(a: f64) -> ControllerParams {
        ControllerParams::new(a).unwrap()
    }

    #[test]
    fn sig_examples() {
        assert_eq!(sig(0.0, 0.7).unwrap(), 0.0);
        assert!((sig(-8.0, 1.0 / 3.0).unwrap() + 2.0).abs() < 1e-12);
        assert_eq!(sig(4.0, 0.5).unwrap(), 2.0);
    }

    #[test]
    fn sig_rejects_bad_domain() {
        assert!(sig(f64::NAN, 0.5).is_err());
        assert!(sig(f64::INFINITY, 0.5).is_err());
        assert!(sig(1.0, 0.0).is_err());
        assert!(sig(1.0, -0.3).is_err());
    }

    #[test]
    fn params_reject_out_of_range_alpha() {
        for bad in [0.0, 1.0, 1.5, -0.1, f64::NAN] {
            assert!(ControllerParams::new(bad).is_err(), "{bad}");
        }
        assert!(ControllerParams::new(0.1).is_ok());
    }

    #[test]
    fn desired_gap_examples() {
        let p = SpacingPolicy::headway_literal(10.0, 0.8).unwrap();
        assert!((desired_gap(&p, 10.0, 1).unwrap() - 18.0).abs() < 1e-12);
        assert!((desired_gap(&p, 10.0, -2).unwrap() + 36.0).abs() < 1e-12);
        let p0 = SpacingPolicy::headway_literal(10.0, 0.0).unwrap();
        assert_eq!(desired_gap(&p0, 25.0, 1).unwrap(), 10.0);
        assert!(desired_gap(&p, 10.0, 0).is_err());
    }

    #[test]
    fn constant_gap_ignores_live_speed() {
        let p = SpacingPolicy::constant_gap(10.0, 0.8, 10.0).unwrap();
        assert_eq!(desired_gap(&p, 3.0, 1).unwrap(), desired_gap(&p, 30.0, 1).unwrap());
        assert_eq!(desired_gap(&p, 3.0, 1).unwrap(), -desired_gap(&p, 7.0, -1).unwrap());
    }

    #[test]
    fn spacing_policy_validation() {
        assert!(SpacingPolicy::headway_literal(0.0, 0.8).is_err());
        assert!(SpacingPolicy::headway_literal(10.0, -0.1).is_err());
    }

    fn one(e: f64, dv: f64) -> (VehicleState, NeighborView) {
        let own = VehicleState::new(e + 18.0, 10.0 + dv);
        let view = NeighborView::new(vec![Neighbor {
            id: 1,
            progress_m: 0.0,
            speed_mps: 10.0,
            desired_gap_m: 18.0,
        }]);
        (own, view)
    }

    #[test]
    fn control_input_examples() {
        let (own, view) = one(0.0, 0.0);
        assert_eq!(control_input(&own, &view, &params(0.3)).unwrap(), 0.0);
        for a in [0.1, 0.5, 0.9] {
            let (own, view) = one(1.0, 0.0);
            assert!((control_input(&own, &view, &params(a)).unwrap() + 1.0).abs() < 1e-12);
        }
        let (own, view) = one(0.0, 4.0);
        assert!((control_input(&own, &view, &params(0.5)).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn control_input_requires_neighbours() {
        let own = VehicleState::new(0.0, 1.0);
        let err = control_input(&own, &NeighborView::default(), &params(0.5)).unwrap_err();
        assert!(matches!(err, ControlError::Config(_)));
    }

    #[test]
    fn neighbour_order_does_not_matter() {
        let a = Neighbor { id: 0, progress_m: 3.0, speed_mps: 9.0, desired_gap_m: -18.0 };
        let b = Neighbor { id: 2, progress_m: -31.0, speed_mps: 11.0, desired_gap_m: 18.0 };
        let own = VehicleState::new(-14.0, 10.0);
        let p = params(0.1);
        let u1 = control_input(&own, &NeighborView::new(vec![a, b]), &p).unwrap();
        let u2 = control_input(&own, &NeighborView::new(vec![b, a]), &p).unwrap();
        assert_eq!(u1.to_bits(), u2.to_bits());
    }

    #[test]
    fn lyapunov_examples() {
        let cg = SpacingPolicy::constant_gap(10.0, 0.8, 10.0).unwrap();
        let p = params(0.3);
        assert_eq!(lyapunov_value(&[EdgeError::new(0.0)], &[0.0, 0.0], &p, &cg).unwrap(), 0.0);
        assert_eq!(lyapunov_value(&[], &[2.0], &p, &cg).unwrap(), 2.0);
        let hl = SpacingPolicy::headway_literal(10.0, 0.8).unwrap();
        assert_eq!(
            lyapunov_value(&[], &[2.0], &p, &hl).unwrap_err(),
            ControlError::DiagnosticInvalid
        );
    }

    #[test]
    fn lyapunov_single_edge_matches_quadrature() {
        // Composite Simpson on ∫₀¹ s^0.5 ds with a substitution s = t² that
        // removes the endpoint singularity: ∫₀¹ 2t² dt.
        let n = 1000;
        let h = 1.0 / n as f64;
        let f = |t: f64| 2.0 * t * t;
        let mut acc = f(0.0) + f(1.0);
        for k in 1..n {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
        }
        let quadrature = acc * h / 3.0;
        let cg = SpacingPolicy::constant_gap(10.0, 0.8, 10.0).unwrap();
        let v = lyapunov_value(&[EdgeError::new(1.0)], &[0.0], &params(1.0 / 3.0), &cg).unwrap();
        assert!((v - quadrature).abs() < 1e-9, "{v} vs {quadrature}");
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn settling_bound_examples() {
        assert!((settling_time_bound(1.0, 2.0, &params(0.5)).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(settling_time_bound(0.0, 1.0, &params(0.3)).unwrap(), 0.0);
        assert!((settling_time_bound(16.0, 1.0, &params(0.5)).unwrap() - 8.0).abs() < 1e-12);
        assert!(settling_time_bound(1.0, 0.0, &params(0.5)).is_err());
        assert!(settling_time_bound(1.0, -1.0, &params(0.5)).is_err());
    }

    #[test]
    fn settling_bound_monotonicity() {
        let p = params(0.4);
        let a = settling_time_bound(1.0, 1.0, &p).unwrap();
        let b = settling_time_bound(2.0, 1.0, &p).unwrap();
        let c = settling_time_bound(2.0, 3.0, &p).unwrap();
        assert!(b > a && c < b);
    }

    #[test]
    fn estimate_c_examples() {
        let p = params(0.5);
        let decaying: Vec<_> = (0..50).map(|k| (k as f64 * 0.1, (-(k as f64) * 0.1).exp())).collect();
        assert!(estimate_c(&decaying, &p).unwrap() > 0.0);
        let flat: Vec<_> = (0..10).map(|k| (k as f64, 3.0)).collect();
        assert_eq!(estimate_c(&flat, &p).unwrap(), 0.0);
        assert!(matches!(
            estimate_c(&[(0.0, 1.0)], &p),
            Err(ControlError::InsufficientData { .. })
        ));
    }
}
