//! Benchmark fixtures shared by the criterion targets.

use crossing_core::control::{Neighbor, NeighborView, VehicleState};

/// Own state plus `k` neighbours spread one gap apart around it.
pub fn neighborhood(k: usize) -> (VehicleState, NeighborView) {
    let own = VehicleState::new(-100.0, 10.0);
    let view = (0..k)
        .map(|j| Neighbor {
            id: j + 1,
            progress_m: -100.0 + 18.0 * (j as f64 - k as f64 / 2.0) + 0.7,
            speed_mps: 9.5 + 0.1 * j as f64,
            desired_gap_m: 18.0 * (k as f64 / 2.0 - j as f64),
        })
        .collect();
    (own, view)
}
