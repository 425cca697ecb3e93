//! Intersection geometry reduced to one progress coordinate per trajectory.
//!
//! `p` is the signed distance of a vehicle's reference point (its rear
//! bumper) from the centre of its own trajectory: negative while
//! approaching, positive after the midpoint. The conflicting area (CA) is the
//! interval `[-ca_half, +ca_half]` on every trajectory; the cooperation zone
//! (CZ) is `|p| <= cz_radius`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::VehicleState;

pub const DEFAULT_CA_HALF_LENGTH_M: f64 = 7.5;
pub const COLLISION_TOUCH_TOLERANCE_M: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JunctionError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("distance to centre must be >= 0, got {0}")]
    NegativeDistance(f64),
    #[error("trajectory series have mismatched lengths ({expected} vs {got})")]
    MismatchedGrid { expected: usize, got: usize },
    #[error("invalid vehicle: {0}")]
    Vehicle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JunctionGeometry {
    pub roads: u32,
    pub cz_radius_m: f64,
    pub ca_half_length_m: f64,
}

impl JunctionGeometry {
    pub fn new(roads: u32, cz_radius_m: f64, ca_half_length_m: f64) -> Result<Self, JunctionError> {
        let g = Self { roads, cz_radius_m, ca_half_length_m };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), JunctionError> {
        if self.roads < 2 {
            return Err(JunctionError::Geometry(format!("need at least 2 roads, got {}", self.roads)));
        }
        if !(self.ca_half_length_m.is_finite() && self.ca_half_length_m > 0.0) {
            return Err(JunctionError::Geometry("ca_half_length_m must be positive".into()));
        }
        if !(self.cz_radius_m.is_finite() && self.cz_radius_m > self.ca_half_length_m) {
            return Err(JunctionError::Geometry(
                "cz_radius_m must exceed ca_half_length_m".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: String,
    pub length_m: f64,
    pub entry_road: u32,
    pub exit_road: u32,
}

impl VehicleSpec {
    pub fn new(id: impl Into<String>, length_m: f64) -> Result<Self, JunctionError> {
        let spec = Self { id: id.into(), length_m, entry_road: 1, exit_road: 3 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), JunctionError> {
        if !(self.length_m.is_finite() && self.length_m > 0.0) {
            return Err(JunctionError::Vehicle(format!("{}: length must be positive", self.id)));
        }
        Ok(())
    }
}

/// Crossing ranks keyed by vehicle id; rank 1 crosses first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatoonOrder {
    ids: Vec<String>,
    ranks: BTreeMap<String, usize>,
}

impl PlatoonOrder {
    /// `ids_by_rank[k]` gets rank `k + 1`; `ids` gives the caller's index order.
    fn from_ranked(ids: Vec<String>, ids_by_rank: &[String]) -> Self {
        let ranks = ids_by_rank.iter().enumerate().map(|(k, id)| (id.clone(), k + 1)).collect();
        Self { ids, ranks }
    }

    pub fn rank(&self, id: &str) -> Option<usize> {
        self.ranks.get(id).copied()
    }

    pub fn rank_at(&self, index: usize) -> usize {
        self.ranks[&self.ids[index]]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Caller-order indices sorted by ascending rank.
    pub fn indices_by_rank(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ids.len()).collect();
        idx.sort_by_key(|&i| self.rank_at(i));
        idx
    }

    pub fn ids_by_rank(&self) -> Vec<String> {
        self.indices_by_rank().into_iter().map(|i| self.ids[i].clone()).collect()
    }

    /// Moves `id` to rank 1, keeping the relative order of everyone else.
    pub fn with_priority(&self, id: &str) -> Self {
        if !self.ranks.contains_key(id) {
            return self.clone();
        }
        let mut ranked = self.ids_by_rank();
        ranked.retain(|x| x != id);
        ranked.insert(0, id.to_string());
        Self::from_ranked(self.ids.clone(), &ranked)
    }
}

pub fn progress_from_distance(distance_to_center: f64, approaching: bool) -> Result<f64, JunctionError> {
    if !(distance_to_center >= 0.0) {
        return Err(JunctionError::NegativeDistance(distance_to_center));
    }
    Ok(if approaching { -distance_to_center } else { distance_to_center })
}

/// Rank 1 goes to the smallest `|p|`; ties go to the lexicographically
/// smaller id.
pub fn assign_crossing_order(states: &[(String, VehicleState)]) -> PlatoonOrder {
    let ids: Vec<String> = states.iter().map(|(id, _)| id.clone()).collect();
    let mut sorted: Vec<&(String, VehicleState)> = states.iter().collect();
    sorted.sort_by(|a, b| {
        a.1.progress_m
            .abs()
            .total_cmp(&b.1.progress_m.abs())
            .then_with(|| a.0.cmp(&b.0))
    });
    let ranked: Vec<String> = sorted.into_iter().map(|(id, _)| id.clone()).collect();
    PlatoonOrder::from_ranked(ids, &ranked)
}

pub fn in_cooperation_zone(state: &VehicleState, geom: &JunctionGeometry) -> bool {
    state.progress_m.abs() <= geom.cz_radius_m
}

/// True while any part of the vehicle body lies inside the CA.
pub fn ca_occupancy(state: &VehicleState, spec: &VehicleSpec, geom: &JunctionGeometry) -> bool {
    occupies(state.progress_m, spec.length_m, geom)
}

pub(crate) fn occupies(progress_m: f64, length_m: f64, geom: &JunctionGeometry) -> bool {
    let c = geom.ca_half_length_m;
    progress_m > -c - length_m && progress_m < c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionViolation {
    pub time_s: f64,
    pub first: String,
    pub second: String,
}

/// Every time sample at which two or more vehicles share the CA.
///
/// `series[k]` is vehicle `specs[k]`'s progress on the shared grid `times`.
pub fn mutual_exclusion_violations(
    times: &[f64],
    specs: &[VehicleSpec],
    series: &[Vec<f64>],
    geom: &JunctionGeometry,
) -> Result<Vec<ExclusionViolation>, JunctionError> {
    if specs.len() != series.len() {
        return Err(JunctionError::MismatchedGrid { expected: specs.len(), got: series.len() });
    }
    for s in series {
        if s.len() != times.len() {
            return Err(JunctionError::MismatchedGrid { expected: times.len(), got: s.len() });
        }
    }
    let mut out = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let inside: Vec<usize> = (0..specs.len())
            .filter(|&i| occupies(series[i][k], specs[i].length_m, geom))
            .collect();
        for (a, &i) in inside.iter().enumerate() {
            for &j in &inside[a + 1..] {
                out.push(ExclusionViolation {
                    time_s: t,
                    first: specs[i].id.clone(),
                    second: specs[j].id.clone(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionClass {
    Touches,
    Enters,
    Avoids,
}

impl std::fmt::Display for CollisionClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CollisionClass::Touches => "touches",
            CollisionClass::Enters => "enters",
            CollisionClass::Avoids => "avoids",
        })
    }
}

/// Classifies the `(p_lead, p_follow)` curve against the rectangle of
/// positions where both vehicles occupy the CA.
pub fn collision_region_trace(
    p_lead: &[f64],
    p_follow: &[f64],
    lead: &VehicleSpec,
    follow: &VehicleSpec,
    geom: &JunctionGeometry,
) -> Result<CollisionClass, JunctionError> {
    if p_lead.len() != p_follow.len() {
        return Err(JunctionError::MismatchedGrid { expected: p_lead.len(), got: p_follow.len() });
    }
    let c = geom.ca_half_length_m;
    let (x0, x1) = (-c - lead.length_m, c);
    let (y0, y1) = (-c - follow.length_m, c);
    let mut min_dist = f64::INFINITY;
    for (&x, &y) in p_lead.iter().zip(p_follow) {
        if x > x0 && x < x1 && y > y0 && y < y1 {
            return Ok(CollisionClass::Enters);
        }
        let dx = (x0 - x).max(0.0).max(x - x1);
        let dy = (y0 - y).max(0.0).max(y - y1);
        min_dist = min_dist.min(dx.hypot(dy));
    }
    Ok(if min_dist <= COLLISION_TOUCH_TOLERANCE_M {
        CollisionClass::Touches
    } else {
        CollisionClass::Avoids
    })
}
