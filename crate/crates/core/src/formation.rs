//! Spring-damper control laws, proximity graphs, and range sensing.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::dynamics::StateVector;
use crate::error::{config_err, Result};
use crate::Vec2;

/// Index of a vehicle in the swarm (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VehicleId(pub usize);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Primary network parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwarmParams {
    pub k_v: f64,
    pub k_o: f64,
    pub k_g: f64,
    pub l0_v: f64,
    pub l0_o: f64,
    pub gamma_v: f64,
    pub delta_c: f64,
    pub delta_r: f64,
    /// Optional saturation on `‖u‖`.
    pub control_cap: Option<f64>,
}

impl SwarmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_v > 0.0) || !self.gamma_v.is_finite() {
            return Err(config_err!(
                "swarm.gamma_v = {} violates the requirement for damping coefficients that satisfy γ_v > 0",
                self.gamma_v
            ));
        }
        for (name, v) in [("k_v", self.k_v), ("k_o", self.k_o), ("k_g", self.k_g)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err!("swarm.{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in
            [("l0_v", self.l0_v), ("l0_o", self.l0_o), ("delta_c", self.delta_c), ("delta_r", self.delta_r)]
        {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err!("swarm.{name} must be finite and positive, got {v}"));
            }
        }
        if let Some(c) = self.control_cap {
            if !(c > 0.0) {
                return Err(config_err!("swarm.control_cap must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Parameters of the hidden spring toward a discovered object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenParams {
    pub k_h: f64,
    pub gamma_h: f64,
    pub l0_h: f64,
}

impl HiddenParams {
    pub fn validate(&self, swarm: &SwarmParams) -> Result<()> {
        if !(self.gamma_h > 0.0) || !self.gamma_h.is_finite() {
            return Err(config_err!("hidden.gamma_h must be finite and positive, got {}", self.gamma_h));
        }
        if !(self.k_h >= 0.0) || !self.k_h.is_finite() {
            return Err(config_err!("hidden.k_h must be finite and non-negative, got {}", self.k_h));
        }
        if !(self.l0_h > 0.0) || !self.l0_h.is_finite() {
            return Err(config_err!("hidden.l0_h must be finite and positive, got {}", self.l0_h));
        }
        if self.k_h == swarm.k_v && self.gamma_h == swarm.gamma_v {
            return Err(config_err!(
                "hidden (k_h, gamma_h) must differ from primary (k_v, gamma_v), otherwise the signature is not identifiable"
            ));
        }
        Ok(())
    }
}

/// Per-step message a vehicle transmits to everyone within range.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub sender: VehicleId,
    pub step: u64,
    pub state_estimate: StateVector,
    pub obstacles: Vec<Vec2>,
    /// Neighbor set behind the sender's most recent control input.
    pub neighbor_set: BTreeSet<VehicleId>,
}

/// Obstacle geometry as configured.
#[derive(Debug, Clone, PartialEq)]
pub enum Obstacle {
    /// Axis-aligned rectangle given by opposite corners.
    Rect {
        min: Vec2,
        max: Vec2,
    },
    Points(Vec<Vec2>),
}

impl Obstacle {
    /// Boundary points spaced at most `spacing` apart.
    pub fn rasterize(&self, spacing: f64) -> Vec<Vec2> {
        match self {
            Obstacle::Points(p) => p.clone(),
            Obstacle::Rect { min, max } => {
                let corners = [
                    Vec2::new(min.x, min.y),
                    Vec2::new(max.x, min.y),
                    Vec2::new(max.x, max.y),
                    Vec2::new(min.x, max.y),
                ];
                let mut out = Vec::new();
                for e in 0..4 {
                    let (a, b) = (corners[e], corners[(e + 1) % 4]);
                    let len = (b - a).norm();
                    let n = if len == 0.0 { 1 } else { libm::ceil(len / spacing).max(1.0) as usize };
                    for s in 0..n {
                        let p = a + (b - a) * (s as f64 / n as f64);
                        if out.last() != Some(&p) && out.first() != Some(&p) {
                            out.push(p);
                        }
                    }
                }
                out
            }
        }
    }
}

/// `C_i = { j ≠ i : ‖p_i − p_j‖ ≤ δ_c }`.
pub fn communication_set(positions: &[Vec2], i: VehicleId, delta_c: f64) -> BTreeSet<VehicleId> {
    let pi = positions[i.0];
    positions
        .iter()
        .enumerate()
        .filter(|&(j, pj)| j != i.0 && (pi - pj).norm() <= delta_c)
        .map(|(j, _)| VehicleId(j))
        .collect()
}

/// Gabriel-rule neighbor selection.
///
/// `j` is kept unless some other admissible vehicle `h` sees the segment `(i, j)`
/// under an obtuse angle. A witness exactly on the diameter circle (right angle)
/// does not remove the edge. Excluded vehicles are neither candidates nor
/// witnesses, and candidates without a known position are ignored.
pub fn gabriel_neighbors(
    i: VehicleId,
    candidates: &BTreeSet<VehicleId>,
    positions: &BTreeMap<VehicleId, Vec2>,
    excluded: &BTreeSet<VehicleId>,
) -> BTreeSet<VehicleId> {
    let Some(&pi) = positions.get(&i) else {
        return BTreeSet::new();
    };
    let admissible: Vec<(VehicleId, Vec2)> = candidates
        .iter()
        .filter(|j| **j != i && !excluded.contains(j))
        .filter_map(|j| positions.get(j).map(|p| (*j, *p)))
        .collect();
    admissible
        .iter()
        .filter(|(j, pj)| !admissible.iter().any(|(h, ph)| h != j && (pi - ph).dot(&(pj - ph)) < 0.0))
        .map(|(j, _)| *j)
        .collect()
}

/// Spring force on the point at `from` exerted by a spring attached at `to`.
///
/// Positive extension pulls `from` toward `to`. Coincident points yield zero.
pub fn spring(from: Vec2, to: Vec2, k: f64, rest: f64) -> Vec2 {
    let d = to - from;
    let l = d.norm();
    if l == 0.0 {
        return Vec2::zeros();
    }
    d * (k * (l - rest) / l)
}

fn saturate(u: Vec2, cap: Option<f64>) -> Vec2 {
    match cap {
        Some(c) if u.norm() > c => u * (c / u.norm()),
        _ => u,
    }
}

/// Primary spring-damper control.
///
/// Vehicle springs of rest length `l0_v` to each neighbor, obstacle springs of rest
/// length `l0_o` that push away from each sensed obstacle point, a zero-rest-length
/// goal spring, and velocity damping.
pub fn primary_control<'a>(
    own: &StateVector,
    neighbors: impl IntoIterator<Item = &'a Vec2>,
    obstacles: &[Vec2],
    goal: Option<Vec2>,
    params: &SwarmParams,
) -> Vec2 {
    let p = own.position();
    let mut u = Vec2::zeros();
    for q in neighbors {
        u += spring(p, *q, params.k_v, params.l0_v);
    }
    u += obstacle_force(p, obstacles, params);
    if let Some(g) = goal {
        u += spring(p, g, params.k_g, 0.0);
    }
    u -= own.velocity() * params.gamma_v;
    saturate(u, params.control_cap)
}

/// Sum of obstacle spring forces on a vehicle at `p`.
pub fn obstacle_force(p: Vec2, obstacles: &[Vec2], params: &SwarmParams) -> Vec2 {
    obstacles.iter().fold(Vec2::zeros(), |acc, o| acc + spring(p, *o, params.k_o, params.l0_o))
}

/// Hidden spring-damper control toward an object; neighbor and goal springs are detached.
pub fn hidden_control(own: &StateVector, object: Vec2, hp: &HiddenParams) -> Vec2 {
    spring(own.position(), object, hp.k_h, hp.l0_h) - own.velocity() * hp.gamma_h
}

/// Entities within sensing range, partitioned by kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sensed {
    pub obstacles: Vec<Vec2>,
    pub objects: Vec<Vec2>,
}

/// Range-limited 360° sensing; distance `delta_r` is inclusive.
pub fn sense(own: Vec2, obstacles: &[Vec2], objects: &[Vec2], delta_r: f64) -> Sensed {
    let within = |e: &&Vec2| (own - **e).norm() <= delta_r;
    Sensed {
        obstacles: obstacles.iter().filter(within).copied().collect(),
        objects: objects.iter().filter(within).copied().collect(),
    }
}
