//! Man-in-the-middle tampering of broadcasts in flight.

use alloc::collections::BTreeSet;
use core::f64::consts::PI;

use nalgebra::{SVector, Vector4};

use crate::error::{config_err, Result};
use crate::formation::{Broadcast, VehicleId};
use crate::Vec2;

/// Time profile of an additive spoof, evaluated relative to the attack start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpoofSchedule<const D: usize> {
    Constant(SVector<f64, D>),
    /// `offset + rate·t`.
    Ramp {
        offset: SVector<f64, D>,
        rate: SVector<f64, D>,
    },
    /// `amplitude·sin(2πt/period + phase)`.
    Sinusoid {
        amplitude: SVector<f64, D>,
        period: f64,
        phase: f64,
    },
}

impl<const D: usize> SpoofSchedule<D> {
    pub fn zero() -> Self {
        Self::Constant(SVector::zeros())
    }

    pub fn value(&self, t: u64) -> SVector<f64, D> {
        let t = t as f64;
        match self {
            Self::Constant(c) => *c,
            Self::Ramp { offset, rate } => offset + rate * t,
            Self::Sinusoid { amplitude, period, phase } => amplitude * libm::sin(2.0 * PI * t / period + phase),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Constant(c) => c.iter().all(|v| *v == 0.0),
            Self::Ramp { offset, rate } => offset.iter().chain(rate.iter()).all(|v| *v == 0.0),
            Self::Sinusoid { amplitude, .. } => amplitude.iter().all(|v| *v == 0.0),
        }
    }

    /// Limits every per-step increment (including the jump at onset) to `cap[e]`
    /// in element `e`.
    pub fn clipped(&self, cap: &SVector<f64, D>) -> Self {
        let clamp = |v: &SVector<f64, D>| v.zip_map(cap, |x, c| x.clamp(-c, c));
        match self {
            Self::Constant(c) => Self::Constant(clamp(c)),
            Self::Ramp { offset, rate } => Self::Ramp { offset: clamp(offset), rate: clamp(rate) },
            Self::Sinusoid { amplitude, period, phase } => {
                let onset = libm::fabs(libm::sin(*phase));
                let swing = if *period >= 2.0 { 2.0 * libm::sin(PI / period) } else { 2.0 };
                let worst = onset.max(swing);
                let amplitude = amplitude.zip_map(cap, |a, c| {
                    let inc = libm::fabs(a) * worst;
                    if inc > c {
                        a * c / inc
                    } else {
                        a
                    }
                });
                Self::Sinusoid { amplitude, period: *period, phase: *phase }
            }
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let finite = |v: &SVector<f64, D>| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Self::Constant(c) => finite(c),
            Self::Ramp { offset, rate } => finite(offset) && finite(rate),
            Self::Sinusoid { amplitude, period, phase } => finite(amplitude) && *period > 0.0 && phase.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(config_err!("attack {what} schedule has non-finite values or non-positive period"))
        }
    }
}

/// One persistent MITM attack on a vehicle's outbound broadcasts.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub target: VehicleId,
    pub start_step: u64,
    /// Last tampered step (inclusive).
    pub end_step: u64,
    pub xi_x: SpoofSchedule<4>,
    pub xi_o: SpoofSchedule<2>,
    pub remove_ids: BTreeSet<VehicleId>,
    pub add_ids: BTreeSet<VehicleId>,
    /// Caps each spoof increment at this many residual standard deviations.
    pub stealth_scale: Option<f64>,
}

impl AttackSpec {
    /// An attack that changes nothing.
    pub fn identity(target: VehicleId) -> Self {
        Self {
            target,
            start_step: 0,
            end_step: u64::MAX,
            xi_x: SpoofSchedule::zero(),
            xi_o: SpoofSchedule::zero(),
            remove_ids: BTreeSet::new(),
            add_ids: BTreeSet::new(),
            stealth_scale: None,
        }
    }

    pub fn validate(&self, n_vehicles: usize) -> Result<()> {
        if self.target.0 >= n_vehicles {
            return Err(config_err!("attack target {} is not a vehicle id (N = {n_vehicles})", self.target));
        }
        if self.end_step < self.start_step {
            return Err(config_err!("attack on {} ends before it starts", self.target));
        }
        if let Some(h) = self.remove_ids.intersection(&self.add_ids).next() {
            return Err(config_err!("attack on {}: vehicle {h} is both removed and added", self.target));
        }
        if self.add_ids.contains(&self.target) {
            return Err(config_err!("attack on {}: the target cannot be added to its own neighbor set", self.target));
        }
        for id in self.remove_ids.iter().chain(self.add_ids.iter()) {
            if id.0 >= n_vehicles {
                return Err(config_err!("attack on {}: vehicle id {id} out of range", self.target));
            }
        }
        if let Some(s) = self.stealth_scale {
            if !(s > 0.0) {
                return Err(config_err!("attack on {}: stealth_scale must be positive", self.target));
            }
        }
        self.xi_x.validate("state")?;
        self.xi_o.validate("obstacle")
    }

    pub fn active_at(&self, step: u64) -> bool {
        step >= self.start_step && step <= self.end_step
    }
}

/// Returns the message receivers see at `step`.
///
/// `residual_sigma` holds the per-element residual standard deviations used by
/// the stealth cap. Messages from other senders or outside the window pass
/// through unchanged.
pub fn apply_mitm(msg: &Broadcast, spec: &AttackSpec, step: u64, residual_sigma: &Vector4<f64>) -> Broadcast {
    if msg.sender != spec.target || !spec.active_at(step) {
        return msg.clone();
    }
    let t = step - spec.start_step;
    let (xi_x, xi_o) = match spec.stealth_scale {
        Some(scale) => {
            let cap_x = residual_sigma * scale;
            let cap_o = Vec2::new(cap_x[0], cap_x[1]);
            (spec.xi_x.clipped(&cap_x).value(t), spec.xi_o.clipped(&cap_o).value(t))
        }
        None => (spec.xi_x.value(t), spec.xi_o.value(t)),
    };
    let mut out = msg.clone();
    out.state_estimate.0 += xi_x;
    for o in out.obstacles.iter_mut() {
        *o += xi_o;
    }
    out.neighbor_set = msg
        .neighbor_set
        .difference(&spec.remove_ids)
        .chain(spec.add_ids.iter())
        .copied()
        .filter(|h| *h != msg.sender)
        .collect();
    out
}
