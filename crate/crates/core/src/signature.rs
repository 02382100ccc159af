//! Hidden-signature detection and covert object localization.
//!
//! A vehicle that switches to the hidden spring law decays its speed along a
//! predictable curve. An observer tabulates that curve once ([`DecayMap`]),
//! compares each received speed with the one-step prediction, and checks whether
//! the residual signs switch at the rate expected of pure noise.

use alloc::vec::Vec;

use crate::consistency::{detection_bounds, mre_update, DetectionBounds, PseudoWindow};
use crate::dynamics::{Discrete, StateVector};
use crate::error::{config_err, Result};
use crate::formation::{hidden_control, HiddenParams, VehicleId};
use crate::stats::TieBreaker;
use crate::Vec2;

const MAX_DECAY_STEPS: usize = 2_000_000;

/// Canonical speed-decay table of the hidden closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayMap {
    /// `(distance to object, speed)` per step, from peak speed onward.
    pub samples: Vec<(f64, f64)>,
    /// Speeds over which both lookups are defined and single-valued.
    pub valid_speed_range: (f64, f64),
    /// Rest distance the trajectory converges to.
    pub rest_distance: f64,
    // ascending-speed views of `samples`
    speeds: Vec<f64>,
    next_speeds: Vec<f64>,
    distances: Vec<f64>,
}

impl DecayMap {
    /// Integrates the noise-free hidden loop radially from `start_distance` with
    /// inward speed `v_entry` until the speed falls below `stop_speed` near rest.
    ///
    /// Lookups are restricted to speeds in `[v_min, peak]`.
    pub fn build(
        d: &Discrete,
        hp: &HiddenParams,
        start_distance: f64,
        v_entry: f64,
        v_min: f64,
        stop_speed: f64,
    ) -> Result<Self> {
        if !(start_distance > 0.0) || !(v_entry >= 0.0) || !(stop_speed > 0.0) {
            return Err(config_err!(
                "decay map needs positive start distance and stop speed and non-negative entry speed"
            ));
        }
        let object = Vec2::zeros();
        let mut x = StateVector::new(Vec2::new(start_distance, 0.0), Vec2::new(-v_entry, 0.0));
        let mut traj: Vec<(f64, f64)> = alloc::vec![(start_distance, v_entry)];
        let settle = 1e-3 * hp.l0_h.max(1e-9);
        let mut converged = false;
        for _ in 0..MAX_DECAY_STEPS {
            let u = hidden_control(&x, object, hp);
            x = d.step(&x, &u);
            if !x.is_finite() {
                break;
            }
            let (l, s) = (x.position().norm(), x.speed());
            traj.push((l, s));
            if s < stop_speed && (l - hp.l0_h).abs() < settle {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(config_err!(
                "hidden spring-damper loop (k_h={}, gamma_h={}, dt={}) did not settle; parameters are unstable",
                hp.k_h,
                hp.gamma_h,
                d.dt
            ));
        }

        // keep the segment after peak speed on which speed and distance both decrease
        let peak = traj.iter().enumerate().max_by(|a, b| a.1 .1.total_cmp(&b.1 .1)).map(|(i, _)| i).unwrap_or(0);
        let mut end = peak + 1;
        while end < traj.len() && traj[end].1 < traj[end - 1].1 && traj[end].0 <= traj[end - 1].0 {
            end += 1;
        }
        let samples: Vec<(f64, f64)> = traj[peak..end].to_vec();
        if samples.len() < 3 {
            return Err(config_err!("hidden decay curve has no usable monotone segment"));
        }
        let v_peak = samples[0].1;
        let v_floor = samples[samples.len() - 1].1;
        let lo = v_min.max(v_floor);
        if lo >= v_peak {
            return Err(config_err!("signature v_min {v_min} is not below the peak hidden speed {v_peak}"));
        }

        let n = samples.len();
        let speeds: Vec<f64> = samples.iter().rev().map(|s| s.1).collect();
        let distances: Vec<f64> = samples.iter().rev().map(|s| s.0).collect();
        let next_speeds: Vec<f64> = (0..n).rev().map(|t| samples[(t + 1).min(n - 1)].1).collect();
        Ok(Self { samples, valid_speed_range: (lo, v_peak), rest_distance: hp.l0_h, speeds, next_speeds, distances })
    }

    pub fn in_range(&self, speed: f64) -> bool {
        speed >= self.valid_speed_range.0 && speed <= self.valid_speed_range.1
    }

    fn interp(&self, ys: &[f64], s: f64) -> f64 {
        let xs = &self.speeds;
        let k = xs.partition_point(|&x| x < s);
        if k == 0 {
            return ys[0];
        }
        if k >= xs.len() {
            return ys[xs.len() - 1];
        }
        let (x0, x1) = (xs[k - 1], xs[k]);
        let w = if x1 > x0 { (s - x0) / (x1 - x0) } else { 0.0 };
        ys[k - 1] + w * (ys[k] - ys[k - 1])
    }

    /// One-step speed prediction `h(s)`.
    pub fn next_speed(&self, speed: f64) -> f64 {
        self.interp(&self.next_speeds, speed)
    }

    /// Distance to the object at which the canonical trajectory has speed `s`.
    pub fn distance(&self, speed: f64) -> f64 {
        self.interp(&self.distances, speed)
    }
}

/// `r̆ = ‖v̂^(k)‖ − h(‖v̂^(k−1)‖)`, or `None` when either speed is outside the valid range.
pub fn hidden_velocity_residual(speed: f64, prev_speed: f64, map: &DecayMap) -> Option<f64> {
    if map.in_range(speed) && map.in_range(prev_speed) {
        Some(speed - map.next_speed(prev_speed))
    } else {
        None
    }
}

/// `Var[H] = 1/(4(2ℓ − 1))`; band `1/2 ± |Φ⁻¹(α/2)|·√Var`.
pub fn signature_bounds(window: PseudoWindow, alpha_h: f64) -> DetectionBounds {
    let var = 1.0 / (4.0 * (2.0 * window.get() as f64 - 1.0));
    detection_bounds(0.5, var, alpha_h)
}

/// Result of feeding one received speed to a [`SignatureMonitor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignatureUpdate {
    /// Speed outside the valid range or no previous speed.
    Skipped,
    /// First residual after activation or a skip: sign recorded, no switch test.
    Primed {
        residual: f64,
    },
    Updated {
        residual: f64,
        switched: bool,
    },
}

/// Sign-switch-rate tracker for one `(observer, flagged target)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureMonitor {
    pub observer: VehicleId,
    pub target: VehicleId,
    pub last_sign: Option<i32>,
    pub switch_rate: f64,
    pub window: PseudoWindow,
    pub bounds: DetectionBounds,
    pub active_since: u64,
    pub map: DecayMap,
    /// Switch tests performed so far.
    pub updates: u32,
    /// Consecutive post-burn-in tests with the rate inside the band.
    pub in_band_streak: u32,
    pub last_direction: Option<Vec2>,
    prev_speed: Option<f64>,
    tie: TieBreaker,
}

impl SignatureMonitor {
    pub fn new(
        observer: VehicleId,
        target: VehicleId,
        window: PseudoWindow,
        alpha_h: f64,
        active_since: u64,
        map: DecayMap,
        seed: u64,
    ) -> Self {
        Self {
            observer,
            target,
            last_sign: None,
            switch_rate: 0.5,
            window,
            bounds: signature_bounds(window, alpha_h),
            active_since,
            map,
            updates: 0,
            in_band_streak: 0,
            last_direction: None,
            prev_speed: None,
            tie: TieBreaker::keyed(&[seed, observer.0 as u64, target.0 as u64, 0x5157]),
        }
    }

    /// Applies one switch test with residual `r`.
    pub fn sign_switch_step(&mut self, r: f64) -> Option<bool> {
        let s = self.tie.sign(r);
        let out = self.last_sign.map(|prev| {
            let switched = s == -prev;
            self.switch_rate = mre_update(self.switch_rate, switched, self.window);
            self.updates += 1;
            if self.updates > self.window.get() {
                if self.bounds.contains(self.switch_rate) {
                    self.in_band_streak += 1;
                } else {
                    self.in_band_streak = 0;
                }
            }
            switched
        });
        self.last_sign = Some(s);
        out
    }

    /// Ingests the target's received velocity estimate.
    pub fn observe(&mut self, velocity: Vec2) -> SignatureUpdate {
        let speed = velocity.norm();
        if self.map.in_range(speed) {
            self.last_direction = Some(velocity / speed);
        }
        let prev = self.prev_speed.replace(speed);
        let Some(r) = prev.and_then(|p| hidden_velocity_residual(speed, p, &self.map)) else {
            return SignatureUpdate::Skipped;
        };
        match self.sign_switch_step(r) {
            None => SignatureUpdate::Primed { residual: r },
            Some(switched) => SignatureUpdate::Updated { residual: r, switched },
        }
    }

    /// Band membership held for `dwell` consecutive tests after a burn-in of `ℓ` tests.
    pub fn detect(&self, dwell: u32) -> bool {
        self.in_band_streak >= dwell.max(1)
    }
}

/// `p̂_p = p̂_j + f(‖v̂_j‖)·v̂_j/‖v̂_j‖`.
///
/// Below the valid speed range the travel direction is unreliable, so the last
/// valid direction is used with the rest distance. Returns `None` if no
/// direction has ever been observed.
pub fn estimate_object_position(
    position: Vec2,
    velocity: Vec2,
    map: &DecayMap,
    last_direction: Option<Vec2>,
) -> Option<Vec2> {
    let speed = velocity.norm();
    if speed >= map.valid_speed_range.0 && speed > 0.0 {
        let s = speed.min(map.valid_speed_range.1);
        Some(position + velocity * (map.distance(s) / speed))
    } else {
        last_direction.map(|d| position + d * map.rest_distance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::discretize_dt;

    fn map() -> DecayMap {
        let d = discretize_dt(0.05).unwrap();
        let hp = HiddenParams { k_h: 0.5, gamma_h: 1.8, l0_h: 0.8 };
        DecayMap::build(&d, &hp, 3.0, 0.5, 0.02, 1e-6).unwrap()
    }

    #[test]
    fn lookups_are_monotone_and_end_at_rest() {
        let m = map();
        let (lo, hi) = m.valid_speed_range;
        assert!(lo < hi);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let s = hi - (hi - lo) * i as f64 / 100.0;
            let l = m.distance(s);
            assert!(l <= prev + 1e-12);
            assert!(m.next_speed(s) <= s);
            prev = l;
        }
        let tail = m.samples.last().unwrap();
        assert!((tail.0 - 0.8).abs() < 1e-3);
        assert!((m.distance(tail.1) - 0.8).abs() < 1e-3);
    }

    #[test]
    fn exact_model_gives_zero_residual() {
        let m = map();
        let t = m.samples.len() / 4;
        let (s0, s1) = (m.samples[t].1, m.samples[t + 1].1);
        assert!(hidden_velocity_residual(s1, s0, &m).unwrap().abs() < 1e-12);
        // a vehicle holding its speed is above the decay prediction
        assert!(hidden_velocity_residual(s0, s0, &m).unwrap() > 0.0);
        assert!(hidden_velocity_residual(1e-5, s0, &m).is_none());
    }

    #[test]
    fn switch_rate_extremes() {
        let w = PseudoWindow::new(20).unwrap();
        let mut a = SignatureMonitor::new(VehicleId(0), VehicleId(1), w, 0.01, 0, map(), 3);
        let mut c = a.clone();
        for k in 0..400 {
            a.sign_switch_step(if k % 2 == 0 { 1.0 } else { -1.0 });
            c.sign_switch_step(1.0);
        }
        assert!(a.switch_rate > 0.999);
        assert!(c.switch_rate < 0.001);
        assert!(!a.detect(30) && !c.detect(30));
    }

    #[test]
    fn bounds_arithmetic() {
        let b = signature_bounds(PseudoWindow::new(20).unwrap(), 0.01);
        assert!((b.rate_variance - 1.0 / 156.0).abs() < 1e-15);
        assert!(b.omega_minus < 0.5 && 0.5 < b.omega_plus);
    }

    #[test]
    fn fresh_monitor_not_detected() {
        let m = SignatureMonitor::new(VehicleId(0), VehicleId(1), PseudoWindow::new(20).unwrap(), 0.01, 0, map(), 3);
        assert!(!m.detect(30));
    }

    #[test]
    fn unstable_hidden_loop_rejected() {
        let d = discretize_dt(0.05).unwrap();
        let hp = HiddenParams { k_h: 0.5, gamma_h: -1.0, l0_h: 0.8 };
        assert!(DecayMap::build(&d, &hp, 3.0, 0.5, 0.02, 1e-6).is_err());
    }
}
