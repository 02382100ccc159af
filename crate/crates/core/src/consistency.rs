//! Consistency monitoring of neighbors via sign-randomness of inter-vehicle residuals.
//!
//! Each observer predicts a neighbor's next state under the primary control law,
//! feeds the signs of the prediction residual into CUSIGN statistics, tracks the
//! resulting alarm rates with a recursive estimator, and flags the neighbor when a
//! rate stays outside its confidence band.

use alloc::collections::{BTreeMap, BTreeSet};
use nalgebra::{DMatrix, DVector, Vector4};

use crate::dynamics::{Discrete, StateVector};
use crate::error::{config_err, Error, Result};
use crate::formation::{primary_control, Broadcast, SwarmParams, VehicleId};
use crate::stats::{two_sided_z, TieBreaker};
use crate::Vec2;

/// Smallest allowed pseudo-window.
pub const MIN_WINDOW: u32 = 10;

/// Pseudo-window length `ℓ` of the recursive rate estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoWindow(u32);

impl PseudoWindow {
    pub fn new(len: u32) -> Result<Self> {
        if len < MIN_WINDOW {
            return Err(config_err!("pseudo-window must be at least {MIN_WINDOW}, got {len}"));
        }
        Ok(Self(len))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

/// `Â' = Â + (ζ − Â)/ℓ`.
pub fn mre_update(rate: f64, alarm: bool, window: PseudoWindow) -> f64 {
    let z = if alarm { 1.0 } else { 0.0 };
    rate + (z - rate) / window.0 as f64
}

/// Mean absorption time from state 0 of the one-sided sign accumulator, as a vector
/// over all transient states `0..tau`, for step-up probability `p_plus`.
pub fn mean_absorption_times(tau: u32, p_plus: f64) -> Result<DVector<f64>> {
    if tau == 0 {
        return Err(config_err!("CUSIGN threshold tau must be at least 1"));
    }
    let t = tau as usize;
    let p_minus = 1.0 - p_plus;
    let mut q = DMatrix::<f64>::zeros(t, t);
    q[(0, 0)] = p_minus;
    for s in 0..t {
        if s + 1 < t {
            q[(s, s + 1)] = p_plus;
        }
        if s > 0 {
            q[(s, s - 1)] = p_minus;
        }
    }
    let m = DMatrix::<f64>::identity(t, t) - q;
    m.lu().solve(&DVector::from_element(t, 1.0)).ok_or(Error::Singular("I - Q in alarm-rate Markov chain"))
}

/// Expected alarm rate `E[A] = 1/μ₁` under fair signs.
pub fn expected_alarm_rate(tau: u32) -> Result<f64> {
    expected_alarm_rate_biased(tau, 0.5)
}

/// Expected alarm rate of the upper statistic when `P(sgn = +1) = p_plus`.
pub fn expected_alarm_rate_biased(tau: u32, p_plus: f64) -> Result<f64> {
    let mu = mean_absorption_times(tau, p_plus)?;
    Ok(1.0 / mu[0])
}

/// `Var[A] = θ·E(1 − E)/(2ℓ − 1)`.
pub fn alarm_rate_variance(expected: f64, window: PseudoWindow, theta: f64) -> f64 {
    theta * expected * (1.0 - expected) / (2.0 * window.0 as f64 - 1.0)
}

/// Two-sided confidence band around an expected rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBounds {
    pub expected_rate: f64,
    pub rate_variance: f64,
    pub alpha: f64,
    pub omega_minus: f64,
    pub omega_plus: f64,
}

impl DetectionBounds {
    pub fn contains(&self, rate: f64) -> bool {
        rate >= self.omega_minus && rate <= self.omega_plus
    }
}

/// `Ω± = E ± |Φ⁻¹(α/2)|·√Var`, clamped to `[0, 1]`.
pub fn detection_bounds(expected: f64, variance: f64, alpha: f64) -> DetectionBounds {
    let half = two_sided_z(alpha) * libm::sqrt(variance.max(0.0));
    DetectionBounds {
        expected_rate: expected,
        rate_variance: variance,
        alpha,
        omega_minus: (expected - half).clamp(0.0, 1.0),
        omega_plus: (expected + half).clamp(0.0, 1.0),
    }
}

/// Configuration shared by every CUSIGN monitor in a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CusignConfig {
    pub tau: u32,
    pub window: PseudoWindow,
    pub theta: f64,
    pub alpha: f64,
}

impl CusignConfig {
    pub fn new(tau: u32, window: u32, theta: f64, alpha: f64) -> Result<Self> {
        if tau == 0 {
            return Err(config_err!("monitor.tau must be at least 1"));
        }
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(config_err!("monitor.theta must be finite and positive, got {theta}"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(config_err!("monitor.alpha must lie in (0, 1), got {alpha}"));
        }
        Ok(Self { tau, window: PseudoWindow::new(window)?, theta, alpha })
    }

    pub fn bounds(&self) -> Result<DetectionBounds> {
        let e = expected_alarm_rate(self.tau)?;
        Ok(detection_bounds(e, alarm_rate_variance(e, self.window, self.theta), self.alpha))
    }
}

/// CUSIGN statistics and alarm-rate estimates for one `(observer, target, element)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CusignMonitor {
    pub observer: VehicleId,
    pub target: VehicleId,
    /// 0-based residual element.
    pub element: usize,
    pub s_plus: i32,
    pub s_minus: i32,
    pub tau: u32,
    pub alarm_rate_plus: f64,
    pub alarm_rate_minus: f64,
    pub window: PseudoWindow,
    pub theta: f64,
    /// Consecutive steps each rate has spent outside the band.
    pub streak_plus: u32,
    pub streak_minus: u32,
    expected: f64,
    tie: TieBreaker,
}

impl CusignMonitor {
    pub fn new(observer: VehicleId, target: VehicleId, element: usize, cfg: &CusignConfig, seed: u64) -> Result<Self> {
        let expected = expected_alarm_rate(cfg.tau)?;
        Ok(Self {
            observer,
            target,
            element,
            s_plus: 0,
            s_minus: 0,
            tau: cfg.tau,
            alarm_rate_plus: expected,
            alarm_rate_minus: expected,
            window: cfg.window,
            theta: cfg.theta,
            streak_plus: 0,
            streak_minus: 0,
            expected,
            tie: TieBreaker::keyed(&[seed, observer.0 as u64, target.0 as u64, element as u64]),
        })
    }

    /// Restores the freshly-initialized statistics (the tie coin keeps its position).
    pub fn reset(&mut self) {
        self.s_plus = 0;
        self.s_minus = 0;
        self.alarm_rate_plus = self.expected;
        self.alarm_rate_minus = self.expected;
        self.streak_plus = 0;
        self.streak_minus = 0;
    }

    /// Accumulates one residual sign; returns `(ζ⁺, ζ⁻)` and updates both rates.
    pub fn step(&mut self, r: f64) -> (bool, bool) {
        let s = self.tie.sign(r);
        let tau = self.tau as i32;
        self.s_plus = (self.s_plus + s).max(0);
        self.s_minus = (self.s_minus + s).min(0);
        let zp = self.s_plus == tau;
        if zp {
            self.s_plus = 0;
        }
        let zm = self.s_minus == -tau;
        if zm {
            self.s_minus = 0;
        }
        self.alarm_rate_plus = mre_update(self.alarm_rate_plus, zp, self.window);
        self.alarm_rate_minus = mre_update(self.alarm_rate_minus, zm, self.window);
        (zp, zm)
    }

    /// Updates the out-of-band streaks against `bounds`.
    pub fn track(&mut self, bounds: &DetectionBounds) {
        self.streak_plus = if bounds.contains(self.alarm_rate_plus) { 0 } else { self.streak_plus + 1 };
        self.streak_minus = if bounds.contains(self.alarm_rate_minus) { 0 } else { self.streak_minus + 1 };
    }

    pub fn out_of_band(&self, bounds: &DetectionBounds) -> bool {
        !bounds.contains(self.alarm_rate_plus) || !bounds.contains(self.alarm_rate_minus)
    }
}

/// Outcome of a consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Consistent,
    Inconsistent,
}

/// Inconsistent iff some alarm rate has been outside the band for `debounce`
/// consecutive updates. Call after [`CusignMonitor::track`].
pub fn check_consistency<'a>(monitors: impl IntoIterator<Item = &'a CusignMonitor>, debounce: u32) -> Verdict {
    let hit = monitors.into_iter().any(|m| m.streak_plus.max(m.streak_minus) >= debounce.max(1));
    if hit {
        Verdict::Inconsistent
    } else {
        Verdict::Consistent
    }
}

/// Reason a monitor update was skipped for this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorSkip {
    /// A member of the broadcast neighbor set is outside the observer's range.
    OutOfRange(VehicleId),
    /// No broadcast from a member of the neighbor set was received.
    MissingContext(VehicleId),
    /// No previous broadcast from the target itself.
    NoHistory,
}

/// Reconstructs the input a neighbor applied under the primary control law.
///
/// `target_prev` is the target's broadcast from the step the input was computed
/// at; `neighbor_set` is the set the target reports having used; `context` maps
/// each vehicle to its position as broadcast in that same step (including the
/// observer's own). Every member of the set must be the observer itself or within
/// `comm_set`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_neighbor_input(
    observer: VehicleId,
    target_prev: &Broadcast,
    neighbor_set: &BTreeSet<VehicleId>,
    context: &BTreeMap<VehicleId, Vec2>,
    comm_set: &BTreeSet<VehicleId>,
    goal: Option<Vec2>,
    params: &SwarmParams,
) -> core::result::Result<Vec2, MonitorSkip> {
    let mut neighbors = alloc::vec::Vec::with_capacity(neighbor_set.len());
    for h in neighbor_set {
        if *h != observer && !comm_set.contains(h) {
            return Err(MonitorSkip::OutOfRange(*h));
        }
        neighbors.push(*context.get(h).ok_or(MonitorSkip::MissingContext(*h))?);
    }
    Ok(primary_control(&target_prev.state_estimate, &neighbors, &target_prev.obstacles, goal, params))
}

/// `x̄ = A_d x̂_j + B_d u_ij`.
pub fn predict_neighbor_state(d: &Discrete, received: &StateVector, u: &Vec2) -> StateVector {
    d.step(received, u)
}

/// `r = x̂_j − x̄_ij`.
pub fn inter_vehicle_residual(received: &StateVector, predicted: &StateVector) -> Vector4<f64> {
    received.0 - predicted.0
}

/// Monte Carlo fit of the variance scaling `θ` for fair signs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaFit {
    pub theta: f64,
    pub mean_rate: f64,
    pub empirical_variance: f64,
    /// `E(1 − E)/(2ℓ − 1)`, the variance at `θ = 1`.
    pub nominal_variance: f64,
    pub samples: u64,
}

/// Runs one CUSIGN monitor on i.i.d. fair signs for `steps` updates and fits `θ`
/// as the ratio of the empirical variance of `Â⁺` to the nominal variance.
pub fn calibrate_theta<R: rand::Rng + ?Sized>(tau: u32, window: u32, steps: u64, rng: &mut R) -> Result<ThetaFit> {
    let cfg = CusignConfig::new(tau, window, 1.0, 0.5)?;
    let mut m = CusignMonitor::new(VehicleId(0), VehicleId(1), 0, &cfg, 0)?;
    let burn_in = 20 * window as u64;
    let (mut n, mut mean, mut m2) = (0u64, 0.0, 0.0);
    for k in 0..steps + burn_in {
        m.step(if rng.random::<bool>() { 1.0 } else { -1.0 });
        if k >= burn_in {
            // Welford
            n += 1;
            let d = m.alarm_rate_plus - mean;
            mean += d / n as f64;
            m2 += d * (m.alarm_rate_plus - mean);
        }
    }
    if n < 2 {
        return Err(config_err!("theta calibration needs at least 2 samples"));
    }
    let e = expected_alarm_rate(tau)?;
    let nominal = alarm_rate_variance(e, cfg.window, 1.0);
    let var = m2 / (n - 1) as f64;
    Ok(ThetaFit {
        theta: var / nominal,
        mean_rate: mean,
        empirical_variance: var,
        nominal_variance: nominal,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tau: u32) -> CusignConfig {
        CusignConfig::new(tau, 20, 1.0, 0.01).unwrap()
    }

    #[test]
    fn all_positive_fires_with_period_tau() {
        let mut m = CusignMonitor::new(VehicleId(0), VehicleId(1), 0, &cfg(3), 1).unwrap();
        let fired: alloc::vec::Vec<bool> = (0..9).map(|_| m.step(1.0).0).collect();
        assert_eq!(fired, [false, false, true, false, false, true, false, false, true]);
        assert!(m.alarm_rate_minus < m.expected);
    }

    #[test]
    fn alternating_signs_never_alarm() {
        let mut m = CusignMonitor::new(VehicleId(0), VehicleId(1), 0, &cfg(2), 1).unwrap();
        for k in 0..1000 {
            let (p, n) = m.step(if k % 2 == 0 { 1.0 } else { -1.0 });
            assert!(!p && !n);
            assert!(m.s_plus.abs() <= 1 && m.s_minus.abs() <= 1);
        }
    }

    #[test]
    fn mre_arithmetic() {
        let w = PseudoWindow::new(10).unwrap();
        assert!((mre_update(0.5, true, w) - 0.55).abs() < 1e-15);
        assert!(PseudoWindow::new(9).is_err());
    }

    #[test]
    fn expected_rate_anchors() {
        assert!((expected_alarm_rate(1).unwrap() - 0.5).abs() < 1e-12);
        assert!((expected_alarm_rate(2).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert!(expected_alarm_rate(0).is_err());
    }

    #[test]
    fn variance_and_bounds_arithmetic() {
        let w = PseudoWindow::new(20).unwrap();
        let v = alarm_rate_variance(1.0 / 6.0, w, 1.0);
        assert!((v - (1.0 / 6.0) * (5.0 / 6.0) / 39.0).abs() < 1e-15);
        assert_eq!(alarm_rate_variance(0.0, w, 1.0), 0.0);
        assert_eq!(alarm_rate_variance(1.0, w, 1.0), 0.0);
        let b = detection_bounds(1.0 / 6.0, v, 0.01);
        assert!((b.omega_minus - 0.0129).abs() < 1e-3);
        assert!((b.omega_plus - 0.3204).abs() < 1e-3);
        let b = detection_bounds(1.0 / 6.0, v, 1.0 - 1e-16);
        assert!((b.omega_plus - b.omega_minus).abs() < 1e-12);
    }

    #[test]
    fn debounce_requires_persistence() {
        let c = cfg(2);
        let b = c.bounds().unwrap();
        let mut m = CusignMonitor::new(VehicleId(0), VehicleId(1), 0, &c, 1).unwrap();
        m.track(&b);
        assert_eq!(check_consistency([&m], 5), Verdict::Consistent);
        let mut verdicts = alloc::vec::Vec::new();
        for _ in 0..200 {
            m.step(1.0);
            m.track(&b);
            verdicts.push(check_consistency([&m], 5));
        }
        let first = verdicts.iter().position(|v| *v == Verdict::Inconsistent).unwrap();
        assert!(first >= 5);
    }
}
