//! Synchronous multi-vehicle simulation.
//!
//! [`World`] owns ground truth, noise streams, and the radio; each
//! [`VehicleAgent`] sees only its own measurement, its own range sensor, and the
//! broadcasts it receives. One call to [`World::run_step`] performs
//! estimate → sense → broadcast → tamper → monitor → decide → actuate.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use alloc::{format, vec};

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{apply_mitm, AttackSpec};
use crate::consistency::{
    check_consistency, estimate_neighbor_input, inter_vehicle_residual, predict_neighbor_state, CusignConfig,
    CusignMonitor, DetectionBounds, MonitorSkip, PseudoWindow, Verdict,
};
use crate::dynamics::{measure, step_dynamics, KalmanEstimator, KalmanFilter, LinearModel, NoiseShaper, StateVector};
use crate::error::{config_err, Error, Result};
use crate::formation::{
    communication_set, gabriel_neighbors, hidden_control, obstacle_force, primary_control, sense, Broadcast,
    HiddenParams, Obstacle, Sensed, SwarmParams, VehicleId,
};
use crate::signature::{estimate_object_position, DecayMap, SignatureMonitor, SignatureUpdate};
use crate::Vec2;

/// Control law a vehicle is currently following.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Primary,
    HiddenDiscoverer,
    HiddenFollower,
}

impl Mode {
    pub fn is_hidden(self) -> bool {
        self != Mode::Primary
    }

    pub fn code(self) -> u8 {
        match self {
            Mode::Primary => 0,
            Mode::HiddenDiscoverer => 1,
            Mode::HiddenFollower => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Primary => "primary",
            Mode::HiddenDiscoverer => "hidden_discoverer",
            Mode::HiddenFollower => "hidden_follower",
        }
    }
}

/// Runtime monitor settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorParams {
    /// When false no monitor runs and `R_i` stays empty.
    pub enabled: bool,
    pub tau: u32,
    pub window: u32,
    pub theta: f64,
    pub alpha: f64,
    /// Consecutive out-of-band updates before a neighbor is isolated.
    pub debounce: u32,
    /// Consecutive in-band switch tests needed for signature detection.
    pub dwell: u32,
    /// Signature significance level; defaults to `alpha`.
    pub alpha_h: Option<f64>,
    /// Residual elements monitored (0-based).
    pub elements: Vec<usize>,
    /// Lowest speed the signature monitor trusts.
    pub v_min: f64,
    /// Upper clamp on the entry speed of the canonical decay trajectory.
    pub cruise_speed_cap: f64,
    /// How long a signature-trusted vehicle stays exempt while the observer is primary.
    pub trust_hold_steps: u64,
}

impl Default for MonitorParams {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 2,
            window: 20,
            theta: 1.0,
            alpha: 0.01,
            debounce: 50,
            dwell: 30,
            alpha_h: None,
            elements: vec![0, 1, 2, 3],
            v_min: 0.035,
            cruise_speed_cap: 1.0,
            trust_hold_steps: 1000,
        }
    }
}

impl MonitorParams {
    pub fn alpha_h(&self) -> f64 {
        self.alpha_h.unwrap_or(self.alpha)
    }

    pub fn cusign(&self) -> Result<CusignConfig> {
        CusignConfig::new(self.tau, self.window, self.theta, self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        self.cusign()?;
        let ah = self.alpha_h();
        if !(ah > 0.0 && ah < 1.0) {
            return Err(config_err!("monitor.alpha_h must lie in (0, 1), got {ah}"));
        }
        if self.elements.is_empty() || self.elements.iter().any(|&q| q >= 4) {
            return Err(config_err!("monitor.elements must be a non-empty subset of 0..4"));
        }
        if self.debounce == 0 || self.dwell == 0 {
            return Err(config_err!("monitor.debounce and monitor.dwell must be at least 1"));
        }
        if !(self.v_min > 0.0) || !(self.cruise_speed_cap > self.v_min) {
            return Err(config_err!("monitor needs 0 < v_min < cruise_speed_cap"));
        }
        Ok(())
    }
}

/// Hidden-task completion rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskParams {
    /// Distance tolerance around the hidden rest length; defaults to `0.05·l0_h`.
    pub eps_d: Option<f64>,
    pub eps_v: f64,
    /// Steps the convergence condition must hold.
    pub t_dwell: u32,
    /// Keep obstacle springs while in a hidden mode.
    pub hidden_obstacle_springs: bool,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self { eps_d: None, eps_v: 0.01, t_dwell: 50, hidden_obstacle_springs: true }
    }
}

impl TaskParams {
    pub fn eps_d(&self, hp: &HiddenParams) -> f64 {
        self.eps_d.unwrap_or(0.05 * hp.l0_h)
    }
}

/// Complete description of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub initial_states: Vec<StateVector>,
    pub goal: Option<Vec2>,
    pub obstacles: Vec<Obstacle>,
    /// Boundary sampling for rectangles; defaults to `δ_r/10`.
    pub obstacle_spacing: Option<f64>,
    pub objects: Vec<Vec2>,
    pub model: LinearModel,
    pub swarm: SwarmParams,
    pub hidden: HiddenParams,
    pub monitor: MonitorParams,
    pub task: TaskParams,
    pub attacks: Vec<AttackSpec>,
    pub seed: u64,
    pub steps: u64,
    /// Independent per-link message loss probability.
    pub link_drop_prob: f64,
}

impl Scenario {
    pub fn n_vehicles(&self) -> usize {
        self.initial_states.len()
    }

    pub fn obstacle_spacing(&self) -> f64 {
        self.obstacle_spacing.unwrap_or(self.swarm.delta_r / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vehicles();
        if n < 2 {
            return Err(config_err!("scenario needs at least 2 vehicles, got {n}"));
        }
        if let Some(i) = self.initial_states.iter().position(|s| !s.is_finite()) {
            return Err(config_err!("initial state of vehicle {i} is not finite"));
        }
        self.model.validate()?;
        self.swarm.validate()?;
        self.hidden.validate(&self.swarm)?;
        self.monitor.validate()?;
        if !(self.obstacle_spacing() > 0.0) {
            return Err(config_err!("obstacle spacing must be positive"));
        }
        if !(0.0..=1.0).contains(&self.link_drop_prob) {
            return Err(config_err!("link_drop_prob must lie in [0, 1]"));
        }
        if !(self.task.eps_v > 0.0) || !(self.task.eps_d(&self.hidden) > 0.0) {
            return Err(config_err!("task tolerances must be positive"));
        }
        for a in &self.attacks {
            a.validate(n)?;
        }
        Ok(())
    }
}

/// Ground-truth explanation attached to an isolation (metrics only; agents never see it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsolationClass {
    /// The isolated vehicle's broadcasts are being tampered.
    UnderAttack,
    /// The isolated vehicle is or recently was following a hidden law.
    HiddenMode,
    /// The observer's own broadcasts are being tampered.
    ObserverCompromised,
    /// None of the above: a false isolation.
    Unexplained,
}

impl IsolationClass {
    pub fn name(self) -> &'static str {
        match self {
            IsolationClass::UnderAttack => "under_attack",
            IsolationClass::HiddenMode => "hidden_mode",
            IsolationClass::ObserverCompromised => "observer_compromised",
            IsolationClass::Unexplained => "unexplained",
        }
    }
}

/// Notable occurrences during a step.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    AttackStarted { target: VehicleId },
    AttackEnded { target: VehicleId },
    ModeChanged { vehicle: VehicleId, from: Mode, to: Mode },
    ObjectDiscovered { vehicle: VehicleId, object: Vec2 },
    Isolated { observer: VehicleId, target: VehicleId, class: IsolationClass },
    SignatureActivated { observer: VehicleId, target: VehicleId, entry_speed: f64 },
    SignatureDetected { observer: VehicleId, target: VehicleId, estimate: Option<Vec2>, error: Option<f64> },
    TrustExpired { observer: VehicleId, target: VehicleId },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::AttackStarted { .. } => "attack_started",
            Event::AttackEnded { .. } => "attack_ended",
            Event::ModeChanged { .. } => "mode_changed",
            Event::ObjectDiscovered { .. } => "object_discovered",
            Event::Isolated { .. } => "isolated",
            Event::SignatureActivated { .. } => "signature_activated",
            Event::SignatureDetected { .. } => "signature_detected",
            Event::TrustExpired { .. } => "trust_expired",
        }
    }
}

/// Per-vehicle snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleRecord {
    pub id: VehicleId,
    pub true_state: StateVector,
    pub estimate: StateVector,
    pub mode: Mode,
    pub control: Vec2,
    pub compromised: Vec<VehicleId>,
    pub neighbors: Vec<VehicleId>,
    pub object_estimate: Option<Vec2>,
}

/// Per-(observer, target) monitor snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub observer: VehicleId,
    pub target: VehicleId,
    /// `Â⁺` per monitored element.
    pub alarm_plus: Vec<f64>,
    pub alarm_minus: Vec<f64>,
    /// Some monitored rate is outside `(Ω₋, Ω₊)` this step.
    pub out_of_band: bool,
    /// The consistency update was skipped this step.
    pub skipped: bool,
    pub suspended: bool,
    pub isolated: bool,
    /// `Ĥ` while a signature monitor is active.
    pub switch_rate: Option<f64>,
    /// Inter-vehicle residual of this step's update, if one ran.
    pub residual: Option<Vector4<f64>>,
}

/// Everything persisted for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub vehicles: Vec<VehicleRecord>,
    pub pairs: Vec<PairRecord>,
    pub events: Vec<Event>,
}

/// Read-only context every agent shares.
struct Shared<'a> {
    filter: &'a KalmanFilter,
    swarm: &'a SwarmParams,
    hidden: &'a HiddenParams,
    monitor: &'a MonitorParams,
    task: &'a TaskParams,
    goal: Option<Vec2>,
    cusign: CusignConfig,
    bounds: DetectionBounds,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct PairState {
    monitors: Vec<CusignMonitor>,
    suspended: bool,
    skipped: bool,
    out_of_band: bool,
    residual: Option<Vector4<f64>>,
}

/// Decision-relevant occurrences inside an agent; the world attaches ground truth.
#[derive(Debug, Clone, PartialEq)]
enum AgentEvent {
    Isolated(VehicleId),
    SignatureActivated(VehicleId, f64),
    SignatureDetected(VehicleId, Option<Vec2>),
    TrustExpired(VehicleId),
    ModeChanged(Mode, Mode),
    ObjectDiscovered(Vec2),
}

/// One vehicle's on-board state.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleAgent {
    pub id: VehicleId,
    pub mode: Mode,
    pub estimator: KalmanEstimator,
    /// `R_i`.
    pub compromised: BTreeSet<VehicleId>,
    pub object_estimate: Option<Vec2>,
    /// Neighbor set behind the most recent control input.
    pub neighbor_set: BTreeSet<VehicleId>,
    pub last_control: Vec2,
    /// Steps the task-completion condition has held.
    pub task_dwell: u32,
    /// Vehicles trusted after a signature detection, with the detection step.
    pub signature_trusted: BTreeMap<VehicleId, u64>,
    pub completed_targets: Vec<Vec2>,
    pairs: BTreeMap<VehicleId, PairState>,
    signatures: BTreeMap<VehicleId, SignatureMonitor>,
    prev_received: BTreeMap<VehicleId, Broadcast>,
    own_prev: Option<Broadcast>,
}

impl VehicleAgent {
    fn new(id: VehicleId, estimator: KalmanEstimator) -> Self {
        Self {
            id,
            mode: Mode::Primary,
            estimator,
            compromised: BTreeSet::new(),
            object_estimate: None,
            neighbor_set: BTreeSet::new(),
            last_control: Vec2::zeros(),
            task_dwell: 0,
            signature_trusted: BTreeMap::new(),
            completed_targets: Vec::new(),
            pairs: BTreeMap::new(),
            signatures: BTreeMap::new(),
            prev_received: BTreeMap::new(),
            own_prev: None,
        }
    }

    pub fn estimate(&self) -> &StateVector {
        &self.estimator.estimate
    }

    /// Current signature monitors keyed by target.
    pub fn signature_monitors(&self) -> &BTreeMap<VehicleId, SignatureMonitor> {
        &self.signatures
    }

    /// Current CUSIGN monitors for `target`.
    pub fn cusign_monitors(&self, target: VehicleId) -> Option<&[CusignMonitor]> {
        self.pairs.get(&target).map(|p| p.monitors.as_slice())
    }

    fn compose(&self, step: u64, sensed: &Sensed) -> Broadcast {
        Broadcast {
            sender: self.id,
            step,
            state_estimate: self.estimator.estimate,
            obstacles: sensed.obstacles.clone(),
            neighbor_set: self.neighbor_set.clone(),
        }
    }

    fn is_completed(&self, object: Vec2, radius: f64) -> bool {
        self.completed_targets.iter().any(|c| (c - object).norm() <= radius)
    }

    fn set_mode(&mut self, to: Mode, events: &mut Vec<AgentEvent>) {
        if self.mode != to {
            events.push(AgentEvent::ModeChanged(self.mode, to));
            self.mode = to;
            self.task_dwell = 0;
        }
    }

    fn release_trust(&mut self, j: VehicleId) {
        self.signature_trusted.remove(&j);
        if let Some(p) = self.pairs.get_mut(&j) {
            p.suspended = false;
            p.monitors.iter_mut().for_each(CusignMonitor::reset);
        }
    }

    /// Runs every on-board decision for step `k` and returns the control input.
    fn decide(
        &mut self,
        k: u64,
        own: &Broadcast,
        received: BTreeMap<VehicleId, Broadcast>,
        sensed: &Sensed,
        sh: &Shared<'_>,
        events: &mut Vec<AgentEvent>,
    ) -> Result<Vec2> {
        if sh.monitor.enabled {
            self.run_consistency(k, &received, sh, events)?;
            self.run_signatures(k, &received, sh, events)?;
        }

        let eps_d = sh.task.eps_d(sh.hidden);
        let match_radius = sh.hidden.l0_h + eps_d;
        let fresh_object =
            sensed.objects.iter().copied().filter(|o| !self.is_completed(*o, match_radius)).min_by(|a, b| {
                let p = self.estimator.estimate.position();
                (a - p).norm().total_cmp(&(b - p).norm())
            });
        match (self.mode, fresh_object) {
            (Mode::Primary, Some(o)) => {
                self.object_estimate = Some(o);
                events.push(AgentEvent::ObjectDiscovered(o));
                self.set_mode(Mode::HiddenDiscoverer, events);
            }
            (Mode::HiddenFollower, Some(o)) => self.object_estimate = Some(o),
            _ => {}
        }

        if self.mode.is_hidden() {
            let obj = self
                .object_estimate
                .ok_or_else(|| Error::Invariant(format!("vehicle {} is hidden without an object estimate", self.id)))?;
            let est = self.estimator.estimate;
            let l = (est.position() - obj).norm();
            if (l - sh.hidden.l0_h).abs() <= eps_d && est.speed() < sh.task.eps_v {
                self.task_dwell += 1;
            } else {
                self.task_dwell = 0;
            }
            if self.task_dwell >= sh.task.t_dwell {
                self.completed_targets.push(obj);
                self.object_estimate = None;
                self.set_mode(Mode::Primary, events);
            }
        }

        let comm: BTreeSet<VehicleId> = received.keys().copied().collect();
        let mut positions: BTreeMap<VehicleId, Vec2> =
            received.iter().map(|(j, m)| (*j, m.state_estimate.position())).collect();
        positions.insert(self.id, self.estimator.estimate.position());
        let neighbors = gabriel_neighbors(self.id, &comm, &positions, &self.compromised);

        let est = self.estimator.estimate;
        let u = match self.mode {
            Mode::Primary => {
                let pts: Vec<Vec2> = neighbors.iter().map(|j| positions[j]).collect();
                primary_control(&est, &pts, &sensed.obstacles, sh.goal, sh.swarm)
            }
            Mode::HiddenDiscoverer | Mode::HiddenFollower => {
                let obj = self.object_estimate.unwrap_or(est.position());
                let mut u = hidden_control(&est, obj, sh.hidden);
                if sh.task.hidden_obstacle_springs {
                    u += obstacle_force(est.position(), &sensed.obstacles, sh.swarm);
                }
                u
            }
        };

        self.neighbor_set = neighbors;
        self.last_control = u;
        self.prev_received = received;
        self.own_prev = Some(own.clone());
        Ok(u)
    }

    fn run_consistency(
        &mut self,
        k: u64,
        received: &BTreeMap<VehicleId, Broadcast>,
        sh: &Shared<'_>,
        events: &mut Vec<AgentEvent>,
    ) -> Result<()> {
        let mut context: BTreeMap<VehicleId, Vec2> =
            self.prev_received.iter().map(|(j, m)| (*j, m.state_estimate.position())).collect();
        if let Some(own) = &self.own_prev {
            context.insert(self.id, own.state_estimate.position());
        }
        let prev_comm: BTreeSet<VehicleId> = self.prev_received.keys().copied().collect();

        // trust holds expire only while this vehicle is primary
        if self.mode == Mode::Primary {
            let expired: Vec<VehicleId> = self
                .signature_trusted
                .iter()
                .filter(|(_, since)| k.saturating_sub(**since) >= sh.monitor.trust_hold_steps)
                .map(|(j, _)| *j)
                .collect();
            for j in expired {
                self.release_trust(j);
                events.push(AgentEvent::TrustExpired(j));
            }
        }

        for (j, msg) in received {
            let j = *j;
            if j == self.id {
                continue;
            }
            let pair = match self.pairs.entry(j) {
                alloc::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                alloc::collections::btree_map::Entry::Vacant(e) => {
                    let monitors = sh
                        .monitor
                        .elements
                        .iter()
                        .map(|&q| CusignMonitor::new(self.id, j, q, &sh.cusign, sh.seed))
                        .collect::<Result<Vec<_>>>()?;
                    e.insert(PairState {
                        monitors,
                        suspended: false,
                        skipped: true,
                        out_of_band: false,
                        residual: None,
                    })
                }
            };
            pair.skipped = true;
            pair.residual = None;
            if pair.suspended || self.compromised.contains(&j) {
                continue;
            }
            let outcome = match self.prev_received.get(&j) {
                None => Err(MonitorSkip::NoHistory),
                Some(prev) => {
                    estimate_neighbor_input(self.id, prev, &msg.neighbor_set, &context, &prev_comm, sh.goal, sh.swarm)
                        .map(|u| {
                            let pred = predict_neighbor_state(&sh.filter.discrete, &prev.state_estimate, &u);
                            inter_vehicle_residual(&msg.state_estimate, &pred)
                        })
                }
            };
            let Ok(r) = outcome else { continue };
            pair.skipped = false;
            pair.residual = Some(r);
            for m in pair.monitors.iter_mut() {
                m.step(r[m.element]);
                m.track(&sh.bounds);
            }
            pair.out_of_band = pair.monitors.iter().any(|m| m.out_of_band(&sh.bounds));
            if check_consistency(pair.monitors.iter(), sh.monitor.debounce) == Verdict::Inconsistent {
                self.compromised.insert(j);
                events.push(AgentEvent::Isolated(j));
                let entry_speed = msg.state_estimate.speed().min(sh.monitor.cruise_speed_cap);
                let map = DecayMap::build(
                    &sh.filter.discrete,
                    sh.hidden,
                    sh.swarm.delta_r,
                    entry_speed,
                    sh.monitor.v_min,
                    (sh.monitor.v_min * 1e-3).min(1e-5),
                )?;
                let window = PseudoWindow::new(sh.monitor.window)?;
                self.signatures
                    .insert(j, SignatureMonitor::new(self.id, j, window, sh.monitor.alpha_h(), k, map, sh.seed));
                events.push(AgentEvent::SignatureActivated(j, entry_speed));
            }
        }
        Ok(())
    }

    fn run_signatures(
        &mut self,
        k: u64,
        received: &BTreeMap<VehicleId, Broadcast>,
        sh: &Shared<'_>,
        events: &mut Vec<AgentEvent>,
    ) -> Result<()> {
        let mut detected = Vec::new();
        for (j, mon) in self.signatures.iter_mut() {
            let Some(msg) = received.get(j) else { continue };
            if let SignatureUpdate::Updated { .. } = mon.observe(msg.state_estimate.velocity()) {
                if mon.detect(sh.monitor.dwell) {
                    let est = estimate_object_position(
                        msg.state_estimate.position(),
                        msg.state_estimate.velocity(),
                        &mon.map,
                        mon.last_direction,
                    );
                    detected.push((*j, est));
                }
            }
        }
        let match_radius = sh.hidden.l0_h + sh.task.eps_d(sh.hidden);
        for (j, est) in detected {
            self.signatures.remove(&j);
            self.compromised.remove(&j);
            self.signature_trusted.insert(j, k);
            if let Some(p) = self.pairs.get_mut(&j) {
                p.suspended = true;
                p.monitors.iter_mut().for_each(CusignMonitor::reset);
            }
            events.push(AgentEvent::SignatureDetected(j, est));
            if let (Mode::Primary, Some(p)) = (self.mode, est) {
                if !self.is_completed(p, match_radius) {
                    self.object_estimate = Some(p);
                    self.set_mode(Mode::HiddenFollower, events);
                }
            }
        }
        Ok(())
    }

    fn pair_records(&self) -> impl Iterator<Item = PairRecord> + '_ {
        self.pairs.iter().map(move |(j, p)| PairRecord {
            observer: self.id,
            target: *j,
            alarm_plus: p.monitors.iter().map(|m| m.alarm_rate_plus).collect(),
            alarm_minus: p.monitors.iter().map(|m| m.alarm_rate_minus).collect(),
            out_of_band: p.out_of_band,
            skipped: p.skipped,
            suspended: p.suspended,
            isolated: self.compromised.contains(j),
            switch_rate: self.signatures.get(j).map(|s| s.switch_rate),
            residual: p.residual,
        })
    }
}

/// Ground truth plus all agents.
pub struct World {
    scenario: Scenario,
    filter: KalmanFilter,
    obstacle_points: Vec<Vec2>,
    cusign: CusignConfig,
    bounds: DetectionBounds,
    residual_sigma: Vector4<f64>,
    proc_noise: NoiseShaper,
    meas_noise: NoiseShaper,
    truth: Vec<StateVector>,
    agents: Vec<VehicleAgent>,
    rngs: Vec<ChaCha8Rng>,
    link_rng: ChaCha8Rng,
    step: u64,
    last_hidden: Vec<Option<u64>>,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let filter = KalmanFilter::new(scenario.model.clone())?;
        let cusign = scenario.monitor.cusign()?;
        let bounds = cusign.bounds()?;
        let residual_sigma = filter.residual_sigma();
        let spacing = scenario.obstacle_spacing();
        let obstacle_points = scenario.obstacles.iter().flat_map(|o| o.rasterize(spacing)).collect();
        let n = scenario.n_vehicles();
        let rngs = (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(scenario.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let mut link_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        link_rng.set_stream(n as u64);
        let agents = scenario
            .initial_states
            .iter()
            .enumerate()
            .map(|(i, x)| VehicleAgent::new(VehicleId(i), filter.init(*x)))
            .collect();
        Ok(Self {
            proc_noise: NoiseShaper::from_matrix4(&scenario.model.proc_noise_cov),
            meas_noise: NoiseShaper::new(&scenario.model.meas_noise_cov),
            truth: scenario.initial_states.clone(),
            last_hidden: vec![None; n],
            scenario,
            filter,
            obstacle_points,
            cusign,
            bounds,
            residual_sigma,
            agents,
            rngs,
            link_rng,
            step: 0,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn filter(&self) -> &KalmanFilter {
        &self.filter
    }

    pub fn bounds(&self) -> &DetectionBounds {
        &self.bounds
    }

    pub fn residual_sigma(&self) -> &Vector4<f64> {
        &self.residual_sigma
    }

    pub fn obstacle_points(&self) -> &[Vec2] {
        &self.obstacle_points
    }

    pub fn truth(&self) -> &[StateVector] {
        &self.truth
    }

    pub fn agents(&self) -> &[VehicleAgent] {
        &self.agents
    }

    /// Index of the next step to run.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    fn attacked(&self, v: VehicleId, k: u64, lookback: u64) -> bool {
        self.scenario
            .attacks
            .iter()
            .any(|a| a.target == v && k >= a.start_step && k <= a.end_step.saturating_add(lookback))
    }

    fn classify(&self, observer: VehicleId, target: VehicleId, k: u64) -> IsolationClass {
        let m = &self.scenario.monitor;
        let lookback = 4 * m.window as u64 + m.debounce as u64;
        if self.attacked(target, k, lookback) {
            IsolationClass::UnderAttack
        } else if self.last_hidden[target.0].is_some_and(|h| k <= h + lookback) {
            IsolationClass::HiddenMode
        } else if self.attacked(observer, k, lookback) {
            IsolationClass::ObserverCompromised
        } else {
            IsolationClass::Unexplained
        }
    }

    fn nearest_object_error(&self, p: Vec2) -> Option<f64> {
        self.scenario.objects.iter().map(|o| (o - p).norm()).min_by(f64::total_cmp)
    }

    /// Advances the world by one synchronous round.
    pub fn run_step(&mut self) -> Result<TraceRecord> {
        let k = self.step;
        let n = self.agents.len();
        let sc = &self.scenario;

        for i in 0..n {
            let rng = &mut self.rngs[i];
            if k > 0 {
                let eta = self.meas_noise.sample(rng);
                let y = measure(&self.filter.model.output, &self.truth[i], &eta);
                let u = self.agents[i].last_control;
                self.filter.step(&mut self.agents[i].estimator, &u, &y);
            }
        }

        // range sensing, reported relative to the vehicle's own estimate
        let sensed: Vec<Sensed> = (0..n)
            .map(|i| {
                let p = self.truth[i].position();
                let off = self.agents[i].estimator.estimate.position() - p;
                let s = sense(p, &self.obstacle_points, &sc.objects, sc.swarm.delta_r);
                Sensed {
                    obstacles: s.obstacles.iter().map(|o| o + off).collect(),
                    objects: s.objects.iter().map(|o| o + off).collect(),
                }
            })
            .collect();

        let own: Vec<Broadcast> = (0..n).map(|i| self.agents[i].compose(k, &sensed[i])).collect();
        let on_air: Vec<Broadcast> = own
            .iter()
            .map(|m| sc.attacks.iter().fold(m.clone(), |m, a| apply_mitm(&m, a, k, &self.residual_sigma)))
            .collect();

        let mut events = Vec::new();
        for a in &sc.attacks {
            if k == a.start_step {
                events.push(Event::AttackStarted { target: a.target });
            }
            if a.end_step != u64::MAX && k == a.end_step + 1 {
                events.push(Event::AttackEnded { target: a.target });
            }
        }

        let positions: Vec<Vec2> = self.truth.iter().map(|x| x.position()).collect();
        let shared = Shared {
            filter: &self.filter,
            swarm: &sc.swarm,
            hidden: &sc.hidden,
            monitor: &sc.monitor,
            task: &sc.task,
            goal: sc.goal,
            cusign: self.cusign,
            bounds: self.bounds,
            seed: sc.seed,
        };
        let mut controls = Vec::with_capacity(n);
        let mut agent_events = Vec::with_capacity(n);
        for i in 0..n {
            let mut received = BTreeMap::new();
            for j in communication_set(&positions, VehicleId(i), sc.swarm.delta_c) {
                if sc.link_drop_prob > 0.0 && self.link_rng.random::<f64>() < sc.link_drop_prob {
                    continue;
                }
                received.insert(j, on_air[j.0].clone());
            }
            let mut ev = Vec::new();
            let u = self.agents[i].decide(k, &own[i], received, &sensed[i], &shared, &mut ev)?;
            if !u.iter().all(|c| c.is_finite()) {
                return Err(Error::Invariant(format!("vehicle {i} produced a non-finite control at step {k}")));
            }
            controls.push(u);
            agent_events.push(ev);
        }

        for (i, agent) in self.agents.iter().enumerate() {
            if let Some(j) = agent.neighbor_set.intersection(&agent.compromised).next() {
                return Err(Error::Invariant(format!(
                    "vehicle {i} keeps isolated vehicle {j} in its control graph at step {k}"
                )));
            }
            if agent.mode.is_hidden() {
                self.last_hidden[i] = Some(k);
            }
        }

        for (i, evs) in agent_events.into_iter().enumerate() {
            let me = VehicleId(i);
            for e in evs {
                events.push(match e {
                    AgentEvent::Isolated(j) => {
                        Event::Isolated { observer: me, target: j, class: self.classify(me, j, k) }
                    }
                    AgentEvent::SignatureActivated(j, v) => {
                        Event::SignatureActivated { observer: me, target: j, entry_speed: v }
                    }
                    AgentEvent::SignatureDetected(j, est) => Event::SignatureDetected {
                        observer: me,
                        target: j,
                        estimate: est,
                        error: est.and_then(|p| self.nearest_object_error(p)),
                    },
                    AgentEvent::TrustExpired(j) => Event::TrustExpired { observer: me, target: j },
                    AgentEvent::ModeChanged(from, to) => Event::ModeChanged { vehicle: me, from, to },
                    AgentEvent::ObjectDiscovered(o) => Event::ObjectDiscovered { vehicle: me, object: o },
                });
            }
        }

        let record = TraceRecord {
            step: k,
            vehicles: self
                .agents
                .iter()
                .enumerate()
                .map(|(i, a)| VehicleRecord {
                    id: a.id,
                    true_state: self.truth[i],
                    estimate: a.estimator.estimate,
                    mode: a.mode,
                    control: controls[i],
                    compromised: a.compromised.iter().copied().collect(),
                    neighbors: a.neighbor_set.iter().copied().collect(),
                    object_estimate: a.object_estimate,
                })
                .collect(),
            pairs: self.agents.iter().flat_map(|a| a.pair_records()).collect(),
            events,
        };

        for (i, u) in controls.iter().enumerate() {
            let w = self.proc_noise.sample4(&mut self.rngs[i]);
            self.truth[i] = step_dynamics(&self.filter.discrete, &self.truth[i], u, &w);
            if !self.truth[i].is_finite() {
                return Err(Error::Invariant(format!("vehicle {i} state diverged at step {k}")));
            }
        }
        self.step += 1;
        Ok(record)
    }
}

/// Advances `world` one step.
pub fn run_step(world: &mut World) -> Result<TraceRecord> {
    world.run_step()
}
