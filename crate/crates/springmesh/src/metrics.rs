//! Run-level summary metrics computed from step records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use springmesh_core::consistency::DetectionBounds;
use springmesh_core::sim::Scenario;

use crate::trace::StepRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub target: usize,
    pub start_step: u64,
    /// First step any observer isolated the target.
    pub first_isolation_step: Option<u64>,
    pub latency: Option<u64>,
    /// Observers that isolated the target at least once.
    pub flagged_by: Vec<usize>,
    /// Observers that later signature-detected (and so re-trusted) the target.
    pub signature_detected_by: Vec<usize>,
    /// Signature detections of the target while it was actually on the primary law.
    pub false_signature_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Isolation {
    pub step: u64,
    pub observer: usize,
    pub target: usize,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureOutcome {
    pub observer: usize,
    pub target: usize,
    pub activated_step: u64,
    pub detected_step: Option<u64>,
    pub latency: Option<u64>,
    pub object_error: Option<f64>,
    /// Ground-truth mode of the target at detection.
    pub target_mode: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    /// Post-burn-in rate samples outside `(Ω₋, Ω₊)`.
    pub outside: u64,
    pub total: u64,
}

impl BandStats {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.outside as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub steps: u64,
    pub attacks: Vec<AttackOutcome>,
    pub isolations: Vec<Isolation>,
    pub isolations_by_class: BTreeMap<String, usize>,
    /// Isolations with no ground-truth explanation.
    pub false_isolations: usize,
    pub signatures: Vec<SignatureOutcome>,
    pub discoverers: Vec<usize>,
    pub goal_arrival_step: Option<u64>,
    pub band: BandStats,
    /// Steps where some observer kept an isolated vehicle in its control graph.
    pub isolation_violations: u64,
    /// `R_i` per observer at the end of the run.
    pub final_compromised: Vec<Vec<usize>>,
}

impl RunMetrics {
    /// Isolations not caused by a real attack on the isolated vehicle.
    pub fn unexplained(&self) -> usize {
        self.false_isolations
    }
}

/// Incremental metric computation over a record stream.
pub struct MetricsBuilder {
    bounds: DetectionBounds,
    burn_in: u64,
    goal: Option<[f64; 2]>,
    goal_radius: f64,
    m: RunMetrics,
    active_sig: BTreeMap<(usize, usize), usize>,
}

impl MetricsBuilder {
    pub fn new(scenario: &Scenario, bounds: DetectionBounds) -> Self {
        Self {
            bounds,
            burn_in: 10 * scenario.monitor.window as u64,
            goal: scenario.goal.map(|g| [g.x, g.y]),
            goal_radius: 2.0 * scenario.swarm.l0_v,
            active_sig: BTreeMap::new(),
            m: RunMetrics {
                seed: scenario.seed,
                steps: 0,
                attacks: scenario
                    .attacks
                    .iter()
                    .map(|a| AttackOutcome {
                        target: a.target.0,
                        start_step: a.start_step,
                        first_isolation_step: None,
                        latency: None,
                        flagged_by: vec![],
                        signature_detected_by: vec![],
                        false_signature_detections: 0,
                    })
                    .collect(),
                isolations: vec![],
                isolations_by_class: BTreeMap::new(),
                false_isolations: 0,
                signatures: vec![],
                discoverers: vec![],
                goal_arrival_step: None,
                band: BandStats::default(),
                isolation_violations: 0,
                final_compromised: vec![vec![]; scenario.n_vehicles()],
            },
        }
    }

    pub fn push(&mut self, r: &StepRecord) {
        let k = r.step;
        self.m.steps = k + 1;
        for e in &r.events {
            match e.kind.as_str() {
                "isolated" => {
                    let (o, t) = (e.observer.unwrap_or(0), e.target.unwrap_or(0));
                    let class = e.class.clone().unwrap_or_default();
                    *self.m.isolations_by_class.entry(class.clone()).or_default() += 1;
                    if class == "unexplained" {
                        self.m.false_isolations += 1;
                    }
                    for a in self.m.attacks.iter_mut().filter(|a| a.target == t && k >= a.start_step) {
                        if a.first_isolation_step.is_none() {
                            a.first_isolation_step = Some(k);
                            a.latency = Some(k - a.start_step);
                        }
                        if !a.flagged_by.contains(&o) {
                            a.flagged_by.push(o);
                        }
                    }
                    self.m.isolations.push(Isolation { step: k, observer: o, target: t, class });
                }
                "signature_activated" => {
                    let key = (e.observer.unwrap_or(0), e.target.unwrap_or(0));
                    self.active_sig.insert(key, self.m.signatures.len());
                    self.m.signatures.push(SignatureOutcome {
                        observer: key.0,
                        target: key.1,
                        activated_step: k,
                        detected_step: None,
                        latency: None,
                        object_error: None,
                        target_mode: None,
                    });
                }
                "signature_detected" => {
                    let key = (e.observer.unwrap_or(0), e.target.unwrap_or(0));
                    let mode = r.vehicles.iter().find(|v| v.id == key.1).map(|v| v.mode.clone());
                    let primary = mode.as_deref() == Some("primary");
                    if let Some(idx) = self.active_sig.remove(&key) {
                        let s = &mut self.m.signatures[idx];
                        s.detected_step = Some(k);
                        s.latency = Some(k - s.activated_step);
                        s.object_error = e.value;
                        s.target_mode = mode;
                    }
                    for a in self.m.attacks.iter_mut().filter(|a| a.target == key.1) {
                        if !a.signature_detected_by.contains(&key.0) {
                            a.signature_detected_by.push(key.0);
                        }
                        if primary {
                            a.false_signature_detections += 1;
                        }
                    }
                }
                "object_discovered" => {
                    if let Some(v) = e.vehicle {
                        if !self.m.discoverers.contains(&v) {
                            self.m.discoverers.push(v);
                        }
                    }
                }
                _ => {}
            }
        }

        if let (Some(g), None) = (self.goal, self.m.goal_arrival_step) {
            let n = r.vehicles.len().max(1) as f64;
            let (cx, cy) = r.vehicles.iter().fold((0.0, 0.0), |(x, y), v| (x + v.x[0], y + v.x[1]));
            if ((cx / n - g[0]).powi(2) + (cy / n - g[1]).powi(2)).sqrt() <= self.goal_radius {
                self.m.goal_arrival_step = Some(k);
            }
        }

        if r.vehicles.iter().any(|v| v.neighbors.iter().any(|j| v.compromised.contains(j))) {
            self.m.isolation_violations += 1;
        }

        if k >= self.burn_in {
            for p in r.pairs.iter().filter(|p| !p.skipped && !p.suspended && !p.isolated) {
                for a in p.a_plus.iter().chain(p.a_minus.iter()) {
                    self.m.band.total += 1;
                    if !self.bounds.contains(*a) {
                        self.m.band.outside += 1;
                    }
                }
            }
        }

        for v in &r.vehicles {
            if v.id < self.m.final_compromised.len() {
                self.m.final_compromised[v.id] = v.compromised.clone();
            }
        }
    }

    pub fn finish(self) -> RunMetrics {
        self.m
    }
}
