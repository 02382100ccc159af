//! TOML scenario files.
//!
//! Every table rejects unknown keys. Omitted keys take the defaults listed on each
//! field; the README documents the full schema.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use springmesh_core::adversary::{AttackSpec, SpoofSchedule};
use springmesh_core::dynamics::{KalmanFilter, LinearModel, OutputMatrix, StateVector};
use springmesh_core::formation::{HiddenParams, Obstacle, SwarmParams, VehicleId};
use springmesh_core::sim::{MonitorParams, Scenario, TaskParams};

/// Why a scenario file could not be used.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: springmesh_core::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_steps")]
    pub steps: u64,
    /// Optional cross-check against the length of `vehicles`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_vehicles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub link_drop_prob: f64,
    pub vehicles: Vec<VehicleFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle_spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<ObstacleFile>,
    #[serde(default)]
    pub model: ModelFile,
    #[serde(default)]
    pub swarm: SwarmFile,
    #[serde(default)]
    pub hidden: HiddenFile,
    #[serde(default)]
    pub monitor: MonitorFile,
    #[serde(default)]
    pub task: TaskFile,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackFile>,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

fn d_steps() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleFile {
    pub position: [f64; 2],
    #[serde(default)]
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum ObstacleFile {
    /// Axis-aligned rectangle, rasterized to boundary points.
    Rect {
        min: [f64; 2],
        max: [f64; 2],
    },
    Points(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    /// Integration step in seconds.
    #[serde(default = "d_dt")]
    pub dt: f64,
    /// Standard deviations of the diagonal process noise `(px, py, vx, vy)`.
    #[serde(default = "d_proc")]
    pub process_noise_std: [f64; 4],
    /// Standard deviations of the diagonal measurement noise, one per output row.
    #[serde(default = "d_meas")]
    pub measurement_noise_std: Vec<f64>,
    /// Output rows over `(px, py, vx, vy)`; identity when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Vec<[f64; 4]>>,
}

fn d_dt() -> f64 {
    0.05
}
fn d_proc() -> [f64; 4] {
    [0.0015, 0.0015, 0.0003, 0.0003]
}
fn d_meas() -> Vec<f64> {
    vec![0.02, 0.02, 0.005, 0.005]
}

impl Default for ModelFile {
    fn default() -> Self {
        Self { dt: d_dt(), process_noise_std: d_proc(), measurement_noise_std: d_meas(), output: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwarmFile {
    pub k_v: f64,
    pub k_o: f64,
    pub k_g: f64,
    pub l0_v: f64,
    /// Obstacle rest length; defaults to the sensing range.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l0_o: Option<f64>,
    pub gamma_v: f64,
    pub delta_c: f64,
    pub delta_r: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_cap: Option<f64>,
}

impl Default for SwarmFile {
    fn default() -> Self {
        Self {
            k_v: 3.0,
            k_o: 0.5,
            k_g: 0.05,
            l0_v: 1.5,
            l0_o: None,
            gamma_v: 3.0,
            delta_c: 6.0,
            delta_r: 3.0,
            control_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HiddenFile {
    pub k_h: f64,
    pub gamma_h: f64,
    pub l0_h: f64,
}

impl Default for HiddenFile {
    fn default() -> Self {
        Self { k_h: 0.5, gamma_h: 1.8, l0_h: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorFile {
    pub enabled: bool,
    pub tau: u32,
    pub window: u32,
    pub theta: f64,
    pub alpha: f64,
    pub debounce: u32,
    pub dwell: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_h: Option<f64>,
    pub elements: Vec<usize>,
    pub v_min: f64,
    pub cruise_speed_cap: f64,
    pub trust_hold_steps: u64,
}

impl Default for MonitorFile {
    fn default() -> Self {
        Self::from_core(&MonitorParams::default())
    }
}

impl MonitorFile {
    fn from_core(m: &MonitorParams) -> Self {
        Self {
            enabled: m.enabled,
            tau: m.tau,
            window: m.window,
            theta: m.theta,
            alpha: m.alpha,
            debounce: m.debounce,
            dwell: m.dwell,
            alpha_h: m.alpha_h,
            elements: m.elements.clone(),
            v_min: m.v_min,
            cruise_speed_cap: m.cruise_speed_cap,
            trust_hold_steps: m.trust_hold_steps,
        }
    }

    fn to_core(&self) -> MonitorParams {
        MonitorParams {
            enabled: self.enabled,
            tau: self.tau,
            window: self.window,
            theta: self.theta,
            alpha: self.alpha,
            debounce: self.debounce,
            dwell: self.dwell,
            alpha_h: self.alpha_h,
            elements: self.elements.clone(),
            v_min: self.v_min,
            cruise_speed_cap: self.cruise_speed_cap,
            trust_hold_steps: self.trust_hold_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_d: Option<f64>,
    pub eps_v: f64,
    pub t_dwell: u32,
    pub hidden_obstacle_springs: bool,
}

impl Default for TaskFile {
    fn default() -> Self {
        let t = TaskParams::default();
        Self { eps_d: t.eps_d, eps_v: t.eps_v, t_dwell: t.t_dwell, hidden_obstacle_springs: t.hidden_obstacle_springs }
    }
}

/// Unit of spoof magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpoofUnits {
    #[default]
    Meters,
    /// Multiples of the per-element residual standard deviation.
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ScheduleFile<const D: usize> {
    Constant {
        #[serde(with = "serde_arrays")]
        value: [f64; D],
    },
    Ramp {
        #[serde(with = "serde_arrays")]
        offset: [f64; D],
        #[serde(with = "serde_arrays")]
        rate: [f64; D],
    },
    Sinusoid {
        #[serde(with = "serde_arrays")]
        amplitude: [f64; D],
        period: f64,
        #[serde(default)]
        phase: f64,
    },
}

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const D: usize>(v: &[f64; D], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, const D: usize>(d: De) -> Result<[f64; D], De::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        let n = v.len();
        v.try_into().map_err(|_| serde::de::Error::custom(format!("expected {D} components, got {n}")))
    }
}

impl<const D: usize> ScheduleFile<D> {
    fn to_core(&self, scale: &nalgebra::SVector<f64, D>) -> SpoofSchedule<D> {
        let v = |a: &[f64; D]| nalgebra::SVector::<f64, D>::from_column_slice(a).component_mul(scale);
        match self {
            Self::Constant { value } => SpoofSchedule::Constant(v(value)),
            Self::Ramp { offset, rate } => SpoofSchedule::Ramp { offset: v(offset), rate: v(rate) },
            Self::Sinusoid { amplitude, period, phase } => {
                SpoofSchedule::Sinusoid { amplitude: v(amplitude), period: *period, phase: *phase }
            }
        }
    }

    fn from_core(s: &SpoofSchedule<D>) -> Self {
        let a = |v: &nalgebra::SVector<f64, D>| -> [f64; D] { std::array::from_fn(|i| v[i]) };
        match s {
            SpoofSchedule::Constant(c) => Self::Constant { value: a(c) },
            SpoofSchedule::Ramp { offset, rate } => Self::Ramp { offset: a(offset), rate: a(rate) },
            SpoofSchedule::Sinusoid { amplitude, period, phase } => {
                Self::Sinusoid { amplitude: a(amplitude), period: *period, phase: *phase }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackFile {
    pub target: usize,
    #[serde(default)]
    pub start_step: u64,
    /// Last tampered step, inclusive; open-ended when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_step: Option<u64>,
    #[serde(default)]
    pub units: SpoofUnits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_spoof: Option<ScheduleFile<4>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle_spoof: Option<ScheduleFile<2>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub remove: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub add: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stealth_scale: Option<f64>,
}

impl ModelFile {
    fn to_core(&self) -> Result<LinearModel, String> {
        let q = Vector4::from_column_slice(&self.process_noise_std);
        let ns = self.measurement_noise_std.len();
        let output = match &self.output {
            Some(rows) => {
                if rows.len() != ns {
                    return Err(format!(
                        "model.output has {} rows but model.measurement_noise_std has {ns} entries",
                        rows.len()
                    ));
                }
                OutputMatrix::from_fn(ns, |r, c| rows[r][c])
            }
            None if ns == 4 => OutputMatrix::identity(4),
            None => {
                return Err(format!(
                    "model.measurement_noise_std has {ns} entries; give model.output rows for a non-identity sensor"
                ))
            }
        };
        let r = DVector::from_iterator(ns, self.measurement_noise_std.iter().map(|s| s * s));
        Ok(LinearModel {
            dt: self.dt,
            proc_noise_cov: Matrix4::from_diagonal(&q.component_mul(&q)),
            meas_noise_cov: DMatrix::from_diagonal(&r),
            output,
        })
    }

    fn from_core(m: &LinearModel) -> Result<Self, String> {
        let off_diag = |a: &DMatrix<f64>| (0..a.nrows()).any(|r| (0..a.ncols()).any(|c| r != c && a[(r, c)] != 0.0));
        let q = DMatrix::from_iterator(4, 4, m.proc_noise_cov.iter().copied());
        if off_diag(&q) || off_diag(&m.meas_noise_cov) {
            return Err("only diagonal noise covariances can be written to a scenario file".into());
        }
        let identity = m.output.nrows() == 4 && m.output == OutputMatrix::identity(4);
        Ok(Self {
            dt: m.dt,
            process_noise_std: std::array::from_fn(|i| m.proc_noise_cov[(i, i)].sqrt()),
            measurement_noise_std: (0..m.meas_noise_cov.nrows()).map(|i| m.meas_noise_cov[(i, i)].sqrt()).collect(),
            output: (!identity)
                .then(|| (0..m.output.nrows()).map(|r| std::array::from_fn(|c| m.output[(r, c)])).collect()),
        })
    }
}

fn v2(a: [f64; 2]) -> Vector2<f64> {
    Vector2::new(a[0], a[1])
}

fn a2(v: &Vector2<f64>) -> [f64; 2] {
    [v.x, v.y]
}

impl ScenarioFile {
    /// Converts to the simulator's scenario and validates it.
    pub fn to_scenario(&self) -> Result<Scenario, springmesh_core::Error> {
        let cfg = |m: String| springmesh_core::Error::Config(m);
        if let Some(n) = self.n_vehicles {
            if n != self.vehicles.len() {
                return Err(cfg(format!("n_vehicles = {n} but {} vehicles are listed", self.vehicles.len())));
            }
        }
        let model = self.model.to_core().map_err(cfg)?;
        let swarm = SwarmParams {
            k_v: self.swarm.k_v,
            k_o: self.swarm.k_o,
            k_g: self.swarm.k_g,
            l0_v: self.swarm.l0_v,
            l0_o: self.swarm.l0_o.unwrap_or(self.swarm.delta_r),
            gamma_v: self.swarm.gamma_v,
            delta_c: self.swarm.delta_c,
            delta_r: self.swarm.delta_r,
            control_cap: self.swarm.control_cap,
        };
        let hidden = HiddenParams { k_h: self.hidden.k_h, gamma_h: self.hidden.gamma_h, l0_h: self.hidden.l0_h };
        let needs_sigma = self.attacks.iter().any(|a| a.units == SpoofUnits::Sigma);
        let sigma =
            if needs_sigma { KalmanFilter::new(model.clone())?.residual_sigma() } else { Vector4::from_element(1.0) };
        let mut attacks = Vec::with_capacity(self.attacks.len());
        for a in &self.attacks {
            let (sx, so) = match a.units {
                SpoofUnits::Meters => (Vector4::from_element(1.0), Vector2::from_element(1.0)),
                SpoofUnits::Sigma => (sigma, Vector2::new(sigma[0], sigma[1])),
            };
            attacks.push(AttackSpec {
                target: VehicleId(a.target),
                start_step: a.start_step,
                end_step: a.end_step.unwrap_or(u64::MAX),
                xi_x: a.state_spoof.as_ref().map_or(SpoofSchedule::zero(), |s| s.to_core(&sx)),
                xi_o: a.obstacle_spoof.as_ref().map_or(SpoofSchedule::zero(), |s| s.to_core(&so)),
                remove_ids: a.remove.iter().map(|&i| VehicleId(i)).collect(),
                add_ids: a.add.iter().map(|&i| VehicleId(i)).collect(),
                stealth_scale: a.stealth_scale,
            });
        }
        let scenario = Scenario {
            initial_states: self.vehicles.iter().map(|v| StateVector::new(v2(v.position), v2(v.velocity))).collect(),
            goal: self.goal.map(v2),
            obstacles: self
                .obstacles
                .iter()
                .map(|o| match o {
                    ObstacleFile::Rect { min, max } => Obstacle::Rect { min: v2(*min), max: v2(*max) },
                    ObstacleFile::Points(p) => Obstacle::Points(p.iter().copied().map(v2).collect()),
                })
                .collect(),
            obstacle_spacing: self.obstacle_spacing,
            objects: self.objects.iter().copied().map(v2).collect(),
            model,
            swarm,
            hidden,
            monitor: self.monitor.to_core(),
            task: TaskParams {
                eps_d: self.task.eps_d,
                eps_v: self.task.eps_v,
                t_dwell: self.task.t_dwell,
                hidden_obstacle_springs: self.task.hidden_obstacle_springs,
            },
            attacks,
            seed: self.seed,
            steps: self.steps,
            link_drop_prob: self.link_drop_prob,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Describes a scenario in file form, with spoofs in meters.
    pub fn from_scenario(s: &Scenario) -> Result<Self, springmesh_core::Error> {
        let model = ModelFile::from_core(&s.model).map_err(springmesh_core::Error::Config)?;
        let ids = |set: &BTreeSet<VehicleId>| set.iter().map(|v| v.0).collect::<Vec<_>>();
        Ok(Self {
            seed: s.seed,
            steps: s.steps,
            n_vehicles: Some(s.n_vehicles()),
            goal: s.goal.as_ref().map(a2),
            link_drop_prob: s.link_drop_prob,
            vehicles: s
                .initial_states
                .iter()
                .map(|x| VehicleFile { position: a2(&x.position()), velocity: a2(&x.velocity()) })
                .collect(),
            objects: s.objects.iter().map(a2).collect(),
            obstacle_spacing: s.obstacle_spacing,
            obstacles: s
                .obstacles
                .iter()
                .map(|o| match o {
                    Obstacle::Rect { min, max } => ObstacleFile::Rect { min: a2(min), max: a2(max) },
                    Obstacle::Points(p) => ObstacleFile::Points(p.iter().map(a2).collect()),
                })
                .collect(),
            model,
            swarm: SwarmFile {
                k_v: s.swarm.k_v,
                k_o: s.swarm.k_o,
                k_g: s.swarm.k_g,
                l0_v: s.swarm.l0_v,
                l0_o: Some(s.swarm.l0_o),
                gamma_v: s.swarm.gamma_v,
                delta_c: s.swarm.delta_c,
                delta_r: s.swarm.delta_r,
                control_cap: s.swarm.control_cap,
            },
            hidden: HiddenFile { k_h: s.hidden.k_h, gamma_h: s.hidden.gamma_h, l0_h: s.hidden.l0_h },
            monitor: MonitorFile::from_core(&s.monitor),
            task: TaskFile {
                eps_d: s.task.eps_d,
                eps_v: s.task.eps_v,
                t_dwell: s.task.t_dwell,
                hidden_obstacle_springs: s.task.hidden_obstacle_springs,
            },
            attacks: s
                .attacks
                .iter()
                .map(|a| AttackFile {
                    target: a.target.0,
                    start_step: a.start_step,
                    end_step: (a.end_step != u64::MAX).then_some(a.end_step),
                    units: SpoofUnits::Meters,
                    state_spoof: (!a.xi_x.is_zero()).then(|| ScheduleFile::from_core(&a.xi_x)),
                    obstacle_spoof: (!a.xi_o.is_zero()).then(|| ScheduleFile::from_core(&a.xi_o)),
                    remove: ids(&a.remove_ids),
                    add: ids(&a.add_ids),
                    stealth_scale: a.stealth_scale,
                })
                .collect(),
        })
    }
}

/// Parses TOML text; errors carry line and column.
pub fn parse_scenario(text: &str, origin: &Path) -> Result<Scenario, ConfigError> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
    file.to_scenario().map_err(|source| ConfigError::Invalid { path: origin.to_path_buf(), source })
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_scenario(&text, path)
}

/// Renders a scenario as TOML.
pub fn to_toml(s: &Scenario) -> Result<String, springmesh_core::Error> {
    let file = ScenarioFile::from_scenario(s)?;
    toml::to_string(&file).map_err(|e| springmesh_core::Error::Config(e.to_string()))
}
