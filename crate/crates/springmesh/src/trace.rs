//! Persisted trace format: `trace.jsonl`, `summary.csv`, `events.csv`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use springmesh_core::sim::{Event, TraceRecord};

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub vehicles: Vec<VehicleRow>,
    pub pairs: Vec<PairRow>,
    pub events: Vec<EventRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRow {
    pub id: usize,
    /// True state `(px, py, vx, vy)`.
    pub x: [f64; 4],
    /// On-board estimate.
    pub xhat: [f64; 4],
    pub mode: String,
    pub u: [f64; 2],
    pub compromised: Vec<usize>,
    pub neighbors: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_estimate: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub observer: usize,
    pub target: usize,
    pub a_plus: Vec<f64>,
    pub a_minus: Vec<f64>,
    pub out_of_band: bool,
    pub skipped: bool,
    pub suspended: bool,
    pub isolated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Inter-vehicle residual `(px, py, vx, vy)` when the update ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vehicle: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

fn arr4(x: &nalgebra::Vector4<f64>) -> [f64; 4] {
    [x[0], x[1], x[2], x[3]]
}

impl From<&Event> for EventRow {
    fn from(e: &Event) -> Self {
        let mut r = EventRow { kind: e.kind().to_string(), ..Default::default() };
        match e {
            Event::AttackStarted { target } | Event::AttackEnded { target } => r.target = Some(target.0),
            Event::ModeChanged { vehicle, from, to } => {
                r.vehicle = Some(vehicle.0);
                r.from = Some(from.name().into());
                r.to = Some(to.name().into());
            }
            Event::ObjectDiscovered { vehicle, object } => {
                r.vehicle = Some(vehicle.0);
                r.position = Some([object.x, object.y]);
            }
            Event::Isolated { observer, target, class } => {
                r.observer = Some(observer.0);
                r.target = Some(target.0);
                r.class = Some(class.name().into());
            }
            Event::SignatureActivated { observer, target, entry_speed } => {
                r.observer = Some(observer.0);
                r.target = Some(target.0);
                r.value = Some(*entry_speed);
            }
            Event::SignatureDetected { observer, target, estimate, error } => {
                r.observer = Some(observer.0);
                r.target = Some(target.0);
                r.position = estimate.map(|p| [p.x, p.y]);
                r.value = *error;
            }
            Event::TrustExpired { observer, target } => {
                r.observer = Some(observer.0);
                r.target = Some(target.0);
            }
        }
        r
    }
}

impl From<&TraceRecord> for StepRecord {
    fn from(t: &TraceRecord) -> Self {
        StepRecord {
            step: t.step,
            vehicles: t
                .vehicles
                .iter()
                .map(|v| VehicleRow {
                    id: v.id.0,
                    x: arr4(&v.true_state.0),
                    xhat: arr4(&v.estimate.0),
                    mode: v.mode.name().into(),
                    u: [v.control.x, v.control.y],
                    compromised: v.compromised.iter().map(|j| j.0).collect(),
                    neighbors: v.neighbors.iter().map(|j| j.0).collect(),
                    object_estimate: v.object_estimate.map(|p| [p.x, p.y]),
                })
                .collect(),
            pairs: t
                .pairs
                .iter()
                .map(|p| PairRow {
                    observer: p.observer.0,
                    target: p.target.0,
                    a_plus: p.alarm_plus.clone(),
                    a_minus: p.alarm_minus.clone(),
                    out_of_band: p.out_of_band,
                    skipped: p.skipped,
                    suspended: p.suspended,
                    isolated: p.isolated,
                    h: p.switch_rate,
                    r: p.residual.map(|r| [r.x, r.y, r.z, r.w]),
                })
                .collect(),
            events: t.events.iter().map(EventRow::from).collect(),
        }
    }
}

pub fn mode_code(name: &str) -> u8 {
    match name {
        "primary" => 0,
        "hidden_discoverer" => 1,
        "hidden_follower" => 2,
        _ => u8::MAX,
    }
}

/// I/O failure with the offending path.
#[derive(Debug, thiserror::Error)]
#[error("{path}: {source}")]
pub struct TraceIoError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceIoError + '_ {
    move |source| TraceIoError { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> TraceIoError + '_ {
    move |e| TraceIoError { path: path.to_path_buf(), source: std::io::Error::other(e) }
}

/// Streams the three trace files into a directory.
pub struct TraceWriter {
    dir: PathBuf,
    jsonl: BufWriter<File>,
    summary: csv::Writer<File>,
    events: csv::Writer<File>,
    n: usize,
}

impl TraceWriter {
    pub const TRACE: &'static str = "trace.jsonl";
    pub const SUMMARY: &'static str = "summary.csv";
    pub const EVENTS: &'static str = "events.csv";

    pub fn create(dir: &Path, n_vehicles: usize) -> Result<Self, TraceIoError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join(Self::TRACE);
        let jsonl = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
        let p = dir.join(Self::SUMMARY);
        let mut summary = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
        summary.write_record(summary_header(n_vehicles)).map_err(csv_err(&p))?;
        let p = dir.join(Self::EVENTS);
        let mut events = csv::Writer::from_path(&p).map_err(csv_err(&p))?;
        events
            .write_record(["step", "kind", "vehicle", "observer", "target", "class", "from", "to", "x", "y", "value"])
            .map_err(csv_err(&p))?;
        Ok(Self { dir: dir.to_path_buf(), jsonl, summary, events, n: n_vehicles })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<(), TraceIoError> {
        let p = self.dir.join(Self::TRACE);
        serde_json::to_writer(&mut self.jsonl, r).map_err(|e| io_err(&p)(e.into()))?;
        self.jsonl.write_all(b"\n").map_err(io_err(&p))?;
        let p = self.dir.join(Self::SUMMARY);
        self.summary.write_record(summary_row(r, self.n)).map_err(csv_err(&p))?;
        let p = self.dir.join(Self::EVENTS);
        for e in &r.events {
            let o = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            self.events
                .write_record([
                    r.step.to_string(),
                    e.kind.clone(),
                    o(e.vehicle),
                    o(e.observer),
                    o(e.target),
                    e.class.clone().unwrap_or_default(),
                    e.from.clone().unwrap_or_default(),
                    e.to.clone().unwrap_or_default(),
                    f(e.position.map(|p| p[0])),
                    f(e.position.map(|p| p[1])),
                    f(e.value),
                ])
                .map_err(csv_err(&p))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), TraceIoError> {
        let p = self.dir.join(Self::TRACE);
        self.jsonl.flush().map_err(io_err(&p))?;
        let p = self.dir.join(Self::SUMMARY);
        self.summary.flush().map_err(io_err(&p))?;
        let p = self.dir.join(Self::EVENTS);
        self.events.flush().map_err(io_err(&p))
    }
}

fn summary_header(n: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "centroid_x".into(), "centroid_y".into()];
    for i in 0..n {
        for c in ["px", "py", "vx", "vy", "mode", "n_isolated"] {
            h.push(format!("{c}_{i}"));
        }
    }
    for i in 0..n {
        for j in (0..n).filter(|j| *j != i) {
            for c in ["a_plus_max", "a_minus_min", "h"] {
                h.push(format!("{c}_{i}_{j}"));
            }
        }
    }
    h
}

fn summary_row(r: &StepRecord, n: usize) -> Vec<String> {
    let mut row = Vec::with_capacity(3 + 6 * n + 3 * n * n);
    let (cx, cy) = r.vehicles.iter().fold((0.0, 0.0), |(x, y), v| (x + v.x[0], y + v.x[1]));
    let m = r.vehicles.len().max(1) as f64;
    row.push(r.step.to_string());
    row.push((cx / m).to_string());
    row.push((cy / m).to_string());
    for v in &r.vehicles {
        for c in &v.x {
            row.push(c.to_string());
        }
        row.push(mode_code(&v.mode).to_string());
        row.push(v.compromised.len().to_string());
    }
    let mut cells = vec![[String::new(), String::new(), String::new()]; n * n];
    for p in &r.pairs {
        let fmax = p.a_plus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let fmin = p.a_minus.iter().copied().fold(f64::INFINITY, f64::min);
        cells[p.observer * n + p.target] =
            [fmax.to_string(), fmin.to_string(), p.h.map(|h| h.to_string()).unwrap_or_default()];
    }
    for i in 0..n {
        for j in (0..n).filter(|j| *j != i) {
            row.extend(cells[i * n + j].iter().cloned());
        }
    }
    row
}

/// Reads `trace.jsonl` back, one record per line.
pub fn read_trace(path: &Path) -> Result<Vec<StepRecord>, TraceIoError> {
    let f = File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(ln, line)| {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|e| TraceIoError {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", ln + 1)),
            })
        })
        .collect()
}
