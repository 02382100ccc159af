//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_PI_2;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use springmesh::config::{load_scenario, parse_scenario};
use springmesh::run::{run_metrics, run_to_dir, simulate};
use springmesh::RunMetrics;
use springmesh_core::consistency::{expected_alarm_rate, CusignConfig, CusignMonitor, PseudoWindow};
use springmesh_core::dynamics::{discretize_dt, residual_variance, rotation, StateVector};
use springmesh_core::formation::{gabriel_neighbors, hidden_control, HiddenParams, VehicleId};
use springmesh_core::signature::{estimate_object_position, DecayMap, SignatureMonitor};
use springmesh_core::sim::{Event, Mode, Scenario, World};
use springmesh_core::Vec2;

const SEEDS: std::ops::Range<u64> = 0..20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn scenario(name: &str) -> Scenario {
    load_scenario(&Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios")).join(name)).unwrap()
}

fn with_seed(s: &Scenario, seed: u64) -> Scenario {
    Scenario { seed, ..s.clone() }
}

/// Mean steps from 0 until the count first reaches `tau`, by solving the first-step equations.
fn hitting_time(tau: u32) -> f64 {
    let t = tau as usize;
    let mut a = DMatrix::<f64>::identity(t, t);
    for s in 0..t {
        if s + 1 < t {
            a[(s, s + 1)] -= 0.5;
        }
        a[(s, s.saturating_sub(1))] -= 0.5;
    }
    let x = a.lu().solve(&DVector::from_element(t, 1.0)).unwrap();
    x[0]
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for tau in 1..=10 {
        worst = worst.max((expected_alarm_rate(tau).unwrap() - 1.0 / hitting_time(tau)).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_mc: f64 = 0.0;
    for tau in 1..=4 {
        let cfg = CusignConfig::new(tau, 20, 1.0, 0.01).unwrap();
        let mut m = CusignMonitor::new(VehicleId(0), VehicleId(1), 0, &cfg, 0).unwrap();
        let n = 1_000_000u64;
        let (mut plus, mut minus) = (0u64, 0u64);
        for _ in 0..n {
            let (p, q) = m.step(if rng.random::<bool>() { 1.0 } else { -1.0 });
            plus += p as u64;
            minus += q as u64;
        }
        let e = expected_alarm_rate(tau).unwrap();
        for c in [plus, minus] {
            worst_mc = worst_mc.max((c as f64 / n as f64 - e).abs() / e);
        }
    }
    let anchors = (expected_alarm_rate(1).unwrap() - 0.5).abs() < 1e-12
        && (expected_alarm_rate(2).unwrap() - 1.0 / 6.0).abs() < 1e-12;
    outcome(
        worst < 1e-10 && worst_mc < 0.03 && anchors,
        format!("max |E[A] - oracle| = {worst:.2e}, worst Monte Carlo relative error {:.2}%", 100.0 * worst_mc),
    )
}

fn criterion_2() -> Outcome {
    let text = r#"
seed = 0
steps = 100000
vehicles = [{ position = [0.0, 0.0] }, { position = [1.5, 0.0] }, { position = [0.75, 1.299038105676658] }]
[model]
process_noise_std = [0.00015, 0.00015, 0.00003, 0.00003]
measurement_noise_std = [0.002, 0.002, 0.0005, 0.0005]
[monitor]
theta = 0.743
"#;
    let s = parse_scenario(text, Path::new("three.toml")).unwrap();
    let world = World::new(s.clone()).unwrap();
    let var: Vec<f64> =
        (0..4).map(|q| residual_variance(world.filter().gain(), world.filter().meas_resid_cov(), q).unwrap()).collect();
    // per (observer, target): element sums, sums of squares, count
    type Moments = ([f64; 4], [f64; 4], u64);
    let mut acc: BTreeMap<(usize, usize), Moments> = BTreeMap::new();
    simulate(&s, |rec, _| {
        for p in &rec.pairs {
            if let Some(r) = p.residual {
                let e = acc.entry((p.observer.0, p.target.0)).or_insert(([0.0; 4], [0.0; 4], 0));
                for q in 0..4 {
                    e.0[q] += r[q];
                    e.1[q] += r[q] * r[q];
                }
                e.2 += 1;
            }
        }
        Ok(())
    })
    .unwrap();
    let mut pass = acc.len() == 6;
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    let mut min_n = u64::MAX;
    for (sum, sq, n) in acc.values() {
        let nf = *n as f64;
        min_n = min_n.min(*n);
        pass &= *n >= 90_000;
        for q in 0..4 {
            let mean = sum[q] / nf;
            let z = mean.abs() / (var[q].sqrt() / nf.sqrt());
            let rel = (sq[q] / nf - mean * mean) / var[q] - 1.0;
            worst_mean = worst_mean.max(z);
            worst_var = worst_var.max(rel.abs());
            pass &= z < 3.0 && rel.abs() < 0.10;
        }
    }
    outcome(
        pass,
        format!(
            "{} pairs, >= {min_n} samples each, worst |mean| = {worst_mean:.2} sigma/sqrt(N), worst variance error {:.2}%",
            acc.len(),
            100.0 * worst_var
        ),
    )
}

fn criterion_3() -> Outcome {
    let base = Scenario { steps: 5000, ..scenario("nominal.toml") };
    let alpha = base.monitor.alpha;
    let runs: Vec<RunMetrics> = SEEDS.map(|seed| run_metrics(&with_seed(&base, seed)).unwrap()).collect();
    let frac = runs.iter().map(|m| m.band.fraction()).sum::<f64>() / runs.len() as f64;
    let clean = runs.iter().filter(|m| m.unexplained() == 0).count();
    outcome(
        frac <= 2.0 * alpha && clean >= 18 && base.monitor.window == 20 && alpha == 0.01,
        format!(
            "theta {}, mean out-of-band fraction {frac:.4} (limit {}), seeds without false isolation {clean}/20",
            base.monitor.theta,
            2.0 * alpha
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut base = scenario("replication.toml");
    base.steps = 1000;
    base.objects.clear();
    base.attacks.retain(|a| a.target == VehicleId(3));
    let target = VehicleId(3);
    let onset = base.attacks[0].start_step;
    let (mut on_time, mut edge_ok, mut observers) = (0, 0, 0usize);
    let mut latencies = Vec::new();
    for seed in SEEDS {
        let mut first = None;
        let mut leaked = false;
        let m = simulate(&with_seed(&base, seed), |rec, _| {
            if first.is_none() && rec.vehicles.iter().any(|v| v.compromised.contains(&target)) {
                first = Some(rec.step);
            }
            for v in &rec.vehicles {
                leaked |= v.compromised.contains(&target) && v.neighbors.contains(&target);
            }
            Ok(())
        })
        .unwrap();
        if let Some(k) = first {
            latencies.push(k - onset);
            if k - onset <= 500 {
                on_time += 1;
            }
        }
        if first.is_some() && !leaked && m.isolation_violations == 0 {
            edge_ok += 1;
        }
        observers += m.attacks[0].flagged_by.len();
    }
    latencies.sort_unstable();
    outcome(
        on_time >= 19 && edge_ok >= 19,
        format!(
            "flagged within 500 steps in {on_time}/20 (latency {}..{} steps), isolating observers drop the edge in {edge_ok}/20, mean {:.1} observers flag",
            latencies.first().copied().unwrap_or(0),
            latencies.last().copied().unwrap_or(0),
            observers as f64 / 20.0
        ),
    )
}

fn decay_map(v_entry: f64) -> DecayMap {
    let hp = HiddenParams { k_h: 0.5, gamma_h: 1.8, l0_h: 0.8 };
    DecayMap::build(&discretize_dt(0.05).unwrap(), &hp, 3.0, v_entry, 0.035, 1e-5).unwrap()
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pass = true;
    let mut parts = Vec::new();
    for len in [10u32, 20, 50] {
        let w = PseudoWindow::new(len).unwrap();
        let mut mon = SignatureMonitor::new(VehicleId(0), VehicleId(1), w, 0.01, 0, decay_map(0.6), 1);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            mon.sign_switch_step(rng.random::<f64>() - 0.5);
            sum += mon.switch_rate;
        }
        let mean = sum / n as f64;
        let tol = 3.0 * (1.0 / (4.0 * (2.0 * len as f64 - 1.0))).sqrt();
        pass &= (mean - 0.5).abs() < tol;
        parts.push(format!("l={len}: {mean:.4} (tol {tol:.3})"));
    }
    outcome(pass, parts.join(", "))
}

/// Everything criteria 6 and 7 need from one replication run.
struct SignatureRun {
    metrics: RunMetrics,
    /// Mode of every vehicle at every step.
    modes: Vec<Vec<Mode>>,
    /// `(step, observer, target)` for activations and detections, plus detection error.
    activations: Vec<(u64, usize, usize)>,
    detections: Vec<(u64, usize, usize, Option<f64>)>,
    spoofed: Vec<usize>,
}

fn signature_run(base: &Scenario, seed: u64) -> SignatureRun {
    let s = with_seed(base, seed);
    let mut modes = Vec::new();
    let mut activations = Vec::new();
    let mut detections = Vec::new();
    let metrics = simulate(&s, |rec, _| {
        modes.push(rec.vehicles.iter().map(|v| v.mode).collect());
        for e in &rec.events {
            match e {
                Event::SignatureActivated { observer, target, .. } => {
                    activations.push((rec.step, observer.0, target.0))
                }
                Event::SignatureDetected { observer, target, error, .. } => {
                    detections.push((rec.step, observer.0, target.0, *error))
                }
                _ => {}
            }
        }
        Ok(())
    })
    .unwrap();
    SignatureRun { metrics, modes, activations, detections, spoofed: s.attacks.iter().map(|a| a.target.0).collect() }
}

/// Maximal runs of steps where `v` is in `mode`, as inclusive `(entry, exit)`.
fn episodes(modes: &[Vec<Mode>], v: usize, mode: Mode) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, m) in modes.iter().enumerate() {
        match (m[v] == mode, start) {
            (true, None) => start = Some(k as u64),
            (false, Some(s)) => {
                out.push((s, k as u64 - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, modes.len() as u64 - 1));
    }
    out
}

/// Per-seed verdict for criterion 6 with the monitor count and worst latency.
fn discrimination(run: &SignatureRun) -> (bool, usize, u64, String) {
    let mut monitors = 0;
    let mut worst = 0;
    let mut why = String::new();
    let horizon = run.modes.len() as u64;
    for v in 0..run.modes[0].len() {
        for (entry, exit) in episodes(&run.modes, v, Mode::HiddenDiscoverer) {
            for &(a, o, _) in run.activations.iter().filter(|x| x.2 == v && x.0 <= exit) {
                let det = run.detections.iter().find(|d| d.1 == o && d.2 == v && d.0 >= a).map(|d| d.0);
                if det.is_some_and(|d| d < entry) {
                    continue;
                }
                let reference = a.max(entry);
                if det.is_none() && reference + 200 >= horizon {
                    continue;
                }
                monitors += 1;
                match det {
                    Some(d) if d - reference <= 200 => worst = worst.max(d - reference),
                    _ => why = format!("observer {o} on discoverer {v}: detection {det:?}, reference step {reference}"),
                }
            }
        }
    }
    for &t in &run.spoofed {
        let hidden_at = |k: u64| run.modes[k as usize][t].is_hidden();
        if let Some(d) = run.detections.iter().find(|d| d.2 == t && !hidden_at(d.0)) {
            why = format!("spoofed {t} signature-detected by {} at step {} while primary", d.1, d.0);
        }
        let a = run.metrics.attacks.iter().find(|a| a.target == t).unwrap();
        for &o in &a.flagged_by {
            if !run.metrics.final_compromised[o].contains(&t) {
                why = format!("observer {o} no longer isolates spoofed {t} at the end");
            }
        }
        if a.flagged_by.is_empty() {
            why = format!("spoofed {t} never isolated");
        }
    }
    if run.metrics.discoverers.is_empty() || monitors == 0 {
        why = "no discoverer was observed".into();
    }
    (why.is_empty(), monitors, worst, why)
}

fn criteria_6_and_7(runs: &[SignatureRun]) -> (Outcome, Outcome) {
    let mut passed = 0;
    let mut monitors = 0;
    let mut worst = 0;
    let mut failures = Vec::new();
    let mut trusted = BTreeSet::new();
    for (seed, run) in runs.iter().enumerate() {
        let (ok, n, w, why) = discrimination(run);
        passed += ok as usize;
        monitors += n;
        worst = worst.max(w);
        if !ok {
            failures.push(format!("seed {seed}: {why}"));
        }
        for d in &run.detections {
            trusted.insert(d.2);
        }
    }
    let spoofed = &runs[0].spoofed;
    let c6 = outcome(
        passed >= 19,
        format!(
            "{passed}/20 seeds; {monitors} discoverer monitors, worst latency {worst} steps; ever trusted {trusted:?}, spoofed {spoofed:?}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );

    let fixture = noise_free_localization();
    let mut good = 0;
    let mut errors = Vec::new();
    for run in runs {
        let hidden: Vec<_> = run.detections.iter().filter(|d| run.modes[d.0 as usize][d.2].is_hidden()).collect();
        let ok = !hidden.is_empty() && hidden.iter().all(|d| d.3.is_some_and(|e| e < 0.25 * 0.8));
        good += ok as usize;
        errors.extend(hidden.iter().filter_map(|d| d.3));
    }
    let max_err = errors.iter().copied().fold(0.0, f64::max);
    let c7 = outcome(
        fixture <= 3e-3 && good >= 18,
        format!(
            "noise-free max error {fixture:.2e} (limit 3.0e-3); noisy: {good}/20 seeds within 0.2, max error {max_err:.3} over {} detections",
            errors.len()
        ),
    );
    (c6, c7)
}

/// Worst localization error along noise-free hidden trajectories once past peak speed.
fn noise_free_localization() -> f64 {
    let d = discretize_dt(0.05).unwrap();
    let hp = HiddenParams { k_h: 0.5, gamma_h: 1.8, l0_h: 0.8 };
    let mut worst: f64 = 0.0;
    for (angle, v_entry) in [(0.3, 0.6), (2.0, 0.4), (-1.2, 0.9), (4.0, 0.25)] {
        let map = decay_map(v_entry);
        let object = Vec2::new(20.0, -3.3);
        let dir = rotation(angle) * Vec2::new(1.0, 0.0);
        let mut x = StateVector::new(object + dir * 3.0, -dir * v_entry);
        let mut decaying = false;
        let mut last_dir = None;
        for _ in 0..2000 {
            let prev = x.speed();
            x = d.step(&x, &hidden_control(&x, object, &hp));
            decaying |= x.speed() < prev;
            if map.in_range(x.speed()) {
                last_dir = Some(x.velocity() / x.speed());
            }
            if decaying && map.in_range(x.speed()) {
                if let Some(p) = estimate_object_position(x.position(), x.velocity(), &map, last_dir) {
                    worst = worst.max((p - object).norm());
                }
            }
        }
    }
    worst
}

fn angle_oracle(i: usize, pts: &[Vec2], excluded: &BTreeSet<VehicleId>) -> BTreeSet<VehicleId> {
    (0..pts.len())
        .filter(|&j| j != i && !excluded.contains(&VehicleId(j)))
        .filter(|&j| {
            !(0..pts.len()).any(|h| {
                if h == i || h == j || excluded.contains(&VehicleId(h)) {
                    return false;
                }
                let (a, b) = (pts[i] - pts[h], pts[j] - pts[h]);
                (a.x * b.y - a.y * b.x).abs().atan2(a.dot(&b)) > FRAC_PI_2
            })
        })
        .map(VehicleId)
        .collect()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut mismatches, mut asymmetric, mut boundary_cases) = (0, 0, 0);
    for set in 0..1000 {
        let n = rng.random_range(2..=15usize);
        let mut pts: Vec<Vec2> = if set % 2 == 0 {
            (0..n).map(|_| Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect()
        } else {
            // integer grid points put witnesses exactly on the circle
            (0..n).map(|_| Vec2::new(rng.random_range(-3..=3) as f64, rng.random_range(-3..=3) as f64)).collect()
        };
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        pts.dedup();
        let n = pts.len();
        let excluded: BTreeSet<VehicleId> = (0..n).filter(|_| rng.random::<f64>() < 0.15).map(VehicleId).collect();
        let map: BTreeMap<VehicleId, Vec2> = pts.iter().enumerate().map(|(i, p)| (VehicleId(i), *p)).collect();
        let all: BTreeSet<VehicleId> = (0..n).map(VehicleId).collect();
        let got: Vec<_> = (0..n).map(|i| gabriel_neighbors(VehicleId(i), &all, &map, &excluded)).collect();
        for i in 0..n {
            if got[i] != angle_oracle(i, &pts, &excluded) {
                mismatches += 1;
            }
            for j in &got[i] {
                if !excluded.contains(&VehicleId(i)) && !got[j.0].contains(&VehicleId(i)) {
                    asymmetric += 1;
                }
                for h in 0..n {
                    let (a, b) = (pts[i] - pts[h], pts[j.0] - pts[h]);
                    if h != i && h != j.0 && a.dot(&b) == 0.0 {
                        boundary_cases += 1;
                    }
                }
            }
        }
    }
    outcome(
        mismatches == 0 && asymmetric == 0 && boundary_cases > 0,
        format!(
            "1000 sets: {mismatches} mismatches, {asymmetric} asymmetric edges, {boundary_cases} kept edges with a witness on the circle"
        ),
    )
}

fn criterion_9() -> Outcome {
    let s = scenario("replication.toml");
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_to_dir(&s, &a).unwrap();
    run_to_dir(&s, &b).unwrap();
    let identical = ["trace.jsonl", "summary.csv", "events.csv", "metrics.json"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let clean = Scenario { attacks: vec![], ..s.clone() };
    let mut honest = 0;
    let mut arrivals = Vec::new();
    for seed in SEEDS {
        let m = run_metrics(&with_seed(&clean, seed)).unwrap();
        let ok = m.unexplained() == 0 && m.goal_arrival_step.is_some_and(|k| k < clean.steps);
        honest += ok as usize;
        arrivals.extend(m.goal_arrival_step);
    }
    arrivals.sort_unstable();
    outcome(
        identical && honest == 20,
        format!(
            "byte-identical traces: {identical}; attack-free seeds with no false isolation and goal reached: {honest}/20 (arrival steps {}..{} of {})",
            arrivals.first().copied().unwrap_or(0),
            arrivals.last().copied().unwrap_or(0),
            clean.steps
        ),
    )
}

fn report(n: usize, name: &str, start: Instant, o: &Outcome) -> bool {
    println!(
        "criterion {n} {name:<28} {} ({:.1}s) {}",
        if o.pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        o.detail
    );
    o.pass
}

fn main() {
    let mut ok = true;
    let t = Instant::now();
    ok &= report(1, "expected alarm rate", t, &criterion_1());
    let t = Instant::now();
    ok &= report(2, "residual statistics", t, &criterion_2());
    let t = Instant::now();
    ok &= report(3, "false-alarm control", t, &criterion_3());
    let t = Instant::now();
    ok &= report(4, "attack detection", t, &criterion_4());
    let t = Instant::now();
    ok &= report(5, "sign-switching statistics", t, &criterion_5());
    let t = Instant::now();
    let base = scenario("replication.toml");
    let runs: Vec<SignatureRun> = SEEDS.map(|seed| signature_run(&base, seed)).collect();
    let (c6, c7) = criteria_6_and_7(&runs);
    ok &= report(6, "hidden-signature discrimination", t, &c6);
    ok &= report(7, "object localization", t, &c7);
    let t = Instant::now();
    ok &= report(8, "Gabriel graph correctness", t, &criterion_8());
    let t = Instant::now();
    ok &= report(9, "determinism and honesty", t, &criterion_9());
    if !ok {
        std::process::exit(1);
    }
}
