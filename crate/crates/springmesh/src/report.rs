//! Plain-text tables for run and batch summaries.

use std::fmt::Write;

use crate::metrics::RunMetrics;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

/// Multi-section summary of one run.
pub fn run_table(m: &RunMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {}  steps {}", m.seed, m.steps);
    let _ = writeln!(s, "goal arrival step: {}", opt(m.goal_arrival_step));
    let _ = writeln!(
        s,
        "alarm-rate samples outside band: {} / {} ({:.4})",
        m.band.outside,
        m.band.total,
        m.band.fraction()
    );
    let _ = writeln!(s, "false isolations: {}", m.false_isolations);
    for (class, n) in &m.isolations_by_class {
        let _ = writeln!(s, "  isolations[{class}] = {n}");
    }
    if !m.attacks.is_empty() {
        let _ = writeln!(s, "\nattack  start  first_isolation  latency  false_sig  flagged_by  signature_detected_by");
        for a in &m.attacks {
            let _ = writeln!(
                s,
                "{:>6}  {:>5}  {:>15}  {:>7}  {:>9}  {:?}  {:?}",
                a.target,
                a.start_step,
                opt(a.first_isolation_step),
                opt(a.latency),
                a.false_signature_detections,
                a.flagged_by,
                a.signature_detected_by
            );
        }
    }
    if !m.signatures.is_empty() {
        let _ = writeln!(s, "\nobserver  target  activated  detected  latency  object_error  target_mode");
        for g in &m.signatures {
            let _ = writeln!(
                s,
                "{:>8}  {:>6}  {:>9}  {:>8}  {:>7}  {:>12}  {}",
                g.observer,
                g.target,
                g.activated_step,
                opt(g.detected_step),
                opt(g.latency),
                g.object_error.map(|e| format!("{e:.4}")).unwrap_or_else(|| "-".into()),
                g.target_mode.as_deref().unwrap_or("-")
            );
        }
    }
    let _ = writeln!(s, "\ndiscoverers: {:?}", m.discoverers);
    for (i, r) in m.final_compromised.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
        let _ = writeln!(s, "R_{i} = {r:?}");
    }
    s
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// One line per seed plus latency percentiles.
pub fn batch_table(runs: &[(u64, RunMetrics)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed  goal_step  false_iso  band_frac  attack_latencies  signature_latencies");
    let mut lat = Vec::new();
    for (seed, m) in runs {
        let al: Vec<String> = m.attacks.iter().map(|a| opt(a.latency)).collect();
        let sl: Vec<String> = m.signatures.iter().map(|g| opt(g.latency)).collect();
        lat.extend(m.attacks.iter().filter_map(|a| a.latency.map(|l| l as f64)));
        let _ = writeln!(
            s,
            "{seed:>4}  {:>9}  {:>9}  {:>9.5}  [{}]  [{}]",
            opt(m.goal_arrival_step),
            m.false_isolations,
            m.band.fraction(),
            al.join(","),
            sl.join(",")
        );
    }
    lat.sort_by(f64::total_cmp);
    let _ = writeln!(
        s,
        "\nattack detection latency (steps): p10 {}  p50 {}  p90 {}  detected {}",
        percentile(&lat, 0.1),
        percentile(&lat, 0.5),
        percentile(&lat, 0.9),
        lat.len()
    );
    s
}
