use springmesh_core::adversary::{AttackSpec, SpoofSchedule};
use springmesh_core::dynamics::{LinearModel, StateVector};
use springmesh_core::formation::{HiddenParams, SwarmParams, VehicleId};
use springmesh_core::sim::*;
use springmesh_core::Vec2;

fn scenario(seed: u64) -> Scenario {
    let initial_states = (0..6)
        .map(|i| {
            StateVector::new(Vec2::new(1.5 * (i / 2) as f64, if i % 2 == 0 { 0.75 } else { -0.75 }), Vec2::zeros())
        })
        .collect();
    Scenario {
        initial_states,
        goal: Some(Vec2::new(20.0, 0.0)),
        obstacles: vec![],
        obstacle_spacing: None,
        objects: vec![],
        model: LinearModel::with_std(0.05, 1.5e-4, 3e-5, 2e-3, 5e-4),
        swarm: SwarmParams {
            k_v: 3.0,
            k_o: 0.5,
            k_g: 0.05,
            l0_v: 1.5,
            l0_o: 3.0,
            gamma_v: 3.0,
            delta_c: 6.0,
            delta_r: 3.0,
            control_cap: None,
        },
        hidden: HiddenParams { k_h: 0.5, gamma_h: 1.8, l0_h: 0.8 },
        monitor: MonitorParams { theta: 0.743, ..MonitorParams::default() },
        task: TaskParams::default(),
        attacks: vec![],
        seed,
        steps: 600,
        link_drop_prob: 0.0,
    }
}

fn run(sc: &Scenario) -> Vec<TraceRecord> {
    let mut w = World::new(sc.clone()).unwrap();
    (0..sc.steps).map(|_| w.run_step().unwrap()).collect()
}

#[test]
fn same_seed_same_trace() {
    let sc = scenario(7);
    assert_eq!(run(&sc), run(&sc));
    let other = run(&scenario(8));
    assert_ne!(run(&sc).last().unwrap().vehicles, other.last().unwrap().vehicles);
}

#[test]
fn honest_residuals_match_predicted_scale() {
    let sc = scenario(2);
    let sigma = World::new(sc.clone()).unwrap().residual_sigma().to_owned();
    let mut sq = [0.0; 4];
    let mut n = 0usize;
    for r in run(&sc) {
        for res in r.pairs.iter().filter_map(|p| p.residual) {
            for q in 0..4 {
                sq[q] += (res[q] / sigma[q]).powi(2);
            }
            n += 1;
        }
    }
    assert!(n > 1000);
    for (q, s) in sq.iter().enumerate() {
        let v = s / n as f64;
        assert!((0.8..1.25).contains(&v), "element {q}: normalized variance {v}");
    }
}

#[test]
fn isolations_only_target_attacked_vehicles() {
    let mut sc = scenario(3);
    sc.steps = 800;
    let mut a = AttackSpec::identity(VehicleId(2));
    a.start_step = 200;
    let sigma = World::new(sc.clone()).unwrap().residual_sigma().to_owned();
    a.xi_x = SpoofSchedule::Constant(nalgebra::Vector4::new(sigma[0], sigma[1], 0.0, 0.0));
    sc.attacks.push(a);
    let trace = run(&sc);
    let mut flagged = 0;
    for r in &trace {
        for e in &r.events {
            if let Event::Isolated { target, class, .. } = e {
                assert_ne!(*class, IsolationClass::Unexplained);
                assert!(r.step >= 200);
                if *target == VehicleId(2) {
                    flagged += 1;
                }
            }
        }
    }
    assert!(flagged > 0);
    for r in trace.iter().filter(|r| r.step > 200) {
        for v in &r.vehicles {
            if v.compromised.contains(&VehicleId(2)) {
                assert!(!v.neighbors.contains(&VehicleId(2)));
            }
        }
    }
}

#[test]
fn swarm_moves_toward_goal() {
    let sc = scenario(1);
    let trace = run(&sc);
    let centroid =
        |r: &TraceRecord| r.vehicles.iter().map(|v| v.true_state.position()).sum::<Vec2>() / r.vehicles.len() as f64;
    let d0 = (centroid(&trace[0]) - sc.goal.unwrap()).norm();
    let d1 = (centroid(trace.last().unwrap()) - sc.goal.unwrap()).norm();
    assert!(d1 < d0 - 1.0, "{d0} -> {d1}");
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut sc = scenario(0);
    sc.initial_states.truncate(1);
    assert!(World::new(sc).is_err());
    let mut sc = scenario(0);
    sc.attacks.push(AttackSpec::identity(VehicleId(9)));
    assert!(World::new(sc).is_err());
    let mut sc = scenario(0);
    sc.link_drop_prob = 1.5;
    assert!(World::new(sc).is_err());
}
