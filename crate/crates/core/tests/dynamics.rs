use approx::assert_relative_eq;
use nalgebra::{DMatrix, Matrix4, Matrix4x2, Vector4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use springmesh_core::dynamics::*;
use springmesh_core::Vec2;

fn rk4(x: Vector4<f64>, u: Vec2, dt: f64, substeps: usize) -> Vector4<f64> {
    let f = |x: &Vector4<f64>| Vector4::new(x[2], x[3], u.x, u.y);
    let h = dt / substeps as f64;
    let mut x = x;
    for _ in 0..substeps {
        let k1 = f(&x);
        let k2 = f(&(x + k1 * (h / 2.0)));
        let k3 = f(&(x + k2 * (h / 2.0)));
        let k4 = f(&(x + k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

fn replication_model() -> LinearModel {
    LinearModel::with_std(0.05, 1.5e-4, 3e-5, 2e-3, 5e-4)
}

#[test]
fn discretization_matches_rk4() {
    let d = discretize_dt(0.05).unwrap();
    let x = StateVector::new(Vec2::new(1.0, -2.0), Vec2::new(0.3, 0.7));
    let u = Vec2::new(-1.5, 0.25);
    let exact = rk4(x.0, u, 0.05, 1000);
    assert!((d.step(&x, &u).0 - exact).amax() < 1e-12);
}

proptest! {
    #[test]
    fn discretization_is_a_semigroup(t1 in 1e-3f64..1.0, t2 in 1e-3f64..1.0) {
        let (d1, d2, d12) = (discretize_dt(t1).unwrap(), discretize_dt(t2).unwrap(), discretize_dt(t1 + t2).unwrap());
        prop_assert!((d2.a * d1.a - d12.a).amax() < 1e-12);
        // a constant input held over both intervals
        let b: Matrix4x2<f64> = d2.a * d1.b + d2.b;
        prop_assert!((b - d12.b).amax() < 1e-12);
    }

    #[test]
    fn step_is_linear(
        p in prop::array::uniform4(-10.0f64..10.0),
        q in prop::array::uniform4(-10.0f64..10.0),
        u in prop::array::uniform2(-5.0f64..5.0),
        a in -3.0f64..3.0,
    ) {
        let d = discretize_dt(0.05).unwrap();
        let x = StateVector(Vector4::from(p));
        let y = StateVector(Vector4::from(q));
        let u = Vec2::from(u);
        let lhs = d.step(&StateVector(x.0 * a + y.0), &(u * a));
        let rhs = d.step(&x, &u).0 * a + d.step(&y, &Vec2::zeros()).0;
        prop_assert!((lhs.0 - rhs).amax() < 1e-9);
    }

    #[test]
    fn residual_variance_is_nonnegative(qp in 1e-5f64..1e-1, qv in 1e-5f64..1e-1, rp in 1e-4f64..1.0, rv in 1e-4f64..1.0) {
        let f = KalmanFilter::new(LinearModel::with_std(0.05, qp, qv, rp, rv)).unwrap();
        for q in 0..4 {
            prop_assert!(residual_variance(f.gain(), f.meas_resid_cov(), q).unwrap() >= 0.0);
        }
    }
}

#[test]
fn steady_state_is_a_riccati_fixed_point() {
    let m = replication_model();
    let g = steady_state_gain(&m).unwrap();
    let d = discretize(&m).unwrap();
    let (next, k, s, _) = riccati_step(&d, &m, &g.prior_cov).unwrap();
    assert!((next - g.prior_cov).amax() <= 1e-9 * g.prior_cov.amax());
    assert!((k - &g.gain).amax() < 1e-9);
    assert!((s - &g.meas_resid_cov).amax() < 1e-9 * g.meas_resid_cov.amax());
}

#[test]
fn steady_gain_matches_time_varying_filter() {
    // Joseph-form covariance recursion, written out independently.
    for m in [
        replication_model(),
        LinearModel::with_std(0.05, 0.0015, 0.0003, 0.02, 0.005),
        LinearModel::position_only(0.1, 0.01, 0.02, 0.05),
    ] {
        let d = discretize(&m).unwrap();
        let c = DMatrix::from_iterator(m.n_outputs(), 4, m.output.iter().copied());
        let a = DMatrix::from_iterator(4, 4, d.a.iter().copied());
        let q = DMatrix::from_iterator(4, 4, m.proc_noise_cov.iter().copied());
        let r = m.meas_noise_cov.clone();
        let eye = DMatrix::<f64>::identity(4, 4);
        let mut p = DMatrix::<f64>::identity(4, 4);
        let mut k = DMatrix::<f64>::zeros(4, m.n_outputs());
        for _ in 0..10_000 {
            let s = &c * &p * c.transpose() + &r;
            k = &p * c.transpose() * s.try_inverse().unwrap();
            let ikc = &eye - &k * &c;
            let post = &ikc * &p * ikc.transpose() + &k * &r * k.transpose();
            p = &a * post * a.transpose() + &q;
        }
        let g = steady_state_gain(&m).unwrap();
        let gk = DMatrix::from_iterator(4, m.n_outputs(), g.gain.iter().copied());
        assert!((gk - k).amax() < 1e-8, "gain mismatch for {m:?}");
    }
}

#[test]
fn innovation_covariance_matches_prediction() {
    let m = LinearModel::with_std(0.05, 0.0015, 0.0003, 0.02, 0.005);
    let f = KalmanFilter::new(m.clone()).unwrap();
    let proc = NoiseShaper::from_matrix4(&m.proc_noise_cov);
    let meas = NoiseShaper::new(&m.meas_noise_cov);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut x = StateVector::zeros();
    let mut est = f.init(x);
    let u = Vec2::new(0.1, -0.2);
    let n = 200_000;
    let mut sum = Vector4::zeros();
    let mut sq = Matrix4::zeros();
    let mut err_sq = Matrix4::zeros();
    for _ in 0..n {
        x = step_dynamics(&f.discrete, &x, &u, &proc.sample4(&mut rng));
        let y = measure(&m.output, &x, &meas.sample(&mut rng));
        let nu = f.step(&mut est, &u, &y);
        let nu = Vector4::from_iterator(nu.iter().copied());
        sum += nu;
        sq += nu * nu.transpose();
        let e = est.estimate.0 - x.0;
        err_sq += e * e.transpose();
    }
    let s = &f.steady.meas_resid_cov;
    for i in 0..4 {
        let var = sq[(i, i)] / n as f64;
        assert_relative_eq!(var, s[(i, i)], max_relative = 0.02);
        assert!((sum[i] / n as f64).abs() < 4.0 * (s[(i, i)] / n as f64).sqrt());
        assert_relative_eq!(err_sq[(i, i)] / n as f64, f.steady.post_cov[(i, i)], max_relative = 0.03);
    }
}

#[test]
fn noise_shaper_reproduces_covariance() {
    let cov = DMatrix::from_row_slice(2, 2, &[4.0, 1.2, 1.2, 1.0]);
    let sh = NoiseShaper::new(&cov);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let mut acc = DMatrix::<f64>::zeros(2, 2);
    for _ in 0..n {
        let z = sh.sample(&mut rng);
        acc += &z * z.transpose();
    }
    acc /= n as f64;
    assert!((acc - cov).amax() < 0.05);
}

#[test]
fn singular_process_noise_is_accepted() {
    let mut m = replication_model();
    m.proc_noise_cov[(0, 0)] = 0.0;
    m.proc_noise_cov[(1, 1)] = 0.0;
    assert!(KalmanFilter::new(m).is_ok());
}
