//! Double-integrator plant, sensing model, and steady-state Kalman estimation.
//!
//! Every vehicle shares one [`LinearModel`] and one [`KalmanFilter`]; only the
//! [`KalmanEstimator`] state is per-vehicle.

use alloc::format;
use nalgebra::{DMatrix, DVector, Dyn, Matrix2, Matrix4, Matrix4x2, OMatrix, SymmetricEigen, Vector2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Error, Result};
use crate::Vec2;

/// State dimension `n`.
pub const STATE_DIM: usize = 4;
/// Input dimension `m`.
pub const INPUT_DIM: usize = 2;

const RICCATI_TOL: f64 = 1e-13;
const RICCATI_MAX_ITER: usize = 200_000;

/// Stacked position and velocity `(px, py, vx, vy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector(pub Vector4<f64>);

impl StateVector {
    pub fn new(p: Vec2, v: Vec2) -> Self {
        Self(Vector4::new(p.x, p.y, v.x, v.y))
    }

    pub fn zeros() -> Self {
        Self(Vector4::zeros())
    }

    pub fn position(&self) -> Vec2 {
        Vector2::new(self.0[0], self.0[1])
    }

    pub fn velocity(&self) -> Vec2 {
        Vector2::new(self.0[2], self.0[3])
    }

    pub fn speed(&self) -> f64 {
        self.velocity().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

impl From<Vector4<f64>> for StateVector {
    fn from(v: Vector4<f64>) -> Self {
        Self(v)
    }
}

/// Output matrix type: `N_s` rows, 4 columns.
pub type OutputMatrix = OMatrix<f64, Dyn, nalgebra::U4>;
/// Gain matrix type: 4 rows, `N_s` columns.
pub type GainMatrix = OMatrix<f64, nalgebra::U4, Dyn>;

/// Shared plant description.
///
/// The continuous-time pair is fixed to the planar double integrator; the
/// configurable pieces are the timestep, noise covariances, and output map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub dt: f64,
    pub proc_noise_cov: Matrix4<f64>,
    pub meas_noise_cov: DMatrix<f64>,
    pub output: OutputMatrix,
}

impl LinearModel {
    /// Full-state output with diagonal noise given as standard deviations.
    pub fn with_std(dt: f64, qp: f64, qv: f64, rp: f64, rv: f64) -> Self {
        Self {
            dt,
            proc_noise_cov: Matrix4::from_diagonal(&Vector4::new(qp * qp, qp * qp, qv * qv, qv * qv)),
            meas_noise_cov: DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![rp * rp, rp * rp, rv * rv, rv * rv])),
            output: OutputMatrix::identity(4),
        }
    }

    /// Position-only output (`N_s = 2`).
    pub fn position_only(dt: f64, qp: f64, qv: f64, rp: f64) -> Self {
        let mut output = OutputMatrix::zeros(2);
        output[(0, 0)] = 1.0;
        output[(1, 1)] = 1.0;
        Self {
            dt,
            proc_noise_cov: Matrix4::from_diagonal(&Vector4::new(qp * qp, qp * qp, qv * qv, qv * qv)),
            meas_noise_cov: DMatrix::from_diagonal_element(2, 2, rp * rp),
            output,
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.output.nrows()
    }

    /// Continuous-time `(A, B)`.
    pub fn continuous(&self) -> (Matrix4<f64>, Matrix4x2<f64>) {
        let mut a = Matrix4::zeros();
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let mut b = Matrix4x2::zeros();
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        (a, b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(config_err!("timestep dt must be finite and positive, got {}", self.dt));
        }
        let ns = self.n_outputs();
        if ns == 0 {
            return Err(config_err!("output matrix has no rows"));
        }
        if self.meas_noise_cov.nrows() != ns || self.meas_noise_cov.ncols() != ns {
            return Err(config_err!(
                "measurement noise covariance is {}x{} but the output has {} channels",
                self.meas_noise_cov.nrows(),
                self.meas_noise_cov.ncols(),
                ns
            ));
        }
        if !self.output.iter().all(|c| c.is_finite()) {
            return Err(config_err!("output matrix has non-finite entries"));
        }
        check_psd(&DMatrix::from_iterator(4, 4, self.proc_noise_cov.iter().copied()), "process noise covariance")?;
        check_psd(&self.meas_noise_cov, "measurement noise covariance")?;
        Ok(())
    }
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.iter().all(|c| c.is_finite()) {
        return Err(config_err!("{what} has non-finite entries"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(config_err!("{what} is not symmetric"));
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(config_err!("{what} is not positive semi-definite"));
    }
    Ok(())
}

/// Zero-order-hold discretization `x' = A x + B u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrete {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
    pub dt: f64,
}

impl Discrete {
    pub fn step(&self, x: &StateVector, u: &Vec2) -> StateVector {
        StateVector(self.a * x.0 + self.b * u)
    }
}

/// Exact discretization of the double integrator for timestep `dt`.
pub fn discretize_dt(dt: f64) -> Result<Discrete> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(config_err!("timestep dt must be finite and positive, got {dt}"));
    }
    let mut a = Matrix4::identity();
    a[(0, 2)] = dt;
    a[(1, 3)] = dt;
    let h = 0.5 * dt * dt;
    let mut b = Matrix4x2::zeros();
    b[(0, 0)] = h;
    b[(1, 1)] = h;
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    Ok(Discrete { a, b, dt })
}

pub fn discretize(model: &LinearModel) -> Result<Discrete> {
    discretize_dt(model.dt)
}

/// `x' = A_d x + B_d u + noise`.
pub fn step_dynamics(d: &Discrete, x: &StateVector, u: &Vec2, noise: &Vector4<f64>) -> StateVector {
    StateVector(d.a * x.0 + d.b * u + noise)
}

/// `y = C x + noise`.
pub fn measure(output: &OutputMatrix, x: &StateVector, noise: &DVector<f64>) -> DVector<f64> {
    output * x.0 + noise
}

/// Draws zero-mean Gaussian vectors with a given (possibly singular) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseShaper {
    factor: DMatrix<f64>,
}

impl NoiseShaper {
    pub fn new(cov: &DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(cov.clone());
        let sqrt_l = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_l);
        Self { factor }
    }

    pub fn from_matrix4(cov: &Matrix4<f64>) -> Self {
        Self::new(&DMatrix::from_iterator(4, 4, cov.iter().copied()))
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z
    }

    pub fn sample4<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector4<f64> {
        let s = self.sample(rng);
        Vector4::from_iterator(s.iter().copied())
    }
}

/// Converged steady-state filter quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateGain {
    pub gain: GainMatrix,
    /// `Σ_z = C P⁻ Cᵀ + R`.
    pub meas_resid_cov: DMatrix<f64>,
    pub prior_cov: Matrix4<f64>,
    pub post_cov: Matrix4<f64>,
    pub iterations: usize,
}

/// `(P⁻_next, K, Σ_z, P⁺)` from one Riccati update.
pub type RiccatiStep = (Matrix4<f64>, GainMatrix, DMatrix<f64>, Matrix4<f64>);

/// One prior-covariance Riccati update.
pub fn riccati_step(d: &Discrete, model: &LinearModel, prior: &Matrix4<f64>) -> Result<RiccatiStep> {
    let c = &model.output;
    let s = c * prior * c.transpose() + &model.meas_noise_cov;
    let s_inv = s
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .or_else(|| s.clone().try_inverse())
        .ok_or(Error::Singular("innovation covariance"))?;
    let gain: GainMatrix = prior * c.transpose() * s_inv;
    let ikc = Matrix4::identity() - &gain * c;
    let post = ikc * prior;
    let post = 0.5 * (post + post.transpose());
    let next = d.a * post * d.a.transpose() + model.proc_noise_cov;
    Ok((0.5 * (next + next.transpose()), gain, s, post))
}

/// Iterates the discrete Riccati recursion to its fixed point.
pub fn steady_state_gain(model: &LinearModel) -> Result<SteadyStateGain> {
    model.validate()?;
    let d = discretize(model)?;
    let mut prior = Matrix4::identity();
    for it in 1..=RICCATI_MAX_ITER {
        let (next, _, _, _) = riccati_step(&d, model, &prior)?;
        let delta = (next - prior).amax();
        prior = next;
        if delta < RICCATI_TOL * prior.amax().max(1e-300) || delta == 0.0 {
            let (_, gain, meas_resid_cov, post_cov) = riccati_step(&d, model, &prior)?;
            return Ok(SteadyStateGain { gain, meas_resid_cov, prior_cov: prior, post_cov, iterations: it });
        }
    }
    Err(Error::NoConvergence {
        model: format!("double integrator (dt={}, {} output channels)", model.dt, model.n_outputs()),
        iterations: RICCATI_MAX_ITER,
    })
}

/// Filter constants shared by all vehicles.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanFilter {
    pub model: LinearModel,
    pub discrete: Discrete,
    pub steady: SteadyStateGain,
}

impl KalmanFilter {
    pub fn new(model: LinearModel) -> Result<Self> {
        let steady = steady_state_gain(&model)?;
        let discrete = discretize(&model)?;
        Ok(Self { model, discrete, steady })
    }

    pub fn gain(&self) -> &GainMatrix {
        &self.steady.gain
    }

    pub fn meas_resid_cov(&self) -> &DMatrix<f64> {
        &self.steady.meas_resid_cov
    }

    pub fn init(&self, x0: StateVector) -> KalmanEstimator {
        KalmanEstimator { estimate: x0, err_cov: self.steady.post_cov }
    }

    /// Predict with `(A_d, B_d, u)` and correct with the steady-state gain.
    /// Returns the innovation `y − C x̂⁻`.
    pub fn step(&self, est: &mut KalmanEstimator, u: &Vec2, y: &DVector<f64>) -> DVector<f64> {
        let prior = self.discrete.step(&est.estimate, u);
        let innovation = y - &self.model.output * prior.0;
        est.estimate = StateVector(prior.0 + &self.steady.gain * &innovation);
        innovation
    }

    /// Per-element residual standard deviations (square roots of [`residual_variance`]).
    pub fn residual_sigma(&self) -> Vector4<f64> {
        Vector4::from_fn(|q, _| {
            libm::sqrt(residual_variance(&self.steady.gain, &self.steady.meas_resid_cov, q).unwrap_or(0.0))
        })
    }
}

/// Per-vehicle estimator state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanEstimator {
    pub estimate: StateVector,
    pub err_cov: Matrix4<f64>,
}

/// `Σ_s (K_qs σ_z,s)²` for 0-based state element `q`.
pub fn residual_variance(gain: &GainMatrix, meas_resid_cov: &DMatrix<f64>, q: usize) -> Result<f64> {
    if q >= gain.nrows() {
        return Err(Error::IndexOutOfRange { index: q, dim: gain.nrows() });
    }
    let ns = gain.ncols().min(meas_resid_cov.nrows());
    Ok((0..ns)
        .map(|s| {
            let t = gain[(q, s)];
            t * t * meas_resid_cov[(s, s)]
        })
        .sum())
}

/// Convenience for 2x2 rotation matrices used in tests and fixtures.
pub fn rotation(angle: f64) -> Matrix2<f64> {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    Matrix2::new(c, -s, s, c)
}
