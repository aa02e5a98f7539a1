//! Discrete-time LTI plant, measurement process, steady-state Kalman
//! filter and the closed-loop error recursion.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gaussian::{check_pd, check_psd, GaussianSampler, GaussianSpec};
use crate::numerics::riccati::solve_dare;

/// Plant `x' = Ax + Bu + w`, sensor `y = Cx + v`, with `w ~ N(0,Q)`,
/// `v ~ N(0,R)` and initial state covariance `X0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub dynamics: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub measurement: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub measurement_noise: DMatrix<f64>,
    pub initial_cov: DMatrix<f64>,
}

impl SystemModel {
    /// Validates dimensions, covariances, controllability and observability.
    pub fn new(
        dynamics: DMatrix<f64>,
        input: DMatrix<f64>,
        measurement: DMatrix<f64>,
        process_noise: DMatrix<f64>,
        measurement_noise: DMatrix<f64>,
        initial_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let model = Self::new_unchecked(
            dynamics,
            input,
            measurement,
            process_noise,
            measurement_noise,
            initial_cov,
        )?;
        if rank(&model.controllability_matrix()) < model.n() {
            return Err(Error::Structure("controllable (rank test on [B AB ...])"));
        }
        if rank(&model.observability_matrix()) < model.n() {
            return Err(Error::Structure("observable (rank test on [C; CA; ...])"));
        }
        Ok(model)
    }

    /// Like [`SystemModel::new`] but skips the rank tests, for degenerate
    /// channels such as `C = 0`.
    pub fn new_unchecked(
        dynamics: DMatrix<f64>,
        input: DMatrix<f64>,
        measurement: DMatrix<f64>,
        process_noise: DMatrix<f64>,
        measurement_noise: DMatrix<f64>,
        initial_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let n = dynamics.nrows();
        let m = measurement.nrows();
        let shape_err = |what: &'static str, want: (usize, usize), got: (usize, usize)| {
            Error::dim(what, format!("{}x{}", want.0, want.1), format!("{}x{}", got.0, got.1))
        };
        if !dynamics.is_square() || n == 0 {
            return Err(shape_err("A", (n, n), dynamics.shape()));
        }
        if input.nrows() != n || input.ncols() == 0 {
            return Err(shape_err("B", (n, input.ncols()), input.shape()));
        }
        if measurement.ncols() != n || m == 0 {
            return Err(shape_err("C", (m, n), measurement.shape()));
        }
        if process_noise.shape() != (n, n) {
            return Err(shape_err("Q", (n, n), process_noise.shape()));
        }
        if measurement_noise.shape() != (m, m) {
            return Err(shape_err("R", (m, m), measurement_noise.shape()));
        }
        if initial_cov.shape() != (n, n) {
            return Err(shape_err("X0", (n, n), initial_cov.shape()));
        }
        check_psd(&process_noise, "Q")?;
        check_psd(&initial_cov, "X0")?;
        check_pd(&measurement_noise, "R")?;
        Ok(Self {
            dynamics,
            input,
            measurement,
            process_noise,
            measurement_noise,
            initial_cov,
        })
    }

    /// Scalar model (`n = m = p = 1`).
    pub fn scalar(a: f64, b: f64, c: f64, q: f64, r: f64) -> Result<Self> {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(s(a), s(b), s(c), s(q), s(r), s(0.0))
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.dynamics.nrows()
    }

    /// Measurement dimension.
    pub fn m(&self) -> usize {
        self.measurement.nrows()
    }

    /// Control dimension.
    pub fn p(&self) -> usize {
        self.input.ncols()
    }

    pub fn is_scalar(&self) -> bool {
        self.n() == 1 && self.m() == 1
    }

    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        let mut out = DMatrix::zeros(n, n * p);
        let mut block = self.input.clone();
        for k in 0..n {
            out.view_mut((0, k * p), (n, p)).copy_from(&block);
            block = &self.dynamics * block;
        }
        out
    }

    pub fn observability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut out = DMatrix::zeros(n * m, n);
        let mut block = self.measurement.clone();
        for k in 0..n {
            out.view_mut((k * m, 0), (m, n)).copy_from(&block);
            block *= &self.dynamics;
        }
        out
    }

    pub fn process_sampler(&self) -> GaussianSampler {
        GaussianSampler::new(&GaussianSpec {
            mean: DVector::zeros(self.n()),
            cov: self.process_noise.clone(),
        })
    }

    pub fn measurement_sampler(&self) -> GaussianSampler {
        GaussianSampler::new(&GaussianSpec {
            mean: DVector::zeros(self.m()),
            cov: self.measurement_noise.clone(),
        })
    }

    fn check_len(&self, what: &'static str, v: &DVector<f64>, want: usize) -> Result<()> {
        if v.len() != want {
            return Err(Error::dim(what, want, v.len()));
        }
        Ok(())
    }
}

fn rank(m: &DMatrix<f64>) -> usize {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = smax * 1e-10 * m.nrows().max(m.ncols()) as f64;
    svd.singular_values.iter().filter(|s| **s > tol).count()
}

/// Derived steady-state Kalman filter quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    /// Prior (one-step prediction) covariance P∞.
    pub p_inf: DMatrix<f64>,
    /// Kalman gain K = P∞Cᵀ(CP∞Cᵀ + R)⁻¹.
    pub gain: DMatrix<f64>,
    /// Residual covariance P_r = CP∞Cᵀ + R.
    pub residual_cov: DMatrix<f64>,
    pub residual_cov_inv: DMatrix<f64>,
    /// Error propagation A_K = A − KCA.
    pub closed_loop: DMatrix<f64>,
    /// Process-noise gain W_K = I − KC.
    pub noise_gain: DMatrix<f64>,
    /// Steady-state estimation error covariance P_e = (I − KC)P∞.
    pub error_cov: DMatrix<f64>,
}

pub fn derive_steady_state(model: &SystemModel) -> Result<SteadyState> {
    let a = &model.dynamics;
    let c = &model.measurement;
    let p_inf = solve_dare(a, c, &model.process_noise, &model.measurement_noise)?;
    let residual_cov = c * &p_inf * c.transpose() + &model.measurement_noise;
    let residual_cov = (&residual_cov + residual_cov.transpose()) * 0.5;
    let residual_cov_inv = residual_cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPd {
            what: "residual covariance",
        })?
        .inverse();
    let gain = &p_inf * c.transpose() * &residual_cov_inv;
    let eye = DMatrix::identity(model.n(), model.n());
    let noise_gain = &eye - &gain * c;
    let closed_loop = a - &gain * c * a;
    let error_cov = &noise_gain * &p_inf;
    let error_cov = (&error_cov + error_cov.transpose()) * 0.5;
    Ok(SteadyState {
        p_inf,
        gain,
        residual_cov,
        residual_cov_inv,
        closed_loop,
        noise_gain,
        error_cov,
    })
}

/// True state, estimate and time index of a running loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub x: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub t: usize,
}

impl LoopState {
    pub fn error(&self) -> DVector<f64> {
        &self.x - &self.x_hat
    }
}

/// `Ax + Bu + w` with `w ~ N(0, Q)` drawn from `rng`.
pub fn plant_step<R: Rng + ?Sized>(
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let w = model.process_sampler().sample(rng);
    plant_step_with(model, x, u, &w)
}

pub fn plant_step_with(
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_len("plant_step x", x, model.n())?;
    model.check_len("plant_step u", u, model.p())?;
    model.check_len("plant_step w", w, model.n())?;
    Ok(&model.dynamics * x + &model.input * u + w)
}

/// `Cx + v` with `v ~ N(0, R)` drawn from `rng`.
pub fn observe<R: Rng + ?Sized>(model: &SystemModel, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let v = model.measurement_sampler().sample(rng);
    observe_with(model, x, &v)
}

pub fn observe_with(model: &SystemModel, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_len("observe x", x, model.n())?;
    model.check_len("observe v", v, model.m())?;
    Ok(&model.measurement * x + v)
}

/// One-step prediction `A x̂ + B u`.
pub fn predict(model: &SystemModel, x_hat: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_len("predict x_hat", x_hat, model.n())?;
    model.check_len("predict u", u, model.p())?;
    Ok(&model.dynamics * x_hat + &model.input * u)
}

/// Kalman update on the filtered measurement `y_f`.
pub fn kf_update(
    model: &SystemModel,
    ss: &SteadyState,
    x_hat: &DVector<f64>,
    u: &DVector<f64>,
    y_f: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_len("kf_update y_f", y_f, model.m())?;
    let prior = predict(model, x_hat, u)?;
    let innovation = y_f - &model.measurement * &prior;
    Ok(prior + &ss.gain * innovation)
}

/// Error recursion `A_K e + W_K w − K(a − iδ) − K v`.
#[allow(clippy::too_many_arguments)]
pub fn error_step(
    model: &SystemModel,
    ss: &SteadyState,
    e: &DVector<f64>,
    w: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    alarm: bool,
    delta: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_len("error_step e", e, model.n())?;
    model.check_len("error_step w", w, model.n())?;
    model.check_len("error_step v", v, model.m())?;
    model.check_len("error_step a", a, model.m())?;
    model.check_len("error_step delta", delta, model.m())?;
    let injected = if alarm { a - delta } else { a.clone() };
    Ok(&ss.closed_loop * e + &ss.noise_gain * w - &ss.gain * injected - &ss.gain * v)
}

/// `α B⁻¹ (x0 − x̂)`.
pub fn setpoint_control(
    model: &SystemModel,
    x_hat: &DVector<f64>,
    x0: &DVector<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    let b_inv = setpoint_inverse(model, alpha)?;
    model.check_len("setpoint x_hat", x_hat, model.n())?;
    model.check_len("setpoint x0", x0, model.n())?;
    Ok(alpha * b_inv * (x0 - x_hat))
}

fn setpoint_inverse(model: &SystemModel, alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if model.p() != model.n() {
        return Err(Error::dim("setpoint control needs square B", model.n(), model.p()));
    }
    model.input.clone().try_inverse().ok_or(Error::Singular("B"))
}

/// Control law applied by the loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    Zero,
    Setpoint {
        target: DVector<f64>,
        alpha: f64,
        input_inv: DMatrix<f64>,
    },
}

impl Controller {
    pub fn setpoint(model: &SystemModel, target: DVector<f64>, alpha: f64) -> Result<Self> {
        let input_inv = setpoint_inverse(model, alpha)?;
        model.check_len("setpoint target", &target, model.n())?;
        Ok(Controller::Setpoint {
            target,
            alpha,
            input_inv,
        })
    }

    pub fn control(&self, model: &SystemModel, x_hat: &DVector<f64>) -> DVector<f64> {
        match self {
            Controller::Zero => DVector::zeros(model.p()),
            Controller::Setpoint {
                target,
                alpha,
                input_inv,
            } => *alpha * input_inv * (target - x_hat),
        }
    }
}

/// Noise and signals drawn during one closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSignals {
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub v: DVector<f64>,
    pub y: DVector<f64>,
    pub y_f: DVector<f64>,
}

/// Advances the loop by one step: control from `x̂`, plant step, sensor
/// reading, then the KF update on `filter(y)` (identity for an
/// unattacked loop).
pub fn closed_loop_step<R, F>(
    model: &SystemModel,
    ss: &SteadyState,
    state: &LoopState,
    controller: &Controller,
    rng: &mut R,
    filter: F,
) -> Result<(LoopState, StepSignals)>
where
    R: Rng + ?Sized,
    F: FnOnce(&DVector<f64>) -> DVector<f64>,
{
    let u = controller.control(model, &state.x_hat);
    let w = model.process_sampler().sample(rng);
    let v = model.measurement_sampler().sample(rng);
    let x = plant_step_with(model, &state.x, &u, &w)?;
    let y = observe_with(model, &x, &v)?;
    let y_f = filter(&y);
    let x_hat = kf_update(model, ss, &state.x_hat, &u, &y_f)?;
    Ok((
        LoopState {
            x,
            x_hat,
            t: state.t + 1,
        },
        StepSignals { u, w, v, y, y_f },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn bench() -> (SystemModel, SteadyState) {
        let m = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        let ss = derive_steady_state(&m).unwrap();
        (m, ss)
    }

    #[test]
    fn scalar_benchmark_steady_state() {
        let (_, ss) = bench();
        let p = (1.0 + 41f64.sqrt()) / 2.0;
        let k = p / (p + 10.0);
        assert!((ss.p_inf[(0, 0)] - p).abs() < 1e-9);
        assert!((ss.gain[(0, 0)] - k).abs() < 1e-9);
        assert!((ss.gain[(0, 0)] - 0.270_156).abs() < 1e-6);
        assert!((ss.error_cov[(0, 0)] - (1.0 - k) * p).abs() < 1e-9);
        assert!((ss.error_cov[(0, 0)] - 2.701_56).abs() < 1e-5);
        assert!((ss.residual_cov[(0, 0)] - (p + 10.0)).abs() < 1e-9);
    }

    #[test]
    fn noiseless_process_has_zero_gain() {
        let m = SystemModel::scalar(1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let ss = derive_steady_state(&m).unwrap();
        assert_eq!(ss.gain[(0, 0)], 0.0);
        assert_eq!(ss.error_cov[(0, 0)], 0.0);
    }

    #[test]
    fn rejects_structure_and_shapes() {
        assert!(matches!(
            SystemModel::scalar(1.0, 1.0, 0.0, 1.0, 1.0),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            SystemModel::scalar(1.0, 0.0, 1.0, 1.0, 1.0),
            Err(Error::Structure(_))
        ));
        assert!(SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 0.0).is_err());
        let bad = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::zeros(2, 2),
        );
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }

    #[test]
    fn plant_and_observe_arithmetic() {
        let m = SystemModel::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2) * 1e-24,
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let mut rng = RngStream::new(1, 1).rng();
        let u0 = DVector::from_vec(vec![0.3, -1.2]);
        let x = plant_step(&m, &DVector::zeros(2), &u0, &mut rng).unwrap();
        assert_eq!(x, u0);
        let y = observe(&m, &x, &mut rng).unwrap();
        assert!((y - &x).amax() < 1e-4);

        let s = SystemModel::scalar(1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(plant_step(&s, &v1(2.0), &v1(-1.0), &mut rng).unwrap()[0], 1.0);
        assert!(plant_step(&s, &DVector::zeros(2), &v1(0.0), &mut rng).is_err());
    }

    #[test]
    fn zero_measurement_matrix_gives_pure_noise() {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let m = SystemModel::new_unchecked(s(1.0), s(1.0), s(0.0), s(1.0), s(4.0), s(0.0)).unwrap();
        let stream = RngStream::new(2, 0);
        let y = observe(&m, &v1(100.0), &mut stream.rng()).unwrap();
        let v = m.measurement_sampler().sample(&mut stream.rng());
        assert_eq!(y, v);
    }

    #[test]
    fn kf_update_cases() {
        let (m, ss) = bench();
        let x_hat = v1(2.0);
        let u = v1(0.5);
        let pred = predict(&m, &x_hat, &u).unwrap();
        let y_f = &m.measurement * &pred;
        assert_eq!(kf_update(&m, &ss, &x_hat, &u, &y_f).unwrap(), pred);
        let out = kf_update(&m, &ss, &v1(0.0), &v1(0.0), &v1(1.0)).unwrap();
        assert!((out[0] - 0.270_156).abs() < 1e-6);

        let m0 = SystemModel::scalar(1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let ss0 = derive_steady_state(&m0).unwrap();
        assert_eq!(kf_update(&m0, &ss0, &x_hat, &u, &v1(99.0)).unwrap(), pred);
    }

    #[test]
    fn error_step_cases() {
        let (m, ss) = bench();
        let z = v1(0.0);
        assert_eq!(error_step(&m, &ss, &z, &z, &z, &z, false, &z).unwrap()[0], 0.0);
        let e = v1(1.7);
        let a = v1(4.0);
        let mitigated = error_step(&m, &ss, &e, &z, &z, &a, true, &a).unwrap();
        assert!((mitigated[0] - ss.closed_loop[(0, 0)] * 1.7).abs() < 1e-15);
        let out = error_step(&m, &ss, &v1(1.0), &z, &z, &v1(10.0), false, &z).unwrap();
        let k = ss.gain[(0, 0)];
        assert!((out[0] - ((1.0 - k) - 10.0 * k)).abs() < 1e-12);
        assert!((out[0] + 1.971_72).abs() < 1e-5);
    }

    #[test]
    fn setpoint_cases() {
        let m = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let x0 = v1(3.0);
        assert_eq!(setpoint_control(&m, &x0, &x0, 0.5).unwrap()[0], 0.0);
        assert_eq!(setpoint_control(&m, &v1(1.0), &x0, 0.5).unwrap()[0], 1.0);
        assert!(setpoint_control(&m, &v1(1.0), &x0, 1.0).is_err());
        assert!(setpoint_control(&m, &v1(1.0), &x0, 0.0).is_err());
    }

    #[test]
    fn noiseless_loop_contracts_toward_setpoint() {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let m = SystemModel::new(s(1.0), s(1.0), s(1.0), s(0.0), s(1e-12), s(0.0)).unwrap();
        let ss = derive_steady_state(&m).unwrap();
        let ctrl = Controller::setpoint(&m, v1(0.835), 0.5).unwrap();
        let mut rng = RngStream::new(0, 0).rng();
        // Estimate exact; Q = 0 gives K = 0 so the estimate tracks the plant.
        let mut st = LoopState {
            x: v1(1.0),
            x_hat: v1(1.0),
            t: 0,
        };
        let mut dev = (st.x[0] - 0.835).abs();
        for _ in 0..20 {
            let (next, _) = closed_loop_step(&m, &ss, &st, &ctrl, &mut rng, |y| y.clone()).unwrap();
            let d = (next.x[0] - 0.835).abs();
            assert!((d - 0.5 * dev).abs() < 1e-12);
            dev = d;
            st = next;
        }
        assert_eq!(st.t, 20);

        let eq = LoopState {
            x: v1(0.835),
            x_hat: v1(0.835),
            t: 0,
        };
        let (next, _) = closed_loop_step(&m, &ss, &eq, &ctrl, &mut rng, |y| y.clone()).unwrap();
        assert_eq!(next.x, eq.x);
    }
}
