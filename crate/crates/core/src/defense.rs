//! χ² attack detector, reactive mitigation and the oracle reference detector.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{predict, SteadyState, SystemModel};
use crate::numerics::gaussian::standard_normals;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub eta: f64,
}

impl DetectorConfig {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "detection threshold must be >= 0, got {eta}"
            )));
        }
        Ok(Self { eta })
    }
}

/// Which alarm rule drives mitigation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Detector {
    ChiSquare(DetectorConfig),
    /// Fires exactly on nonzero injections.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MitigationStrategy {
    Perfect,
    Noisy { sigma: f64 },
    Off,
}

impl MitigationStrategy {
    pub fn noisy(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mitigation sigma must be >= 0, got {sigma}"
            )));
        }
        Ok(MitigationStrategy::Noisy { sigma })
    }

    pub fn sigma(&self) -> f64 {
        match self {
            MitigationStrategy::Noisy { sigma } => *sigma,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutcome {
    pub g: f64,
    pub alarm: bool,
    pub residual: DVector<f64>,
}

/// `y_a − C(A x̂ + B u)`, all at the previous step's estimate and control.
pub fn residual(
    model: &SystemModel,
    x_hat_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
    y_a: &DVector<f64>,
) -> Result<DVector<f64>> {
    if y_a.len() != model.m() {
        return Err(Error::dim("residual y_a", model.m(), y_a.len()));
    }
    let prior = predict(model, x_hat_prev, u_prev)?;
    Ok(y_a - &model.measurement * prior)
}

/// `rᵀ P_r⁻¹ r`.
pub fn g_statistic(ss: &SteadyState, r: &DVector<f64>) -> f64 {
    let g = (r.transpose() * &ss.residual_cov_inv * r)[(0, 0)];
    g.max(0.0)
}

/// Alarm iff `g > η`; `g = η` does not alarm.
pub fn detect(cfg: &DetectorConfig, g: f64) -> bool {
    g > cfg.eta
}

pub fn oracle_detect(a_true: &DVector<f64>) -> bool {
    a_true.iter().any(|v| *v != 0.0)
}

pub fn run_detector(detector: &Detector, ss: &SteadyState, r: DVector<f64>, a_true: &DVector<f64>) -> DetectionOutcome {
    let g = g_statistic(ss, &r);
    let alarm = match detector {
        Detector::ChiSquare(cfg) => detect(cfg, g),
        Detector::Oracle => oracle_detect(a_true),
    };
    DetectionOutcome { g, alarm, residual: r }
}

/// Mitigation signal δ for the true injection. `Noisy` always consumes one
/// standard normal per measurement channel so paired runs stay aligned.
pub fn mitigation_signal<R: Rng + ?Sized>(
    strategy: &MitigationStrategy,
    a_true: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    match strategy {
        MitigationStrategy::Perfect => a_true.clone(),
        MitigationStrategy::Noisy { sigma } => {
            let z = standard_normals(rng, a_true.len());
            a_true + z * *sigma
        }
        MitigationStrategy::Off => DVector::zeros(a_true.len()),
    }
}

/// `y_a − i·δ`.
pub fn apply_mitigation(y_a: &DVector<f64>, alarm: bool, delta: &DVector<f64>) -> DVector<f64> {
    if alarm {
        y_a - delta
    } else {
        y_a.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::derive_steady_state;
    use crate::numerics::RngStream;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn residual_is_linear_in_measurement() {
        let m = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        let (xh, u) = (v1(0.7), v1(-0.2));
        let pred = &m.measurement * predict(&m, &xh, &u).unwrap();
        assert_eq!(residual(&m, &xh, &u, &pred).unwrap()[0], 0.0);
        let y = v1(3.3);
        let a = v1(2.5);
        let r0 = residual(&m, &xh, &u, &y).unwrap();
        let r1 = residual(&m, &xh, &u, &(&y + &a)).unwrap();
        assert!((r1[0] - r0[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn g_statistic_values() {
        let m = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        let ss = derive_steady_state(&m).unwrap();
        assert_eq!(g_statistic(&ss, &v1(0.0)), 0.0);
        let pr = ss.residual_cov[(0, 0)];
        assert!((g_statistic(&ss, &v1(pr.sqrt())) - 1.0).abs() < 1e-12);
        assert!((g_statistic(&ss, &v1(10.0)) - 100.0 / pr).abs() < 1e-12);
        assert!((g_statistic(&ss, &v1(10.0)) - 7.2984).abs() < 1e-4);
    }

    #[test]
    fn detect_boundary_and_branches() {
        let cfg = DetectorConfig::new(2.0).unwrap();
        assert!(!detect(&cfg, 0.0));
        assert!(!detect(&cfg, 2.0));
        assert!(detect(&cfg, 2.0 + 1e-12));
        assert!(detect(&DetectorConfig::new(0.0).unwrap(), 0.001));
        assert!(DetectorConfig::new(-1.0).is_err());
    }

    #[test]
    fn mitigation_signals() {
        let mut rng = RngStream::new(4, 0).rng();
        let a = v1(3.0);
        assert_eq!(mitigation_signal(&MitigationStrategy::Perfect, &a, &mut rng), a);
        assert_eq!(
            mitigation_signal(&MitigationStrategy::Noisy { sigma: 0.0 }, &a, &mut rng),
            a
        );
        assert_eq!(mitigation_signal(&MitigationStrategy::Off, &a, &mut rng)[0], 0.0);
        assert!(MitigationStrategy::noisy(-1.0).is_err());
    }

    #[test]
    fn apply_mitigation_cases() {
        let y = v1(5.0);
        let a = v1(2.0);
        assert_eq!(apply_mitigation(&(&y + &a), false, &a), &y + &a);
        assert_eq!(apply_mitigation(&y, true, &y)[0], 0.0);
        assert_eq!(apply_mitigation(&(&y + &a), true, &a), y);
    }

    #[test]
    fn oracle_fires_on_nonzero_only() {
        let seq = [0.0, 0.001, 0.0, -3.0, 0.0];
        let fired: Vec<bool> = seq.iter().map(|a| oracle_detect(&v1(*a))).collect();
        assert_eq!(fired, vec![false, true, false, true, false]);
    }
}
