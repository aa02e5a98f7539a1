use nalgebra::DMatrix;

use super::gaussian::{check_pd, check_psd, max_abs};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 1_000_000;
const RESIDUAL_TOL: f64 = 1e-10;

/// One Riccati map step `APAᵀ + Q − APCᵀ(CPCᵀ + R)⁻¹CPAᵀ`.
pub fn riccati_map(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let apat = a * p * a.transpose();
    let pct = p * c.transpose();
    let s = c * &pct + r;
    let s_inv = s.cholesky()?.inverse();
    let apct = a * pct;
    let next = apat + q - &apct * s_inv * apct.transpose();
    Some((&next + next.transpose()) * 0.5)
}

/// Stabilizing solution of the filtering Riccati equation by fixed-point
/// iteration from `P₀ = Q`.
pub fn solve_dare(a: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    solve_dare_capped(a, c, q, r, DEFAULT_MAX_ITER)
}

pub fn solve_dare_capped(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) || c.ncols() != n || r.shape() != (c.nrows(), c.nrows()) {
        return Err(Error::dim(
            "solve_dare",
            format!("A {n}x{n}, Q {n}x{n}, C mx{n}, R mxm"),
            format!(
                "A {:?}, C {:?}, Q {:?}, R {:?}",
                a.shape(),
                c.shape(),
                q.shape(),
                r.shape()
            ),
        ));
    }
    check_psd(q, "process-noise covariance")?;
    check_pd(r, "measurement-noise covariance")?;

    let singular = || Error::NotPd {
        what: "innovation covariance",
    };
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let next = riccati_map(a, c, q, r, &p).ok_or_else(singular)?;
        residual = max_abs(&(&next - &p));
        let scale = max_abs(&next).max(1.0);
        // Stop once the step is at rounding level, or when the iterate stops moving.
        if residual <= 1e-15 * scale || (next == p) {
            p = next;
            let check = riccati_map(a, c, q, r, &p).ok_or_else(singular)?;
            let final_residual = max_abs(&(&check - &p));
            if final_residual <= RESIDUAL_TOL * scale {
                log::debug!("Riccati converged after {} iterations", it + 1);
                return Ok(p);
            }
            residual = final_residual;
            break;
        }
        p = next;
    }
    Err(Error::RiccatiNoConvergence {
        iterations: max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn noiseless_process_is_zero() {
        let p = solve_dare(&s(1.0), &s(1.0), &s(0.0), &s(1.0)).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
    }

    #[test]
    fn scalar_closed_form() {
        let p = solve_dare(&s(1.0), &s(1.0), &s(1.0), &s(10.0)).unwrap();
        let exact = (1.0 + 41f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - exact).abs() < 1e-12);
    }

    #[test]
    fn stable_scalar_matches_long_iteration() {
        // 10^5-step fixed-point oracle (plain f64 recursion): 1.1327822185373186.
        let p = solve_dare(&s(0.5), &s(1.0), &s(1.0), &s(1.0)).unwrap();
        assert!((p[(0, 0)] - 1.132_782_218_537_318_6).abs() < 1e-12);
    }

    #[test]
    fn cap_reports_non_convergence() {
        let err = solve_dare_capped(&s(1.0), &s(1.0), &s(1.0), &s(10.0), 3).unwrap_err();
        assert!(matches!(err, Error::RiccatiNoConvergence { iterations: 3, .. }));
    }

    #[test]
    fn unstable_unobservable_diverges() {
        // Unobservable unstable mode: P grows without bound.
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let c = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        assert!(solve_dare_capped(&a, &c, &q, &s(1.0), 2_000).is_err());
    }
}
