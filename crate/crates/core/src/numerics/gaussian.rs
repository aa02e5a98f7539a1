use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::rng::RngStream;
use crate::error::{Error, Result};

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

/// Mean and covariance of a multivariate normal distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let g = Self { mean, cov };
        g.validate()?;
        Ok(g)
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.cov.nrows() != d || self.cov.ncols() != d {
            return Err(Error::dim(
                "Gaussian covariance",
                format!("{d}x{d}"),
                format!("{}x{}", self.cov.nrows(), self.cov.ncols()),
            ));
        }
        check_psd(&self.cov, "covariance")
    }

    /// Symmetric square root `S` with `S Sᵀ = cov`.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        symmetric_sqrt(&self.cov)
    }
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Symmetric within 1e-10 relative, eigenvalues ≥ −1e-10·‖m‖.
pub fn check_psd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotPsd {
            what,
            detail: format!("not square ({}x{})", m.nrows(), m.ncols()),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd {
            what,
            detail: "non-finite entry".into(),
        });
    }
    let scale = max_abs(m);
    let asym = max_abs(&(m - m.transpose()));
    if asym > SYM_TOL * scale {
        return Err(Error::NotPsd {
            what,
            detail: format!("asymmetry {asym:e}"),
        });
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let sym = (m + m.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    if min_eig < -PSD_TOL * scale {
        return Err(Error::NotPsd {
            what,
            detail: format!("eigenvalue {min_eig:e}"),
        });
    }
    Ok(())
}

pub fn check_pd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    check_psd(m, what).map_err(|_| Error::NotPd { what })?;
    if m.clone().cholesky().is_none() {
        return Err(Error::NotPd { what });
    }
    Ok(())
}

pub(crate) fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Draws from a fixed Gaussian with a precomputed factor.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
    degenerate: bool,
}

impl GaussianSampler {
    pub fn new(spec: &GaussianSpec) -> Self {
        let factor = spec.sqrt_factor();
        let degenerate = factor.iter().all(|v| *v == 0.0);
        Self {
            mean: spec.mean.clone(),
            factor,
            degenerate,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard normals are drawn even for a zero covariance, so the stream
    /// position does not depend on the covariance.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normals(rng, self.mean.len());
        if self.degenerate {
            return self.mean.clone();
        }
        &self.mean + &self.factor * z
    }
}

pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// One draw from `g` on `stream`.
pub fn sample_gaussian(g: &GaussianSpec, stream: RngStream) -> Result<DVector<f64>> {
    g.validate()?;
    let mut rng = stream.rng();
    Ok(GaussianSampler::new(g).sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cov_returns_mean() {
        let g = GaussianSpec::new(DVector::from_vec(vec![1.5, -2.0]), DMatrix::zeros(2, 2)).unwrap();
        let x = sample_gaussian(&g, RngStream::new(3, 4)).unwrap();
        assert_eq!(x, g.mean);
    }

    #[test]
    fn rejects_indefinite() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(GaussianSpec::zero_mean(cov), Err(Error::NotPsd { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianSpec::zero_mean(asym).is_err());
    }

    #[test]
    fn sqrt_reconstructs() {
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let s = symmetric_sqrt(&cov);
        assert!(max_abs(&(&s * s.transpose() - &cov)) < 1e-12);
    }

    #[test]
    fn standard_normal_mean() {
        let g = GaussianSpec::zero_mean(DMatrix::identity(1, 1)).unwrap();
        let sampler = GaussianSampler::new(&g);
        let mut rng = RngStream::new(11, 0).rng();
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| sampler.sample(&mut rng)[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn correlated_empirical_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
        let g = GaussianSpec::zero_mean(cov.clone()).unwrap();
        let sampler = GaussianSampler::new(&g);
        let mut rng = RngStream::new(12, 0).rng();
        let n = 1_000_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let x = sampler.sample(&mut rng);
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        for (e, c) in acc.iter().zip(cov.iter()) {
            assert!((e - c).abs() / c.abs() < 0.02, "{e} vs {c}");
        }
    }
}
