use nalgebra::DMatrix;

use super::gaussian::{check_pd, GaussianSampler, GaussianSpec};
use super::rng::RngStream;
use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 10_000;

/// Monte-Carlo estimate of P(XᵀWX ≥ threshold) for X ~ g.
///
/// Returns `(probability, std_err)` with `std_err = sample std / √samples`.
pub fn gchi2_tail_prob(
    g: &GaussianSpec,
    weight: &DMatrix<f64>,
    threshold: f64,
    stream: RngStream,
    samples: usize,
) -> Result<(f64, f64)> {
    g.validate()?;
    if weight.nrows() != g.dim() || weight.ncols() != g.dim() {
        return Err(Error::dim("gchi2 weight", g.dim(), weight.nrows()));
    }
    check_pd(weight, "quadratic-form weight")?;
    if samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "generalized chi-square sampling needs at least {MIN_SAMPLES} samples, got {samples}"
        )));
    }
    if threshold.is_nan() {
        return Err(Error::InvalidArgument("threshold is NaN".into()));
    }
    if threshold == f64::INFINITY {
        return Ok((0.0, 0.0));
    }
    if threshold <= 0.0 {
        return Ok((1.0, 0.0));
    }
    let sampler = GaussianSampler::new(g);
    let mut rng = stream.rng();
    let mut hits = 0usize;
    for _ in 0..samples {
        let x = sampler.sample(&mut rng);
        if (x.transpose() * weight * &x)[(0, 0)] >= threshold {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    Ok((p, (p * (1.0 - p) / samples as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::normal::std_normal_cdf;
    use nalgebra::DVector;

    fn unit() -> GaussianSpec {
        GaussianSpec::zero_mean(DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn trivial_thresholds() {
        let w = DMatrix::identity(1, 1);
        assert_eq!(
            gchi2_tail_prob(&unit(), &w, 0.0, RngStream::new(1, 0), 10_000)
                .unwrap()
                .0,
            1.0
        );
        assert_eq!(
            gchi2_tail_prob(&unit(), &w, f64::INFINITY, RngStream::new(1, 0), 10_000)
                .unwrap()
                .0,
            0.0
        );
    }

    #[test]
    fn chi2_one_dof_tail() {
        let w = DMatrix::identity(1, 1);
        let (p, se) = gchi2_tail_prob(&unit(), &w, 3.841, RngStream::new(5, 0), 200_000).unwrap();
        let exact = 2.0 * std_normal_cdf(-3.841_f64.sqrt());
        assert!((p - exact).abs() < 3.0 * se, "{p} ± {se} vs {exact}");
        assert!((p - 0.05).abs() < 0.003);
    }

    #[test]
    fn rejects_bad_weight_and_few_samples() {
        let g = GaussianSpec::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(gchi2_tail_prob(&g, &w, 1.0, RngStream::new(1, 0), 10_000).is_err());
        assert!(gchi2_tail_prob(&unit(), &DMatrix::identity(1, 1), 1.0, RngStream::new(1, 0), 100).is_err());
    }

    #[test]
    fn reproducible() {
        let w = DMatrix::identity(1, 1);
        let a = gchi2_tail_prob(&unit(), &w, 1.0, RngStream::new(9, 3), 10_000).unwrap();
        let b = gchi2_tail_prob(&unit(), &w, 1.0, RngStream::new(9, 3), 10_000).unwrap();
        assert_eq!(a, b);
    }
}
