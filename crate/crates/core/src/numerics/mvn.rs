//! Rectangle probabilities of multivariate normal distributions.
//!
//! Dimensions 1 and 2 are evaluated in closed form (Φ and the bivariate
//! CDF). Higher dimensions use Genz's separation-of-variables transform
//! integrated with randomly shifted rank-1 lattice rules; the reported
//! standard error is the spread of the shifted replicates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::bvn::bvn_cdf;
use super::gaussian::{max_abs, GaussianSpec};
use super::normal::{std_normal_cdf, std_normal_quantile};
use super::rng::RngStream;
use crate::error::{Error, Result};

/// Axis-aligned box `lower ≤ x ≤ upper`; entries may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Rect {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Rect {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("Rect", lower.len(), upper.len()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument(format!(
                "rect lower bound exceeds upper bound: {lower:?} > {upper:?}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn whole(d: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; d],
            upper: vec![f64::INFINITY; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| l <= v && v <= u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectProb {
    pub value: f64,
    /// Zero for the deterministic paths.
    pub std_err: f64,
}

/// Controls for the sampling path (d ≥ 3).
#[derive(Debug, Clone, Copy)]
pub struct MvnOptions {
    pub stream: RngStream,
    pub points_per_shift: usize,
    pub shifts: usize,
}

impl Default for MvnOptions {
    fn default() -> Self {
        Self {
            stream: RngStream::new(0x6d76_6e5f_7265_6374, 0),
            points_per_shift: 4093,
            shifts: 16,
        }
    }
}

/// P(lower ≤ X ≤ upper) for X ~ g.
pub fn mvn_rect_prob(g: &GaussianSpec, rect: &Rect) -> Result<RectProb> {
    mvn_rect_prob_with(g, rect, &MvnOptions::default())
}

pub fn mvn_rect_prob_with(g: &GaussianSpec, rect: &Rect, opts: &MvnOptions) -> Result<RectProb> {
    g.validate()?;
    let d = g.dim();
    if rect.dim() != d {
        return Err(Error::dim("mvn_rect_prob", d, rect.dim()));
    }
    let value = match d {
        0 => 1.0,
        1 => interval_prob(g.mean[0], g.cov[(0, 0)], rect.lower[0], rect.upper[0]),
        2 => rect_prob_2d(g, rect),
        _ => return Ok(sov_lattice(g, rect, opts)),
    };
    Ok(RectProb { value, std_err: 0.0 })
}

fn interval_prob(mean: f64, var: f64, lo: f64, hi: f64) -> f64 {
    if var <= 0.0 {
        return if lo <= mean && mean <= hi { 1.0 } else { 0.0 };
    }
    let s = var.sqrt();
    let a = (lo - mean) / s;
    let b = (hi - mean) / s;
    // Evaluate on the tail side for accuracy.
    if a > 0.0 {
        (std_normal_cdf(-a) - std_normal_cdf(-b)).max(0.0)
    } else {
        (std_normal_cdf(b) - std_normal_cdf(a)).max(0.0)
    }
}

fn rect_prob_2d(g: &GaussianSpec, rect: &Rect) -> f64 {
    let (v1, v2) = (g.cov[(0, 0)], g.cov[(1, 1)]);
    let scale = max_abs(&g.cov).max(f64::MIN_POSITIVE);
    let tiny = 1e-300_f64.max(scale * 1e-14);
    if v1 <= tiny || v2 <= tiny {
        // A degenerate axis is a point mass; the other axis is 1-D.
        let p1 = interval_prob(g.mean[0], v1.max(0.0), rect.lower[0], rect.upper[0]);
        let p2 = interval_prob(g.mean[1], v2.max(0.0), rect.lower[1], rect.upper[1]);
        return p1 * p2;
    }
    let (s1, s2) = (v1.sqrt(), v2.sqrt());
    let rho = (g.cov[(0, 1)] / (s1 * s2)).clamp(-1.0, 1.0);
    let z = |x: f64, m: f64, s: f64| (x - m) / s;
    let (l1, u1) = (z(rect.lower[0], g.mean[0], s1), z(rect.upper[0], g.mean[0], s1));
    let (l2, u2) = (z(rect.lower[1], g.mean[1], s2), z(rect.upper[1], g.mean[1], s2));
    let p = bvn_cdf(u1, u2, rho) - bvn_cdf(l1, u2, rho) - bvn_cdf(u1, l2, rho) + bvn_cdf(l1, l2, rho);
    p.clamp(0.0, 1.0)
}

fn lower_cholesky_psd(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let tol = max_abs(cov) * 1e-12;
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut diag = cov[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= tol {
            continue;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut s = cov[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    l
}

const PRIMES: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];

fn sov_lattice(g: &GaussianSpec, rect: &Rect, opts: &MvnOptions) -> RectProb {
    let d = g.dim();
    let l = lower_cholesky_psd(&g.cov);
    let lo = DVector::from_iterator(d, rect.lower.iter().zip(g.mean.iter()).map(|(a, m)| a - m));
    let hi = DVector::from_iterator(d, rect.upper.iter().zip(g.mean.iter()).map(|(b, m)| b - m));
    let gen: Vec<f64> = (0..d)
        .map(|i| PRIMES[i % PRIMES.len()].sqrt().fract() + (i / PRIMES.len()) as f64 * 0.1)
        .collect();
    let mut rng = opts.stream.rng();
    let shifts = opts.shifts.max(2);
    let npts = opts.points_per_shift.max(1);

    let mut y = vec![0.0; d];
    let mut estimates = Vec::with_capacity(shifts);
    for _ in 0..shifts {
        let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let mut acc = 0.0;
        for k in 1..=npts {
            let mut f = 1.0;
            for i in 0..d {
                let s: f64 = (0..i).map(|j| l[(i, j)] * y[j]).sum();
                let lii = l[(i, i)];
                if lii == 0.0 {
                    if s < lo[i] || s > hi[i] {
                        f = 0.0;
                        break;
                    }
                    y[i] = 0.0;
                    continue;
                }
                let a = std_normal_cdf((lo[i] - s) / lii);
                let b = std_normal_cdf((hi[i] - s) / lii);
                let width = b - a;
                if width <= 0.0 {
                    f = 0.0;
                    break;
                }
                f *= width;
                let u = (k as f64 * gen[i] + shift[i]).fract();
                // Tent transform keeps the periodized integrand smooth.
                let u = 1.0 - (2.0 * u - 1.0).abs();
                let p = (a + u * width).clamp(1e-300, 1.0 - 1e-16);
                y[i] = std_normal_quantile(p);
            }
            acc += f;
        }
        estimates.push(acc / npts as f64);
    }
    let m = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / m;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0);
    RectProb {
        value: mean.clamp(0.0, 1.0),
        std_err: (var / m).sqrt(),
    }
}
