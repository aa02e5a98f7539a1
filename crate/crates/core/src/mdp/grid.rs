use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rect;

/// Regular lattice over a box. Points are ordered with the last
/// coordinate varying fastest. Nearest-neighbour (Voronoi) cells are
/// half-step boxes around each point; cells on the boundary extend to ±∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    step: Vec<f64>,
    counts: Vec<usize>,
}

impl Grid {
    pub fn build(bounds: &[(f64, f64)], step: &[f64]) -> Result<Self> {
        if bounds.is_empty() || bounds.len() != step.len() {
            return Err(Error::dim("grid bounds/step", bounds.len(), step.len()));
        }
        let mut counts = Vec::with_capacity(bounds.len());
        for (&(lo, hi), &h) in bounds.iter().zip(step) {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidArgument(format!("grid step must be positive, got {h}")));
            }
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "grid bounds must satisfy lo <= hi, got [{lo}, {hi}]"
                )));
            }
            let intervals = (hi - lo) / h;
            let rounded = intervals.round();
            if (intervals - rounded).abs() > 1e-9 * rounded.max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "step {h} does not divide [{lo}, {hi}] evenly"
                )));
            }
            counts.push(rounded as usize + 1);
        }
        Ok(Self {
            lower: bounds.iter().map(|b| b.0).collect(),
            upper: bounds.iter().map(|b| b.1).collect(),
            step: step.to_vec(),
            counts,
        })
    }

    /// One-dimensional grid `[lo, hi]` with spacing `step`.
    pub fn line(lo: f64, hi: f64, step: f64) -> Result<Self> {
        Self::build(&[(lo, hi)], &[step])
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.lower.iter().copied().zip(self.upper.iter().copied()).collect()
    }

    pub fn step(&self) -> &[f64] {
        &self.step
    }

    fn coordinate(&self, d: usize, k: usize) -> f64 {
        if k + 1 == self.counts[d] {
            self.upper[d]
        } else {
            self.lower[d] + k as f64 * self.step[d]
        }
    }

    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            out[d] = index % self.counts[d];
            index /= self.counts[d];
        }
        out
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.counts).fold(0, |acc, (&k, &c)| acc * c + k)
    }

    pub fn point(&self, index: usize) -> DVector<f64> {
        let c = self.coords(index);
        DVector::from_iterator(self.dim(), c.iter().enumerate().map(|(d, &k)| self.coordinate(d, k)))
    }

    pub fn points(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    pub fn squared_norms(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.point(i).norm_squared()).collect()
    }

    fn nearest_axis(&self, d: usize, x: f64) -> usize {
        let last = self.counts[d] - 1;
        let pos = ((x - self.lower[d]) / self.step[d] - 0.5).ceil();
        if pos.is_nan() || pos <= 0.0 {
            0
        } else if pos >= last as f64 {
            last
        } else {
            pos as usize
        }
    }

    /// Nearest grid point; midpoints go to the lower index and points
    /// outside the bounds saturate at the boundary.
    pub fn nearest(&self, e: &[f64]) -> usize {
        let coords: Vec<usize> = e.iter().enumerate().map(|(d, &x)| self.nearest_axis(d, x)).collect();
        self.index(&coords)
    }

    /// Interior cell edges along axis `d` (`counts[d] − 1` values).
    pub fn axis_edges(&self, d: usize) -> Vec<f64> {
        (0..self.counts[d] - 1)
            .map(|k| self.coordinate(d, k) + 0.5 * self.step[d])
            .collect()
    }

    pub fn cell(&self, index: usize) -> Rect {
        let c = self.coords(index);
        let mut lower = Vec::with_capacity(self.dim());
        let mut upper = Vec::with_capacity(self.dim());
        for (d, &k) in c.iter().enumerate() {
            let x = self.coordinate(d, k);
            lower.push(if k == 0 {
                f64::NEG_INFINITY
            } else {
                x - 0.5 * self.step[d]
            });
            upper.push(if k + 1 == self.counts[d] {
                f64::INFINITY
            } else {
                x + 0.5 * self.step[d]
            });
        }
        Rect { lower, upper }
    }

    /// Union of all cells before the boundary cells are extended to ±∞.
    pub fn truncation_box(&self) -> Rect {
        Rect {
            lower: (0..self.dim()).map(|d| self.lower[d] - 0.5 * self.step[d]).collect(),
            upper: (0..self.dim()).map(|d| self.upper[d] + 0.5 * self.step[d]).collect(),
        }
    }
}

/// Uniform odd-cardinality action lattice over `[−a_max, a_max]` per
/// channel, restricted to the ball `‖a‖ ≤ a_max`.
pub fn action_grid(channels: usize, a_max: f64, per_axis: usize) -> Result<Vec<DVector<f64>>> {
    if per_axis == 0 || per_axis.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "action count per axis must be odd, got {per_axis}"
        )));
    }
    if !(a_max > 0.0) {
        return Err(Error::InvalidArgument(format!("a_max must be positive, got {a_max}")));
    }
    if per_axis == 1 {
        return Ok(vec![DVector::zeros(channels)]);
    }
    let half = (per_axis / 2) as f64;
    let axis: Vec<f64> = (0..per_axis)
        .map(|k| {
            let j = k as f64 - half;
            a_max * j / half
        })
        .collect();
    let lattice = Grid {
        lower: vec![-a_max; channels],
        upper: vec![a_max; channels],
        step: vec![a_max / half; channels],
        counts: vec![per_axis; channels],
    };
    let out = (0..lattice.len())
        .map(|i| DVector::from_iterator(channels, lattice.coords(i).iter().map(|&k| axis[k])))
        .filter(|a| a.norm() <= a_max * (1.0 + 1e-12))
        .collect();
    Ok(out)
}
