//! Detection and transition probabilities of the attacker's error MDP.
//!
//! Given the current error `e` and injection `a`, the next residual is
//! `r = CAe + a + (Cw + v)` and the next error is
//! `e' = A_K e − K a + (W_K w − K v)` plus `Kδ` when the detector fires.
//! The noise pair `X = (Cw + v, W_K w − K v)` is jointly Gaussian with
//!
//! ```text
//! Cov(X) = [ CQCᵀ + R          CQW_Kᵀ − RKᵀ      ]
//!          [ W_K Q Cᵀ − K R    W_K Q W_Kᵀ + KRKᵀ ]
//! ```
//!
//! For scalar systems every probability reduces to univariate and
//! bivariate normal CDFs. Otherwise `(w, v)` is sampled jointly.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::Grid;
use crate::error::{Error, Result};
use crate::lti::{SteadyState, SystemModel};
use crate::numerics::gaussian::{max_abs, GaussianSpec};
use crate::numerics::{bvn_cdf, gchi2_tail_prob, std_normal_cdf, Rect, RngStream};

/// Mitigation signal the attacker assumes when planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRule {
    /// δ = a: an alarm removes the injection exactly.
    Perfect,
    /// δ = 0: alarms have no effect.
    Zero,
}

impl DeltaRule {
    pub fn apply(&self, a: &DVector<f64>) -> DVector<f64> {
        match self {
            DeltaRule::Perfect => a.clone(),
            DeltaRule::Zero => DVector::zeros(a.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityMethod {
    /// Closed form for scalar systems, sampling otherwise.
    Auto,
    /// Always sample, even for scalar systems.
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0x7472_616e_7369_7469,
        }
    }
}

/// Probability of landing in one cell, split by detector outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellProb {
    /// Mass reached without an alarm.
    pub no_detect: f64,
    /// Mass reached with an alarm (mitigation applied).
    pub detect: f64,
    /// Zero on the closed-form path.
    pub std_err: f64,
}

impl CellProb {
    pub fn total(&self) -> f64 {
        self.no_detect + self.detect
    }
}

/// A transition row stored as a dense window `[offset, offset + probs.len())`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub offset: usize,
    pub probs: Vec<f64>,
}

impl SparseRow {
    fn from_dense(dense: Vec<f64>) -> Self {
        let first = dense.iter().position(|p| *p > 0.0);
        let Some(first) = first else {
            return Self {
                offset: 0,
                probs: Vec::new(),
            };
        };
        let last = dense.iter().rposition(|p| *p > 0.0).unwrap_or(first);
        Self {
            offset: first,
            probs: dense[first..=last].to_vec(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn get(&self, j: usize) -> f64 {
        j.checked_sub(self.offset)
            .and_then(|k| self.probs.get(k).copied())
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        out[self.offset..self.offset + self.probs.len()].copy_from_slice(&self.probs);
        out
    }

    /// `Σ_j p_j f_j`.
    pub fn dot(&self, f: &[f64]) -> f64 {
        self.probs
            .iter()
            .zip(&f[self.offset..self.offset + self.probs.len()])
            .map(|(p, v)| p * v)
            .sum()
    }
}

/// One computed transition row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowEstimate {
    pub row: SparseRow,
    /// Mass inside the truncation box before boundary folding.
    pub inner_mass: f64,
}

/// Zero-mean bivariate normal with `cdf` on raw coordinates; a vanishing
/// second variance degenerates to a point mass.
#[derive(Debug, Clone, Copy)]
struct Bivariate {
    s1: f64,
    s2: f64,
    rho: f64,
}

impl Bivariate {
    fn cdf(&self, x: f64, y: f64) -> f64 {
        if self.s2 == 0.0 {
            return if y >= 0.0 { std_normal_cdf(x / self.s1) } else { 0.0 };
        }
        bvn_cdf(x / self.s1, y / self.s2, self.rho)
    }

    fn marginal2(&self, y: f64) -> f64 {
        if self.s2 == 0.0 {
            return if y >= 0.0 { 1.0 } else { 0.0 };
        }
        std_normal_cdf(y / self.s2)
    }

    fn marginal1(&self, x: f64) -> f64 {
        std_normal_cdf(x / self.s1)
    }
}

/// The attacker's MDP over estimation errors for a fixed model, detector
/// threshold and assumed mitigation.
#[derive(Debug, Clone)]
pub struct ErrorMdp {
    model: SystemModel,
    ss: SteadyState,
    eta: f64,
    delta: DeltaRule,
    method: ProbabilityMethod,
    sampling: SamplingOptions,
    noise_cov: DMatrix<f64>,
    scalar: Option<ScalarParams>,
}

#[derive(Debug, Clone, Copy)]
struct ScalarParams {
    ca: f64,
    ak: f64,
    k: f64,
    pr: f64,
    noise: Bivariate,
}

impl ErrorMdp {
    pub fn new(model: SystemModel, ss: SteadyState, eta: f64, delta: DeltaRule) -> Result<Self> {
        if !(eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {eta}")));
        }
        let noise_cov = joint_noise_cov(&model, &ss);
        let scalar = if model.is_scalar() {
            let v1 = noise_cov[(0, 0)];
            let v2 = noise_cov[(1, 1)];
            let s2 = if v2 <= 1e-300_f64.max(max_abs(&noise_cov) * 1e-15) {
                0.0
            } else {
                v2.sqrt()
            };
            let s1 = v1.sqrt();
            let rho = if s2 == 0.0 {
                0.0
            } else {
                (noise_cov[(0, 1)] / (s1 * s2)).clamp(-1.0, 1.0)
            };
            Some(ScalarParams {
                ca: (&model.measurement * &model.dynamics)[(0, 0)],
                ak: ss.closed_loop[(0, 0)],
                k: ss.gain[(0, 0)],
                pr: ss.residual_cov[(0, 0)],
                noise: Bivariate { s1, s2, rho },
            })
        } else {
            None
        };
        Ok(Self {
            model,
            ss,
            eta,
            delta,
            method: ProbabilityMethod::Auto,
            sampling: SamplingOptions::default(),
            noise_cov,
            scalar,
        })
    }

    pub fn with_method(mut self, method: ProbabilityMethod, sampling: SamplingOptions) -> Self {
        self.method = method;
        self.sampling = sampling;
        self
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn steady_state(&self) -> &SteadyState {
        &self.ss
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn delta_rule(&self) -> DeltaRule {
        self.delta
    }

    /// Covariance of `(Cw + v, W_K w − K v)`.
    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    fn analytic(&self) -> Option<&ScalarParams> {
        match self.method {
            ProbabilityMethod::Auto => self.scalar.as_ref(),
            ProbabilityMethod::Sampling => None,
        }
    }

    fn check(&self, e: &DVector<f64>, a: &DVector<f64>) -> Result<()> {
        if e.len() != self.model.n() {
            return Err(Error::dim("MDP state", self.model.n(), e.len()));
        }
        if a.len() != self.model.m() {
            return Err(Error::dim("MDP action", self.model.m(), a.len()));
        }
        Ok(())
    }

    /// Scalar detection threshold on the residual, `√(η P_r)`.
    fn residual_threshold(&self, p: &ScalarParams) -> f64 {
        (self.eta * p.pr).sqrt()
    }

    /// Probability that the χ² detector fires on the next step.
    ///
    /// The closed form (scalar) path is exact and `stream` is unused; the
    /// sampling path returns the Monte-Carlo estimate. Use
    /// [`ErrorMdp::detection_prob_with_err`] to also get its std-error.
    pub fn detection_prob(&self, e: &DVector<f64>, a: &DVector<f64>, stream: RngStream) -> Result<f64> {
        Ok(self.detection_prob_with_err(e, a, stream)?.0)
    }

    pub fn detection_prob_with_err(&self, e: &DVector<f64>, a: &DVector<f64>, stream: RngStream) -> Result<(f64, f64)> {
        self.check(e, a)?;
        if self.eta == f64::INFINITY {
            return Ok((0.0, 0.0));
        }
        if let Some(p) = self.analytic() {
            let tau = self.residual_threshold(p);
            let mu = p.ca * e[0] + a[0];
            let s = p.noise.s1;
            let lower = std_normal_cdf((-tau - mu) / s);
            let upper = std_normal_cdf((mu - tau) / s);
            return Ok(((lower + upper).min(1.0), 0.0));
        }
        let mean = &self.model.measurement * &self.model.dynamics * e + a;
        let m = self.model.m();
        let cov = self.noise_cov.view((0, 0), (m, m)).into_owned();
        let g = GaussianSpec::new(mean, cov)?;
        if self.eta == 0.0 {
            // g > 0 almost surely for a nondegenerate residual.
            return Ok((1.0, 0.0));
        }
        gchi2_tail_prob(&g, &self.ss.residual_cov_inv, self.eta, stream, self.sampling.samples)
    }

    /// `P(e' ∈ cell | e, a)` split into the no-alarm and alarm branches.
    pub fn cell_transition_prob(
        &self,
        e: &DVector<f64>,
        a: &DVector<f64>,
        cell: &Rect,
        stream: RngStream,
    ) -> Result<CellProb> {
        self.check(e, a)?;
        if cell.dim() != self.model.n() {
            return Err(Error::dim("transition cell", self.model.n(), cell.dim()));
        }
        if let Some(p) = self.analytic() {
            return Ok(self.scalar_cell(p, e[0], a[0], cell.lower[0], cell.upper[0]));
        }
        let samples = self.sampling.samples;
        let mut no_detect = 0usize;
        let mut detect = 0usize;
        self.sample_next(e, a, stream, samples, |next, alarm| {
            if cell.contains(next.as_slice()) {
                if alarm {
                    detect += 1;
                } else {
                    no_detect += 1;
                }
            }
        })?;
        let n = samples as f64;
        let p = (no_detect + detect) as f64 / n;
        Ok(CellProb {
            no_detect: no_detect as f64 / n,
            detect: detect as f64 / n,
            std_err: (p * (1.0 - p) / n).sqrt(),
        })
    }

    /// Three bivariate rectangle probabilities: the no-alarm band and the
    /// two alarm tails of the residual, each crossed with the shifted cell.
    fn scalar_cell(&self, p: &ScalarParams, e: f64, a: f64, lo: f64, hi: f64) -> CellProb {
        let tau = self.residual_threshold(p);
        let y1 = p.ca * e + a;
        let y2 = p.ak * e - p.k * a;
        let kd = p.k * self.delta.apply(&DVector::from_element(1, a))[0];
        let rect = |x_lo: f64, x_hi: f64, z_lo: f64, z_hi: f64| -> f64 {
            if !(x_lo < x_hi) || !(z_lo < z_hi) {
                return 0.0;
            }
            let f = |x: f64, z: f64| -> f64 {
                if x == f64::NEG_INFINITY || z == f64::NEG_INFINITY {
                    0.0
                } else if x == f64::INFINITY {
                    p.noise.marginal2(z)
                } else if z == f64::INFINITY {
                    p.noise.marginal1(x)
                } else {
                    p.noise.cdf(x, z)
                }
            };
            (f(x_hi, z_hi) - f(x_lo, z_hi) - f(x_hi, z_lo) + f(x_lo, z_lo)).max(0.0)
        };
        let no_detect = rect(-tau - y1, tau - y1, lo - y2, hi - y2);
        let shifted = (lo - y2 - kd, hi - y2 - kd);
        let detect = rect(f64::NEG_INFINITY, -tau - y1, shifted.0, shifted.1)
            + rect(tau - y1, f64::INFINITY, shifted.0, shifted.1);
        CellProb {
            no_detect,
            detect,
            std_err: 0.0,
        }
    }

    fn sample_next<F>(
        &self,
        e: &DVector<f64>,
        a: &DVector<f64>,
        stream: RngStream,
        samples: usize,
        mut visit: F,
    ) -> Result<()>
    where
        F: FnMut(&DVector<f64>, bool),
    {
        let (n, m) = (self.model.n(), self.model.m());
        let w_sampler = self.model.process_sampler();
        let v_sampler = self.model.measurement_sampler();
        let mean_r = &self.model.measurement * &self.model.dynamics * e + a;
        let delta = self.delta.apply(a);
        let base = &self.ss.closed_loop * e - &self.ss.gain * a;
        let kd = &self.ss.gain * delta;
        let mut rng = stream.rng();
        debug_assert_eq!(base.len(), n);
        for _ in 0..samples {
            let w = w_sampler.sample(&mut rng);
            let v = v_sampler.sample(&mut rng);
            let r = &mean_r + &self.model.measurement * &w + &v;
            debug_assert_eq!(r.len(), m);
            let g = (r.transpose() * &self.ss.residual_cov_inv * &r)[(0, 0)];
            let alarm = g > self.eta;
            let mut next = &base + &self.ss.noise_gain * &w - &self.ss.gain * &v;
            if alarm {
                next += &kd;
            }
            visit(&next, alarm);
        }
        Ok(())
    }

    /// Transition row from `e` under `a` over all grid cells. Mass
    /// outside the grid bounds is folded into the boundary cells and
    /// the row is renormalized.
    pub fn transition_row(
        &self,
        grid: &Grid,
        e: &DVector<f64>,
        a: &DVector<f64>,
        stream: RngStream,
    ) -> Result<RowEstimate> {
        self.check(e, a)?;
        if grid.dim() != self.model.n() {
            return Err(Error::dim("grid dimension", self.model.n(), grid.dim()));
        }
        let (mut dense, inner_mass) = match self.analytic() {
            Some(p) => self.scalar_row(p, grid, e[0], a[0]),
            None => self.sampled_row(grid, e, a, stream)?,
        };
        let total: f64 = dense.iter().sum();
        if total > 0.0 {
            dense.iter_mut().for_each(|p| *p /= total);
        }
        Ok(RowEstimate {
            row: SparseRow::from_dense(dense),
            inner_mass,
        })
    }

    /// Telescoped form of the three-rectangle formula: the CDF in the
    /// error coordinate is evaluated once per cell edge and differenced.
    fn scalar_row(&self, p: &ScalarParams, grid: &Grid, e: f64, a: f64) -> (Vec<f64>, f64) {
        let tau = self.residual_threshold(p);
        let y1 = p.ca * e + a;
        let y2 = p.ak * e - p.k * a;
        let kd = p.k * self.delta.apply(&DVector::from_element(1, a))[0];
        let (x_lo, x_hi) = (-tau - y1, tau - y1);
        let nd = &p.noise;
        // P(no alarm, X2 ≤ z) and P(alarm, X2 ≤ z).
        let quiet = |z: f64| -> f64 {
            if !(x_lo < x_hi) {
                return 0.0;
            }
            if z == f64::INFINITY {
                return nd.marginal1(x_hi) - nd.marginal1(x_lo);
            }
            nd.cdf(x_hi, z) - nd.cdf(x_lo, z)
        };
        let alarm = |z: f64| -> f64 {
            if tau == f64::INFINITY {
                return 0.0;
            }
            if z == f64::INFINITY {
                return nd.marginal1(x_lo) + 1.0 - nd.marginal1(x_hi);
            }
            nd.cdf(x_lo, z) + nd.marginal2(z) - nd.cdf(x_hi, z)
        };
        let cum = |b: f64| quiet(b - y2) + alarm(b - y2 - kd);

        let edges = grid.axis_edges(0);
        let mut prev = 0.0;
        let mut dense = Vec::with_capacity(edges.len() + 1);
        for &b in &edges {
            let c = cum(b);
            dense.push((c - prev).max(0.0));
            prev = c;
        }
        dense.push((cum(f64::INFINITY) - prev).max(0.0));
        let tb = grid.truncation_box();
        let inner = (cum(tb.upper[0]) - cum(tb.lower[0])).max(0.0);
        (dense, inner)
    }

    fn sampled_row(
        &self,
        grid: &Grid,
        e: &DVector<f64>,
        a: &DVector<f64>,
        stream: RngStream,
    ) -> Result<(Vec<f64>, f64)> {
        let samples = self.sampling.samples;
        let mut counts = vec![0usize; grid.len()];
        let tb = grid.truncation_box();
        let mut inside = 0usize;
        self.sample_next(e, a, stream, samples, |next, _| {
            counts[grid.nearest(next.as_slice())] += 1;
            if tb.contains(next.as_slice()) {
                inside += 1;
            }
        })?;
        let n = samples as f64;
        Ok((counts.iter().map(|c| *c as f64 / n).collect(), inside as f64 / n))
    }

    /// Stream for the `(state, action)` pair on the sampling path.
    pub fn pair_stream(&self, state: usize, action: usize, actions: usize) -> RngStream {
        RngStream::new(self.sampling.seed, (state * actions + action) as u64)
    }
}

fn joint_noise_cov(model: &SystemModel, ss: &SteadyState) -> DMatrix<f64> {
    let (n, m) = (model.n(), model.m());
    let c = &model.measurement;
    let q = &model.process_noise;
    let r = &model.measurement_noise;
    let k = &ss.gain;
    let wk = &ss.noise_gain;
    let s11 = c * q * c.transpose() + r;
    let s12 = c * q * wk.transpose() - r * k.transpose();
    let s22 = wk * q * wk.transpose() + k * r * k.transpose();
    let mut out = DMatrix::zeros(m + n, m + n);
    out.view_mut((0, 0), (m, m)).copy_from(&s11);
    out.view_mut((0, m), (m, n)).copy_from(&s12);
    out.view_mut((m, 0), (n, m)).copy_from(&s12.transpose());
    out.view_mut((m, m), (n, n)).copy_from(&s22);
    (&out + out.transpose()) * 0.5
}

/// Precomputed rows and detection probabilities for every
/// `(state, action)` pair on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub states: usize,
    pub actions: Vec<Vec<f64>>,
    /// Row for `(i, a)` at `i * actions.len() + a`.
    pub rows: Vec<SparseRow>,
    pub detection: Vec<f64>,
    pub inner_mass: Vec<f64>,
}

/// Rows with less pre-normalization mass than this trigger a warning.
pub const TRUNCATION_WARN_MASS: f64 = 0.99;

impl TransitionModel {
    pub fn action_count(&self) -> usize {
        self.actions.len()
    }

    pub fn row(&self, state: usize, action: usize) -> &SparseRow {
        &self.rows[state * self.actions.len() + action]
    }

    pub fn detection_prob(&self, state: usize, action: usize) -> f64 {
        self.detection[state * self.actions.len() + action]
    }

    pub fn action(&self, action: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.actions[action])
    }

    /// `(count, smallest mass)` over rows with truncated mass.
    pub fn truncation_report(&self) -> (usize, f64) {
        let bad = self.inner_mass.iter().filter(|m| **m < TRUNCATION_WARN_MASS).count();
        let worst = self.inner_mass.iter().copied().fold(1.0_f64, f64::min);
        (bad, worst)
    }
}

pub fn build_transition_model(mdp: &ErrorMdp, grid: &Grid, actions: &[DVector<f64>]) -> Result<TransitionModel> {
    if grid.is_empty() || actions.is_empty() {
        return Err(Error::Empty("state grid and action grid"));
    }
    let na = actions.len();
    let pairs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|i| (0..na).map(move |k| (i, k))).collect();
    let computed: Vec<Result<(RowEstimate, f64)>> = pairs
        .par_iter()
        .map(|&(i, k)| {
            let e = grid.point(i);
            let stream = mdp.pair_stream(i, k, na);
            let row = mdp.transition_row(grid, &e, &actions[k], stream)?;
            let det = mdp.detection_prob(&e, &actions[k], stream.lane(1))?;
            Ok((row, det))
        })
        .collect();
    let mut rows = Vec::with_capacity(pairs.len());
    let mut detection = Vec::with_capacity(pairs.len());
    let mut inner_mass = Vec::with_capacity(pairs.len());
    for item in computed {
        let (row, det) = item?;
        inner_mass.push(row.inner_mass);
        rows.push(row.row);
        detection.push(det);
    }
    let tm = TransitionModel {
        states: grid.len(),
        actions: actions.iter().map(|a| a.as_slice().to_vec()).collect(),
        rows,
        detection,
        inner_mass,
    };
    let (bad, worst) = tm.truncation_report();
    if bad > 0 {
        log::warn!(
            "{bad} transition rows keep less than {TRUNCATION_WARN_MASS} of their mass inside the grid (worst {worst:.4}); consider wider bounds"
        );
    }
    Ok(tm)
}

/// `Σ_j T(i, a, j) ‖ξ_j‖²`.
pub fn expected_reward(tm: &TransitionModel, grid: &Grid, state: usize, action: usize) -> f64 {
    let norms = grid.squared_norms();
    tm.row(state, action).dot(&norms)
}
