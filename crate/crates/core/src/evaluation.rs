//! Seeded Monte-Carlo rollouts of the detection/mitigation loop and the
//! cumulative-error costs built on them.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_at, AttackPlan};
use crate::defense::{
    apply_mitigation, mitigation_signal, residual, run_detector, Detector, DetectorConfig, MitigationStrategy,
};
use crate::error::{Error, Result};
use crate::lti::{kf_update, observe_with, plant_step_with, Controller, SteadyState, SystemModel};
use crate::numerics::gaussian::GaussianSampler;
use crate::numerics::{GaussianSpec, RngStream};

/// Lane of a run's stream reserved for mitigation mismatch draws.
const MITIGATION_LANE: u64 = 1;

/// Everything about the loop that is fixed across runs.
#[derive(Debug, Clone)]
pub struct LoopSetup {
    pub model: SystemModel,
    pub ss: SteadyState,
    pub controller: Controller,
    /// Initial estimate; the true state starts at `x̂[0] + e[0]` with
    /// `e[0] ~ N(0, P_e)`.
    pub x_hat0: DVector<f64>,
}

impl LoopSetup {
    pub fn new(model: SystemModel, ss: SteadyState, controller: Controller, x_hat0: DVector<f64>) -> Result<Self> {
        if x_hat0.len() != model.n() {
            return Err(Error::dim("initial estimate", model.n(), x_hat0.len()));
        }
        Ok(Self {
            model,
            ss,
            controller,
            x_hat0,
        })
    }

    /// Zero input and zero initial estimate.
    pub fn open_loop(model: SystemModel, ss: SteadyState) -> Self {
        let n = model.n();
        Self {
            model,
            ss,
            controller: Controller::Zero,
            x_hat0: DVector::zeros(n),
        }
    }
}

/// Logged loop signals for `t = 0..=T`. Entries at `t = 0` of the
/// per-step signals (`y`, `a`, `g`, ...) are zero; `u[t]` is the input
/// applied between `t` and `t + 1`, and `w[t]`, `v[t]` are the noises that
/// produced `x[t]` and `y[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub x_hat: Vec<DVector<f64>>,
    pub e: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub y_a: Vec<DVector<f64>>,
    pub y_f: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
    pub delta: Vec<DVector<f64>>,
    pub g: Vec<f64>,
    pub alarm: Vec<bool>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.x.len() - 1
    }

    /// `Σ_{τ=1..t} ‖e[τ]‖²` for `t = 1..=T`.
    pub fn cumulative_error(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.e[1..]
            .iter()
            .map(|e| {
                acc += e.norm_squared();
                acc
            })
            .collect()
    }
}

/// Simulates `T` steps of the attacked loop. The attacker sees the exact
/// error `e[t]` when choosing `a[t+1]`.
pub fn rollout(
    setup: &LoopSetup,
    plan: &AttackPlan,
    detector: &Detector,
    strategy: &MitigationStrategy,
    horizon: usize,
    stream: RngStream,
) -> Result<Trajectory> {
    let model = &setup.model;
    let ss = &setup.ss;
    if horizon == 0 {
        return Err(Error::InvalidArgument("rollout horizon must be at least 1".into()));
    }
    if plan.channels != model.m() {
        return Err(Error::dim("attack channels", model.m(), plan.channels));
    }
    let (n, m) = (model.n(), model.m());
    let mut noise = stream.rng();
    let mut mit_rng = stream.lane(MITIGATION_LANE).rng();
    let w_sampler = model.process_sampler();
    let v_sampler = model.measurement_sampler();
    let e0_sampler = GaussianSampler::new(&GaussianSpec {
        mean: DVector::zeros(n),
        cov: ss.error_cov.clone(),
    });

    let zeros_m = DVector::zeros(m);
    let mut tr = Trajectory {
        x: Vec::with_capacity(horizon + 1),
        x_hat: Vec::with_capacity(horizon + 1),
        e: Vec::with_capacity(horizon + 1),
        y: vec![zeros_m.clone()],
        y_a: vec![zeros_m.clone()],
        y_f: vec![zeros_m.clone()],
        a: vec![zeros_m.clone()],
        delta: vec![zeros_m.clone()],
        g: vec![0.0],
        alarm: vec![false],
        u: Vec::with_capacity(horizon + 1),
        w: vec![DVector::zeros(n)],
        v: vec![zeros_m],
    };
    let e0 = e0_sampler.sample(&mut noise);
    tr.x.push(&setup.x_hat0 + &e0);
    tr.x_hat.push(setup.x_hat0.clone());
    tr.e.push(e0);

    for t in 0..horizon {
        let x = &tr.x[t];
        let x_hat = &tr.x_hat[t];
        let u = setup.controller.control(model, x_hat);
        let w = w_sampler.sample(&mut noise);
        let x_next = plant_step_with(model, x, &u, &w)?;
        let v = v_sampler.sample(&mut noise);
        let y = observe_with(model, &x_next, &v)?;
        let a = attack_at(plan, t + 1, &tr.e[t], horizon - t)?;
        let y_a = &y + &a;
        let r = residual(model, x_hat, &u, &y_a)?;
        let det = run_detector(detector, ss, r, &a);
        let delta = mitigation_signal(strategy, &a, &mut mit_rng);
        let y_f = apply_mitigation(&y_a, det.alarm, &delta);
        let x_hat_next = kf_update(model, ss, x_hat, &u, &y_f)?;
        let e_next = &x_next - &x_hat_next;

        tr.u.push(u);
        tr.w.push(w);
        tr.v.push(v);
        tr.x.push(x_next);
        tr.x_hat.push(x_hat_next);
        tr.e.push(e_next);
        tr.y.push(y);
        tr.y_a.push(y_a);
        tr.y_f.push(y_f);
        tr.a.push(a);
        tr.delta.push(delta);
        tr.g.push(det.g);
        tr.alarm.push(det.alarm);
    }
    let last_u = setup.controller.control(model, &tr.x_hat[horizon]);
    tr.u.push(last_u);
    Ok(tr)
}

/// Empirical cumulative cost `Cost[t]` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub cost_per_t: Vec<f64>,
    pub std_err_per_t: Vec<f64>,
    pub runs: usize,
    pub digest: String,
}

impl CostReport {
    pub fn horizon(&self) -> usize {
        self.cost_per_t.len()
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_per_t.last().unwrap_or(&0.0)
    }

    pub fn final_std_err(&self) -> f64 {
        *self.std_err_per_t.last().unwrap_or(&0.0)
    }
}

/// Column-wise mean and standard error of the mean over runs.
fn mean_and_se(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let w = rows.len() as f64;
    let len = rows[0].len();
    let mut mean = vec![0.0; len];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= w);
    let mut se = vec![0.0; len];
    if rows.len() > 1 {
        for r in rows {
            for ((s, x), m) in se.iter_mut().zip(r).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        se.iter_mut().for_each(|s| *s = (*s / (w - 1.0) / w).sqrt());
    }
    (mean, se)
}

fn check_shared_horizon(rows: &[Vec<f64>]) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::Empty("trajectory set"));
    };
    if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
        return Err(Error::dim("trajectory horizon", first.len(), bad.len()));
    }
    Ok(())
}

pub fn empirical_cost(trajectories: &[Trajectory]) -> Result<CostReport> {
    let sums: Vec<Vec<f64>> = trajectories.iter().map(Trajectory::cumulative_error).collect();
    cost_from_sums(&sums)
}

/// Cost report from per-run cumulative sums.
pub fn cost_from_sums(sums: &[Vec<f64>]) -> Result<CostReport> {
    check_shared_horizon(sums)?;
    let (cost_per_t, std_err_per_t) = mean_and_se(sums);
    Ok(CostReport {
        cost_per_t,
        std_err_per_t,
        runs: sums.len(),
        digest: String::new(),
    })
}

/// Mean and standard error of per-run differences `A − B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub mean_per_t: Vec<f64>,
    pub std_err_per_t: Vec<f64>,
}

impl PairedDiff {
    pub fn final_mean(&self) -> f64 {
        *self.mean_per_t.last().unwrap_or(&0.0)
    }

    pub fn final_std_err(&self) -> f64 {
        *self.std_err_per_t.last().unwrap_or(&0.0)
    }
}

pub fn paired_difference(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<PairedDiff> {
    if a.len() != b.len() {
        return Err(Error::dim("paired run count", a.len(), b.len()));
    }
    check_shared_horizon(a)?;
    check_shared_horizon(b)?;
    if a[0].len() != b[0].len() {
        return Err(Error::dim("paired horizon", a[0].len(), b[0].len()));
    }
    let diffs: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect();
    let (mean_per_t, std_err_per_t) = mean_and_se(&diffs);
    Ok(PairedDiff {
        mean_per_t,
        std_err_per_t,
    })
}

/// Monte-Carlo settings shared by a batch of rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
}

impl RunSettings {
    fn check(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Empty("Monte-Carlo runs"));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Run `ω` always uses stream `(seed, ω)`, whatever is being simulated.
    pub fn stream(&self, run: usize) -> RngStream {
        RngStream::new(self.seed, run as u64)
    }
}

/// Runs `settings.runs` rollouts in parallel and maps each through `f`;
/// results come back in run order.
pub fn map_rollouts<T, F>(
    setup: &LoopSetup,
    plan: &AttackPlan,
    detector: &Detector,
    strategy: &MitigationStrategy,
    settings: &RunSettings,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Trajectory) -> T + Sync,
{
    settings.check()?;
    (0..settings.runs)
        .into_par_iter()
        .map(|w| rollout(setup, plan, detector, strategy, settings.horizon, settings.stream(w)).map(&f))
        .collect()
}

/// Per-run cumulative error sums.
pub fn run_sums(
    setup: &LoopSetup,
    plan: &AttackPlan,
    detector: &Detector,
    strategy: &MitigationStrategy,
    settings: &RunSettings,
) -> Result<Vec<Vec<f64>>> {
    map_rollouts(setup, plan, detector, strategy, settings, |tr| tr.cumulative_error())
}

/// Cost of several attack plans on common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reports: Vec<CostReport>,
    pub sums: Vec<Vec<Vec<f64>>>,
}

impl Comparison {
    /// Paired difference `plan i − plan j`.
    pub fn paired(&self, i: usize, j: usize) -> Result<PairedDiff> {
        paired_difference(&self.sums[i], &self.sums[j])
    }
}

pub fn compare_attacks(
    setup: &LoopSetup,
    plans: &[AttackPlan],
    detector: &Detector,
    strategy: &MitigationStrategy,
    settings: &RunSettings,
) -> Result<Comparison> {
    if plans.is_empty() {
        return Err(Error::Empty("attack plans"));
    }
    let mut reports = Vec::with_capacity(plans.len());
    let mut sums = Vec::with_capacity(plans.len());
    for plan in plans {
        let s = run_sums(setup, plan, detector, strategy, settings)?;
        reports.push(cost_from_sums(&s)?);
        sums.push(s);
    }
    Ok(Comparison { reports, sums })
}

/// Extra cumulative error from false alarms: χ² detector with mitigation
/// against the oracle reference, both unattacked.
pub fn fp_cost(
    setup: &LoopSetup,
    eta: f64,
    strategy: &MitigationStrategy,
    settings: &RunSettings,
) -> Result<PairedDiff> {
    let plan = AttackPlan::none(setup.model.m());
    let chi = Detector::ChiSquare(DetectorConfig::new(eta)?);
    let a = run_sums(setup, &plan, &chi, strategy, settings)?;
    let b = run_sums(setup, &plan, &Detector::Oracle, strategy, settings)?;
    paired_difference(&a, &b)
}

/// Extra cumulative error from missed attacks: χ² detector against the
/// oracle reference, both under the same attack plan.
pub fn md_cost(
    setup: &LoopSetup,
    eta: f64,
    strategy: &MitigationStrategy,
    plan: &AttackPlan,
    settings: &RunSettings,
) -> Result<PairedDiff> {
    let chi = Detector::ChiSquare(DetectorConfig::new(eta)?);
    let a = run_sums(setup, plan, &chi, strategy, settings)?;
    let b = run_sums(setup, plan, &Detector::Oracle, strategy, settings)?;
    paired_difference(&a, &b)
}

/// Fraction of runs raising an alarm at each `t = 1..=T`.
pub fn detection_frequency(alarms: &[Vec<bool>]) -> Vec<f64> {
    let Some(first) = alarms.first() else {
        return Vec::new();
    };
    let w = alarms.len() as f64;
    (1..first.len())
        .map(|t| alarms.iter().filter(|a| a[t]).count() as f64 / w)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{derive_steady_state, error_step};

    fn bench() -> LoopSetup {
        let m = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        let ss = derive_steady_state(&m).unwrap();
        LoopSetup::open_loop(m, ss)
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn chi(eta: f64) -> Detector {
        Detector::ChiSquare(DetectorConfig::new(eta).unwrap())
    }

    #[test]
    fn trajectory_invariants_hold() {
        let s = bench();
        let plan = AttackPlan::ramp(v1(1.5), 20.0).unwrap();
        let strat = MitigationStrategy::Noisy { sigma: 3.0 };
        let tr = rollout(&s, &plan, &chi(2.0), &strat, 12, RngStream::new(3, 4)).unwrap();
        assert_eq!(tr.horizon(), 12);
        for t in 0..=12 {
            assert_eq!(tr.e[t], &tr.x[t] - &tr.x_hat[t]);
            let expect = if tr.alarm[t] {
                &tr.y_a[t] - &tr.delta[t]
            } else {
                tr.y_a[t].clone()
            };
            assert_eq!(tr.y_f[t], expect);
        }
        for t in 0..12 {
            let e = error_step(
                &s.model,
                &s.ss,
                &tr.e[t],
                &tr.w[t + 1],
                &tr.v[t + 1],
                &tr.a[t + 1],
                tr.alarm[t + 1],
                &tr.delta[t + 1],
            )
            .unwrap();
            assert!((e[0] - tr.e[t + 1][0]).abs() < 1e-10);
        }
    }

    #[test]
    fn rollouts_replay_exactly() {
        let s = bench();
        let plan = AttackPlan::constant(v1(10.0), 20.0).unwrap();
        let strat = MitigationStrategy::Noisy { sigma: 15.0 };
        let a = rollout(&s, &plan, &chi(5.0), &strat, 10, RngStream::new(8, 1)).unwrap();
        let b = rollout(&s, &plan, &chi(5.0), &strat, 10, RngStream::new(8, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perfect_mitigation_at_zero_threshold_cancels_attack() {
        let s = bench();
        let settings = RunSettings {
            horizon: 10,
            runs: 50,
            seed: 1,
        };
        let plans = [AttackPlan::none(1), AttackPlan::constant(v1(10.0), 20.0).unwrap()];
        let cmp = compare_attacks(&s, &plans, &chi(0.0), &MitigationStrategy::Perfect, &settings).unwrap();
        for (x, y) in cmp.reports[0].cost_per_t.iter().zip(&cmp.reports[1].cost_per_t) {
            assert!((x - y).abs() < 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn identical_plans_give_identical_reports() {
        let s = bench();
        let settings = RunSettings {
            horizon: 5,
            runs: 40,
            seed: 2,
        };
        let plans = [AttackPlan::none(1), AttackPlan::none(1)];
        let cmp = compare_attacks(&s, &plans, &chi(3.0), &MitigationStrategy::Perfect, &settings).unwrap();
        assert_eq!(cmp.reports[0], cmp.reports[1]);
        assert!(cmp.paired(0, 1).unwrap().mean_per_t.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn cost_arithmetic() {
        let r = cost_from_sums(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(r.cost_per_t, vec![2.0, 4.0]);
        assert_eq!(r.std_err_per_t, vec![1.0, 1.0]);
        assert_eq!(cost_from_sums(&[vec![0.0; 4]]).unwrap().cost_per_t, vec![0.0; 4]);
        assert!(cost_from_sums(&[]).is_err());
        assert!(cost_from_sums(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn costs_are_nondecreasing() {
        let s = bench();
        let settings = RunSettings {
            horizon: 8,
            runs: 30,
            seed: 5,
        };
        let plan = AttackPlan::ramp(v1(1.0), 20.0).unwrap();
        let trs = map_rollouts(&s, &plan, &chi(4.0), &MitigationStrategy::Perfect, &settings, |t| t).unwrap();
        let rep = empirical_cost(&trs).unwrap();
        assert!(rep.cost_per_t.windows(2).all(|w| w[1] >= w[0]));
        assert!(rep.cost_per_t[0] >= 0.0);
    }

    #[test]
    fn oracle_never_fires_without_attack() {
        let s = bench();
        let settings = RunSettings {
            horizon: 6,
            runs: 100,
            seed: 9,
        };
        let alarms = map_rollouts(
            &s,
            &AttackPlan::none(1),
            &Detector::Oracle,
            &MitigationStrategy::Perfect,
            &settings,
            |t| t.alarm,
        )
        .unwrap();
        assert!(detection_frequency(&alarms).iter().all(|f| *f == 0.0));
    }

    #[test]
    fn false_alarms_under_perfect_mitigation_cost_nothing() {
        let s = bench();
        let settings = RunSettings {
            horizon: 10,
            runs: 200,
            seed: 4,
        };
        let d = fp_cost(&s, 0.0, &MitigationStrategy::Perfect, &settings).unwrap();
        assert!(d.mean_per_t.iter().all(|x| x.abs() < 1e-9));
    }
}
