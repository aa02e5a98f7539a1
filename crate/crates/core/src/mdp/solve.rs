//! Finite-horizon value iteration and nearest-neighbour policy lookup.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::Grid;
use super::transition::{ErrorMdp, TransitionModel};
use crate::error::{Error, Result};

/// How a rollout maps wall-clock time onto the stage tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageConvention {
    /// Use the table with as many stages left as the rollout has.
    #[default]
    StagesToGo,
    /// Always use the longest-horizon table.
    Stationary,
}

/// Stage-wise optimal actions and values. Stage `s` (1-based) means `s`
/// decisions remain; tables are stored stage-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub horizon: usize,
    pub states: usize,
    pub action_dim: usize,
    pub gamma: f64,
    /// `actions[((s - 1) * states + i) * action_dim + k]`.
    pub actions: Vec<f64>,
    /// `values[(s - 1) * states + i]`.
    pub values: Vec<f64>,
}

impl Policy {
    pub fn action(&self, stage: usize, state: usize) -> DVector<f64> {
        let base = ((stage - 1) * self.states + state) * self.action_dim;
        DVector::from_column_slice(&self.actions[base..base + self.action_dim])
    }

    pub fn value(&self, stage: usize, state: usize) -> f64 {
        self.values[(stage - 1) * self.states + state]
    }

    pub fn stage_values(&self, stage: usize) -> &[f64] {
        &self.values[(stage - 1) * self.states..stage * self.states]
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.horizon {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} outside policy horizon 1..={}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Local search around the grid argmax with continuous actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub rounds: usize,
    /// Initial half-width; usually the action-grid step.
    pub step: f64,
    pub a_max: f64,
}

fn better(q: f64, best: f64) -> bool {
    q > best + 1e-12 * best.abs().max(1.0)
}

fn check_inputs(tm: &TransitionModel, grid: &Grid, horizon: usize, gamma: f64) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "discount must lie in (0, 1], got {gamma}"
        )));
    }
    if tm.states != grid.len() {
        return Err(Error::dim("transition model states", grid.len(), tm.states));
    }
    if tm.actions.is_empty() {
        return Err(Error::Empty("action set"));
    }
    Ok(())
}

/// Backward induction from `V_0 ≡ 0`:
/// `V_s(i) = max_a Σ_j T(i, a, j) (‖ξ_j‖² + γ V_{s−1}(j))`.
/// Ties go to the smallest action index.
pub fn value_iteration(tm: &TransitionModel, grid: &Grid, horizon: usize, gamma: f64) -> Result<Policy> {
    value_iteration_impl(tm, grid, horizon, gamma, None)
}

/// As [`value_iteration`], then polishes each stage's argmax by
/// coordinate search over off-grid actions using fresh rows from `mdp`.
pub fn value_iteration_refined(
    tm: &TransitionModel,
    grid: &Grid,
    horizon: usize,
    gamma: f64,
    mdp: &ErrorMdp,
    refinement: Refinement,
) -> Result<Policy> {
    value_iteration_impl(tm, grid, horizon, gamma, Some((mdp, refinement)))
}

fn value_iteration_impl(
    tm: &TransitionModel,
    grid: &Grid,
    horizon: usize,
    gamma: f64,
    refine: Option<(&ErrorMdp, Refinement)>,
) -> Result<Policy> {
    check_inputs(tm, grid, horizon, gamma)?;
    let n = grid.len();
    let na = tm.action_count();
    let m = tm.actions[0].len();
    let norms = grid.squared_norms();
    let mut actions = Vec::with_capacity(horizon * n * m);
    let mut values = Vec::with_capacity(horizon * n);
    let mut prev = vec![0.0; n];

    for _stage in 1..=horizon {
        let target: Vec<f64> = norms.iter().zip(&prev).map(|(r, v)| r + gamma * v).collect();
        let stage: Vec<Result<(Vec<f64>, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best_k = 0;
                let mut best = f64::NEG_INFINITY;
                for k in 0..na {
                    let q = tm.row(i, k).dot(&target);
                    if k == 0 || better(q, best) {
                        best = q;
                        best_k = k;
                    }
                }
                let mut a = tm.actions[best_k].clone();
                if let Some((mdp, opts)) = refine {
                    let (ra, rq) = refine_action(mdp, grid, i, &a, best, &target, opts)?;
                    a = ra;
                    best = rq;
                }
                Ok((a, best))
            })
            .collect();
        let mut next = Vec::with_capacity(n);
        for item in stage {
            let (a, v) = item?;
            actions.extend_from_slice(&a);
            next.push(v);
        }
        values.extend_from_slice(&next);
        prev = next;
    }
    Ok(Policy {
        horizon,
        states: n,
        action_dim: m,
        gamma,
        actions,
        values,
    })
}

fn refine_action(
    mdp: &ErrorMdp,
    grid: &Grid,
    state: usize,
    start: &[f64],
    start_q: f64,
    target: &[f64],
    opts: Refinement,
) -> Result<(Vec<f64>, f64)> {
    let e = grid.point(state);
    let mut best = start.to_vec();
    let mut best_q = start_q;
    let mut h = opts.step;
    let eval = |a: &[f64]| -> Result<f64> {
        let av = DVector::from_column_slice(a);
        let stream = mdp.pair_stream(state, 0, 1);
        Ok(mdp.transition_row(grid, &e, &av, stream)?.row.dot(target))
    };
    for _ in 0..opts.rounds {
        h *= 0.5;
        for k in 0..best.len() {
            for sign in [-1.0, 1.0] {
                let mut cand = best.clone();
                cand[k] += sign * h;
                let norm = cand.iter().map(|c| c * c).sum::<f64>().sqrt();
                if norm > opts.a_max {
                    continue;
                }
                let q = eval(&cand)?;
                if better(q, best_q) {
                    best_q = q;
                    best = cand;
                }
            }
        }
    }
    Ok((best, best_q))
}

/// Action at the grid point nearest to `e`, read from the table for
/// `stage_remaining` decisions left.
pub fn policy_lookup(policy: &Policy, stage_remaining: usize, e: &DVector<f64>, grid: &Grid) -> Result<DVector<f64>> {
    policy.check_stage(stage_remaining)?;
    if e.len() != grid.dim() {
        return Err(Error::dim("policy lookup state", grid.dim(), e.len()));
    }
    if grid.len() != policy.states {
        return Err(Error::dim("policy states", grid.len(), policy.states));
    }
    Ok(policy.action(stage_remaining, grid.nearest(e.as_slice())))
}

/// Stage table to use when `stages_remaining` decisions remain in the rollout.
pub fn stage_for(policy: &Policy, convention: StageConvention, stages_remaining: usize) -> usize {
    match convention {
        StageConvention::StagesToGo => stages_remaining.clamp(1, policy.horizon),
        StageConvention::Stationary => policy.horizon,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{derive_steady_state, SystemModel};
    use crate::mdp::{action_grid, build_transition_model, expected_reward, DeltaRule};

    fn setup(lo: f64, hi: f64, step: f64, actions: usize) -> (ErrorMdp, Grid, TransitionModel) {
        let m = SystemModel::scalar(1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        let ss = derive_steady_state(&m).unwrap();
        let mdp = ErrorMdp::new(m, ss, 10.0, DeltaRule::Perfect).unwrap();
        let grid = Grid::line(lo, hi, step).unwrap();
        let acts = action_grid(1, 20.0, actions).unwrap();
        let tm = build_transition_model(&mdp, &grid, &acts).unwrap();
        (mdp, grid, tm)
    }

    #[test]
    fn single_stage_is_myopic() {
        let (_, grid, tm) = setup(-10.0, 10.0, 0.5, 21);
        let p = value_iteration(&tm, &grid, 1, 1.0).unwrap();
        for i in 0..grid.len() {
            let best = (0..tm.action_count())
                .map(|k| expected_reward(&tm, &grid, i, k))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((p.value(1, i) - best).abs() < 1e-12 * best.max(1.0));
        }
    }

    #[test]
    fn degenerate_grid_has_zero_values() {
        let (_, grid, tm) = setup(0.0, 0.0, 1.0, 5);
        let p = value_iteration(&tm, &grid, 3, 1.0).unwrap();
        assert!(p.values.iter().all(|v| *v == 0.0));
        // Every action ties; the first one wins.
        assert!(p.actions.iter().all(|a| *a == -20.0));
    }

    #[test]
    fn values_grow_with_horizon_and_are_even() {
        let (_, grid, tm) = setup(-15.0, 15.0, 0.5, 41);
        let p = value_iteration(&tm, &grid, 5, 1.0).unwrap();
        let n = grid.len();
        for s in 1..5 {
            for i in 0..n {
                assert!(p.value(s + 1, i) >= p.value(s, i));
            }
        }
        for i in 0..n {
            let v = p.value(5, i);
            assert!((v - p.value(5, n - 1 - i)).abs() < 1e-6 * v.max(1.0));
        }
    }

    #[test]
    fn refinement_never_loses_value() {
        let (mdp, grid, tm) = setup(-10.0, 10.0, 0.5, 9);
        let plain = value_iteration(&tm, &grid, 1, 1.0).unwrap();
        let opts = Refinement {
            rounds: 4,
            step: 5.0,
            a_max: 20.0,
        };
        let refined = value_iteration_refined(&tm, &grid, 1, 1.0, &mdp, opts).unwrap();
        for i in 0..grid.len() {
            assert!(refined.value(1, i) >= plain.value(1, i) - 1e-12);
            assert!(refined.action(1, i)[0].abs() <= 20.0);
        }
    }

    #[test]
    fn lookup_rules() {
        let grid = Grid::line(0.0, 3.0, 1.0).unwrap();
        let policy = Policy {
            horizon: 2,
            states: 4,
            action_dim: 1,
            gamma: 1.0,
            actions: vec![0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0],
            values: vec![0.0; 8],
        };
        let e = |x: f64| DVector::from_element(1, x);
        assert_eq!(policy_lookup(&policy, 2, &e(2.0), &grid).unwrap()[0], 12.0);
        assert_eq!(policy_lookup(&policy, 1, &e(1.5), &grid).unwrap()[0], 1.0);
        assert_eq!(policy_lookup(&policy, 1, &e(-7.0), &grid).unwrap()[0], 0.0);
        assert_eq!(policy_lookup(&policy, 1, &e(9.0), &grid).unwrap()[0], 3.0);
        assert!(policy_lookup(&policy, 3, &e(0.0), &grid).is_err());
        assert_eq!(stage_for(&policy, StageConvention::StagesToGo, 9), 2);
        assert_eq!(stage_for(&policy, StageConvention::StagesToGo, 1), 1);
        assert_eq!(stage_for(&policy, StageConvention::Stationary, 1), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (_, grid, tm) = setup(-1.0, 1.0, 1.0, 3);
        assert!(value_iteration(&tm, &grid, 0, 1.0).is_err());
        assert!(value_iteration(&tm, &grid, 2, 0.0).is_err());
        assert!(value_iteration(&tm, &grid, 2, 1.5).is_err());
    }
}
