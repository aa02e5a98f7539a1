//! Attack sequences: constant, ramp and MDP-policy driven, each clipped
//! to the energy ball `‖a‖ ≤ a_max`.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::mdp::{policy_lookup, stage_for, Grid, Policy, StageConvention};

pub const DEFAULT_A_MAX: f64 = 20.0;

/// A solved policy together with the grid it was solved on.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHandle {
    pub policy: Policy,
    pub grid: Grid,
    pub convention: StageConvention,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackKind {
    None,
    Constant(DVector<f64>),
    Ramp(DVector<f64>),
    MdpPolicy(Arc<PolicyHandle>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    pub kind: AttackKind,
    pub channels: usize,
    pub a_max: f64,
}

impl AttackPlan {
    pub fn none(channels: usize) -> Self {
        Self {
            kind: AttackKind::None,
            channels,
            a_max: DEFAULT_A_MAX,
        }
    }

    pub fn constant(c: DVector<f64>, a_max: f64) -> Result<Self> {
        Self::build(c.len(), AttackKind::Constant(c), a_max)
    }

    pub fn ramp(slope: DVector<f64>, a_max: f64) -> Result<Self> {
        Self::build(slope.len(), AttackKind::Ramp(slope), a_max)
    }

    pub fn policy(handle: Arc<PolicyHandle>, a_max: f64) -> Result<Self> {
        Self::build(handle.policy.action_dim, AttackKind::MdpPolicy(handle), a_max)
    }

    fn build(channels: usize, kind: AttackKind, a_max: f64) -> Result<Self> {
        if !(a_max > 0.0) {
            return Err(Error::InvalidArgument(format!("a_max must be positive, got {a_max}")));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("attack needs at least one channel".into()));
        }
        Ok(Self { kind, channels, a_max })
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            AttackKind::None => "none",
            AttackKind::Constant(_) => "constant",
            AttackKind::Ramp(_) => "ramp",
            AttackKind::MdpPolicy(_) => "mdp",
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, AttackKind::None)
    }
}

/// Scales `a` back onto the ball of radius `a_max` if it lies outside.
pub fn clip_radial(a: DVector<f64>, a_max: f64) -> DVector<f64> {
    let norm = a.norm();
    if norm > a_max {
        a * (a_max / norm)
    } else {
        a
    }
}

/// Injection at time `t` given the attacker's view of the current
/// estimation error and the number of decisions left in the rollout.
pub fn attack_at(
    plan: &AttackPlan,
    t: usize,
    e_attacker: &DVector<f64>,
    stages_remaining: usize,
) -> Result<DVector<f64>> {
    let raw = match &plan.kind {
        AttackKind::None => return Ok(DVector::zeros(plan.channels)),
        AttackKind::Constant(c) => c.clone(),
        AttackKind::Ramp(s) => s * t as f64,
        AttackKind::MdpPolicy(h) => {
            let stage = stage_for(&h.policy, h.convention, stages_remaining);
            policy_lookup(&h.policy, stage, e_attacker, &h.grid)?
        }
    };
    if raw.len() != plan.channels {
        return Err(Error::dim("attack vector", plan.channels, raw.len()));
    }
    Ok(clip_radial(raw, plan.a_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn baselines() {
        let e = v1(0.0);
        let ramp = AttackPlan::ramp(v1(1.0), 20.0).unwrap();
        assert_eq!(attack_at(&ramp, 7, &e, 1).unwrap()[0], 7.0);
        assert_eq!(attack_at(&ramp, 25, &e, 1).unwrap()[0], 20.0);
        let c = AttackPlan::constant(v1(10.0), 20.0).unwrap();
        for t in [1, 5, 100] {
            assert_eq!(attack_at(&c, t, &e, 1).unwrap()[0], 10.0);
        }
        assert_eq!(attack_at(&AttackPlan::none(1), 3, &e, 1).unwrap()[0], 0.0);
    }

    #[test]
    fn clipping_keeps_direction() {
        let a = clip_radial(DVector::from_vec(vec![30.0, 40.0]), 10.0);
        assert!((a[0] - 6.0).abs() < 1e-12 && (a[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_a_max() {
        assert!(AttackPlan::constant(v1(1.0), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn emitted_attacks_stay_in_ball(
            c in prop::collection::vec(-100.0f64..100.0, 1..4),
            a_max in 0.1f64..50.0,
            t in 1usize..60,
            ramp in any::<bool>(),
        ) {
            let v = DVector::from_vec(c);
            let e = DVector::zeros(v.len());
            let plan = if ramp { AttackPlan::ramp(v, a_max) } else { AttackPlan::constant(v, a_max) }.unwrap();
            let a = attack_at(&plan, t, &e, 1).unwrap();
            prop_assert!(a.norm() <= a_max * (1.0 + 1e-12));
        }
    }
}
