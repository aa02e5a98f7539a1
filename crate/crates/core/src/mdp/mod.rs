//! The attacker's Markov decision process over estimation errors.

pub mod grid;
pub mod solve;
pub mod transition;

pub use grid::{action_grid, Grid};
pub use solve::{
    policy_lookup, stage_for, value_iteration, value_iteration_refined, Policy, Refinement, StageConvention,
};
pub use transition::{
    build_transition_model, expected_reward, CellProb, DeltaRule, ErrorMdp, ProbabilityMethod, RowEstimate,
    SamplingOptions, SparseRow, TransitionModel,
};
