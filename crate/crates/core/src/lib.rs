//! Scale-invariant solutions of overdetermined linear systems and the
//! normalized Monte Carlo / TD(0) value estimators built on them.
//!
//! The central object is an [`OverdeterminedSystem`] `Φw ≈ V` with row
//! weights `d`. Instead of least squares, rows are compared through their
//! signed distance to the hyperplane `φ_iᵀw = V_i`, which makes the solution
//! independent of how each equation is scaled.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod linalg;
pub mod linear_model;
pub mod mdp_sim;
pub mod rng;
pub mod tensor_ops;
pub mod total_projections;
pub mod value_estimators;

pub use error::{Error, Result};
pub use linear_model::{
    least_squares_solution, normalized_error, scale_invariant_solution, OverdeterminedSystem, WeightVector,
};
pub use mdp_sim::{FeatureMap, MarkovRewardProcess, StationaryDistribution, Trajectory};
pub use total_projections::{Mode, SolveTrace, SolverConfig, StepRule};
