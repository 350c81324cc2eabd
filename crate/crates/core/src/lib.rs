//! Linear-quadratic McKean-Vlasov control.
//!
//! The value function of an LQ mean-field control problem is quadratic in
//! the first two moments of the state law,
//! `w(t, μ) = tr(Λ(t)Σ) + mᵀΓ(t)m + γ(t)·m + χ(t)`, where `(Λ, Γ, γ, χ)`
//! solve a backward Riccati system. This crate integrates that system,
//! synthesizes the optimal affine feedback, and cross-checks the result
//! against a deterministic moment-flow oracle, an interacting-particle Monte
//! Carlo simulation and the closed forms of two worked examples.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod feedback;
pub mod io;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod particles;
pub mod presets;
pub mod quadrature;
pub mod riccati;
pub mod schedule;
pub mod state;
pub mod value;
pub mod verify;

pub use error::{Error, Result};
pub use feedback::{apply_feedback, AffineFeedback, FeedbackGains};
pub use model::{
    diffusion, drift, running_cost, terminal_cost, validate_model, Dimensions, LqCost, LqDynamics, LqModel,
    ValidationReport, Violation,
};
pub use moments::{
    cost_from_moments, dpp_check, dpp_check_with, moment_rhs, propagate_moments, propagate_moments_between,
    MomentTrajectory,
};
pub use particles::{
    canonical_perturbations, optimality_gap, simulate, GapEntry, GapReport, InitialLaw, SimConfig, SimResult,
};
pub use riccati::{
    auxiliary, check_standard_conditions, default_steps, eval_solution, riccati_rhs, solve_riccati,
    AuxiliaryMatrices, RiccatiSolution, RiccatiState, StandardConditions,
};
pub use schedule::{eval_schedule, CoefficientSchedule};
pub use state::{ensemble_moments, MomentState, ParticleEnsemble};
pub use value::{
    bellman_residual, f_hat_affine, g_functional, g_hat, g_inf, optimal_feedback, optimal_gains, value,
    value_of_ensemble,
};
