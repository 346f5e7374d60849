//! Convex reformulations of two-layer BN-ReLU training over activation
//! patterns, a penalty solver for the cone-constrained group lasso, weight
//! recovery and dual certificates.

mod dual;
mod program;
mod recover;
mod solver;

pub use dual::{certify_program, dual_certificate, dual_objective, DualCertificate};
pub use program::{
    build_cnn_program, build_fc_program, build_postbn_program, cnn_arrangements, fc_arrangements,
    postbn_arrangements, ArrangementStrategy, ConvexProgram, ProgramBlock, Variant,
};
pub use recover::{recover_network, RECOVERY_TOL};
pub use solver::{
    convex_objective, project_onto_cone, solve_penalty, ConvexSolution, PenaltyKind, SolverConfig,
    SolverTrace, TraceRow,
};
