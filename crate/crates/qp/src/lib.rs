//! Convex quadratic programming for receding-horizon dispatch.
//!
//! [`solve`] runs a sparse primal-dual interior-point method and returns a
//! [`QpSolution`] whose optimality is certified by [`check_kkt`], which
//! recomputes all residuals from the raw problem data.

mod io;
mod kkt;
mod ldl;
mod problem;
mod solver;
mod sparse;

pub use io::{dump, load, FORMAT_VERSION};
pub use kkt::{check_kkt, kkt_residuals, KktReport, Residuals};
pub use problem::{QpBuilder, QpProblem, MAX_VARIABLES};
pub use solver::{
    solve, solve_warm, InfeasibilityCertificate, QpSolution, QpStatus, SolverSettings, WarmStart,
};
pub use sparse::SparseMatrix;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("problem is not convex: {0}")]
    NonConvex(String),
    #[error("non-finite data: {0}")]
    NonFinite(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}
