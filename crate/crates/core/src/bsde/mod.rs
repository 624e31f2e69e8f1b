//! Backward SDE solver: generators, terminal conditions, regression and
//! the backward and Picard schemes.

pub mod generator;
pub mod regression;
pub mod solver;
pub mod terminal;

pub use generator::Generator;
pub use regression::Regressor;
pub use solver::{
    picard_solve, solve_backward, stability_gap, x_columns, zbar_estimator, BsdeSolution, SolverConfig,
    StabilityGap, StepDiagnostics,
};
pub use terminal::{Functional, TerminalCondition};

#[cfg(test)]
mod tests;
