//! Evolutionary and surrogate-assisted solvers for optimistic bilevel
//! optimization.
//!
//! A bilevel program nests one optimization problem inside another: the
//! upper level picks `x_u`, the lower level answers with a minimizer `x_l`
//! of its own objective given `x_u`, and the upper objective is scored on
//! the pair. This crate provides:
//!
//! * problem definitions with per-level evaluation counting
//!   ([`BilevelProblem`], [`EvalCounter`]) and a registry of benchmark
//!   problems ([`problems::Registry`]),
//! * a nested evolutionary solver that calls a real lower-level
//!   optimization for every candidate, plus variants that replace some of
//!   those calls with quadratic approximations of the reaction mapping or
//!   of the optimal-value function,
//! * an adaptive solver that switches between the two approximations based
//!   on their training error.
//!
//! ```
//! use bilevel::problems::Registry;
//! use bilevel::EvalCounter;
//!
//! let registry = Registry::default();
//! let problem = registry.lookup("tp1").unwrap();
//! let mut counter = EvalCounter::new();
//! let eval = problem.evaluate_upper(&[20.0, 5.0], &[10.0, 5.0], &mut counter).unwrap();
//! assert!((eval.value - 225.0).abs() < 1e-12);
//! assert_eq!(counter.ul_evals, 1);
//! ```

pub mod adaptive;
pub mod archive;
pub mod ea;
pub mod error;
pub mod individual;
pub mod local;
pub mod metamodel;
pub mod nested;
pub mod problem;
pub mod problems;
pub mod reduction;
pub mod run;

pub use adaptive::adaptive_solve;
pub use archive::Archive;
pub use error::{Error, Result};
pub use individual::{
    best_index, compare_deb, deb_cmp_values, Individual, Level, Tag, FEASIBILITY_TOL,
};
pub use nested::{nested_solve, NestedMode};
pub use problem::{BilevelProblem, EvalCounter, KnownOptimum, LevelEval, ProblemBuilder};
pub use run::{GenTrace, Mapping, RunConfig, RunRecord, TerminationReason};
