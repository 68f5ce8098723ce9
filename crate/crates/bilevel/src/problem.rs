//! Problem abstraction for optimistic bilevel programs.
//!
//! A [`BilevelProblem`] couples an upper-level objective `F(x_u, x_l)` with a
//! lower-level objective `f(x_u, x_l)`; the lower vector must be optimal for
//! the lower problem at the given `x_u`, and among tied lower optima the
//! upper level gets its preferred one (the optimistic position). Inequality
//! constraints are stored normalized to the form `c(x_u, x_l) <= 0`; equality
//! constraints are not supported.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Objective or constraint callback: value at `(x_u, x_l)`.
pub type EvalFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Evaluation budget spent so far, split by level.
///
/// One upper evaluation covers `F` together with every `G_k` at one point;
/// one lower evaluation covers `f` together with every `g_j`. Nothing else
/// mutates these counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounter {
    pub ul_evals: u64,
    pub ll_evals: u64,
}

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.ul_evals + self.ll_evals
    }
}

/// Reference solution used for accuracy-based termination and reporting.
#[derive(Debug, Clone)]
pub struct KnownOptimum {
    pub upper_value: f64,
    pub lower_value: f64,
    /// Optimal `(x_u, x_l)` when the source states one.
    pub solution: Option<(Vec<f64>, Vec<f64>)>,
}

/// One level's evaluation: objective value plus raw constraint values.
#[derive(Debug, Clone)]
pub struct LevelEval {
    pub value: f64,
    /// Raw `c(x)` values, normalized so feasibility means `c <= 0`.
    pub constraints: Vec<f64>,
    /// Aggregate violation `sum_j max(0, c_j)`.
    pub violation: f64,
}

/// An optimistic bilevel program with box bounds on both variable vectors.
#[derive(Clone)]
pub struct BilevelProblem {
    name: String,
    upper_bounds: Vec<(f64, f64)>,
    lower_bounds: Vec<(f64, f64)>,
    upper_objective: EvalFn,
    upper_constraints: Vec<EvalFn>,
    lower_objective: EvalFn,
    lower_constraints: Vec<EvalFn>,
    ll_convex: bool,
    ll_multistart: usize,
    known_optimum: Option<KnownOptimum>,
}

impl std::fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("name", &self.name)
            .field("n", &self.upper_dim())
            .field("m", &self.lower_dim())
            .field("upper_constraints", &self.upper_constraints.len())
            .field("lower_constraints", &self.lower_constraints.len())
            .field("ll_convex", &self.ll_convex)
            .finish()
    }
}

impl BilevelProblem {
    pub fn builder(name: impl Into<String>) -> ProblemBuilder {
        ProblemBuilder::new(name)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Upper-level dimension `n`.
    pub fn upper_dim(&self) -> usize {
        self.upper_bounds.len()
    }

    /// Lower-level dimension `m`.
    pub fn lower_dim(&self) -> usize {
        self.lower_bounds.len()
    }

    pub fn upper_bounds(&self) -> &[(f64, f64)] {
        &self.upper_bounds
    }

    pub fn lower_bounds(&self) -> &[(f64, f64)] {
        &self.lower_bounds
    }

    /// Whether the lower-level problem is convex for every fixed `x_u`,
    /// making a local solver sufficient for lower-level optimization.
    pub fn ll_convex(&self) -> bool {
        self.ll_convex
    }

    /// Number of random restarts a local lower-level solve should use.
    pub fn ll_multistart(&self) -> usize {
        self.ll_multistart
    }

    pub fn known_optimum(&self) -> Option<&KnownOptimum> {
        self.known_optimum.as_ref()
    }

    pub fn num_upper_constraints(&self) -> usize {
        self.upper_constraints.len()
    }

    pub fn num_lower_constraints(&self) -> usize {
        self.lower_constraints.len()
    }

    /// Raw objective callback, for wrappers that transform a problem.
    pub fn upper_objective_fn(&self) -> EvalFn {
        Arc::clone(&self.upper_objective)
    }

    pub fn lower_objective_fn(&self) -> EvalFn {
        Arc::clone(&self.lower_objective)
    }

    pub fn upper_constraint_fns(&self) -> &[EvalFn] {
        &self.upper_constraints
    }

    pub fn lower_constraint_fns(&self) -> &[EvalFn] {
        &self.lower_constraints
    }

    fn check_dims(&self, x_u: &[f64], x_l: &[f64]) -> Result<()> {
        if x_u.len() != self.upper_dim() {
            return Err(Error::DimensionMismatch {
                what: "upper-level vector",
                expected: self.upper_dim(),
                got: x_u.len(),
            });
        }
        if x_l.len() != self.lower_dim() {
            return Err(Error::DimensionMismatch {
                what: "lower-level vector",
                expected: self.lower_dim(),
                got: x_l.len(),
            });
        }
        Ok(())
    }

    /// Evaluates `F` and all upper constraints at one point, charging one
    /// upper-level evaluation to `counter`.
    pub fn evaluate_upper(
        &self,
        x_u: &[f64],
        x_l: &[f64],
        counter: &mut EvalCounter,
    ) -> Result<LevelEval> {
        self.check_dims(x_u, x_l)?;
        counter.ul_evals += 1;
        let value = (self.upper_objective)(x_u, x_l);
        let constraints: Vec<f64> = self.upper_constraints.iter().map(|c| c(x_u, x_l)).collect();
        let violation = aggregate_violation(&constraints);
        Ok(LevelEval {
            value,
            constraints,
            violation,
        })
    }

    /// Evaluates `f` and all lower constraints at one point, charging one
    /// lower-level evaluation to `counter`.
    pub fn evaluate_lower(
        &self,
        x_u: &[f64],
        x_l: &[f64],
        counter: &mut EvalCounter,
    ) -> Result<LevelEval> {
        self.check_dims(x_u, x_l)?;
        counter.ll_evals += 1;
        let value = (self.lower_objective)(x_u, x_l);
        let constraints: Vec<f64> = self.lower_constraints.iter().map(|c| c(x_u, x_l)).collect();
        let violation = aggregate_violation(&constraints);
        Ok(LevelEval {
            value,
            constraints,
            violation,
        })
    }
}

/// Unweighted sum of positive parts; zero means feasible.
pub fn aggregate_violation(constraints: &[f64]) -> f64 {
    constraints.iter().map(|c| c.max(0.0)).sum()
}

pub struct ProblemBuilder {
    name: String,
    upper_bounds: Vec<(f64, f64)>,
    lower_bounds: Vec<(f64, f64)>,
    upper_objective: Option<EvalFn>,
    upper_constraints: Vec<EvalFn>,
    lower_objective: Option<EvalFn>,
    lower_constraints: Vec<EvalFn>,
    ll_convex: bool,
    ll_multistart: usize,
    known_optimum: Option<KnownOptimum>,
}

impl ProblemBuilder {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            upper_bounds: Vec::new(),
            lower_bounds: Vec::new(),
            upper_objective: None,
            upper_constraints: Vec::new(),
            lower_objective: None,
            lower_constraints: Vec::new(),
            ll_convex: true,
            ll_multistart: 1,
            known_optimum: None,
        }
    }

    pub fn upper_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.upper_bounds = bounds;
        self
    }

    pub fn lower_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.lower_bounds = bounds;
        self
    }

    pub fn upper_objective(
        mut self,
        f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.upper_objective = Some(Arc::new(f));
        self
    }

    pub fn lower_objective(
        mut self,
        f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.lower_objective = Some(Arc::new(f));
        self
    }

    /// Adds an upper constraint already normalized to `c(x_u, x_l) <= 0`.
    pub fn upper_constraint(
        mut self,
        c: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.upper_constraints.push(Arc::new(c));
        self
    }

    /// Adds a lower constraint already normalized to `c(x_u, x_l) <= 0`.
    pub fn lower_constraint(
        mut self,
        c: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.lower_constraints.push(Arc::new(c));
        self
    }

    pub fn ll_convex(mut self, convex: bool) -> Self {
        self.ll_convex = convex;
        self
    }

    pub fn ll_multistart(mut self, starts: usize) -> Self {
        self.ll_multistart = starts.max(1);
        self
    }

    pub fn known_optimum(mut self, opt: KnownOptimum) -> Self {
        self.known_optimum = Some(opt);
        self
    }

    pub fn build(self) -> BilevelProblem {
        assert!(
            !self.upper_bounds.is_empty() && !self.lower_bounds.is_empty(),
            "both levels need at least one variable"
        );
        for &(lo, hi) in self.upper_bounds.iter().chain(self.lower_bounds.iter()) {
            assert!(lo < hi, "bound interval must be non-empty");
        }
        BilevelProblem {
            name: self.name,
            upper_bounds: self.upper_bounds,
            lower_bounds: self.lower_bounds,
            upper_objective: self.upper_objective.expect("upper objective required"),
            upper_constraints: self.upper_constraints,
            lower_objective: self.lower_objective.expect("lower objective required"),
            lower_constraints: self.lower_constraints,
            ll_convex: self.ll_convex,
            ll_multistart: self.ll_multistart,
            known_optimum: self.known_optimum,
        }
    }
}
