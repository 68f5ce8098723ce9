//! Modified test problems with a deliberately set-valued lower reaction.
//!
//! Each modification appends two lower-level variables `(y_p, y_q)` in
//! `[-1, 1]` and rewrites the objectives as
//!
//! ```text
//! F_new = F + y_p^2 + y_q^2        f_new = f + (y_p - y_q)^2
//! ```
//!
//! For any fixed upper vector every diagonal point `y_p = y_q` is lower-level
//! optimal, so the reaction set becomes a continuum; only `y_p = y_q = 0`
//! also suits the upper level. The optimal objective values of the base
//! problem are unchanged.

use crate::error::Result;
use crate::problem::{BilevelProblem, KnownOptimum};
use crate::problems::tp::make_tp;

/// Builds the modified variant of test problem `index` in `1..=8`.
pub fn make_mtp(index: usize) -> Result<BilevelProblem> {
    let base = make_tp(index)?;
    Ok(modify(base, format!("mtp{index}")))
}

fn modify(base: BilevelProblem, name: String) -> BilevelProblem {
    let m = base.lower_dim();
    let mut lower_bounds = base.lower_bounds().to_vec();
    lower_bounds.push((-1.0, 1.0));
    lower_bounds.push((-1.0, 1.0));

    let mut builder = BilevelProblem::builder(name)
        .upper_bounds(base.upper_bounds().to_vec())
        .lower_bounds(lower_bounds)
        .ll_convex(base.ll_convex())
        .ll_multistart(base.ll_multistart());

    {
        let f = base.upper_objective_fn();
        builder = builder
            .upper_objective(move |x, y| f(x, &y[..m]) + y[m].powi(2) + y[m + 1].powi(2));
    }
    {
        let f = base.lower_objective_fn();
        builder = builder
            .lower_objective(move |x, y| f(x, &y[..m]) + (y[m] - y[m + 1]).powi(2));
    }
    for c in base.upper_constraint_fns() {
        let c = std::sync::Arc::clone(c);
        builder = builder.upper_constraint(move |x, y| c(x, &y[..m]));
    }
    for c in base.lower_constraint_fns() {
        let c = std::sync::Arc::clone(c);
        builder = builder.lower_constraint(move |x, y| c(x, &y[..m]));
    }
    if let Some(opt) = base.known_optimum() {
        let solution = opt.solution.clone().map(|(x, mut y)| {
            y.push(0.0);
            y.push(0.0);
            (x, y)
        });
        builder = builder.known_optimum(KnownOptimum {
            upper_value: opt.upper_value,
            lower_value: opt.lower_value,
            solution,
        });
    }
    builder.build()
}
