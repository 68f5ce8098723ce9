//! Population members and the constraint-domination ordering.

use std::cmp::Ordering;

/// How a member's lower-level vector was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    /// `x_l` came from a completed lower-level optimization.
    Optimized,
    /// `x_l` came from a surrogate prediction and is unverified.
    Predicted,
}

/// Which level's objective and constraints a comparison uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Upper,
    Lower,
}

/// A candidate pair `(x_u, x_l)` with cached true evaluations of both levels.
#[derive(Debug, Clone)]
pub struct Individual {
    pub x_u: Vec<f64>,
    pub x_l: Vec<f64>,
    /// `F(x_u, x_l)`.
    pub f_upper: f64,
    /// `f(x_u, x_l)`.
    pub f_lower: f64,
    pub ul_violation: f64,
    pub ll_violation: f64,
    /// Raw upper constraint values, `<= 0` feasible.
    pub ul_constraints: Vec<f64>,
    /// Raw lower constraint values, `<= 0` feasible.
    pub ll_constraints: Vec<f64>,
    pub tag: Tag,
}

impl Individual {
    /// Violation used when ranking members at the given level.
    ///
    /// At the upper level a pair whose lower vector breaks lower-level
    /// constraints cannot satisfy the optimality condition on `x_l` either,
    /// so both levels' violations count against it. At the lower level only
    /// the lower constraints matter.
    pub fn violation(&self, level: Level) -> f64 {
        match level {
            Level::Upper => self.ul_violation + self.ll_violation,
            Level::Lower => self.ll_violation,
        }
    }

    pub fn objective(&self, level: Level) -> f64 {
        match level {
            Level::Upper => self.f_upper,
            Level::Lower => self.f_lower,
        }
    }

    pub fn is_feasible(&self, level: Level, tol: f64) -> bool {
        self.violation(level) <= tol
    }
}

/// Feasibility tolerance shared by comparisons and local solves.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Constraint-domination comparison; `Ordering::Less` means `a` ranks better.
///
/// A feasible member beats an infeasible one; two feasible members compare by
/// objective value; two infeasible members compare by aggregate violation.
/// Lower-level optimality of the compared members plays no role.
pub fn compare_deb(a: &Individual, b: &Individual, level: Level) -> Ordering {
    deb_cmp_values(
        a.objective(level),
        a.violation(level),
        b.objective(level),
        b.violation(level),
    )
}

/// [`compare_deb`] on bare objective/violation pairs, for rankings that do
/// not go through full population members.
pub fn deb_cmp_values(obj_a: f64, viol_a: f64, obj_b: f64, viol_b: f64) -> Ordering {
    let fa = viol_a <= FEASIBILITY_TOL;
    let fb = viol_b <= FEASIBILITY_TOL;
    match (fa, fb) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (true, true) => total_cmp_or_equal(obj_a, obj_b),
        (false, false) => total_cmp_or_equal(viol_a, viol_b),
    }
}

fn total_cmp_or_equal(x: f64, y: f64) -> Ordering {
    // NaN never appears in valid evaluations; order it last defensively.
    x.partial_cmp(&y).unwrap_or_else(|| {
        if x.is_nan() && y.is_nan() {
            Ordering::Equal
        } else if x.is_nan() {
            Ordering::Greater
        } else {
            Ordering::Less
        }
    })
}

/// Index of the best member under [`compare_deb`]; first wins ties.
pub fn best_index(members: &[Individual], level: Level) -> usize {
    assert!(!members.is_empty(), "cannot rank an empty set");
    let mut best = 0;
    for i in 1..members.len() {
        if compare_deb(&members[i], &members[best], level) == Ordering::Less {
            best = i;
        }
    }
    best
}

/// Index of the best member whose lower vector came from a real solve.
/// Predicted members carry unvouched lower vectors, so anything that reports
/// progress or anchors a refinement must rank only the optimized ones.
/// `None` when every member is a prediction.
pub fn best_optimized_index(members: &[Individual], level: Level) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, m) in members.iter().enumerate() {
        if m.tag != Tag::Optimized {
            continue;
        }
        match best {
            Some(b) if compare_deb(m, &members[b], level) != Ordering::Less => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn member(f_upper: f64, ul_violation: f64) -> Individual {
        Individual {
            x_u: vec![0.0],
            x_l: vec![0.0],
            f_upper,
            f_lower: 0.0,
            ul_violation,
            ll_violation: 0.0,
            ul_constraints: vec![],
            ll_constraints: vec![],
            tag: Tag::Optimized,
        }
    }

    #[test]
    fn feasible_beats_infeasible_regardless_of_objective() {
        let a = member(10.0, 0.0);
        let b = member(-99.0, 0.3);
        assert_eq!(compare_deb(&a, &b, Level::Upper), Ordering::Less);
        assert_eq!(compare_deb(&b, &a, Level::Upper), Ordering::Greater);
    }

    #[test]
    fn both_infeasible_compare_by_violation() {
        let a = member(50.0, 2.0);
        let b = member(-50.0, 5.0);
        assert_eq!(compare_deb(&a, &b, Level::Upper), Ordering::Less);
    }

    #[test]
    fn both_feasible_compare_by_objective() {
        let a = member(1.0, 0.0);
        let b = member(2.0, 0.0);
        assert_eq!(compare_deb(&a, &b, Level::Upper), Ordering::Less);
        assert_eq!(compare_deb(&a, &a.clone(), Level::Upper), Ordering::Equal);
    }

    #[test]
    fn upper_ranking_counts_lower_infeasibility_of_the_pair() {
        let mut a = member(-100.0, 0.0);
        a.ll_violation = 1.0;
        let b = member(3.0, 0.0);
        assert_eq!(compare_deb(&a, &b, Level::Upper), Ordering::Greater);
        // Upper violations do not leak the other way: a pair that only breaks
        // upper constraints still ranks by f at the lower level.
        let c = member(3.0, 5.0);
        assert_eq!(compare_deb(&c, &b, Level::Lower), Ordering::Equal);
    }

    #[test]
    fn best_index_prefers_first_on_ties() {
        let members = vec![member(1.0, 0.0), member(1.0, 0.0), member(0.5, 0.0)];
        assert_eq!(best_index(&members, Level::Upper), 2);
        let members = vec![member(1.0, 0.0), member(1.0, 0.0)];
        assert_eq!(best_index(&members, Level::Upper), 0);
    }
}
