//! The eight classic constrained bilevel test problems.
//!
//! All constraints are normalized to `c <= 0` at definition time. Where the
//! original statements leave a variable unbounded or one-sided, the box is a
//! synthetic choice: wide enough to contain the recorded optimum with a
//! comfortable margin, tight enough that random initialization still lands
//! meaningful fractions of samples in the constrained region. The recorded
//! optima sit well inside every box.

use crate::error::{Error, Result};
use crate::problem::{BilevelProblem, KnownOptimum};

/// Builds test problem `index` in `1..=8`.
pub fn make_tp(index: usize) -> Result<BilevelProblem> {
    match index {
        1 => Ok(tp1()),
        2 => Ok(tp2()),
        3 => Ok(tp3()),
        4 => Ok(tp4()),
        5 => Ok(tp5()),
        6 => Ok(tp6()),
        7 => Ok(tp7()),
        8 => Ok(tp8()),
        _ => Err(Error::InvalidDims(format!(
            "tp index must be 1..=8, got {index}"
        ))),
    }
}

fn tp1() -> BilevelProblem {
    BilevelProblem::builder("tp1")
        .upper_bounds(vec![(0.0, 50.0); 2])
        .lower_bounds(vec![(0.0, 10.0); 2])
        .upper_objective(|x, y| {
            (x[0] - 30.0).powi(2) + (x[1] - 20.0).powi(2) - 20.0 * y[0] + 20.0 * y[1]
        })
        .upper_constraint(|x, _| 30.0 - x[0] - 2.0 * x[1])
        .upper_constraint(|x, _| x[0] + x[1] - 25.0)
        .upper_constraint(|x, _| x[1] - 15.0)
        .lower_objective(|x, y| (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2))
        .known_optimum(KnownOptimum {
            upper_value: 225.0,
            lower_value: 100.0,
            solution: Some((vec![20.0, 5.0], vec![10.0, 5.0])),
        })
        .build()
}

fn tp2() -> BilevelProblem {
    BilevelProblem::builder("tp2")
        .upper_bounds(vec![(0.0, 50.0); 2])
        .lower_bounds(vec![(-10.0, 20.0); 2])
        .upper_objective(|x, y| 2.0 * x[0] + 2.0 * x[1] - 3.0 * y[0] - 3.0 * y[1] - 60.0)
        .upper_constraint(|x, y| x[0] + x[1] + y[0] - 2.0 * y[1] - 40.0)
        .lower_objective(|x, y| (y[0] - x[0] + 20.0).powi(2) + (y[1] - x[1] + 20.0).powi(2))
        .lower_constraint(|x, y| 10.0 - x[0] + 2.0 * y[0])
        .lower_constraint(|x, y| 10.0 - x[1] + 2.0 * y[1])
        .known_optimum(KnownOptimum {
            upper_value: 0.0,
            lower_value: 100.0,
            solution: Some((vec![0.0, 30.0], vec![-10.0, 10.0])),
        })
        .build()
}

fn tp3() -> BilevelProblem {
    BilevelProblem::builder("tp3")
        .upper_bounds(vec![(0.0, 4.0); 2])
        .lower_bounds(vec![(0.0, 10.0); 2])
        .upper_objective(|x, y| {
            -x[0].powi(2) - 3.0 * x[1].powi(2) - 4.0 * y[0] + y[1].powi(2)
        })
        .upper_constraint(|x, _| x[0].powi(2) + 2.0 * x[1] - 4.0)
        .lower_objective(|x, y| 2.0 * x[0].powi(2) + y[0].powi(2) - 5.0 * y[1])
        .lower_constraint(|x, y| {
            -(x[0].powi(2) - 2.0 * x[0] + x[1].powi(2) - 2.0 * y[0] + y[1]) - 3.0
        })
        .lower_constraint(|x, y| 4.0 - x[1] - 3.0 * y[0] + 4.0 * y[1])
        .known_optimum(KnownOptimum {
            upper_value: -18.6787,
            lower_value: -1.0156,
            solution: None,
        })
        .build()
}

fn tp4() -> BilevelProblem {
    // Summing the second and third lower constraints shows the lower level is
    // only feasible when x1 + x2 <= 1.5, so a huge x box would leave almost
    // every sample without a usable follower response.
    BilevelProblem::builder("tp4")
        .upper_bounds(vec![(0.0, 4.0); 2])
        .lower_bounds(vec![(0.0, 8.0); 3])
        .upper_objective(|x, y| {
            -8.0 * x[0] - 4.0 * x[1] + 4.0 * y[0] - 40.0 * y[1] - 4.0 * y[2]
        })
        .lower_objective(|x, y| x[0] + 2.0 * x[1] + y[0] + y[1] + 2.0 * y[2])
        .lower_constraint(|_, y| y[1] + y[2] - y[0] - 1.0)
        .lower_constraint(|x, y| 2.0 * x[0] - y[0] + 2.0 * y[1] - 0.5 * y[2] - 1.0)
        .lower_constraint(|x, y| 2.0 * x[1] + 2.0 * y[0] - y[1] - 0.5 * y[2] - 1.0)
        .known_optimum(KnownOptimum {
            upper_value: -29.2,
            lower_value: 3.2,
            solution: Some((vec![0.0, 0.9], vec![0.0, 0.6, 0.4])),
        })
        .build()
}

fn tp5() -> BilevelProblem {
    // The leader's x-norm weight 0.5 makes the recorded optimum exact: at
    // x = (-0.4, 0.8) the follower's best response is y = (2, 0), giving
    // F = 0.5*0.8 - 6 + 2 = -3.6 and f = 2 - 4 = -2.
    BilevelProblem::builder("tp5")
        .upper_bounds(vec![(-5.0, 5.0); 2])
        .lower_bounds(vec![(0.0, 10.0); 2])
        .upper_objective(|x, y| {
            0.5 * (x[0].powi(2) + x[1].powi(2)) - 3.0 * y[0] - 4.0 * y[1]
                + 0.5 * (y[0].powi(2) + y[1].powi(2))
        })
        .lower_objective(|x, y| {
            let quad = 0.5 * (y[0].powi(2) + 6.0 * y[0] * y[1] + 10.0 * y[1].powi(2));
            let b1 = -x[0] + 2.0 * x[1];
            let b2 = 3.0 * x[0] - 3.0 * x[1];
            quad - b1 * y[0] - b2 * y[1]
        })
        .lower_constraint(|_, y| -0.333 * y[0] + y[1] - 2.0)
        .lower_constraint(|_, y| y[0] - 0.333 * y[1] - 2.0)
        .known_optimum(KnownOptimum {
            upper_value: -3.6,
            lower_value: -2.0,
            solution: Some((vec![-0.4, 0.8], vec![2.0, 0.0])),
        })
        .build()
}

fn tp6() -> BilevelProblem {
    BilevelProblem::builder("tp6")
        .upper_bounds(vec![(0.0, 4.0)])
        .lower_bounds(vec![(0.0, 4.0); 2])
        .upper_objective(|x, y| (x[0] - 1.0).powi(2) + 2.0 * y[0] - 2.0 * x[0])
        .lower_objective(|x, y| {
            (2.0 * y[0] - 4.0).powi(2) + (2.0 * y[1] - 1.0).powi(2) + x[0] * y[0]
        })
        .lower_constraint(|x, y| 4.0 * x[0] + 5.0 * y[0] + 4.0 * y[1] - 12.0)
        .lower_constraint(|x, y| 4.0 * y[1] - 4.0 * x[0] - 5.0 * y[0] + 4.0)
        .lower_constraint(|x, y| 4.0 * x[0] - 4.0 * y[0] + 5.0 * y[1] - 4.0)
        .lower_constraint(|x, y| 4.0 * y[0] - 4.0 * x[0] + 5.0 * y[1] - 4.0)
        .known_optimum(KnownOptimum {
            upper_value: -1.2091,
            lower_value: 7.6145,
            solution: None,
        })
        .build()
}

fn tp7() -> BilevelProblem {
    fn ratio(x: &[f64], y: &[f64]) -> f64 {
        (x[0] + y[0]) * (x[1] + y[1]) / (1.0 + x[0] * y[0] + x[1] * y[1])
    }
    BilevelProblem::builder("tp7")
        .upper_bounds(vec![(0.0, 10.0); 2])
        .lower_bounds(vec![(0.0, 10.0); 2])
        .upper_objective(|x, y| -ratio(x, y))
        .upper_constraint(|x, _| x[0].powi(2) + x[1].powi(2) - 100.0)
        .upper_constraint(|x, _| x[0] - x[1])
        .lower_objective(|x, y| ratio(x, y))
        .lower_constraint(|x, y| y[0] - x[0])
        .lower_constraint(|x, y| y[1] - x[1])
        // The fractional lower objective has symmetric local optima, so a
        // single local solve is not reliable.
        .ll_multistart(3)
        .known_optimum(KnownOptimum {
            upper_value: -1.96,
            lower_value: 1.96,
            solution: None,
        })
        .build()
}

fn tp8() -> BilevelProblem {
    BilevelProblem::builder("tp8")
        .upper_bounds(vec![(0.0, 50.0); 2])
        .lower_bounds(vec![(-10.0, 20.0); 2])
        .upper_objective(|x, y| {
            (2.0 * x[0] + 2.0 * x[1] - 3.0 * y[0] - 3.0 * y[1] - 60.0).abs()
        })
        .upper_constraint(|x, y| x[0] + x[1] + y[0] - 2.0 * y[1] - 40.0)
        .lower_objective(|x, y| (y[0] - x[0] + 20.0).powi(2) + (y[1] - x[1] + 20.0).powi(2))
        .lower_constraint(|x, y| 2.0 * y[0] - x[0] + 10.0)
        .lower_constraint(|x, y| 2.0 * y[1] - x[1] + 10.0)
        .known_optimum(KnownOptimum {
            upper_value: 0.0,
            lower_value: 100.0,
            solution: Some((vec![0.0, 30.0], vec![-10.0, 10.0])),
        })
        .build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::EvalCounter;

    #[test]
    fn tp1_example_point_has_zero_objective_and_violation_thirty() {
        let p = make_tp(1).unwrap();
        let mut c = EvalCounter::new();
        let eval = p.evaluate_upper(&[30.0, 20.0], &[0.0, 0.0], &mut c).unwrap();
        assert_eq!(eval.value, 0.0);
        // Normalized constraints at (30, 20): -40 (ok), +25, +5.
        assert!((eval.violation - 30.0).abs() < 1e-12);
    }

    #[test]
    fn recorded_solutions_reproduce_recorded_values() {
        for idx in 1..=8 {
            let p = make_tp(idx).unwrap();
            let opt = p.known_optimum().unwrap().clone();
            let Some((x, y)) = opt.solution.clone() else {
                continue;
            };
            let mut c = EvalCounter::new();
            let up = p.evaluate_upper(&x, &y, &mut c).unwrap();
            let lo = p.evaluate_lower(&x, &y, &mut c).unwrap();
            assert!((up.value - opt.upper_value).abs() < 1e-9, "{} F", p.name());
            assert!((lo.value - opt.lower_value).abs() < 1e-9, "{} f", p.name());
            // Recorded points may sit exactly on constraint boundaries, so
            // allow rounding noise but nothing more.
            assert!(up.violation < 1e-12, "{} G", p.name());
            assert!(lo.violation < 1e-12, "{} g", p.name());
        }
    }

    #[test]
    fn recorded_lower_vectors_resist_a_fresh_follower_solve() {
        // A fresh lower-level solve at the recorded leader vector must not
        // beat the recorded follower value; if it does, the transcription of
        // the follower problem is wrong.
        use crate::local::solve_lower;
        use rand::SeedableRng;

        let params = crate::ea::EaParams::lower_level();
        for idx in 1..=8 {
            let p = make_tp(idx).unwrap();
            let Some((x, _)) = p.known_optimum().unwrap().solution.clone() else {
                continue;
            };
            let mut c = EvalCounter::new();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let sol = solve_lower(&p, &x, None, &params, &mut c, &mut rng).unwrap();
            let best = p.known_optimum().unwrap().lower_value;
            assert!(
                sol.violation <= 1e-6,
                "{} stays feasible (viol {:e}, value {}, y {:?})",
                p.name(),
                sol.violation,
                sol.value,
                sol.x_l
            );
            assert!(
                sol.value >= best - 1e-6,
                "{} cannot beat {best}, got {} at {:?}",
                p.name(),
                sol.value,
                sol.x_l
            );
            assert!(
                sol.value <= best + 1e-3,
                "{} finds {best}, got {} at {:?}",
                p.name(),
                sol.value,
                sol.x_l
            );
        }
    }

    #[test]
    fn catalog_dimensions_match_the_published_formulations() {
        let dims = [(2, 2), (2, 2), (2, 2), (2, 3), (2, 2), (1, 2), (2, 2), (2, 2)];
        for (i, (n, m)) in dims.iter().enumerate() {
            let p = make_tp(i + 1).unwrap();
            assert_eq!(p.upper_dim(), *n, "{}", p.name());
            assert_eq!(p.lower_dim(), *m, "{}", p.name());
        }
    }

    #[test]
    fn tp7_uses_multistart_lower_solves() {
        assert_eq!(make_tp(7).unwrap().ll_multistart(), 3);
        assert_eq!(make_tp(3).unwrap().ll_multistart(), 1);
    }

    #[test]
    fn index_out_of_range_is_rejected() {
        assert!(make_tp(0).is_err());
        assert!(make_tp(9).is_err());
    }

    #[test]
    fn tp5_lower_hessian_is_positive_definite() {
        // f's quadratic part is 0.5 y^T H y with H = [[1,3],[3,10]]; check
        // convexity numerically through second differences.
        let p = make_tp(5).unwrap();
        let mut c = EvalCounter::new();
        let x = [1.0, 2.0];
        let f = |y: &[f64], c: &mut EvalCounter| p.evaluate_lower(&x, y, c).unwrap().value;
        let h = 1e-3;
        for dir in [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]] {
            let y0 = [3.0, 3.0];
            let yp = [y0[0] + h * dir[0], y0[1] + h * dir[1]];
            let ym = [y0[0] - h * dir[0], y0[1] - h * dir[1]];
            let second = f(&yp, &mut c) - 2.0 * f(&y0, &mut c) + f(&ym, &mut c);
            assert!(second > 0.0, "direction {dir:?}");
        }
    }
}
