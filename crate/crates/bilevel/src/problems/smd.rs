//! Two scalable bilevel problems with difficult optimal-value mappings.
//!
//! Variables split into four blocks: `x_u = (a, b)` with `|a| = p`,
//! `|b| = r`, and `x_l = (c, d)` with `|d| = r`; `|c|` is `q` for the first
//! problem and `q + s` for the second. Objectives decompose as
//! `F = F1(a) + F2(c) + F3(b, d)` and `f = f1(a) + f2(c) + f3(b, d)`.

use crate::error::{Error, Result};
use crate::problem::{BilevelProblem, KnownOptimum};

/// Block sizes for the scalable problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmdDims {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub s: usize,
}

impl SmdDims {
    pub fn new(p: usize, q: usize, r: usize, s: usize) -> Result<Self> {
        if p < 1 || r < 1 {
            return Err(Error::InvalidDims(format!(
                "need p >= 1 and r >= 1, got p={p}, r={r}"
            )));
        }
        Ok(Self { p, q, r, s })
    }

    /// Upper-level dimension `n = p + r`.
    pub fn upper_dim(&self) -> usize {
        self.p + self.r
    }

    /// Lower-level dimension `m = q + s + r`.
    pub fn lower_dim(&self) -> usize {
        self.q + self.s + self.r
    }
}

/// Five-variable setting of [`make_smd13`]: p=1, q=2, r=1.
pub fn smd13_default_dims() -> SmdDims {
    SmdDims { p: 1, q: 2, r: 1, s: 0 }
}

/// Five-variable setting of [`make_smd14`]: p=1, q=0, r=1, s=2.
pub fn smd14_default_dims() -> SmdDims {
    SmdDims { p: 1, q: 0, r: 1, s: 2 }
}

/// Numeric lower bound standing in for the open interval end `d > 0`.
const D_MIN: f64 = 1e-6;

fn rosenbrock_like(a: &[f64]) -> f64 {
    let mut v = (a[0] - 1.0).powi(2);
    for i in 0..a.len().saturating_sub(1) {
        v += (a[i] - 1.0).powi(2) + (a[i + 1] - a[i] * a[i]).powi(2);
    }
    v
}

fn nested_square_sum(c: &[f64]) -> f64 {
    // sum_{i=1..k} sum_{j=1..i} c_j^2 weights c_j^2 by (k - j + 1).
    let k = c.len();
    c.iter()
        .enumerate()
        .map(|(j, cj)| (k - j) as f64 * cj * cj)
        .sum()
}

/// Problem with a smooth single-valued reaction mapping and a nonsmooth
/// optimal-value function `phi(x_u) = sum_i (|a_i| + 2|sin a_i|)`.
pub fn make_smd13(dims: SmdDims) -> Result<BilevelProblem> {
    if dims.s != 0 {
        return Err(Error::InvalidDims(format!(
            "this problem has no s block, got s={}",
            dims.s
        )));
    }
    let SmdDims { p, q, r, .. } = dims;

    let mut upper_bounds = vec![(-5.0, 10.0); p];
    upper_bounds.extend(vec![(-5.0, std::f64::consts::E); r]);
    let mut lower_bounds = vec![(-5.0, 10.0); q];
    lower_bounds.extend(vec![(D_MIN, 10.0); r]);

    let log_term = move |b: &[f64], d: &[f64]| -> f64 {
        (0..r)
            .map(|i| (b[i] - d[i].max(D_MIN).ln()).powi(2))
            .sum()
    };

    let solution = {
        let mut xu = vec![1.0; p];
        xu.extend(vec![0.0; r]);
        let mut xl = vec![0.0; q];
        xl.extend(vec![1.0; r]);
        (xu, xl)
    };
    let f_star = p as f64 * (1.0 + 2.0 * 1.0_f64.sin());

    Ok(BilevelProblem::builder(format!("smd13_p{p}q{q}r{r}"))
        .upper_bounds(upper_bounds)
        .lower_bounds(lower_bounds)
        .upper_objective(move |x, y| {
            let (a, b) = x.split_at(p);
            let (c, d) = y.split_at(q);
            let f1 = rosenbrock_like(a);
            let f2 = -nested_square_sum(c);
            let f3 = nested_square_sum(b) - log_term(b, d);
            f1 + f2 + f3
        })
        .lower_objective(move |x, y| {
            let (a, b) = x.split_at(p);
            let (c, d) = y.split_at(q);
            let f1: f64 = a.iter().map(|ai| ai.abs() + 2.0 * ai.sin().abs()).sum();
            let f2 = nested_square_sum(c);
            let f3 = log_term(b, d);
            f1 + f2 + f3
        })
        .ll_convex(false)
        .known_optimum(KnownOptimum {
            upper_value: 0.0,
            lower_value: f_star,
            solution: Some(solution),
        })
        .build())
}

/// Problem with a set-valued reaction mapping and a piecewise-constant
/// optimal-value function `phi(x_u) = sum_i floor(a_i)`.
pub fn make_smd14(dims: SmdDims) -> Result<BilevelProblem> {
    let SmdDims { p, q, r, s } = dims;

    let mut upper_bounds = vec![(-5.0, 10.0); p];
    upper_bounds.extend(vec![(-5.0, 10.0); r]);
    let lower_bounds = vec![(-5.0, 10.0); q + s + r];

    let solution = {
        let mut xu = vec![1.0; p];
        xu.extend(vec![0.0; r]);
        (xu, vec![0.0; q + s + r])
    };

    Ok(BilevelProblem::builder(format!("smd14_p{p}q{q}r{r}s{s}"))
        .upper_bounds(upper_bounds)
        .lower_bounds(lower_bounds)
        .upper_objective(move |x, y| {
            let (a, b) = x.split_at(p);
            let (c, d) = y.split_at(q + s);
            let f1 = rosenbrock_like(a);
            let f2 = -(0..q).map(|j| c[j].abs().powi(j as i32 + 2)).sum::<f64>()
                + (q..q + s).map(|j| c[j] * c[j]).sum::<f64>();
            let f3 = (0..r).map(|i| (i + 1) as f64 * b[i] * b[i]).sum::<f64>()
                + d.iter().map(|di| di.abs()).sum::<f64>();
            f1 + f2 + f3
        })
        .lower_objective(move |x, y| {
            let (a, b) = x.split_at(p);
            let (c, d) = y.split_at(q + s);
            let f1: f64 = a.iter().map(|ai| ai.floor()).sum();
            let mut f2: f64 = (0..q).map(|j| c[j].abs().powi(j as i32 + 2)).sum();
            let mut j = q;
            while j + 1 <= q + s.saturating_sub(1) {
                f2 += (c[j + 1] - c[j]).powi(2);
                j += 2;
            }
            let f3: f64 = (0..r).map(|i| (b[i] * b[i] - d[i] * d[i]).abs()).sum();
            f1 + f2 + f3
        })
        .ll_convex(false)
        .known_optimum(KnownOptimum {
            upper_value: 0.0,
            lower_value: p as f64,
            solution: Some(solution),
        })
        .build())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::EvalCounter;

    #[test]
    fn five_variable_settings_have_two_upper_three_lower() {
        let p13 = make_smd13(smd13_default_dims()).unwrap();
        assert_eq!((p13.upper_dim(), p13.lower_dim()), (2, 3));
        let p14 = make_smd14(smd14_default_dims()).unwrap();
        assert_eq!((p14.upper_dim(), p14.lower_dim()), (2, 3));
    }

    #[test]
    fn smd13_solution_values() {
        let p = make_smd13(smd13_default_dims()).unwrap();
        let opt = p.known_optimum().unwrap().clone();
        let (xu, xl) = opt.solution.clone().unwrap();
        let mut counter = EvalCounter::new();
        let up = p.evaluate_upper(&xu, &xl, &mut counter).unwrap();
        let lo = p.evaluate_lower(&xu, &xl, &mut counter).unwrap();
        assert!(up.value.abs() < 1e-9);
        let expected = 1.0 + 2.0 * 1.0_f64.sin();
        assert!((lo.value - expected).abs() < 1e-9);
        assert!((lo.value - opt.lower_value).abs() < 1e-9);
    }

    #[test]
    fn smd14_solution_values() {
        let p = make_smd14(smd14_default_dims()).unwrap();
        let opt = p.known_optimum().unwrap().clone();
        let (xu, xl) = opt.solution.clone().unwrap();
        let mut counter = EvalCounter::new();
        let up = p.evaluate_upper(&xu, &xl, &mut counter).unwrap();
        let lo = p.evaluate_lower(&xu, &xl, &mut counter).unwrap();
        assert!(up.value.abs() < 1e-9);
        assert!((lo.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn smd13_lower_level_prefers_log_match() {
        // At fixed x_u the d block minimizes (b - ln d)^2, so d = e^b.
        let p = make_smd13(smd13_default_dims()).unwrap();
        let mut counter = EvalCounter::new();
        let xu = [1.0, 0.5];
        let best = [0.0, 0.0, 0.5_f64.exp()];
        let f_best = p.evaluate_lower(&xu, &best, &mut counter).unwrap().value;
        for d in [0.5, 1.0, 2.0, 5.0] {
            let f = p
                .evaluate_lower(&xu, &[0.0, 0.0, d], &mut counter)
                .unwrap()
                .value;
            assert!(f >= f_best - 1e-12);
        }
    }

    #[test]
    fn smd14_reaction_set_is_a_diagonal_continuum() {
        let p = make_smd14(smd14_default_dims()).unwrap();
        let mut counter = EvalCounter::new();
        let xu = [1.0, 0.0];
        let f0 = p.evaluate_lower(&xu, &[0.0, 0.0, 0.0], &mut counter).unwrap().value;
        for t in [-2.0, 0.7, 3.0] {
            let f = p.evaluate_lower(&xu, &[t, t, 0.0], &mut counter).unwrap().value;
            assert!((f - f0).abs() < 1e-12);
        }
        // The upper level distinguishes members of the reaction set.
        let up0 = p.evaluate_upper(&xu, &[0.0, 0.0, 0.0], &mut counter).unwrap().value;
        let up1 = p.evaluate_upper(&xu, &[2.0, 2.0, 0.0], &mut counter).unwrap().value;
        assert!(up1 > up0);
    }

    #[test]
    fn smd13_rejects_an_s_block() {
        assert!(make_smd13(SmdDims { p: 1, q: 2, r: 1, s: 1 }).is_err());
        assert!(SmdDims::new(0, 1, 1, 0).is_err());
    }

    #[test]
    fn ten_variable_settings_scale() {
        let p13 = make_smd13(SmdDims::new(3, 3, 2, 0).unwrap()).unwrap();
        assert_eq!((p13.upper_dim(), p13.lower_dim()), (5, 5));
        let p14 = make_smd14(SmdDims::new(3, 1, 2, 2).unwrap()).unwrap();
        assert_eq!((p14.upper_dim(), p14.lower_dim()), (5, 5));
        // Substitution at the tabulated solutions still gives F = 0.
        for p in [p13, p14] {
            let opt = p.known_optimum().unwrap().clone();
            let (xu, xl) = opt.solution.clone().unwrap();
            let mut counter = EvalCounter::new();
            let up = p.evaluate_upper(&xu, &xl, &mut counter).unwrap();
            assert!(up.value.abs() < 1e-9, "{}", p.name());
            let lo = p.evaluate_lower(&xu, &xl, &mut counter).unwrap();
            assert!((lo.value - opt.lower_value).abs() < 1e-9, "{}", p.name());
        }
    }
}
