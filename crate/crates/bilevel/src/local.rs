//! Deterministic local optimization and the lower-level solve dispatch.
//!
//! [`local_solve`] minimizes a black-box objective under inequality
//! constraints (`<= 0`) inside a box, using an augmented Lagrangian outer
//! loop around a projected BFGS inner loop with central-difference
//! gradients. The objective and all constraints come back from a single
//! closure call, so one call equals one evaluation for counting purposes.
//!
//! [`solve_lower`] is the one entry point solvers use to optimize the lower
//! level for a fixed upper vector: convex-marked problems get (multi-start)
//! local solves, everything else a small evolutionary run.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::ea::{lower_level_ea, EaParams};
use crate::error::Result;
use crate::individual::FEASIBILITY_TOL;
use crate::problem::{BilevelProblem, EvalCounter};

/// Termination knobs for [`local_solve`].
#[derive(Debug, Clone)]
pub struct LocalOpts {
    /// A point counts as feasible when the summed constraint excess stays
    /// below this.
    pub feas_tol: f64,
    /// Projected-gradient tolerance, scaled by `1 + |value|`.
    pub stat_tol: f64,
    /// Stop an inner descent once relative improvement falls below this.
    pub improve_tol: f64,
    /// Inner-iteration budget per multiplier round; `max_evals` is the
    /// overall limit.
    pub max_iters: usize,
    /// Optional cap on closure calls.
    pub max_evals: Option<u64>,
}

impl Default for LocalOpts {
    fn default() -> Self {
        LocalOpts {
            feas_tol: 1e-6,
            stat_tol: 1e-4,
            improve_tol: 1e-6,
            max_iters: 120,
            max_evals: None,
        }
    }
}

/// Result of a [`local_solve`] call.
#[derive(Debug, Clone)]
pub struct LocalSolveReport {
    pub x: Vec<f64>,
    pub value: f64,
    /// Summed positive parts of the constraints at `x`.
    pub violation: f64,
    /// Feasible and stationary within tolerances.
    pub converged: bool,
    /// Closure calls spent.
    pub evals: u64,
}

/// Outcome of a lower-level solve for one upper vector.
#[derive(Debug, Clone)]
pub struct LowerSolution {
    pub x_l: Vec<f64>,
    pub value: f64,
    pub violation: f64,
    pub converged: bool,
}

const FD_H: f64 = 6.055454452393343e-6; // cbrt(f64 machine epsilon)

struct Probe<'a> {
    eval: &'a mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    spent: u64,
    cap: Option<u64>,
}

impl Probe<'_> {
    fn call(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        if let Some(cap) = self.cap {
            if self.spent >= cap {
                return None;
            }
        }
        self.spent += 1;
        Some((self.eval)(x))
    }
}

fn merit(value: f64, constraints: &[f64], lambda: &[f64], rho: f64) -> f64 {
    let mut l = value;
    for (g, lam) in constraints.iter().zip(lambda) {
        let shifted = (lam / rho + g).max(0.0);
        l += 0.5 * rho * shifted * shifted - lam * lam / (2.0 * rho);
    }
    l
}

fn violation_of(constraints: &[f64]) -> f64 {
    constraints.iter().map(|g| g.max(0.0)).sum()
}

fn clamp_into(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

fn merit_gradient(
    probe: &mut Probe,
    x: &[f64],
    bounds: &[(f64, f64)],
    lambda: &[f64],
    rho: f64,
) -> Option<DVector<f64>> {
    let n = x.len();
    let mut grad = DVector::zeros(n);
    let mut xp = x.to_vec();
    // The penalty part of the merit has curvature proportional to rho, so the
    // central-difference truncation error grows with rho while the rounding
    // error stays put. Shrinking the step like rho^(-1/3) rebalances the two
    // and keeps the gradient meaningful when the penalty is stiff.
    let h_base = FD_H / (rho / 10.0).max(1.0).cbrt();
    for i in 0..n {
        let h = h_base.max(h_base * x[i].abs());
        let hi = (x[i] + h).min(bounds[i].1);
        let lo = (x[i] - h).max(bounds[i].0);
        let denom = hi - lo;
        if denom <= 0.0 {
            grad[i] = 0.0;
            continue;
        }
        xp[i] = hi;
        let (fp, gp) = probe.call(&xp)?;
        xp[i] = lo;
        let (fm, gm) = probe.call(&xp)?;
        xp[i] = x[i];
        grad[i] = (merit(fp, &gp, lambda, rho) - merit(fm, &gm, lambda, rho)) / denom;
    }
    Some(grad)
}

/// Infinity norm of the projected gradient step.
fn projected_gradient_norm(x: &[f64], grad: &DVector<f64>, bounds: &[(f64, f64)]) -> f64 {
    x.iter()
        .zip(grad.iter())
        .zip(bounds)
        .map(|((xi, gi), (lo, hi))| (xi - (xi - gi).clamp(*lo, *hi)).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `eval`'s value subject to its constraint vector being `<= 0`
/// componentwise, inside `bounds`. One `eval` call is one evaluation.
pub fn local_solve(
    eval: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    bounds: &[(f64, f64)],
    opts: &LocalOpts,
) -> LocalSolveReport {
    assert_eq!(x0.len(), bounds.len(), "start point must match the box");
    let n = x0.len();
    let mut probe = Probe {
        eval,
        spent: 0,
        cap: opts.max_evals,
    };

    let mut x = x0.to_vec();
    clamp_into(&mut x, bounds);
    let first = probe.call(&x);
    let (mut fx, mut gx) = match first {
        Some(v) => v,
        None => {
            return LocalSolveReport {
                x,
                value: f64::INFINITY,
                violation: f64::INFINITY,
                converged: false,
                evals: probe.spent,
            }
        }
    };

    let m = gx.len();
    let mut lambda = vec![0.0; m];
    let mut rho = 10.0;
    let mut converged = false;
    let mut prev_viol = f64::INFINITY;
    // Unconstrained solves get retry rounds too: a round that stalls on a
    // misscaled curvature model deserves a fresh start, not a shrug.
    let max_outer = if m == 0 { 3 } else { 14 };
    // Longest step worth trying; penalty gradients can reach magnitudes the
    // backtracking range cannot scale down on its own.
    let diag = bounds
        .iter()
        .map(|(lo, hi)| (hi - lo) * (hi - lo))
        .sum::<f64>()
        .sqrt();

    // The merit's curvature depends on rho, not on the multipliers, so the
    // learned inverse Hessian stays valid across multiplier-only rounds and
    // makes their first step land near the shifted minimum at once.
    let mut hinv = DMatrix::<f64>::identity(n, n);
    'outer: for _round in 0..max_outer {
        let mut iters_left = opts.max_iters;
        let mut lx = merit(fx, &gx, &lambda, rho);
        let mut grad = match merit_gradient(&mut probe, &x, bounds, &lambda, rho) {
            Some(g) => g,
            None => break,
        };
        let mut stationary = false;
        let mut metric_refreshed = false;

        while iters_left > 0 {
            iters_left -= 1;
            let pg = projected_gradient_norm(&x, &grad, bounds);
            if pg <= opts.stat_tol * (1.0 + fx.abs()) {
                stationary = true;
                break;
            }

            // Freeze coordinates pinned at a bound whose gradient pushes
            // further outside: they contribute nothing this step, and the
            // inverse Hessian's cross terms would otherwise drag them back
            // inward and poison the direction for the free coordinates.
            let frozen: Vec<bool> = (0..n)
                .map(|i| {
                    let (lo, hi) = bounds[i];
                    (x[i] >= hi && grad[i] < 0.0) || (x[i] <= lo && grad[i] > 0.0)
                })
                .collect();
            let mut eff = grad.clone();
            for i in 0..n {
                if frozen[i] {
                    eff[i] = 0.0;
                }
            }
            let mut dir = -(&hinv * &eff);
            for i in 0..n {
                let (lo, hi) = bounds[i];
                let outward = (x[i] >= hi && dir[i] > 0.0) || (x[i] <= lo && dir[i] < 0.0);
                if frozen[i] || outward {
                    dir[i] = 0.0;
                }
            }
            if dir.dot(&eff) > -1e-14 * dir.norm() * eff.norm() {
                hinv = DMatrix::identity(n, n);
                dir = -eff.clone();
                for i in 0..n {
                    if frozen[i] {
                        dir[i] = 0.0;
                    }
                }
            }
            let dn = dir.norm();
            if dn > diag && diag > 0.0 {
                dir *= diag / dn;
            }

            // Backtracking line search on the projected step. The depth must
            // outrun penalty terms: near a constraint vertex the acceptable
            // window shrinks with every multiplier escalation.
            let mut accepted: Option<(Vec<f64>, f64, Vec<f64>, f64)> = None;
            let mut t = 1.0;
            for _ in 0..40 {
                let mut xn: Vec<f64> = x
                    .iter()
                    .zip(dir.iter())
                    .map(|(xi, di)| xi + t * di)
                    .collect();
                clamp_into(&mut xn, bounds);
                if xn == x {
                    t *= 0.5;
                    continue;
                }
                let (fnew, gnew) = match probe.call(&xn) {
                    Some(v) => v,
                    None => break 'outer,
                };
                let lnew = merit(fnew, &gnew, &lambda, rho);
                let pred: f64 = xn
                    .iter()
                    .zip(&x)
                    .zip(grad.iter())
                    .map(|((a, b), g)| (a - b) * g)
                    .sum();
                if lnew <= lx + 1e-4 * pred.min(0.0) {
                    accepted = Some((xn, fnew, gnew, lnew));
                    break;
                }
                t *= 0.5;
            }

            let (xn, fnew, gnew, lnew) = match accepted {
                Some(v) => v,
                None => {
                    // No descent left at this multiplier setting. Often that
                    // IS the constrained stationary point, so still let the
                    // projected-gradient test certify it.
                    stationary =
                        projected_gradient_norm(&x, &grad, bounds) <= opts.stat_tol * (1.0 + fx.abs());
                    break;
                }
            };
            let grad_new = match merit_gradient(&mut probe, &xn, bounds, &lambda, rho) {
                Some(g) => g,
                None => {
                    x = xn;
                    fx = fnew;
                    gx = gnew;
                    break 'outer;
                }
            };

            // BFGS inverse-Hessian update, skipped when curvature fails.
            let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
            let y = &grad_new - &grad;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let rho_bfgs = 1.0 / sy;
                let hy = &hinv * &y;
                let yhy = y.dot(&hy);
                // Sherman-Morrison form of the BFGS update.
                hinv += (sy + yhy) * rho_bfgs * rho_bfgs * (&s * s.transpose());
                let sy_outer = &s * hy.transpose();
                hinv -= rho_bfgs * (&sy_outer + sy_outer.transpose());
            }

            let improvement = lx - lnew;
            x = xn;
            fx = fnew;
            gx = gnew;
            lx = lnew;
            grad = grad_new;
            if improvement < opts.improve_tol * (1.0 + lx.abs()) {
                if projected_gradient_norm(&x, &grad, bounds) <= opts.stat_tol * (1.0 + fx.abs()) {
                    stationary = true;
                    break;
                }
                if metric_refreshed {
                    break;
                }
                // The step crawled while the gradient stayed live, so the
                // curvature model may be misscaled for this region. Restart
                // the metric once; a second crawl means the gradient itself
                // is at its resolution limit and more resets would thrash.
                metric_refreshed = true;
                hinv = DMatrix::identity(n, n);
            }
        }

        if std::env::var("LS_TRACE").is_ok() {
            eprintln!(
                "round={_round} rho={rho:.1e} viol={:.3e} stat={stationary} evals={} x={x:?}",
                violation_of(&gx),
                probe.spent
            );
        }
        if !stationary {
            // Whatever ended this round, it was not optimality; the next
            // round must not inherit the metric that got stuck.
            hinv = DMatrix::identity(n, n);
        }

        if m == 0 {
            converged = stationary;
            if converged {
                break;
            }
            continue;
        }

        for (lam, g) in lambda.iter_mut().zip(&gx) {
            *lam = (*lam + rho * g).max(0.0);
        }
        let viol = violation_of(&gx);
        if viol <= opts.feas_tol && stationary {
            converged = true;
            break;
        }
        if viol > 0.25 * prev_viol {
            if rho >= 1e10 {
                break; // penalty saturated with no feasibility progress
            }
            rho = (rho * 10.0).min(1e10);
            hinv = DMatrix::identity(n, n);
        }
        prev_viol = viol;
    }

    LocalSolveReport {
        violation: violation_of(&gx),
        value: fx,
        x,
        converged,
        evals: probe.spent,
    }
}

fn strictly_better(a: &LowerSolution, b: &LowerSolution) -> bool {
    let fa = a.violation <= FEASIBILITY_TOL;
    let fb = b.violation <= FEASIBILITY_TOL;
    match (fa, fb) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => a.value < b.value - 1e-12 * (1.0 + b.value.abs()),
        (false, false) => a.violation < b.violation,
    }
}

/// Optimizes the lower level for a fixed upper vector.
///
/// Convex-marked problems run [`local_solve`] from the warm start (when
/// given) plus random restarts up to the problem's multi-start count; the
/// warm start is tried first and keeps ties. Other problems run a small
/// evolutionary solve with the warm start injected into the population.
/// All expense lands on `counter.ll_evals`.
pub fn solve_lower<R: Rng>(
    problem: &BilevelProblem,
    x_u: &[f64],
    warm: Option<&[f64]>,
    lower_params: &EaParams,
    counter: &mut EvalCounter,
    rng: &mut R,
) -> Result<LowerSolution> {
    if !problem.ll_convex() {
        return lower_level_ea(problem, x_u, warm, lower_params, counter, rng);
    }

    let bounds = problem.lower_bounds().to_vec();
    let starts = problem.ll_multistart().max(1);
    // Per-start caps keep a hopeless lower level (infeasible for this
    // upper vector) from draining the run's evaluation budget. They scale
    // with dimension: finite-difference gradients cost 2m probes a step,
    // and degenerate constraint vertices need several multiplier rounds.
    //
    // Unconstrained followers get a much tighter stationarity demand: the
    // leader often depends linearly on the follower vector, so a follower
    // error of d shifts the upper objective by a multiple of d, and a
    // low-side shift forges a member no genuine optimum can displace.
    // Certifying d near 1e-5 keeps that shift harmless. Constrained
    // followers cannot afford the same demand: at an optimum pressed
    // against a constraint the finite-difference gradient straddles the
    // penalty kink and never reads below roughly rho * h, while the
    // active constraint itself pins the solution instead.
    let stat_tol = if problem.lower_constraint_fns().is_empty() {
        1e-6
    } else {
        LocalOpts::default().stat_tol
    };
    let opts = LocalOpts {
        stat_tol,
        max_iters: 60,
        max_evals: Some(600 * bounds.len().max(1) as u64),
        ..LocalOpts::default()
    };
    let mut best: Option<LowerSolution> = None;
    for attempt in 0..starts {
        let x0: Vec<f64> = match (attempt, warm) {
            (0, Some(w)) => w.to_vec(),
            _ => bounds
                .iter()
                .map(|(lo, hi)| rng.gen_range(*lo..=*hi))
                .collect(),
        };
        let mut eval = |y: &[f64]| {
            let e = problem
                .evaluate_lower(x_u, y, counter)
                .expect("lower dimensions are fixed by the problem");
            (e.value, e.constraints)
        };
        let report = local_solve(&mut eval, &x0, &bounds, &opts);
        let candidate = LowerSolution {
            x_l: report.x,
            value: report.value,
            violation: report.violation,
            converged: report.converged,
        };
        match &best {
            Some(b) if !strictly_better(&candidate, b) => {}
            _ => best = Some(candidate),
        }
    }
    Ok(best.expect("at least one start attempted"))
}
