//! Single-level reductions of the bilevel problem around a point.
//!
//! Given an approximation of the lower level, the bilevel program collapses
//! to an ordinary constrained problem. Two reductions are supported:
//!
//! * reaction form, over `x_u` alone: minimize `F(x_u, psi(x_u))` subject
//!   to `G(x_u, psi(x_u)) <= 0`;
//! * value form, over `(x_u, x_l)` jointly: minimize `F(x_u, x_l)` subject
//!   to `f(x_u, x_l) <= phi(x_u)` plus both constraint sets.
//!
//! Each reduction comes in an exact flavor, probing the real functions and
//! paying evaluations, and a surrogate flavor running entirely on models
//! fitted from the archive, which costs nothing. A candidate from either
//! flavor is only trusted after [`verify_candidate`] reruns the lower level
//! for real.

use rand::Rng;

use crate::archive::Archive;
use crate::ea::EaParams;
use crate::error::{Error, Result};
use crate::individual::{Individual, Tag};
use crate::local::{local_solve, LocalOpts, LocalSolveReport};
use crate::metamodel::{
    fit_linear, fit_phi, fit_psi, fit_quadratic, quadratic_basis_size, LinearModel, PhiModel,
    PsiModel, QuadraticModel,
};
use crate::problem::{BilevelProblem, EvalCounter};
use crate::run::make_individual;

/// Neighbors used for mapping fits over `x_u`: twice the coefficient count,
/// clipped to the archive.
pub fn mapping_neighborhood(upper_dim: usize, archive_len: usize, requested: Option<usize>) -> usize {
    requested
        .unwrap_or(2 * quadratic_basis_size(upper_dim))
        .min(archive_len)
}

/// Neighbors used for joint-space surrogate fits, sized from the largest
/// basis involved.
pub fn joint_neighborhood(joint_dim: usize, archive_len: usize, requested: Option<usize>) -> usize {
    requested
        .unwrap_or(2 * quadratic_basis_size(joint_dim))
        .min(archive_len)
}

fn neighbor_entries<'a>(archive: &'a Archive, x_u: &[f64], k: usize) -> Vec<&'a Individual> {
    archive
        .nearest(x_u, k)
        .into_iter()
        .map(|i| &archive.entries()[i])
        .collect()
}

/// Padded axis-aligned bounding box of a set of points, clipped to `outer`.
/// The padding is a quarter of each side's width, with a tiny floor so a
/// fully collapsed dimension still leaves room to move.
fn padded_box<'a>(
    points: impl Iterator<Item = &'a [f64]>,
    anchor: &[f64],
    outer: &[(f64, f64)],
) -> Vec<(f64, f64)> {
    let mut lo = anchor.to_vec();
    let mut hi = anchor.to_vec();
    for p in points {
        for (i, v) in p.iter().enumerate() {
            lo[i] = lo[i].min(*v);
            hi[i] = hi[i].max(*v);
        }
    }
    lo.iter()
        .zip(&hi)
        .zip(outer)
        .map(|((l, h), (ol, oh))| {
            let pad = 0.25 * (h - l) + 1e-8 * (oh - ol);
            ((l - pad).max(*ol), (h + pad).min(*oh))
        })
        .collect()
}

/// Trust box over `x_u` for searches guided by mapping fits: the padded span
/// of the `k` archive entries the fit was trained on. The models only
/// describe that neighborhood; chasing their extrapolation across the whole
/// box spends verification solves on claims the data never supported.
pub fn mapping_trust_box(
    archive: &Archive,
    x_u: &[f64],
    k: usize,
    upper_bounds: &[(f64, f64)],
) -> Vec<(f64, f64)> {
    let entries = neighbor_entries(archive, x_u, k);
    padded_box(
        entries.iter().map(|e| e.x_u.as_slice()),
        x_u,
        upper_bounds,
    )
}

/// Trust box over the joint `(x_u, x_l)` space, spanned the same way from
/// the fitting neighborhood.
pub fn joint_trust_box(
    archive: &Archive,
    x_u: &[f64],
    x_l: &[f64],
    k: usize,
    upper_bounds: &[(f64, f64)],
    lower_bounds: &[(f64, f64)],
) -> Vec<(f64, f64)> {
    let entries = neighbor_entries(archive, x_u, k);
    let mut bbox = padded_box(
        entries.iter().map(|e| e.x_u.as_slice()),
        x_u,
        upper_bounds,
    );
    bbox.extend(padded_box(
        entries.iter().map(|e| e.x_l.as_slice()),
        x_l,
        lower_bounds,
    ));
    bbox
}

/// Fits the reaction mapping and the optimal-value function from the `k`
/// archive entries nearest to `x_u`.
pub fn fit_mappings_near(
    archive: &Archive,
    x_u: &[f64],
    k: usize,
) -> Result<(PsiModel, PhiModel)> {
    let entries = neighbor_entries(archive, x_u, k);
    let xus: Vec<&[f64]> = entries.iter().map(|e| e.x_u.as_slice()).collect();
    let xls: Vec<&[f64]> = entries.iter().map(|e| e.x_l.as_slice()).collect();
    let fls: Vec<f64> = entries.iter().map(|e| e.f_lower).collect();
    let psi = fit_psi(&xus, &xls)?;
    let phi = fit_phi(&xus, &fls)?;
    Ok((psi, phi))
}

/// Models of the upper objective and constraints as functions of `x_u`
/// alone, fitted through archived (verified) pairs.
#[derive(Debug, Clone)]
pub struct UpperSurrogates {
    pub objective: QuadraticModel,
    pub constraints: Vec<LinearModel>,
}

pub fn fit_upper_near(archive: &Archive, x_u: &[f64], k: usize) -> Result<UpperSurrogates> {
    let entries = neighbor_entries(archive, x_u, k);
    let xus: Vec<&[f64]> = entries.iter().map(|e| e.x_u.as_slice()).collect();
    let fs: Vec<f64> = entries.iter().map(|e| e.f_upper).collect();
    let objective = fit_quadratic(&xus, &fs)?;
    let n_cons = entries.first().map(|e| e.ul_constraints.len()).unwrap_or(0);
    let mut constraints = Vec::with_capacity(n_cons);
    for j in 0..n_cons {
        let cs: Vec<f64> = entries.iter().map(|e| e.ul_constraints[j]).collect();
        constraints.push(fit_linear(&xus, &cs)?);
    }
    Ok(UpperSurrogates {
        objective,
        constraints,
    })
}

/// Models of both objectives and both constraint sets over the joint
/// `(x_u, x_l)` space, fitted through archived pairs.
#[derive(Debug, Clone)]
pub struct JointSurrogates {
    pub upper_objective: QuadraticModel,
    pub lower_objective: QuadraticModel,
    pub upper_constraints: Vec<LinearModel>,
    pub lower_constraints: Vec<LinearModel>,
}

pub fn fit_joint_near(archive: &Archive, x_u: &[f64], k: usize) -> Result<JointSurrogates> {
    let entries = neighbor_entries(archive, x_u, k);
    if entries.is_empty() {
        return Err(Error::InsufficientData {
            model: "joint surrogates",
            dim: 0,
            needed: 1,
            got: 0,
        });
    }
    let joints: Vec<Vec<f64>> = entries
        .iter()
        .map(|e| {
            let mut v = e.x_u.clone();
            v.extend_from_slice(&e.x_l);
            v
        })
        .collect();
    let fu: Vec<f64> = entries.iter().map(|e| e.f_upper).collect();
    let fl: Vec<f64> = entries.iter().map(|e| e.f_lower).collect();
    let upper_objective = fit_quadratic(&joints, &fu)?;
    let lower_objective = fit_quadratic(&joints, &fl)?;
    let fit_cons = |count: usize, pick: fn(&Individual, usize) -> f64| -> Result<Vec<LinearModel>> {
        (0..count)
            .map(|j| {
                let cs: Vec<f64> = entries.iter().map(|e| pick(e, j)).collect();
                fit_linear(&joints, &cs)
            })
            .collect()
    };
    let upper_constraints = fit_cons(entries[0].ul_constraints.len(), |e, j| e.ul_constraints[j])?;
    let lower_constraints = fit_cons(entries[0].ll_constraints.len(), |e, j| e.ll_constraints[j])?;
    Ok(JointSurrogates {
        upper_objective,
        lower_objective,
        upper_constraints,
        lower_constraints,
    })
}

/// Reaction-form reduction on the true functions: every probe evaluates the
/// upper level once at the mapping's prediction. `bounds` is the search box
/// over `x_u`, normally a trust box around the fitting neighborhood.
pub fn psi_search_exact(
    problem: &BilevelProblem,
    psi: &PsiModel,
    x0_u: &[f64],
    bounds: &[(f64, f64)],
    counter: &mut EvalCounter,
    opts: &LocalOpts,
) -> LocalSolveReport {
    let mut eval = |x_u: &[f64]| {
        let x_l = psi.predict(x_u);
        let e = problem
            .evaluate_upper(x_u, &x_l, counter)
            .expect("upper dimensions are fixed by the problem");
        (e.value, e.constraints)
    };
    local_solve(&mut eval, x0_u, bounds, opts)
}

/// Value-form reduction on the true functions over the joint space: every
/// probe evaluates both levels once. `bounds` covers `(x_u, x_l)`
/// concatenated, normally a trust box around the fitting neighborhood.
pub fn phi_search_exact(
    problem: &BilevelProblem,
    phi: &PhiModel,
    x0_u: &[f64],
    x0_l: &[f64],
    bounds: &[(f64, f64)],
    counter: &mut EvalCounter,
    opts: &LocalOpts,
) -> LocalSolveReport {
    let n = problem.upper_dim();
    let mut x0 = x0_u.to_vec();
    x0.extend_from_slice(x0_l);
    let mut eval = |joint: &[f64]| {
        let (x_u, x_l) = joint.split_at(n);
        let up = problem
            .evaluate_upper(x_u, x_l, counter)
            .expect("upper dimensions are fixed by the problem");
        let low = problem
            .evaluate_lower(x_u, x_l, counter)
            .expect("lower dimensions are fixed by the problem");
        let mut cons = up.constraints;
        cons.extend_from_slice(&low.constraints);
        cons.push(low.value - phi.predict(x_u));
        (up.value, cons)
    };
    local_solve(&mut eval, &x0, bounds, opts)
}

/// Reaction-form reduction run entirely on fitted models; costs nothing.
pub fn psi_search_surrogate(
    surrogates: &UpperSurrogates,
    upper_bounds: &[(f64, f64)],
    x0_u: &[f64],
    opts: &LocalOpts,
) -> LocalSolveReport {
    let mut eval = |x_u: &[f64]| {
        let cons = surrogates
            .constraints
            .iter()
            .map(|c| c.predict(x_u))
            .collect();
        (surrogates.objective.predict(x_u), cons)
    };
    local_solve(&mut eval, x0_u, upper_bounds, opts)
}

/// Value-form reduction run entirely on fitted models; costs nothing.
/// `relax` loosens the optimal-value bound. `bounds` covers `(x_u, x_l)`
/// concatenated.
pub fn phi_search_surrogate(
    joint: &JointSurrogates,
    phi: &PhiModel,
    n_upper: usize,
    bounds: &[(f64, f64)],
    x0_u: &[f64],
    x0_l: &[f64],
    relax: f64,
    opts: &LocalOpts,
) -> LocalSolveReport {
    let n = n_upper;
    let mut x0 = x0_u.to_vec();
    x0.extend_from_slice(x0_l);
    let mut eval = |joint_x: &[f64]| {
        let x_u = &joint_x[..n];
        let mut cons: Vec<f64> = joint
            .upper_constraints
            .iter()
            .chain(&joint.lower_constraints)
            .map(|c| c.predict(joint_x))
            .collect();
        cons.push(joint.lower_objective.predict(joint_x) - phi.predict(x_u) - relax);
        (joint.upper_objective.predict(joint_x), cons)
    };
    local_solve(&mut eval, &x0, bounds, opts)
}

/// Lower-vector assignment for a fixed upper vector on fitted models only:
/// minimize the modeled upper objective over `x_l` subject to the modeled
/// lower constraints and the optimal-value bound (relaxed by `relax`).
pub fn phi_assign_surrogate(
    joint: &JointSurrogates,
    phi_value: f64,
    x_u: &[f64],
    lower_bounds: &[(f64, f64)],
    x0_l: &[f64],
    relax: f64,
    opts: &LocalOpts,
) -> LocalSolveReport {
    let mut eval = |x_l: &[f64]| {
        let mut joint_x = x_u.to_vec();
        joint_x.extend_from_slice(x_l);
        let mut cons: Vec<f64> = joint
            .lower_constraints
            .iter()
            .map(|c| c.predict(&joint_x))
            .collect();
        cons.push(joint.lower_objective.predict(&joint_x) - phi_value - relax);
        (joint.upper_objective.predict(&joint_x), cons)
    };
    local_solve(&mut eval, x0_l, lower_bounds, opts)
}

/// Runs a real lower-level solve at `x_u` and returns the fully evaluated
/// member. `warm` seeds the solve; pass `None` to force an independent solve
/// from a random start. Only a successful solve earns the optimized tag; a
/// failed one comes back as a prediction so it can neither be archived nor
/// anchor any decision that requires a vouched lower vector.
pub fn verify_candidate<R: Rng>(
    problem: &BilevelProblem,
    x_u: &[f64],
    warm: Option<&[f64]>,
    lower_params: &EaParams,
    counter: &mut EvalCounter,
    rng: &mut R,
) -> Result<Individual> {
    let sol = crate::local::solve_lower(problem, x_u, warm, lower_params, counter, rng)?;
    let tag = if sol.converged { Tag::Optimized } else { Tag::Predicted };
    make_individual(problem, x_u.to_vec(), sol.x_l, tag, counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::make_tp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_archive(problem: &BilevelProblem, n: usize) -> (Archive, EvalCounter) {
        // Verified pairs on a grid: reaction of tp1 is the projection of
        // x_u onto the lower box.
        let mut archive = Archive::new();
        let mut counter = EvalCounter::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..n {
            let x_u = crate::ea::random_point(problem.upper_bounds(), &mut rng);
            let member = verify_candidate(
                problem,
                &x_u,
                None,
                &EaParams::lower_level(),
                &mut counter,
                &mut rng,
            )
            .unwrap();
            archive.insert(member);
        }
        (archive, counter)
    }

    #[test]
    fn mapping_fits_recover_a_smooth_reaction_locally() {
        let p = make_tp(1).unwrap();
        let (archive, _) = seeded_archive(&p, 40);
        let k = mapping_neighborhood(p.upper_dim(), archive.len(), None);
        assert_eq!(k, 12);
        let (psi, phi) = fit_mappings_near(&archive, &[5.0, 5.0], k).unwrap();
        assert_eq!(psi.components.len(), 2);
        assert!(phi.mse().is_finite());
    }

    #[test]
    fn surrogate_searches_spend_no_evaluations() {
        let p = make_tp(1).unwrap();
        let (archive, _) = seeded_archive(&p, 50);
        let k = joint_neighborhood(p.upper_dim() + p.lower_dim(), archive.len(), None);
        let joint = fit_joint_near(&archive, &[5.0, 5.0], k).unwrap();
        let upper = fit_upper_near(&archive, &[5.0, 5.0], 12).unwrap();
        let (_, phi) = fit_mappings_near(&archive, &[5.0, 5.0], 12).unwrap();
        // No counter exists to pass: the signatures alone enforce zero cost.
        let mut joint_bounds = p.upper_bounds().to_vec();
        joint_bounds.extend_from_slice(p.lower_bounds());
        let r1 = psi_search_surrogate(&upper, p.upper_bounds(), &[5.0, 5.0], &LocalOpts::default());
        let r2 = phi_search_surrogate(
            &joint,
            &phi,
            p.upper_dim(),
            &joint_bounds,
            &[5.0, 5.0],
            &[5.0, 5.0],
            0.0,
            &LocalOpts::default(),
        );
        assert!(r1.value.is_finite());
        assert!(r2.value.is_finite());
    }

    #[test]
    fn exact_reaction_search_counts_upper_probes_only() {
        let p = make_tp(1).unwrap();
        let (archive, _) = seeded_archive(&p, 40);
        let (psi, _) = fit_mappings_near(&archive, &[10.0, 10.0], 12).unwrap();
        let mut counter = EvalCounter::new();
        let tb = mapping_trust_box(&archive, &[10.0, 10.0], 12, p.upper_bounds());
        let r = psi_search_exact(&p, &psi, &[10.0, 10.0], &tb, &mut counter, &LocalOpts::default());
        assert_eq!(counter.ul_evals, r.evals);
        assert_eq!(counter.ll_evals, 0);
    }

    #[test]
    fn exact_value_search_counts_both_levels_per_probe() {
        let p = make_tp(1).unwrap();
        let (archive, _) = seeded_archive(&p, 40);
        let (_, phi) = fit_mappings_near(&archive, &[10.0, 10.0], 12).unwrap();
        let mut counter = EvalCounter::new();
        let tb = joint_trust_box(
            &archive,
            &[10.0, 10.0],
            &[5.0, 5.0],
            12,
            p.upper_bounds(),
            p.lower_bounds(),
        );
        let r = phi_search_exact(
            &p,
            &phi,
            &[10.0, 10.0],
            &[5.0, 5.0],
            &tb,
            &mut counter,
            &LocalOpts::default(),
        );
        assert_eq!(counter.ul_evals, r.evals);
        assert_eq!(counter.ll_evals, r.evals);
    }

    #[test]
    fn trust_boxes_cover_the_anchor_and_stay_inside_the_problem_box() {
        let p = make_tp(1).unwrap();
        let (archive, _) = seeded_archive(&p, 30);
        let anchor = [25.0, 7.0];
        let tb = mapping_trust_box(&archive, &anchor, 12, p.upper_bounds());
        assert_eq!(tb.len(), 2);
        for (i, (lo, hi)) in tb.iter().enumerate() {
            assert!(lo <= hi);
            assert!(*lo >= p.upper_bounds()[i].0 && *hi <= p.upper_bounds()[i].1);
            assert!(
                *lo <= anchor[i] && anchor[i] <= *hi,
                "anchor escaped the trust box"
            );
        }
        let jb = joint_trust_box(&archive, &anchor, &[5.0, 5.0], 12, p.upper_bounds(), p.lower_bounds());
        assert_eq!(jb.len(), 4);
    }

    #[test]
    fn verification_produces_an_archivable_member() {
        let p = make_tp(1).unwrap();
        let mut counter = EvalCounter::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = verify_candidate(
            &p,
            &[20.0, 5.0],
            None,
            &EaParams::lower_level(),
            &mut counter,
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.tag, Tag::Optimized);
        assert!((m.x_l[0] - 10.0).abs() < 1e-2);
        let mut archive = Archive::new();
        archive.insert(m);
    }
}
