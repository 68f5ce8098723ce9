//! Shared run plumbing: solver configuration, per-generation traces, and
//! the record returned by every solver entry point.

use std::cmp::Ordering;

use rand::Rng;

use crate::ea::{
    distinct_indices, pcx_crossover, polynomial_mutation, tournament_select, EaParams,
};
use crate::error::Result;
use crate::individual::{best_index, compare_deb, Individual, Level, Tag, FEASIBILITY_TOL};
use crate::problem::{BilevelProblem, EvalCounter, KnownOptimum};

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Best member matched the reference optimum at both levels.
    Accuracy,
    /// Population variance collapsed below the configured fraction of its
    /// initial value.
    Variance,
    /// Evaluation or generation budget exhausted.
    Budget,
}

/// Which lower-level approximation a step used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mapping {
    /// Reaction mapping `x_u -> x_l*`.
    Psi,
    /// Optimal-value function `x_u -> f*`.
    Phi,
}

/// One generation of a run, kept for analysis and plotting.
#[derive(Debug, Clone)]
pub struct GenTrace {
    pub gen: usize,
    pub best_upper: f64,
    pub best_lower: f64,
    /// Members whose lower-level vector came from a real solve.
    pub optimized_members: usize,
    /// Training errors of the two approximations, when fitted this
    /// generation.
    pub mse_psi: Option<f64>,
    pub mse_phi: Option<f64>,
    pub chosen: Option<Mapping>,
    /// Verified prediction errors from the periodic local search.
    pub pred_err_psi: Option<f64>,
    pub pred_err_phi: Option<f64>,
}

impl GenTrace {
    pub fn new(gen: usize, best_upper: f64, best_lower: f64, optimized_members: usize) -> Self {
        GenTrace {
            gen,
            best_upper,
            best_lower,
            optimized_members,
            mse_psi: None,
            mse_phi: None,
            chosen: None,
            pred_err_psi: None,
            pred_err_phi: None,
        }
    }
}

/// Outcome of one solver run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub problem: String,
    pub algorithm: String,
    pub seed: u64,
    pub best: Individual,
    pub counter: EvalCounter,
    pub terminated_by: TerminationReason,
    pub generations: usize,
    /// Whether the final best matched the reference optimum; `None` when
    /// the problem ships no reference.
    pub success: Option<bool>,
    /// How often the adaptive offspring update picked each approximation.
    pub psi_decisions: u64,
    pub phi_decisions: u64,
    pub trace: Vec<GenTrace>,
}

/// Knobs shared by all solvers in this crate.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub upper: EaParams,
    pub lower: EaParams,
    /// Run the approximation-guided local search every this many
    /// generations.
    pub local_search_every: usize,
    /// Neighbors used to fit approximations; `None` sizes the neighborhood
    /// from the model's coefficient count.
    pub neighborhood: Option<usize>,
    /// Absolute tolerance against the reference optimum, applied to both
    /// levels.
    pub accuracy_tol: f64,
    /// Stop once this many lower-level evaluations were spent.
    pub ll_budget: u64,
    /// Hard cap on upper-level generations.
    pub max_gens: usize,
    /// Extra random pair draws allowed per initial member before the
    /// feasibility subproblem takes over. Draws cost one evaluation at each
    /// level and no solves.
    pub init_retries: usize,
}

impl RunConfig {
    /// Configuration for the fully nested solver and its fixed-mapping
    /// variants.
    pub fn nested() -> Self {
        RunConfig {
            upper: EaParams::nested_upper(),
            lower: EaParams::lower_level(),
            local_search_every: 5,
            neighborhood: None,
            accuracy_tol: 1e-2,
            ll_budget: 1_000_000,
            max_gens: 2_000,
            init_retries: 40,
        }
    }

    /// Configuration for the adaptive solver.
    pub fn adaptive() -> Self {
        RunConfig {
            upper: EaParams::adaptive_upper(),
            ..RunConfig::nested()
        }
    }
}

/// Evaluates both levels of a candidate pair and assembles a population
/// member. Costs exactly one upper and one lower evaluation.
pub(crate) fn make_individual(
    problem: &BilevelProblem,
    x_u: Vec<f64>,
    x_l: Vec<f64>,
    tag: Tag,
    counter: &mut EvalCounter,
) -> Result<Individual> {
    let up = problem.evaluate_upper(&x_u, &x_l, counter)?;
    let low = problem.evaluate_lower(&x_u, &x_l, counter)?;
    Ok(Individual {
        x_u,
        x_l,
        f_upper: up.value,
        f_lower: low.value,
        ul_violation: up.violation,
        ll_violation: low.violation,
        ul_constraints: up.constraints,
        ll_constraints: low.constraints,
        tag,
    })
}

/// True when a member sits within `tol` of the reference optimum at both
/// levels and is feasible for the pair.
pub(crate) fn meets_accuracy(ind: &Individual, reference: &KnownOptimum, tol: f64) -> bool {
    ind.is_feasible(Level::Upper, FEASIBILITY_TOL)
        && (ind.f_upper - reference.upper_value).abs() <= tol
        && (ind.f_lower - reference.lower_value).abs() <= tol
}

/// Success verdict for a finished run: `None` without a reference.
pub(crate) fn judge(
    best: &Individual,
    reference: Option<&KnownOptimum>,
    tol: f64,
) -> Option<bool> {
    reference.map(|r| meets_accuracy(best, r, tol))
}

/// Snapshot of the population for the trace.
pub(crate) fn trace_entry(gen: usize, pop: &[Individual]) -> GenTrace {
    let b = best_index(pop, Level::Upper);
    let optimized = pop.iter().filter(|m| m.tag == Tag::Optimized).count();
    GenTrace::new(gen, pop[b].f_upper, pop[b].f_lower, optimized)
}

/// Euclidean distance between a prediction and the verified vector.
pub(crate) fn prediction_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One generation of upper-level variation: a `2*mu -> mu` tournament, then
/// `lambda` children from parent-centric crossover plus polynomial
/// mutation. Returns each child with the population index of its index
/// parent.
///
/// The crossover works on exactly three parents: the tournament winners,
/// topped up with random distinct members when `mu < 3`. The index parent
/// is the best of the three, so every child is centered on it.
pub(crate) fn upper_offspring<R: Rng>(
    pop: &[Individual],
    params: &EaParams,
    bounds: &[(f64, f64)],
    rng: &mut R,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let pool = distinct_indices(rng, pop.len(), 2 * params.mu);
    let mut trio = tournament_select(pop, &pool, Level::Upper)?;
    trio.truncate(3);
    let mut top_up_attempts = 0;
    while trio.len() < 3 {
        let extra = rng.gen_range(0..pop.len());
        top_up_attempts += 1;
        // Tiny populations may not hold three distinct members; accept a
        // repeat rather than spin (PCX degrades gracefully on duplicates).
        if !trio.contains(&extra) || top_up_attempts > 16 {
            trio.push(extra);
        }
    }
    let mut ip_pos = 0;
    for pos in 1..3 {
        if compare_deb(&pop[trio[pos]], &pop[trio[ip_pos]], Level::Upper) == Ordering::Less {
            ip_pos = pos;
        }
    }
    let ip = trio[ip_pos];
    let (p1, p2) = match ip_pos {
        0 => (trio[1], trio[2]),
        1 => (trio[0], trio[2]),
        _ => (trio[0], trio[1]),
    };

    let mut children = Vec::with_capacity(params.lambda);
    for _ in 0..params.lambda {
        let mut x_u = if rng.gen::<f64>() < params.p_crossover {
            pcx_crossover(
                &pop[ip].x_u,
                &pop[p1].x_u,
                &pop[p2].x_u,
                params.sigma_pcx,
                bounds,
                rng,
            )
        } else {
            pop[ip].x_u.clone()
        };
        polynomial_mutation(&mut x_u, bounds, params.eta_mutation, params.p_mutation, rng);
        children.push((ip, x_u));
    }
    Ok(children)
}
