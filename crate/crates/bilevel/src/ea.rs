//! Evolutionary building blocks shared by every solver: parent-centric
//! crossover, polynomial mutation, pairwise tournaments, steady-state pool
//! replacement, the population-variance stopping rule, and a self-contained
//! lower-level evolutionary solve.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::individual::{compare_deb, deb_cmp_values, Individual, Level, FEASIBILITY_TOL};
use crate::local::LowerSolution;
use crate::problem::{BilevelProblem, EvalCounter};

/// Parameters of the steady-state evolutionary loop.
#[derive(Debug, Clone)]
pub struct EaParams {
    /// Population size.
    pub pop_size: usize,
    /// Parents drawn per generation (via a `2*mu -> mu` tournament).
    pub mu: usize,
    /// Offspring created per generation.
    pub lambda: usize,
    /// Population slots pooled with the offspring during replacement.
    pub r: usize,
    pub p_crossover: f64,
    /// Per-coordinate mutation probability.
    pub p_mutation: f64,
    /// Polynomial mutation distribution index.
    pub eta_mutation: f64,
    /// Standard deviation of both crossover weights.
    pub sigma_pcx: f64,
    /// Variance stopping threshold on `sum(var) / sum(var at start)`.
    pub alpha_stop: f64,
    /// Generation cap for loops without an external budget.
    pub max_gens: usize,
}

impl EaParams {
    /// Upper-level settings of the fully nested solver.
    pub fn nested_upper() -> Self {
        EaParams {
            pop_size: 50,
            mu: 2,
            lambda: 3,
            r: 2,
            p_crossover: 0.9,
            p_mutation: 0.1,
            eta_mutation: 20.0,
            sigma_pcx: 0.1,
            alpha_stop: 1e-4,
            max_gens: 2_000,
        }
    }

    /// Upper-level settings of the adaptive solver.
    pub fn adaptive_upper() -> Self {
        EaParams {
            mu: 3,
            lambda: 2,
            ..EaParams::nested_upper()
        }
    }

    /// Settings for lower-level solves.
    pub fn lower_level() -> Self {
        EaParams {
            mu: 3,
            lambda: 2,
            max_gens: 500,
            ..EaParams::nested_upper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu < 2 {
            return Err(Error::InvalidParams(format!(
                "need at least two parents, got mu = {}",
                self.mu
            )));
        }
        if 2 * self.mu > self.pop_size {
            return Err(Error::InvalidParams(format!(
                "tournament needs 2*mu = {} distinct members but the population holds {}",
                2 * self.mu,
                self.pop_size
            )));
        }
        if self.lambda == 0 || self.r == 0 || self.r > self.pop_size {
            return Err(Error::InvalidParams(format!(
                "lambda = {} and r = {} must be positive with r <= pop_size = {}",
                self.lambda, self.r, self.pop_size
            )));
        }
        Ok(())
    }
}

/// Parent-centric crossover with fixed weights.
///
/// The child is the index parent pushed along its offset from the parent
/// centroid, plus a term along the difference of the other two parents:
/// `c = z + w_xi * (z - centroid) + w_eta * (p2 - p1) / 2`.
pub fn pcx_child(
    index_parent: &[f64],
    p1: &[f64],
    p2: &[f64],
    w_xi: f64,
    w_eta: f64,
) -> Vec<f64> {
    index_parent
        .iter()
        .zip(p1)
        .zip(p2)
        .map(|((z, a), b)| {
            let centroid = (z + a + b) / 3.0;
            z + w_xi * (z - centroid) + w_eta * (b - a) / 2.0
        })
        .collect()
}

/// Folds an out-of-box coordinate back inside by mirroring at the violated
/// bound. Clamping would pile offspring onto the bound itself, handing any
/// optimum that happens to sit on the box edge an artificial head start
/// over interior optima; reflection keeps the sampling density continuous.
fn reflect_into(c: f64, lo: f64, hi: f64) -> f64 {
    if !c.is_finite() || hi <= lo {
        return c.clamp(lo, hi);
    }
    let mut v = c;
    for _ in 0..8 {
        if v < lo {
            v = lo + (lo - v);
        } else if v > hi {
            v = hi - (v - hi);
        } else {
            return v;
        }
    }
    // Wildly overshot children land here; position is arbitrary anyway.
    v.clamp(lo, hi)
}

/// [`pcx_child`] with weights drawn fresh from `N(0, sigma^2)`, reflected
/// into the box.
pub fn pcx_crossover<R: Rng>(
    index_parent: &[f64],
    p1: &[f64],
    p2: &[f64],
    sigma: f64,
    bounds: &[(f64, f64)],
    rng: &mut R,
) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("finite crossover spread");
    let w_xi = normal.sample(rng);
    let w_eta = normal.sample(rng);
    let mut child = pcx_child(index_parent, p1, p2, w_xi, w_eta);
    for (c, (lo, hi)) in child.iter_mut().zip(bounds) {
        *c = reflect_into(*c, *lo, *hi);
    }
    child
}

/// Polynomial mutation: each coordinate is perturbed with probability
/// `p_mut` by a bounded polynomial step with distribution index `eta`.
pub fn polynomial_mutation<R: Rng>(
    x: &mut [f64],
    bounds: &[(f64, f64)],
    eta: f64,
    p_mut: f64,
    rng: &mut R,
) {
    for (xi, (lo, hi)) in x.iter_mut().zip(bounds) {
        if rng.gen::<f64>() >= p_mut {
            continue;
        }
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        let u: f64 = rng.gen();
        let d1 = (*xi - lo) / span;
        let d2 = (hi - *xi) / span;
        let pow = 1.0 / (eta + 1.0);
        let dq = if u <= 0.5 {
            let b = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(eta + 1.0);
            b.powf(pow) - 1.0
        } else {
            let b = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(eta + 1.0);
            1.0 - b.powf(pow)
        };
        *xi = (*xi + dq * span).clamp(*lo, *hi);
    }
}

/// `k` distinct indices below `n`, in random order.
pub fn distinct_indices<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut out = rand::seq::index::sample(rng, n, k).into_vec();
    out.shuffle(rng);
    out
}

/// Pairs up `pool` and keeps the winner of each pair under `cmp`
/// (`Ordering::Less` wins; the first entry keeps ties).
pub fn tournament_by<T>(
    items: &[T],
    pool: &[usize],
    mut cmp: impl FnMut(&T, &T) -> Ordering,
) -> Result<Vec<usize>> {
    if pool.len() % 2 != 0 {
        return Err(Error::OddPoolSize(pool.len()));
    }
    Ok(pool
        .chunks(2)
        .map(|pair| {
            if cmp(&items[pair[1]], &items[pair[0]]) == Ordering::Less {
                pair[1]
            } else {
                pair[0]
            }
        })
        .collect())
}

/// [`tournament_by`] under constraint domination at the given level.
pub fn tournament_select(
    members: &[Individual],
    pool: &[usize],
    level: Level,
) -> Result<Vec<usize>> {
    tournament_by(members, pool, |a, b| compare_deb(a, b, level))
}

/// Steady-state replacement: `r` random population slots are pooled with
/// the offspring and the best of the pool fill those slots. Incumbents keep
/// ties, so the population best can only improve.
pub fn pool_replace<T: Clone, R: Rng>(
    population: &mut [T],
    offspring: &[T],
    r: usize,
    mut cmp: impl FnMut(&T, &T) -> Ordering,
    rng: &mut R,
) {
    let r = r.min(population.len());
    let slots = distinct_indices(rng, population.len(), r);
    let mut pool: Vec<T> = slots.iter().map(|&s| population[s].clone()).collect();
    pool.extend_from_slice(offspring);
    pool.sort_by(|a, b| cmp(a, b));
    for (slot, member) in slots.into_iter().zip(pool) {
        population[slot] = member;
    }
}

/// Summed per-coordinate population variance of the vectors selected by
/// `coords`.
pub fn variance_sum<T>(items: &[T], coords: impl Fn(&T) -> &[f64]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let dim = coords(&items[0]).len();
    let n = items.len() as f64;
    (0..dim)
        .map(|i| {
            let mean = items.iter().map(|t| coords(t)[i]).sum::<f64>() / n;
            items
                .iter()
                .map(|t| {
                    let d = coords(t)[i] - mean;
                    d * d
                })
                .sum::<f64>()
                / n
        })
        .sum()
}

/// Variance stopping rule: stop once the summed variance has fallen below
/// `alpha` times its initial value. A degenerate start stops immediately.
pub fn variance_stop(current: f64, initial: f64, alpha: f64) -> bool {
    if initial <= 0.0 {
        return true;
    }
    current / initial < alpha
}

/// Uniform sample inside a box.
pub fn random_point<R: Rng>(bounds: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    bounds
        .iter()
        .map(|(lo, hi)| rng.gen_range(*lo..=*hi))
        .collect()
}

/// Picks two companions for the index parent at `parents[index_pos]`,
/// topping up from the population when fewer than two other parents exist.
pub(crate) fn companion_parents<R: Rng>(
    parents: &[usize],
    index_pos: usize,
    pop_len: usize,
    rng: &mut R,
) -> (usize, usize) {
    let mut others: Vec<usize> = parents
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != index_pos)
        .map(|(_, &p)| p)
        .collect();
    others.truncate(2);
    while others.len() < 2 {
        let c = rng.gen_range(0..pop_len);
        if c != parents[index_pos] && !others.contains(&c) {
            others.push(c);
        }
    }
    (others[0], others[1])
}

#[derive(Clone)]
struct LlMember {
    x: Vec<f64>,
    value: f64,
    violation: f64,
}

fn ll_cmp(a: &LlMember, b: &LlMember) -> Ordering {
    deb_cmp_values(a.value, a.violation, b.value, b.violation)
}

/// Evolutionary lower-level solve for one fixed upper vector, used where
/// the lower level is not marked convex. Spends only lower-level
/// evaluations; stops on variance collapse or the generation cap.
pub fn lower_level_ea<R: Rng>(
    problem: &BilevelProblem,
    x_u: &[f64],
    warm: Option<&[f64]>,
    params: &EaParams,
    counter: &mut EvalCounter,
    rng: &mut R,
) -> Result<LowerSolution> {
    params.validate()?;
    let bounds = problem.lower_bounds();

    let mut pop: Vec<LlMember> = Vec::with_capacity(params.pop_size);
    for i in 0..params.pop_size {
        let x = match (i, warm) {
            (0, Some(w)) => {
                let mut w = w.to_vec();
                for (v, (lo, hi)) in w.iter_mut().zip(bounds) {
                    *v = v.clamp(*lo, *hi);
                }
                w
            }
            _ => random_point(bounds, rng),
        };
        let e = problem.evaluate_lower(x_u, &x, counter)?;
        pop.push(LlMember {
            x,
            value: e.value,
            violation: e.violation,
        });
    }

    let initial_var = variance_sum(&pop, |m| m.x.as_slice());
    let mut stopped_by_variance = false;
    for _ in 0..params.max_gens {
        if variance_stop(
            variance_sum(&pop, |m| m.x.as_slice()),
            initial_var,
            params.alpha_stop,
        ) {
            stopped_by_variance = true;
            break;
        }
        let pool = distinct_indices(rng, pop.len(), 2 * params.mu);
        let parents = tournament_by(&pop, &pool, ll_cmp)?;
        let mut offspring = Vec::with_capacity(params.lambda);
        for k in 0..params.lambda {
            let pos = k % parents.len();
            let ip = parents[pos];
            let (a, b) = companion_parents(&parents, pos, pop.len(), rng);
            let mut x = if rng.gen::<f64>() < params.p_crossover {
                pcx_crossover(&pop[ip].x, &pop[a].x, &pop[b].x, params.sigma_pcx, bounds, rng)
            } else {
                pop[ip].x.clone()
            };
            polynomial_mutation(&mut x, bounds, params.eta_mutation, params.p_mutation, rng);
            let e = problem.evaluate_lower(x_u, &x, counter)?;
            offspring.push(LlMember {
                x,
                value: e.value,
                violation: e.violation,
            });
        }
        pool_replace(&mut pop, &offspring, params.r, ll_cmp, rng);
    }

    let best = pop
        .iter()
        .min_by(|a, b| ll_cmp(a, b))
        .expect("population is never empty");
    Ok(LowerSolution {
        x_l: best.x.clone(),
        value: best.value,
        violation: best.violation,
        converged: stopped_by_variance && best.violation <= FEASIBILITY_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crossover_matches_the_worked_example() {
        // Index parent (1,1), companions (0,0) and (2,0), both weights 1:
        // centroid (1, 1/3), offset (0, 2/3), difference term (1, 0).
        let c = pcx_child(&[1.0, 1.0], &[0.0, 0.0], &[2.0, 0.0], 1.0, 1.0);
        assert!((c[0] - 2.0).abs() < 1e-12);
        assert!((c[1] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn crossover_of_identical_parents_is_the_identity() {
        let p = [0.3, -1.7, 4.0];
        for (wx, we) in [(0.0, 0.0), (1.0, -2.0), (-0.5, 0.25)] {
            let c = pcx_child(&p, &p, &p, wx, we);
            for (a, b) in c.iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mutation_is_symmetric_at_the_box_center_and_stays_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bounds = [(-2.0, 6.0)];
        let mut sum = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let mut x = vec![2.0];
            polynomial_mutation(&mut x, &bounds, 20.0, 1.0, &mut rng);
            assert!(x[0] >= -2.0 && x[0] <= 6.0);
            sum += x[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean drifted to {mean}");
    }

    #[test]
    fn mutation_respects_bounds_from_the_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bounds = [(0.0, 1.0), (-3.0, -1.0)];
        for _ in 0..2_000 {
            let mut x = vec![0.0, -1.0];
            polynomial_mutation(&mut x, &bounds, 20.0, 1.0, &mut rng);
            assert!(x[0] >= 0.0 && x[0] <= 1.0);
            assert!(x[1] >= -3.0 && x[1] <= -1.0);
        }
    }

    #[test]
    fn tournament_keeps_pairwise_winners() {
        let members: Vec<_> = (0..6)
            .map(|i| crate::individual::tests::member(i as f64, 0.0))
            .collect();
        let winners = tournament_select(&members, &[5, 0, 3, 2, 1, 4], Level::Upper).unwrap();
        assert_eq!(winners, vec![0, 2, 1]);
    }

    #[test]
    fn odd_pools_are_rejected() {
        let members = vec![crate::individual::tests::member(0.0, 0.0)];
        assert!(matches!(
            tournament_select(&members, &[0, 0, 0], Level::Upper),
            Err(Error::OddPoolSize(3))
        ));
    }

    #[test]
    fn variance_ratio_matches_hand_computation() {
        // Start: points (+-2, +-1), per-coordinate variances (4, 1).
        let start: Vec<Vec<f64>> = vec![
            vec![2.0, 1.0],
            vec![-2.0, -1.0],
            vec![2.0, -1.0],
            vec![-2.0, 1.0],
        ];
        // Later: everything halved, variances (1, 0.25).
        let later: Vec<Vec<f64>> = start
            .iter()
            .map(|p| p.iter().map(|v| v / 2.0).collect())
            .collect();
        let v0 = variance_sum(&start, |p| p.as_slice());
        let vt = variance_sum(&later, |p| p.as_slice());
        assert!((v0 - 5.0).abs() < 1e-12);
        assert!((vt - 1.25).abs() < 1e-12);
        // Ratio is exactly 0.25: the rule is strict.
        assert!(!variance_stop(vt, v0, 0.25));
        assert!(variance_stop(vt, v0, 0.2500001));
    }

    #[test]
    fn degenerate_initial_variance_stops_immediately() {
        assert!(variance_stop(0.0, 0.0, 1e-4));
    }

    #[test]
    fn replacement_never_loses_the_best() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cmp = |a: &f64, b: &f64| a.partial_cmp(b).unwrap();
        let mut pop: Vec<f64> = (0..20).map(|i| 100.0 - i as f64).collect();
        let mut best = pop.iter().cloned().fold(f64::INFINITY, f64::min);
        for round in 0..200 {
            let offspring = vec![90.0 + (round % 7) as f64, 140.0];
            let incoming = offspring.iter().cloned().fold(f64::INFINITY, f64::min);
            pool_replace(&mut pop, &offspring, 2, cmp, &mut rng);
            assert_eq!(pop.len(), 20);
            best = best.min(incoming);
            let now = pop.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(now <= best + 1e-12, "best regressed: {now} > {best}");
        }
    }

    #[test]
    fn lower_ea_finds_a_smooth_minimum() {
        let p = BilevelProblem::builder("bowl")
            .upper_bounds(vec![(0.0, 1.0)])
            .lower_bounds(vec![(-1.0, 1.0), (-1.0, 1.0)])
            .upper_objective(|_, _| 0.0)
            .lower_objective(|_, y| (y[0] - 0.3).powi(2) + (y[1] + 0.4).powi(2))
            .ll_convex(false)
            .build();
        let mut counter = EvalCounter::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sol = lower_level_ea(
            &p,
            &[0.5],
            None,
            &EaParams::lower_level(),
            &mut counter,
            &mut rng,
        )
        .unwrap();
        assert!(sol.value < 1e-2, "value = {}", sol.value);
        assert!(counter.ll_evals >= 50);
        assert_eq!(counter.ul_evals, 0);
    }

    #[test]
    fn warm_start_seeds_the_lower_ea() {
        // With the warm start placed exactly at the optimum, elitist
        // replacement guarantees the answer is at least that good.
        let p = BilevelProblem::builder("bowl2")
            .upper_bounds(vec![(0.0, 1.0)])
            .lower_bounds(vec![(-1.0, 1.0)])
            .upper_objective(|_, _| 0.0)
            .lower_objective(|_, y| (y[0] - 0.25).powi(2))
            .ll_convex(false)
            .build();
        let mut counter = EvalCounter::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sol = lower_level_ea(
            &p,
            &[0.0],
            Some(&[0.25]),
            &EaParams::lower_level(),
            &mut counter,
            &mut rng,
        )
        .unwrap();
        assert!(sol.value <= 1e-12, "value = {}", sol.value);
    }
}
