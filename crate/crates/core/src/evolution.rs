//! Constrained NSGA-II over binary filter masks.
//!
//! Every genome is kept inside the retention bounds `[tau1, tau2]` by
//! stochastic repair, so sorting never sees an infeasible individual.
//! Child `i` of generation `t` draws from its own ChaCha stream derived
//! from `(seed, t, i)`; results are therefore identical for any degree of
//! evaluation parallelism.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{AlphaMode, MaskObjective, ObjectiveVector};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossoverKind {
    /// Each gene taken from either parent with probability 1/2.
    #[default]
    Uniform,
    OnePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub elite_size: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub seed: u64,
    pub alpha_mode: AlphaMode,
    pub crossover: CrossoverKind,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population_size: 100,
            elite_size: 30,
            generations: 100,
            crossover_prob: 1.0,
            mutation_prob: 0.05,
            tau1: 0.2,
            tau2: 0.8,
            seed: 0,
            alpha_mode: AlphaMode::Optimized,
            crossover: CrossoverKind::Uniform,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 || self.elite_size == 0 {
            return Err(Error::Config("population and elite sizes must be positive".into()));
        }
        if self.elite_size > self.population_size {
            return Err(Error::Config(format!(
                "elite size {} exceeds population size {}",
                self.elite_size, self.population_size
            )));
        }
        for (name, p) in [("crossover_prob", self.crossover_prob), ("mutation_prob", self.mutation_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.tau1 > 0.0 && self.tau1 < self.tau2 && self.tau2 <= 1.0) {
            return Err(Error::Config(format!(
                "retention bounds must satisfy 0 < tau1 < tau2 <= 1, got [{}, {}]",
                self.tau1, self.tau2
            )));
        }
        Ok(())
    }
}

const BOUND_EPS: f64 = 1e-9;

/// Inclusive range of retained-filter counts allowed for `n` filters.
pub fn feasible_counts(n: usize, tau1: f64, tau2: f64) -> Result<(usize, usize)> {
    let lo = ((tau1 * n as f64 - BOUND_EPS).ceil().max(0.0) as usize).max(1);
    let hi = (tau2 * n as f64 + BOUND_EPS).floor() as usize;
    if n < 2 || lo > hi || hi > n {
        return Err(Error::InfeasibleBounds(format!(
            "no retained count of {n} filters lies in [{tau1}, {tau2}]"
        )));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genes: Vec<bool>,
    pub objectives: ObjectiveVector,
    /// Front index, 1-based; 0 until sorted.
    pub rank: usize,
    pub crowding: f64,
}

impl Individual {
    pub fn new(genes: Vec<bool>, objectives: ObjectiveVector) -> Self {
        Self {
            genes,
            objectives,
            rank: 0,
            crowding: 0.0,
        }
    }

    pub fn retained(&self) -> usize {
        self.genes.iter().filter(|g| **g).count()
    }
}

/// Rank-1 members of the final elite set, one per distinct genome, ordered
/// by ascending filter fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub members: Vec<Individual>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_error: f64,
    pub median_error: f64,
}

#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub elites: Vec<Individual>,
    pub front: ParetoFront,
    pub history: Vec<GenerationStats>,
}

/// RNG stream for individual `index` of generation `generation` (0 = initial population).
pub fn stream_rng(seed: u64, generation: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((generation << 32) | (index & 0xffff_ffff));
    rng
}

pub fn init_genes<R: Rng>(n: usize, cfg: &EvolutionConfig, rng: &mut R) -> Result<Vec<bool>> {
    let (lo, hi) = feasible_counts(n, cfg.tau1, cfg.tau2)?;
    let r = rng.random_range(cfg.tau1..=cfg.tau2);
    let keep = ((r * n as f64).round() as usize).clamp(lo, hi);
    let mut genes = vec![false; n];
    for i in index::sample(rng, n, keep) {
        genes[i] = true;
    }
    Ok(genes)
}

/// Initial genomes, individual `i` drawn from stream `(seed, 0, i)`.
pub fn init_population(num_filters: usize, cfg: &EvolutionConfig) -> Result<Vec<Vec<bool>>> {
    (0..cfg.population_size)
        .map(|i| init_genes(num_filters, cfg, &mut stream_rng(cfg.seed, 0, i as u64)))
        .collect()
}

/// Both objectives minimized.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    a.filter_pct <= b.filter_pct
        && a.error <= b.error
        && (a.filter_pct < b.filter_pct || a.error < b.error)
}

/// Fronts of index lists, best first.
pub fn fast_nondominated_sort(objs: &[ObjectiveVector]) -> Vec<Vec<usize>> {
    let n = objs.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut counts = vec![0usize; n];
    let mut fronts = vec![Vec::new()];
    for p in 0..n {
        for q in 0..n {
            if p == q {
                continue;
            }
            if dominates(&objs[p], &objs[q]) {
                dominated_by[p].push(q);
            } else if dominates(&objs[q], &objs[p]) {
                counts[p] += 1;
            }
        }
        if counts[p] == 0 {
            fronts[0].push(p);
        }
    }
    let mut i = 0;
    while !fronts[i].is_empty() {
        let mut next = Vec::new();
        for &p in &fronts[i] {
            for &q in &dominated_by[p] {
                counts[q] -= 1;
                if counts[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(next);
        i += 1;
    }
    fronts.pop();
    fronts
}

/// Sorts `pop` and writes 1-based ranks into it.
pub fn assign_ranks(pop: &mut [Individual]) -> Vec<Vec<usize>> {
    let objs: Vec<_> = pop.iter().map(|i| i.objectives).collect();
    let fronts = fast_nondominated_sort(&objs);
    for (r, front) in fronts.iter().enumerate() {
        for &i in front {
            pop[i].rank = r + 1;
        }
    }
    fronts
}

fn objective_value(o: &ObjectiveVector, m: usize) -> f64 {
    if m == 0 {
        o.filter_pct
    } else {
        o.error
    }
}

/// Crowding distance of each member of `front` (indices into `objs`), in front order.
pub fn crowding_distance(front: &[usize], objs: &[ObjectiveVector]) -> Vec<f64> {
    let len = front.len();
    let mut dist = vec![0.0; len];
    if len == 0 {
        return dist;
    }
    for m in 0..2 {
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| {
            objective_value(&objs[front[a]], m)
                .total_cmp(&objective_value(&objs[front[b]], m))
                .then(a.cmp(&b))
        });
        let first = objective_value(&objs[front[order[0]]], m);
        let last = objective_value(&objs[front[order[len - 1]]], m);
        dist[order[0]] = f64::INFINITY;
        dist[order[len - 1]] = f64::INFINITY;
        let range = last - first;
        if range <= 0.0 {
            continue;
        }
        for w in 1..len.saturating_sub(1) {
            let prev = objective_value(&objs[front[order[w - 1]]], m);
            let next = objective_value(&objs[front[order[w + 1]]], m);
            dist[order[w]] += (next - prev) / range;
        }
    }
    dist
}

/// NSGA-II truncation to `k` survivors: whole fronts first, the front that
/// does not fit cut by descending crowding distance (ties: lower filter
/// fraction, then input order).
pub fn select_elites(mut pop: Vec<Individual>, k: usize) -> Vec<Individual> {
    let fronts = assign_ranks(&mut pop);
    let objs: Vec<_> = pop.iter().map(|i| i.objectives).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for front in &fronts {
        let crowd = crowding_distance(front, &objs);
        for (pos, &i) in front.iter().enumerate() {
            pop[i].crowding = crowd[pos];
        }
        if chosen.len() + front.len() <= k {
            chosen.extend_from_slice(front);
        } else {
            let mut rest = front.clone();
            rest.sort_by(|&a, &b| crowded_order(&pop[a], &pop[b]).then(a.cmp(&b)));
            chosen.extend(rest.into_iter().take(k - chosen.len()));
        }
        if chosen.len() >= k {
            break;
        }
    }
    chosen.sort_by(|&a, &b| {
        pop[a]
            .rank
            .cmp(&pop[b].rank)
            .then(crowded_order(&pop[a], &pop[b]))
            .then(a.cmp(&b))
    });
    let mut slots: Vec<Option<Individual>> = pop.into_iter().map(Some).collect();
    chosen
        .into_iter()
        .map(|i| slots[i].take().expect("each index chosen once"))
        .collect()
}

fn crowded_order(a: &Individual, b: &Individual) -> Ordering {
    b.crowding
        .total_cmp(&a.crowding)
        .then(a.objectives.filter_pct.total_cmp(&b.objectives.filter_pct))
}

/// Clears or sets uniformly chosen bits until the retained count is feasible.
pub fn repair<R: Rng>(genes: &mut [bool], tau1: f64, tau2: f64, rng: &mut R) -> Result<()> {
    let (lo, hi) = feasible_counts(genes.len(), tau1, tau2)?;
    let on: Vec<usize> = (0..genes.len()).filter(|&i| genes[i]).collect();
    if on.len() > hi {
        for j in index::sample(rng, on.len(), on.len() - hi) {
            genes[on[j]] = false;
        }
    } else if on.len() < lo {
        let off: Vec<usize> = (0..genes.len()).filter(|&i| !genes[i]).collect();
        for j in index::sample(rng, off.len(), lo - on.len()) {
            genes[off[j]] = true;
        }
    }
    Ok(())
}

/// One child: two distinct parents, crossover, per-gene flips, repair.
pub fn make_child<R: Rng>(elites: &[Individual], cfg: &EvolutionConfig, rng: &mut R) -> Result<Vec<bool>> {
    if elites.len() < 2 {
        return Err(Error::DegenerateElites(elites.len()));
    }
    let picks = index::sample(rng, elites.len(), 2);
    let (a, b) = (&elites[picks.index(0)].genes, &elites[picks.index(1)].genes);
    let mut child = if rng.random_bool(cfg.crossover_prob) {
        match cfg.crossover {
            CrossoverKind::Uniform => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y })
                .collect(),
            CrossoverKind::OnePoint => {
                let cut = rng.random_range(1..a.len().max(2));
                a[..cut].iter().chain(&b[cut..]).copied().collect()
            }
        }
    } else {
        a.clone()
    };
    if cfg.mutation_prob > 0.0 {
        for g in child.iter_mut() {
            if rng.random_bool(cfg.mutation_prob) {
                *g = !*g;
            }
        }
    }
    repair(&mut child, cfg.tau1, cfg.tau2, rng)?;
    Ok(child)
}

/// `population_size` children of generation `generation`, child `i` drawn
/// from stream `(seed, generation, i)`.
pub fn make_children(elites: &[Individual], cfg: &EvolutionConfig, generation: u64) -> Result<Vec<Vec<bool>>> {
    if elites.len() < 2 {
        return Err(Error::DegenerateElites(elites.len()));
    }
    let slots: Vec<usize> = (0..cfg.population_size).collect();
    parallel::map_indexed(&slots, |i, _| {
        make_child(elites, cfg, &mut stream_rng(cfg.seed, generation, i as u64))
    })
    .into_iter()
    .collect()
}

pub fn evaluate_population<O: MaskObjective + ?Sized>(objective: &O, genomes: Vec<Vec<bool>>) -> Result<Vec<Individual>> {
    let scored = parallel::map_indexed(&genomes, |_, g| objective.evaluate(g));
    genomes
        .into_iter()
        .zip(scored)
        .map(|(g, o)| Ok(Individual::new(g, o?)))
        .collect()
}

pub fn evaluate_population_sequential<O: MaskObjective + ?Sized>(
    objective: &O,
    genomes: Vec<Vec<bool>>,
) -> Result<Vec<Individual>> {
    let scored = parallel::map_indexed_sequential(&genomes, |_, g| objective.evaluate(g));
    genomes
        .into_iter()
        .zip(scored)
        .map(|(g, o)| Ok(Individual::new(g, o?)))
        .collect()
}

fn stats(generation: usize, elites: &[Individual]) -> GenerationStats {
    let mut errs: Vec<f64> = elites.iter().map(|e| e.objectives.error).collect();
    errs.sort_by(f64::total_cmp);
    let mid = errs.len() / 2;
    let median_error = if errs.len() % 2 == 1 {
        errs[mid]
    } else {
        0.5 * (errs[mid - 1] + errs[mid])
    };
    GenerationStats {
        generation,
        best_error: errs[0],
        median_error,
    }
}

fn assert_feasible(pop: &[Individual], lo: usize, hi: usize) {
    debug_assert!(
        pop.iter().all(|i| (lo..=hi).contains(&i.retained())),
        "individual outside retention bounds"
    );
}

/// Rank-1 members of `elites`, deduplicated by genome.
pub fn pareto_front(elites: &[Individual]) -> ParetoFront {
    let mut pool = elites.to_vec();
    let fronts = assign_ranks(&mut pool);
    let mut seen = HashSet::new();
    let mut members: Vec<Individual> = fronts
        .first()
        .map(|f| {
            f.iter()
                .filter(|&&i| seen.insert(pool[i].genes.clone()))
                .map(|&i| pool[i].clone())
                .collect()
        })
        .unwrap_or_default();
    let objs: Vec<_> = members.iter().map(|m| m.objectives).collect();
    let idx: Vec<usize> = (0..members.len()).collect();
    for (m, c) in members.iter_mut().zip(crowding_distance(&idx, &objs)) {
        m.crowding = c;
    }
    members.sort_by(|a, b| {
        a.objectives
            .filter_pct
            .total_cmp(&b.objectives.filter_pct)
            .then(a.objectives.error.total_cmp(&b.objectives.error))
    });
    ParetoFront { members }
}

/// Initialization, sorting, then `generations` rounds of child generation
/// and elite re-selection over children plus the previous elites.
pub fn evolve<O: MaskObjective + ?Sized>(objective: &O, cfg: &EvolutionConfig) -> Result<EvolutionResult> {
    cfg.validate()?;
    let n = objective.num_filters();
    let (lo, hi) = feasible_counts(n, cfg.tau1, cfg.tau2)?;

    let initial = evaluate_population(objective, init_population(n, cfg)?)?;
    assert_feasible(&initial, lo, hi);
    let mut elites = select_elites(initial, cfg.elite_size);
    let mut history = vec![stats(0, &elites)];

    for t in 1..=cfg.generations {
        let children = evaluate_population(objective, make_children(&elites, cfg, t as u64)?)?;
        assert_feasible(&children, lo, hi);
        let mut pool = children;
        pool.extend(elites);
        elites = select_elites(pool, cfg.elite_size);
        history.push(stats(t, &elites));
    }

    let front = pareto_front(&elites);
    Ok(EvolutionResult {
        elites,
        front,
        history,
    })
}

const KNEE_TIE_EPS: f64 = 1e-12;

/// Index of the knee: the member farthest from the line through the two
/// extreme members, measured on objectives normalized to `[0, 1]` over the
/// front. Fronts of one or two members yield the smaller filter fraction.
pub fn knee_index(points: &[ObjectiveVector]) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::EmptyFront);
    }
    let lexi = |a: &ObjectiveVector, b: &ObjectiveVector| {
        a.filter_pct
            .total_cmp(&b.filter_pct)
            .then(a.error.total_cmp(&b.error))
    };
    let smallest = (0..points.len())
        .min_by(|&a, &b| lexi(&points[a], &points[b]).then(a.cmp(&b)))
        .expect("non-empty");
    if points.len() <= 2 {
        return Ok(smallest);
    }

    let norm = |m: usize| -> Vec<f64> {
        let vals: Vec<f64> = points.iter().map(|p| objective_value(p, m)).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        vals.iter()
            .map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
            .collect()
    };
    let (xs, ys) = (norm(0), norm(1));
    let a = (0..points.len())
        .min_by(|&i, &j| xs[i].total_cmp(&xs[j]).then(ys[i].total_cmp(&ys[j])))
        .expect("non-empty");
    let b = (0..points.len())
        .min_by(|&i, &j| ys[i].total_cmp(&ys[j]).then(xs[i].total_cmp(&xs[j])))
        .expect("non-empty");
    let (dx, dy) = (xs[b] - xs[a], ys[b] - ys[a]);
    let len = (dx * dx + dy * dy).sqrt();
    let dist = |i: usize| {
        if len > 0.0 {
            (dx * (ys[i] - ys[a]) - dy * (xs[i] - xs[a])).abs() / len
        } else {
            0.0
        }
    };

    let mut best = 0;
    let mut best_d = dist(0);
    for i in 1..points.len() {
        let d = dist(i);
        let better = if (d - best_d).abs() <= KNEE_TIE_EPS {
            lexi(&points[i], &points[best]) == Ordering::Less
        } else {
            d > best_d
        };
        if better {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

pub fn knee_point(front: &ParetoFront) -> Result<&Individual> {
    let pts: Vec<_> = front.members.iter().map(|m| m.objectives).collect();
    Ok(&front.members[knee_index(&pts)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(f: f64, e: f64) -> ObjectiveVector {
        ObjectiveVector {
            filter_pct: f,
            error: e,
        }
    }

    #[test]
    fn dominance_cases() {
        assert!(dominates(&ov(0.5, 0.1), &ov(0.6, 0.2)));
        assert!(!dominates(&ov(0.5, 0.3), &ov(0.6, 0.2)));
        assert!(!dominates(&ov(0.6, 0.2), &ov(0.5, 0.3)));
        assert!(!dominates(&ov(0.5, 0.3), &ov(0.5, 0.3)));
    }

    #[test]
    fn sort_small_cases() {
        let fronts = fast_nondominated_sort(&[ov(1.0, 2.0), ov(2.0, 1.0), ov(2.0, 2.0)]);
        assert_eq!(fronts, vec![vec![0, 1], vec![2]]);
        let same = fast_nondominated_sort(&[ov(1.0, 1.0); 5]);
        assert_eq!(same, vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn crowding_cases() {
        let objs = [ov(0.1, 0.9), ov(0.9, 0.1)];
        assert!(crowding_distance(&[0, 1], &objs).iter().all(|d| d.is_infinite()));

        let objs = [ov(0.0, 1.0), ov(0.5, 0.5), ov(1.0, 0.0)];
        let d = crowding_distance(&[0, 1, 2], &objs);
        assert!(d[0].is_infinite() && d[2].is_infinite());
        assert!((d[1] - 2.0).abs() < 1e-12);

        let objs = [ov(0.5, 0.5); 4];
        let d = crowding_distance(&[0, 1, 2, 3], &objs);
        assert!(d[1..3].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bounds_and_repair() {
        assert_eq!(feasible_counts(10, 0.2, 0.8).unwrap(), (2, 8));
        assert!(matches!(feasible_counts(2, 0.6, 0.7), Err(Error::InfeasibleBounds(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let mut g = vec![true, false, true, true, false, false, true, false, false, false];
        let before = g.clone();
        repair(&mut g, 0.2, 0.8, &mut rng).unwrap();
        assert_eq!(g, before);

        let mut g = vec![true; 10];
        repair(&mut g, 0.2, 0.8, &mut rng).unwrap();
        assert_eq!(g.iter().filter(|b| **b).count(), 8);

        let mut g = vec![false; 10];
        repair(&mut g, 0.2, 0.8, &mut rng).unwrap();
        assert_eq!(g.iter().filter(|b| **b).count(), 2);
    }

    #[test]
    fn init_respects_bounds_and_seed() {
        let cfg = EvolutionConfig {
            seed: 5,
            ..Default::default()
        };
        let a = init_population(10, &cfg).unwrap();
        let b = init_population(10, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|g| (2..=8).contains(&g.iter().filter(|x| **x).count())));
    }

    #[test]
    fn identical_parents_without_mutation() {
        let cfg = EvolutionConfig {
            mutation_prob: 0.0,
            ..Default::default()
        };
        let genes = vec![true, true, false, true, false, false, true, false, true, false];
        let parent = Individual::new(genes.clone(), ov(0.5, 1.0));
        let elites = vec![parent.clone(), parent];
        for child in make_children(&elites, &cfg, 1).unwrap() {
            assert_eq!(child, genes);
        }
    }

    #[test]
    fn one_elite_is_degenerate() {
        let cfg = EvolutionConfig::default();
        let e = vec![Individual::new(vec![true, false], ov(0.5, 0.0))];
        assert!(matches!(make_children(&e, &cfg, 1), Err(Error::DegenerateElites(1))));
    }

    #[test]
    fn knee_examples() {
        let pts = [ov(0.0, 1.0), ov(0.2, 0.3), ov(1.0, 0.0)];
        assert_eq!(knee_index(&pts).unwrap(), 1);
        assert_eq!(knee_index(&[ov(0.8, 1.0), ov(0.2, 5.0)]).unwrap(), 1);
        assert_eq!(knee_index(&[ov(0.4, 2.0)]).unwrap(), 0);
        let line: Vec<_> = (0..5).map(|i| ov(0.2 + 0.1 * i as f64, 1.0 - 0.2 * i as f64)).rev().collect();
        assert_eq!(knee_index(&line).unwrap(), 4);
        assert!(matches!(knee_index(&[]), Err(Error::EmptyFront)));
    }

    #[test]
    fn config_validation() {
        assert!(EvolutionConfig::default().validate().is_ok());
        let bad = EvolutionConfig {
            elite_size: 200,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvolutionConfig {
            tau1: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
