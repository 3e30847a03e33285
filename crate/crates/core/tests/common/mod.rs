//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smoea::data::{generate_synthetic, normalize_dataset, Dataset, SyntheticParams};
use smoea::evolution::{dominates, feasible_counts, Individual};
use smoea::network::{ArchSpec, Network};
use smoea::objectives::{MaskObjective, ObjectiveVector};
use smoea::tensor::Tensor;
use smoea::train::{finetune, FineTuneConfig};
use smoea::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn ov(filter_pct: f64, error: f64) -> ObjectiveVector {
    ObjectiveVector { filter_pct, error }
}

/// Central differences of a scalar function of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let g = (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), g).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute gap when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn weighted_sum(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Repeated peeling: each front is the non-dominated subset of what is left.
pub fn peel_fronts(objs: &[ObjectiveVector]) -> Vec<Vec<usize>> {
    let mut left: Vec<usize> = (0..objs.len()).collect();
    let mut fronts = Vec::new();
    while !left.is_empty() {
        let front: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&i| !left.iter().any(|&j| dominates(&objs[j], &objs[i])))
            .collect();
        left.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

/// Textbook crowding distance over `front` (ascending indices).
pub fn oracle_crowding(front: &[usize], objs: &[ObjectiveVector]) -> Vec<f64> {
    let mut d = vec![0.0; front.len()];
    let get = |i: usize, m: usize| if m == 0 { objs[front[i]].filter_pct } else { objs[front[i]].error };
    for m in 0..2 {
        let mut order: Vec<usize> = (0..front.len()).collect();
        // stable sort keeps front order among equal values
        order.sort_by(|&a, &b| get(a, m).partial_cmp(&get(b, m)).unwrap());
        let lo = get(order[0], m);
        let hi = get(*order.last().unwrap(), m);
        d[order[0]] = f64::INFINITY;
        d[*order.last().unwrap()] = f64::INFINITY;
        if hi > lo {
            for w in 1..front.len().saturating_sub(1) {
                d[order[w]] += (get(order[w + 1], m) - get(order[w - 1], m)) / (hi - lo);
            }
        }
    }
    d
}

/// Whole fronts until one does not fit, then that front by descending
/// crowding, lower filter fraction, lower index.
pub fn oracle_select(objs: &[ObjectiveVector], k: usize) -> BTreeSet<usize> {
    let mut chosen = BTreeSet::new();
    for front in peel_fronts(objs) {
        if chosen.len() + front.len() <= k {
            chosen.extend(front.iter().copied());
        } else {
            let crowd = oracle_crowding(&front, objs);
            let mut pos: Vec<usize> = (0..front.len()).collect();
            pos.sort_by(|&a, &b| {
                crowd[b]
                    .partial_cmp(&crowd[a])
                    .unwrap()
                    .then(objs[front[a]].filter_pct.partial_cmp(&objs[front[b]].filter_pct).unwrap())
                    .then(front[a].cmp(&front[b]))
            });
            let room = k - chosen.len();
            chosen.extend(pos.into_iter().take(room).map(|p| front[p]));
        }
        if chosen.len() >= k {
            break;
        }
    }
    chosen
}

/// Random objectives; `grid` snaps filter fractions to tenths, as real masks do.
pub fn random_objectives(n: usize, grid: bool, rng: &mut ChaCha8Rng) -> Vec<ObjectiveVector> {
    (0..n)
        .map(|_| {
            let f = if grid {
                rng.random_range(2..=8) as f64 / 10.0
            } else {
                rng.random_range(0.0..1.0)
            };
            let e = if grid {
                rng.random_range(0..40) as f64 * 0.25
            } else {
                rng.random_range(0.0..10.0)
            };
            ov(f, e)
        })
        .collect()
}

/// Individuals whose genome spells out their index, so selections can be traced back.
pub fn tagged_population(objs: &[ObjectiveVector]) -> Vec<Individual> {
    objs.iter()
        .enumerate()
        .map(|(i, o)| Individual::new((0..16).map(|b| i >> b & 1 == 1).collect(), *o))
        .collect()
}

pub fn tag_of(ind: &Individual) -> usize {
    ind.genes.iter().enumerate().map(|(b, &g)| (g as usize) << b).sum()
}

/// Error = total importance of the pruned filters.
pub struct Separable {
    pub importance: Vec<f64>,
}

impl Separable {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        Self {
            importance: (0..n).map(|_| r.random_range(0.1..10.0)).collect(),
        }
    }
}

impl MaskObjective for Separable {
    fn num_filters(&self) -> usize {
        self.importance.len()
    }

    fn evaluate(&self, genes: &[bool]) -> Result<ObjectiveVector> {
        let kept = genes.iter().filter(|g| **g).count();
        let error = genes
            .iter()
            .zip(&self.importance)
            .filter(|(g, _)| !**g)
            .map(|(_, w)| w)
            .sum();
        Ok(ov(kept as f64 / genes.len() as f64, error))
    }
}

/// Exhaustive constrained Pareto front as `(retained count, error bits)`.
pub fn brute_force_front<O: MaskObjective>(obj: &O, tau1: f64, tau2: f64) -> BTreeSet<(usize, u64)> {
    let n = obj.num_filters();
    let (lo, hi) = feasible_counts(n, tau1, tau2).unwrap();
    let mut all = Vec::new();
    for code in 0u32..(1 << n) {
        let genes: Vec<bool> = (0..n).map(|b| code >> b & 1 == 1).collect();
        let k = genes.iter().filter(|g| **g).count();
        if (lo..=hi).contains(&k) {
            all.push((k, obj.evaluate(&genes).unwrap()));
        }
    }
    all.iter()
        .filter(|(_, o)| !all.iter().any(|(_, p)| dominates(p, o)))
        .map(|(k, o)| (*k, o.error.to_bits()))
        .collect()
}

/// Synthetic dataset (normalized) for the desk-scale pipeline runs.
pub fn desk_data(seed: u64) -> Dataset {
    let mut d = generate_synthetic(&SyntheticParams {
        seed,
        ..SyntheticParams::default()
    })
    .unwrap();
    normalize_dataset(&mut d).unwrap();
    d
}

pub fn base_training(seed: u64) -> FineTuneConfig {
    FineTuneConfig {
        epochs: 16,
        milestones: vec![10],
        seed,
        ..FineTuneConfig::desk()
    }
}

/// Four-conv toy CNN trained from its seeded initialization.
pub fn desk_model(data: &Dataset, seed: u64) -> Network {
    let s = data.train.images.shape();
    let net = ArchSpec::toy([s[1], s[2], s[3]], data.classes).build(seed).unwrap();
    finetune(&net, &data.train, &base_training(seed)).unwrap().0
}

/// Small, quick variant for tests that only check invariants.
pub fn tiny_data(seed: u64) -> Dataset {
    let mut d = generate_synthetic(&SyntheticParams {
        train_per_class: 12,
        test_per_class: 4,
        height: 8,
        width: 8,
        seed,
        ..SyntheticParams::default()
    })
    .unwrap();
    normalize_dataset(&mut d).unwrap();
    d
}

pub fn tiny_model(data: &Dataset, seed: u64) -> Network {
    let s = data.train.images.shape();
    let net = ArchSpec::toy([s[1], s[2], s[3]], data.classes).build(seed).unwrap();
    let cfg = FineTuneConfig {
        epochs: 4,
        milestones: vec![],
        seed,
        ..FineTuneConfig::desk()
    };
    finetune(&net, &data.train, &cfg).unwrap().0
}

/// Random feasible mask bits with at least one retained filter.
pub fn random_bits(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    loop {
        let bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if bits.iter().any(|b| *b) {
            return bits;
        }
    }
}
