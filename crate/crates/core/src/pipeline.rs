//! Group-progressive pruning of a whole network.
//!
//! Groups are processed from the deepest to the shallowest. Inside a group
//! each block takes its calibration maps from the current (already partly
//! masked) network, picks a mask, and applies it. The group is then
//! compacted and fine-tuned, and the result becomes the current network.
//! Evolution, the three baseline criteria and the uniform-retention sweep
//! all run through this one loop and differ only in how a mask is chosen.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{calibration_batch, Dataset};
use crate::error::{Error, Result};
use crate::evolution::{self, knee_index, stream_rng, EvolutionConfig, GenerationStats, ParetoFront};
use crate::network::{mask_to_hex, FilterMask, Network};
use crate::objectives::{EvalPath, EvaluationContext, MaskObjective, ObjectiveVector};
use crate::tensor::{ConvParams, Tensor};
use crate::train::{evaluate_accuracy, finetune, FineTuneConfig};

/// `block_counts[g]` consecutive conv ordinals per group, starting at `l0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPlan {
    pub l0: usize,
    #[serde(default)]
    pub block_counts: Vec<usize>,
}

impl GroupPlan {
    pub fn new(l0: usize, block_counts: Vec<usize>) -> Self {
        Self { l0, block_counts }
    }

    pub fn empty() -> Self {
        Self::new(1, Vec::new())
    }

    /// One block per group over ordinals `first..=last`.
    pub fn single_blocks(first: usize, last: usize) -> Self {
        Self::new(first, vec![1; (last + 1).saturating_sub(first)])
    }

    pub fn validate(&self, num_convs: usize) -> Result<()> {
        if self.l0 == 0 {
            return Err(Error::InvalidPlan("l0 must be >= 1".into()));
        }
        if self.block_counts.contains(&0) {
            return Err(Error::InvalidPlan(format!(
                "block counts must be positive, got {:?}",
                self.block_counts
            )));
        }
        let total: usize = self.block_counts.iter().sum();
        if self.l0 - 1 + total > num_convs {
            return Err(Error::InvalidPlan(format!(
                "l0 = {} with {total} blocks overruns {num_convs} conv layers",
                self.l0
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        let total: usize = self.block_counts.iter().sum();
        (self.l0..self.l0 + total).collect()
    }
}

/// Conv ordinals of each group, ascending within the group.
pub fn group_layers(plan: &GroupPlan, num_convs: usize) -> Result<Vec<Vec<usize>>> {
    plan.validate(num_convs)?;
    let mut start = plan.l0;
    Ok(plan
        .block_counts
        .iter()
        .map(|&b| {
            let g: Vec<usize> = (start..start + b).collect();
            start += b;
            g
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub evolution: EvolutionConfig,
    pub finetune: FineTuneConfig,
    /// Training images used to capture the input maps of each pruned layer.
    pub calibration_size: usize,
    pub eval_path: EvalPath,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            evolution: EvolutionConfig::default(),
            finetune: FineTuneConfig::desk(),
            calibration_size: 128,
            eval_path: EvalPath::Gram,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        self.evolution.validate()?;
        self.finetune.validate()?;
        if self.calibration_size == 0 {
            return Err(Error::Config("calibration size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    /// 1-based group index in the plan.
    pub group: usize,
    /// Position in the global event order (layers and fine-tune stages).
    pub sequence: usize,
    pub filters: usize,
    pub retained: usize,
    pub retained_rate: f64,
    pub mask_hex: String,
    /// Objectives of the chosen mask on the calibration batch, when scored.
    pub objectives: Option<ObjectiveVector>,
    /// Error of a uniformly random mask with the same retained count, same context.
    pub random_mask_error: Option<f64>,
    pub knee_index: Option<usize>,
    pub front: Option<ParetoFront>,
    pub history: Vec<GenerationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub group: usize,
    pub layers: Vec<usize>,
    pub sequence: usize,
    pub params: usize,
    pub flops: u64,
    /// Test accuracy of the compacted network before fine-tuning.
    pub accuracy_before_finetune: f64,
    pub accuracy_after_finetune: f64,
    pub finetune_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: String,
    pub layers: Vec<LayerReport>,
    pub stages: Vec<StageReport>,
    pub params_before: usize,
    pub params_after: usize,
    /// Parameter count predicted from the retained counts alone.
    pub params_after_analytic: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

impl PruneReport {
    pub fn remained_params_pct(&self) -> f64 {
        100.0 * self.params_after as f64 / self.params_before as f64
    }

    /// Retained filter counts keyed by conv ordinal.
    pub fn retained_counts(&self) -> BTreeMap<usize, usize> {
        self.layers.iter().map(|l| (l.layer, l.retained)).collect()
    }

    /// Retained fractions keyed by conv ordinal.
    pub fn retained_rates(&self) -> BTreeMap<usize, f64> {
        self.layers.iter().map(|l| (l.layer, l.retained_rate)).collect()
    }
}

/// What a mask chooser sees for one block.
struct Block<'a> {
    net: &'a Network,
    layer: usize,
    calibration: &'a Tensor,
}

struct Choice {
    mask: FilterMask,
    objectives: Option<ObjectiveVector>,
    random_mask_error: Option<f64>,
    knee_index: Option<usize>,
    front: Option<ParetoFront>,
    history: Vec<GenerationStats>,
}

impl Choice {
    fn plain(mask: FilterMask) -> Self {
        Self {
            mask,
            objectives: None,
            random_mask_error: None,
            knee_index: None,
            front: None,
            history: Vec::new(),
        }
    }
}

fn input_hw(net: &Network) -> (usize, usize) {
    let [_, h, w] = net.input_shape();
    (h, w)
}

fn progressive<F>(
    net: &Network,
    data: &Dataset,
    plan: &GroupPlan,
    ft: &FineTuneConfig,
    calibration: &Tensor,
    method: &str,
    mut choose: F,
) -> Result<(Network, PruneReport)>
where
    F: FnMut(Block<'_>) -> Result<Choice>,
{
    let groups = group_layers(plan, net.num_convs())?;
    let hw = input_hw(net);
    let accuracy_before = evaluate_accuracy(net, &data.test)?;
    let mut report = PruneReport {
        method: method.to_string(),
        layers: Vec::new(),
        stages: Vec::new(),
        params_before: net.count_params(),
        params_after: net.count_params(),
        params_after_analytic: net.count_params(),
        flops_before: net.count_flops(hw)?,
        flops_after: net.count_flops(hw)?,
        accuracy_before,
        accuracy_after: accuracy_before,
    };
    let mut current = net.clone();
    let mut sequence = 0;

    for (g, layers) in groups.iter().enumerate().rev() {
        let mut masked = current.clone();
        let mut masks = BTreeMap::new();
        for &l in layers {
            let choice = choose(Block {
                net: &masked,
                layer: l,
                calibration,
            })?;
            let mask = choice.mask;
            masked = masked.apply_mask(&mask)?;
            report.layers.push(LayerReport {
                layer: l,
                group: g + 1,
                sequence,
                filters: mask.len(),
                retained: mask.retained(),
                retained_rate: mask.retained() as f64 / mask.len() as f64,
                mask_hex: mask_to_hex(&mask.bits),
                objectives: choice.objectives,
                random_mask_error: choice.random_mask_error,
                knee_index: choice.knee_index,
                front: choice.front,
                history: choice.history,
            });
            sequence += 1;
            masks.insert(l, mask);
        }
        let compacted = masked.compact(&masks)?;
        let accuracy_before_finetune = evaluate_accuracy(&compacted, &data.test)?;
        let stage_ft = FineTuneConfig {
            seed: ft.seed.wrapping_add(g as u64),
            ..ft.clone()
        };
        let (tuned, losses) = finetune(&compacted, &data.train, &stage_ft)?;
        let accuracy_after_finetune = evaluate_accuracy(&tuned, &data.test)?;
        report.stages.push(StageReport {
            group: g + 1,
            layers: layers.clone(),
            sequence,
            params: tuned.count_params(),
            flops: tuned.count_flops(hw)?,
            accuracy_before_finetune,
            accuracy_after_finetune,
            finetune_losses: losses,
        });
        sequence += 1;
        current = tuned;
    }

    report.params_after = current.count_params();
    report.params_after_analytic = net.params_with_retained(&report.retained_counts())?;
    report.flops_after = current.count_flops(hw)?;
    report.accuracy_after = report
        .stages
        .last()
        .map_or(accuracy_before, |s| s.accuracy_after_finetune);
    Ok((current, report))
}

/// Evolution config for conv `layer`: the run seed offset by the ordinal.
pub fn layer_evolution_config(evo: &EvolutionConfig, layer: usize) -> EvolutionConfig {
    EvolutionConfig {
        seed: evo.seed.wrapping_add(layer as u64),
        ..evo.clone()
    }
}

/// Scoring context for conv `layer` of `net` on `calibration`.
pub fn layer_context(net: &Network, layer: usize, calibration: &Tensor, cfg: &PruneConfig) -> Result<EvaluationContext> {
    let (_, mut maps) = net.forward(calibration, &[layer])?;
    let map_l = maps.remove(&layer).expect("captured layer");
    EvaluationContext::from_network(net, layer, map_l, cfg.evolution.alpha_mode, cfg.eval_path)
}

fn random_count_mask<R: Rng>(layer: usize, n: usize, keep: usize, rng: &mut R) -> FilterMask {
    FilterMask::from_kept(layer, n, &index::sample(rng, n, keep).into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pick {
    Knee,
    Closest(f64),
}

fn pick_index(front: &ParetoFront, pick: Pick) -> Result<usize> {
    if front.members.is_empty() {
        return Err(Error::EmptyFront);
    }
    match pick {
        Pick::Knee => {
            let pts: Vec<_> = front.members.iter().map(|m| m.objectives).collect();
            knee_index(&pts)
        }
        Pick::Closest(target) => Ok((0..front.members.len())
            .min_by(|&a, &b| {
                let (oa, ob) = (front.members[a].objectives, front.members[b].objectives);
                (oa.filter_pct - target)
                    .abs()
                    .total_cmp(&(ob.filter_pct - target).abs())
                    .then(oa.error.total_cmp(&ob.error))
                    .then(a.cmp(&b))
            })
            .expect("non-empty front")),
    }
}

fn evolve_block(block: Block<'_>, cfg: &PruneConfig, pick: Pick) -> Result<Choice> {
    let ctx = layer_context(block.net, block.layer, block.calibration, cfg)?;
    let evo = layer_evolution_config(&cfg.evolution, block.layer);
    let result = evolution::evolve(&ctx, &evo)?;
    let idx = pick_index(&result.front, pick)?;
    let chosen = &result.front.members[idx];
    let mask = FilterMask::new(block.layer, chosen.genes.clone());
    let n = ctx.num_filters();
    let mut rng = stream_rng(evo.seed, u32::MAX as u64 - 1, 0);
    let random = random_count_mask(block.layer, n, mask.retained(), &mut rng);
    let random_mask_error = ctx.evaluate_individual(&random)?.error;
    Ok(Choice {
        objectives: Some(chosen.objectives),
        random_mask_error: Some(random_mask_error),
        knee_index: Some(idx),
        front: Some(result.front.clone()),
        history: result.history,
        mask,
    })
}

/// Full group-progressive run with the knee point of every evolved layer.
pub fn smoea_prune(net: &Network, data: &Dataset, plan: &GroupPlan, cfg: &PruneConfig) -> Result<(Network, PruneReport)> {
    cfg.validate()?;
    let calibration = calibration_batch(&data.train, cfg.calibration_size, cfg.evolution.seed)?;
    progressive(net, data, plan, &cfg.finetune, &calibration, "smoea", |block| {
        evolve_block(block, cfg, Pick::Knee)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Random,
    L2,
    Fpgm,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Random => "random",
            Criterion::L2 => "l2",
            Criterion::Fpgm => "fpgm",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "rand" => Ok(Criterion::Random),
            "l2" => Ok(Criterion::L2),
            "fpgm" => Ok(Criterion::Fpgm),
            other => Err(Error::InvalidArgument(format!(
                "criterion must be random, l2 or fpgm, got '{other}'"
            ))),
        }
    }
}

/// `max(1, round(fraction * n))`.
pub fn keep_count(n: usize, retain_fraction: f64) -> Result<usize> {
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retain fraction must lie in (0, 1], got {retain_fraction}"
        )));
    }
    Ok(((retain_fraction * n as f64).round() as usize).clamp(1, n))
}

fn prune_lowest(layer: usize, scores: &[f64], keep: usize) -> FilterMask {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut bits = vec![true; scores.len()];
    for &i in &order[..scores.len() - keep] {
        bits[i] = false;
    }
    FilterMask::new(layer, bits)
}

/// Mask for conv `layer` keeping `max(1, round(fraction * n))` filters.
/// `l2` prunes the smallest weight norms; `fpgm` prunes the filters with the
/// smallest summed distance to all other filters. Ties prune the lower index.
pub fn baseline_mask<R: Rng>(
    layer: usize,
    conv: &ConvParams,
    retain_fraction: f64,
    criterion: Criterion,
    rng: &mut R,
) -> Result<FilterMask> {
    let n = conv.out_channels;
    let keep = keep_count(n, retain_fraction)?;
    Ok(match criterion {
        Criterion::Random => random_count_mask(layer, n, keep, rng),
        Criterion::L2 => {
            let norms: Vec<f64> = (0..n)
                .map(|f| conv.filter(f).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            prune_lowest(layer, &norms, keep)
        }
        Criterion::Fpgm => {
            let sums: Vec<f64> = (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| {
                            conv.filter(i)
                                .iter()
                                .zip(conv.filter(j))
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .sum()
                })
                .collect();
            prune_lowest(layer, &sums, keep)
        }
    })
}

/// Group-progressive baseline run: every layer in the plan keeps
/// `max(1, round(rates[l] * n))` filters chosen by `criterion`. A planned
/// layer missing from `rates` is an error.
pub fn baseline_prune(
    net: &Network,
    data: &Dataset,
    plan: &GroupPlan,
    criterion: Criterion,
    rates: &BTreeMap<usize, f64>,
    ft: &FineTuneConfig,
    seed: u64,
) -> Result<(Network, PruneReport)> {
    ft.validate()?;
    let placeholder = Tensor::zeros(&[1]);
    progressive(net, data, plan, ft, &placeholder, criterion.name(), |block| {
        let rate = *rates.get(&block.layer).ok_or_else(|| {
            Error::InvalidArgument(format!("no retain fraction for layer {}", block.layer))
        })?;
        let conv = block.net.conv(block.layer)?;
        let mut rng = stream_rng(seed, u32::MAX as u64 - 2, block.layer as u64);
        Ok(Choice::plain(baseline_mask(block.layer, conv, rate, criterion, &mut rng)?))
    })
}

/// Same fraction for every listed layer.
pub fn uniform_rates(layers: &[usize], fraction: f64) -> BTreeMap<usize, f64> {
    layers.iter().map(|&l| (l, fraction)).collect()
}

/// Uniform retain fraction over `layers` whose compacted parameter count is
/// closest to `target_params`, found by bisection on the fraction. Ties go
/// to the smaller network.
pub fn solve_uniform_fraction(net: &Network, layers: &[usize], target_params: usize) -> Result<f64> {
    let filters = net.filter_counts();
    let params_at = |f: f64| -> Result<usize> {
        let mut retained = BTreeMap::new();
        for &l in layers {
            let n = *filters.get(l.wrapping_sub(1)).ok_or(Error::UnknownLayer(l))?;
            retained.insert(l, keep_count(n, f)?);
        }
        net.params_with_retained(&retained)
    };
    let (mut lo, mut hi) = (1e-9, 1.0);
    if params_at(hi)? <= target_params {
        return Ok(hi);
    }
    if params_at(lo)? > target_params {
        return Ok(lo);
    }
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if params_at(mid)? <= target_params {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let below = target_params - params_at(lo)?;
    let above = params_at(hi)? - target_params;
    Ok(if above < below { hi } else { lo })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub remained_params_pct: f64,
    pub accuracy: f64,
    /// Filter fraction actually chosen per pruned layer.
    pub layer_filter_pct: BTreeMap<usize, f64>,
}

/// For each target fraction, prune every planned layer to the front member
/// whose filter fraction is closest to it (ties toward lower error), with
/// the usual group-by-group fine-tuning. A fraction of 1 means no pruning.
pub fn sweep_uniform_retention(
    net: &Network,
    data: &Dataset,
    plan: &GroupPlan,
    fractions: &[f64],
    cfg: &PruneConfig,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    plan.validate(net.num_convs())?;
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "sweep fractions must lie in (0, 1], got {f}"
        )));
    }
    let calibration = calibration_batch(&data.train, cfg.calibration_size, cfg.evolution.seed)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if fraction >= 1.0 {
            rows.push(SweepRow {
                fraction,
                remained_params_pct: 100.0,
                accuracy: evaluate_accuracy(net, &data.test)?,
                layer_filter_pct: plan.layers().into_iter().map(|l| (l, 1.0)).collect(),
            });
            continue;
        }
        let (_, report) = progressive(net, data, plan, &cfg.finetune, &calibration, "sweep", |block| {
            evolve_block(block, cfg, Pick::Closest(fraction))
        })?;
        rows.push(SweepRow {
            fraction,
            remained_params_pct: report.remained_params_pct(),
            accuracy: report.accuracy_after,
            layer_filter_pct: report.retained_rates(),
        });
    }
    Ok(rows)
}
