//! The two pruning objectives for one sub-network: the retained-filter
//! fraction and the intensity-compensated reconstruction error of the
//! sub-network output.
//!
//! Masked outputs are never recomputed through the first conv. Zeroing a
//! channel commutes with ReLU, max-pooling and flattening, and the second
//! layer is affine, so the masked output is the bias term plus the sum of
//! per-channel contributions of the retained channels. [`EvalPath::Gram`]
//! precomputes the Gram matrix of those contributions once per context,
//! which makes each mask evaluation `O(n^2)` in the filter count.
//! [`EvalPath::Direct`] zeroes channels of the cached first-layer output and
//! runs the tail of the sub-network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{self, FilterMask, Layer, Network, SubNetwork};
use crate::tensor::{self, ConvParams, DenseParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub filter_pct: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// Least-squares intensity per mask.
    #[default]
    Optimized,
    /// Intensity pinned to 1.
    FixedOne,
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimized" => Ok(AlphaMode::Optimized),
            "fixed-one" => Ok(AlphaMode::FixedOne),
            other => Err(Error::InvalidArgument(format!(
                "alpha mode must be 'optimized' or 'fixed-one', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPath {
    #[default]
    Gram,
    Direct,
}

/// Anything that scores a binary keep-vector with two minimized objectives.
pub trait MaskObjective: Sync {
    fn num_filters(&self) -> usize;
    fn evaluate(&self, genes: &[bool]) -> Result<ObjectiveVector>;
}

pub fn filter_pct(bits: &[bool]) -> f64 {
    bits.iter().filter(|b| **b).count() as f64 / bits.len() as f64
}

/// `argmin_a ||reference - a * approx||`, or 0 when `approx` is all zero.
pub fn optimal_alpha(reference: &Tensor, approx: &Tensor) -> Result<f64> {
    let ra = tensor::inner_product(reference, approx)?;
    let aa = tensor::inner_product(approx, approx)?;
    Ok(if aa > 0.0 { ra / aa } else { 0.0 })
}

pub fn error_at_alpha(reference: &Tensor, approx: &Tensor, alpha: f64) -> Result<f64> {
    if reference.shape() != approx.shape() {
        return Err(Error::InvalidShape(format!(
            "reference {:?} vs approximation {:?}",
            reference.shape(),
            approx.shape()
        )));
    }
    Ok(reference
        .data()
        .iter()
        .zip(approx.data())
        .map(|(r, a)| (r - alpha * a).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn reconstruction_error(reference: &Tensor, approx: &Tensor, mode: AlphaMode) -> Result<f64> {
    let alpha = match mode {
        AlphaMode::Optimized => optimal_alpha(reference, approx)?,
        AlphaMode::FixedOne => 1.0,
    };
    error_at_alpha(reference, approx, alpha)
}

/// Gram matrix of `[bias term, channel 1 contribution, ..., channel n]`.
#[derive(Debug, Clone)]
struct ChannelGram {
    n: usize,
    g: Vec<f64>,
}

impl ChannelGram {
    fn build(sub: &SubNetwork, first_out: &Tensor) -> Result<Self> {
        let mut z = first_out.clone();
        for layer in &sub.interstitial {
            z = layer.forward(&z)?;
        }
        let batch = first_out.shape()[0];
        let n = sub.num_filters();
        let span = z.len() / (batch * n);
        let dim = n + 1;
        let mut g = vec![0.0; dim * dim];

        let conv_slices = match &sub.second {
            Layer::Conv(p) => (0..n).map(|c| conv_input_slice(p, c)).collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let dense_slices = match &sub.second {
            Layer::Dense(p) => (0..n).map(|c| dense_input_slice(p, c, span)).collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };

        // per-sample rows: bias term then one row per channel
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
        for b in 0..batch {
            rows.clear();
            let sample = &z.data()[b * n * span..(b + 1) * n * span];
            match &sub.second {
                Layer::Conv(p) => {
                    let (h, w) = (z.shape()[2], z.shape()[3]);
                    let (oh, ow) = p.output_hw(h, w)?;
                    let plane = oh * ow;
                    rows.push(
                        (0..p.out_channels * plane)
                            .map(|i| p.bias.data()[i / plane])
                            .collect(),
                    );
                    for c in 0..n {
                        let x = Tensor::new(vec![1, 1, h, w], sample[c * span..(c + 1) * span].to_vec())?;
                        let out = tensor::conv2d_forward(&x, &conv_slices[c])?;
                        rows.push(out.into_data());
                    }
                }
                Layer::Dense(p) => {
                    rows.push(p.bias.data().to_vec());
                    for c in 0..n {
                        let x = Tensor::new(vec![1, span], sample[c * span..(c + 1) * span].to_vec())?;
                        let out = tensor::dense_forward(&x, &dense_slices[c])?;
                        rows.push(out.into_data());
                    }
                }
                _ => unreachable!("SubNetwork guarantees a parametric second layer"),
            }
            for i in 0..dim {
                for j in i..dim {
                    let v = tensor::dot(&rows[i], &rows[j]);
                    g[i * dim + j] += v;
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                g[i * dim + j] = g[j * dim + i];
            }
        }
        Ok(Self { n, g })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.g[i * (self.n + 1) + j]
    }

    /// Squared norms of the pruned part `D`, its inner product with the
    /// retained output `A`, and `||A||^2`.
    fn moments(&self, bits: &[bool]) -> (f64, f64, f64) {
        let kept: Vec<usize> = bits.iter().enumerate().filter_map(|(i, b)| b.then_some(i + 1)).collect();
        let pruned: Vec<usize> = bits.iter().enumerate().filter_map(|(i, b)| (!b).then_some(i + 1)).collect();
        let mut dd = 0.0;
        let mut da = 0.0;
        for &p in &pruned {
            for &q in &pruned {
                dd += self.at(p, q);
            }
            da += self.at(p, 0);
            for &k in &kept {
                da += self.at(p, k);
            }
        }
        let mut aa = self.at(0, 0);
        for &k in &kept {
            aa += 2.0 * self.at(0, k);
            for &k2 in &kept {
                aa += self.at(k, k2);
            }
        }
        (dd, da, aa)
    }
}

fn conv_input_slice(p: &ConvParams, c: usize) -> Result<ConvParams> {
    let k = p.kernel_h * p.kernel_w;
    let mut w = Vec::with_capacity(p.out_channels * k);
    for f in 0..p.out_channels {
        w.extend_from_slice(&p.filter(f)[c * k..(c + 1) * k]);
    }
    ConvParams::new(
        Tensor::new(vec![p.out_channels, 1, p.kernel_h, p.kernel_w], w)?,
        Tensor::zeros(&[p.out_channels]),
        p.stride,
        p.padding,
    )
}

fn dense_input_slice(p: &DenseParams, c: usize, span: usize) -> Result<DenseParams> {
    let o = p.out_features();
    let w = p.weights.data()[c * span * o..(c + 1) * span * o].to_vec();
    DenseParams::new(Tensor::new(vec![span, o], w)?, Tensor::zeros(&[o]))
}

/// Everything needed to score masks of one conv layer against a fixed
/// calibration batch. Immutable once built.
#[derive(Debug, Clone)]
pub struct EvaluationContext {
    sub: SubNetwork,
    map_l: Tensor,
    reference: Tensor,
    first_layer_full_output: Tensor,
    alpha_mode: AlphaMode,
    path: EvalPath,
    gram: Option<ChannelGram>,
}

impl EvaluationContext {
    pub fn new(sub: SubNetwork, map_l: Tensor, alpha_mode: AlphaMode) -> Result<Self> {
        Self::with_path(sub, map_l, alpha_mode, EvalPath::default())
    }

    pub fn with_path(sub: SubNetwork, map_l: Tensor, alpha_mode: AlphaMode, path: EvalPath) -> Result<Self> {
        let first_layer_full_output = tensor::conv2d_forward(&map_l, &sub.first)?;
        let reference = sub.forward_tail(&first_layer_full_output)?;
        let gram = match path {
            EvalPath::Gram => Some(ChannelGram::build(&sub, &first_layer_full_output)?),
            EvalPath::Direct => None,
        };
        Ok(Self {
            sub,
            map_l,
            reference,
            first_layer_full_output,
            alpha_mode,
            path,
            gram,
        })
    }

    /// Context for conv `ordinal` of `net`, with `map_l` the captured input of that layer.
    pub fn from_network(net: &Network, ordinal: usize, map_l: Tensor, alpha_mode: AlphaMode, path: EvalPath) -> Result<Self> {
        Self::with_path(net.extract_subnetwork(ordinal)?, map_l, alpha_mode, path)
    }

    pub fn sub(&self) -> &SubNetwork {
        &self.sub
    }

    pub fn map_l(&self) -> &Tensor {
        &self.map_l
    }

    pub fn reference(&self) -> &Tensor {
        &self.reference
    }

    pub fn first_layer_full_output(&self) -> &Tensor {
        &self.first_layer_full_output
    }

    pub fn alpha_mode(&self) -> AlphaMode {
        self.alpha_mode
    }

    pub fn path(&self) -> EvalPath {
        self.path
    }

    pub fn reconstruction_error(&self, approx: &Tensor) -> Result<f64> {
        reconstruction_error(&self.reference, approx, self.alpha_mode)
    }

    /// Masked sub-network output built from the cached first-layer output.
    pub fn masked_output(&self, bits: &[bool]) -> Result<Tensor> {
        let mut first = self.first_layer_full_output.clone();
        network::zero_channels(&mut first, bits);
        self.sub.forward_tail(&first)
    }

    pub fn evaluate_individual(&self, mask: &FilterMask) -> Result<ObjectiveVector> {
        mask.check(self.sub.num_filters())?;
        self.evaluate_bits(&mask.bits)
    }

    fn evaluate_bits(&self, bits: &[bool]) -> Result<ObjectiveVector> {
        let n = self.sub.num_filters();
        if bits.len() != n {
            return Err(Error::InvalidMask(format!(
                "genome has {} bits, layer {} has {n} filters",
                bits.len(),
                self.sub.ordinal
            )));
        }
        if !bits.iter().any(|b| *b) {
            return Err(Error::InfeasibleMask(self.sub.ordinal));
        }
        let error = match &self.gram {
            Some(gram) => {
                let (dd, da, aa) = gram.moments(bits);
                let sq = match self.alpha_mode {
                    AlphaMode::FixedOne => dd,
                    AlphaMode::Optimized if aa > 0.0 => dd - da * da / aa,
                    AlphaMode::Optimized => dd,
                };
                sq.max(0.0).sqrt()
            }
            None => self.reconstruction_error(&self.masked_output(bits)?)?,
        };
        Ok(ObjectiveVector {
            filter_pct: filter_pct(bits),
            error,
        })
    }
}

impl MaskObjective for EvaluationContext {
    fn num_filters(&self) -> usize {
        self.sub.num_filters()
    }

    fn evaluate(&self, genes: &[bool]) -> Result<ObjectiveVector> {
        self.evaluate_bits(genes)
    }
}
