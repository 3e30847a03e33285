//! Sequential CNN definition: layer list, filter masks, two-layer
//! sub-network extraction, physical compaction, and parameter/FLOPs
//! accounting.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvParams, DenseParams, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    Relu,
    MaxPool,
    Flatten,
    Dense(DenseParams),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Dense(_))
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::Conv(p) => p.num_params(),
            Layer::Dense(p) => p.num_params(),
            _ => 0,
        }
    }

    /// Forward pass without caching anything for backprop.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(p) => tensor::conv2d_forward(x, p),
            Layer::Relu => Ok(tensor::relu(x)),
            Layer::MaxPool => Ok(tensor::maxpool2x2(x)?.0),
            Layer::Flatten => flatten(x),
            Layer::Dense(p) => tensor::dense_forward(x, p),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (Layer::Conv(p), &[c, h, w]) => {
                if c != p.in_channels {
                    return Err(Error::InvalidShape(format!(
                        "conv expects {} channels, got {c}",
                        p.in_channels
                    )));
                }
                let (oh, ow) = p.output_hw(h, w)?;
                Ok(vec![p.out_channels, oh, ow])
            }
            (Layer::Relu, s) => Ok(s.to_vec()),
            (Layer::MaxPool, &[c, h, w]) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::InvalidGeometry(format!(
                        "max-pool on odd geometry {h}x{w}"
                    )));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            (Layer::Flatten, s) => Ok(vec![s.iter().product()]),
            (Layer::Dense(p), &[d]) => {
                if d != p.in_features() {
                    return Err(Error::InvalidShape(format!(
                        "dense expects {} inputs, got {d}",
                        p.in_features()
                    )));
                }
                Ok(vec![p.out_features()])
            }
            (layer, s) => Err(Error::InvalidShape(format!(
                "{} cannot consume per-sample shape {s:?}",
                layer.kind()
            ))),
        }
    }
}

pub(crate) fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let d = x.len() / n;
    x.clone().reshape(vec![n, d])
}

/// Binary keep-vector over the filters of conv layer `layer` (1-based ordinal).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterMask {
    pub layer: usize,
    pub bits: Vec<bool>,
}

impl FilterMask {
    pub fn new(layer: usize, bits: Vec<bool>) -> Self {
        Self { layer, bits }
    }

    pub fn full(layer: usize, n: usize) -> Self {
        Self::new(layer, vec![true; n])
    }

    pub fn from_kept(layer: usize, n: usize, kept: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &k in kept {
            bits[k] = true;
        }
        Self::new(layer, bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn retained(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        kept_indices(&self.bits)
    }

    pub fn check(&self, num_filters: usize) -> Result<()> {
        if self.bits.len() != num_filters {
            return Err(Error::InvalidMask(format!(
                "mask for layer {} has {} bits, layer has {num_filters} filters",
                self.layer,
                self.bits.len()
            )));
        }
        if self.retained() == 0 {
            return Err(Error::InfeasibleMask(self.layer));
        }
        Ok(())
    }
}

pub(crate) fn kept_indices(bits: &[bool]) -> Vec<usize> {
    bits.iter()
        .enumerate()
        .filter_map(|(i, b)| b.then_some(i))
        .collect()
}

/// Packs bits little-endian (bit `i` is bit `i % 8` of byte `i / 8`) and hex-encodes.
pub fn mask_to_hex(bits: &[bool]) -> String {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    hex::encode(bytes)
}

pub fn mask_from_hex(text: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = hex::decode(text).map_err(|e| Error::CorruptData(format!("mask hex '{text}': {e}")))?;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::CorruptData(format!(
            "mask hex '{text}' has wrong length for {len} bits"
        )));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

/// Conv layer `l`, the non-parametric layers after it, and the next
/// parametric layer (conv or dense).
#[derive(Debug, Clone)]
pub struct SubNetwork {
    pub ordinal: usize,
    pub first: ConvParams,
    pub interstitial: Vec<Layer>,
    pub second: Layer,
}

impl SubNetwork {
    pub fn new(ordinal: usize, first: ConvParams, interstitial: Vec<Layer>, second: Layer) -> Result<Self> {
        if interstitial.iter().any(Layer::is_parametric) {
            return Err(Error::InvalidArgument(
                "sub-network interstitial layers must be non-parametric".into(),
            ));
        }
        if !second.is_parametric() {
            return Err(Error::InvalidArgument(
                "sub-network second layer must be conv or dense".into(),
            ));
        }
        Ok(Self {
            ordinal,
            first,
            interstitial,
            second,
        })
    }

    pub fn num_filters(&self) -> usize {
        self.first.out_channels
    }

    /// Interstitial layers and then the second layer.
    pub fn forward_tail(&self, first_out: &Tensor) -> Result<Tensor> {
        let mut x = first_out.clone();
        for layer in &self.interstitial {
            x = layer.forward(&x)?;
        }
        self.second.forward(&x)
    }
}

/// Unmasked sub-network output, or the output with conv `first` masked.
pub fn subnetwork_forward(sub: &SubNetwork, map_l: &Tensor, mask: Option<&FilterMask>) -> Result<Tensor> {
    let first = match mask {
        None => tensor::conv2d_forward(map_l, &sub.first)?,
        Some(m) => {
            m.check(sub.first.out_channels)?;
            tensor::conv2d_forward(map_l, &masked_conv(&sub.first, &m.bits))?
        }
    };
    sub.forward_tail(&first)
}

fn masked_conv(p: &ConvParams, bits: &[bool]) -> ConvParams {
    let mut out = p.clone();
    let flen = p.in_channels * p.kernel_h * p.kernel_w;
    for (f, &keep) in bits.iter().enumerate() {
        if !keep {
            out.weights.data_mut()[f * flen..(f + 1) * flen].fill(0.0);
            out.bias.data_mut()[f] = 0.0;
        }
    }
    out
}

/// Zeroes the listed channels of a `[N, C, ...]` tensor in place.
pub fn zero_channels(t: &mut Tensor, bits: &[bool]) {
    let n = t.shape()[0];
    let c = t.shape()[1];
    debug_assert_eq!(c, bits.len());
    let per = t.len() / (n * c);
    let data = t.data_mut();
    for b in 0..n {
        for (ch, &keep) in bits.iter().enumerate() {
            if !keep {
                let start = (b * c + ch) * per;
                data[start..start + per].fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            input_shape,
            layers,
        };
        net.layer_input_shapes()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Per-sample input shape of every layer, followed by the output shape.
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> usize {
        self.layer_input_shapes()
            .ok()
            .and_then(|s| s.last().map(|v| v.iter().product()))
            .unwrap_or(0)
    }

    /// Layer-list positions of the conv layers; ordinal `l` is `positions[l - 1]`.
    pub fn conv_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv(_)).then_some(i))
            .collect()
    }

    pub fn num_convs(&self) -> usize {
        self.conv_positions().len()
    }

    pub fn conv_position(&self, ordinal: usize) -> Result<usize> {
        let pos = self.conv_positions();
        if ordinal == 0 || ordinal > pos.len() {
            return Err(Error::UnknownLayer(ordinal));
        }
        Ok(pos[ordinal - 1])
    }

    pub fn conv(&self, ordinal: usize) -> Result<&ConvParams> {
        match &self.layers[self.conv_position(ordinal)?] {
            Layer::Conv(p) => Ok(p),
            _ => unreachable!("conv_position returns conv layers"),
        }
    }

    pub fn filter_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(p) => Some(p.out_channels),
                _ => None,
            })
            .collect()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::InvalidShape(format!(
                "batch shape {s:?} does not match network input {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, &[])?.0)
    }

    /// Full forward pass, recording the tensor entering each conv ordinal in `capture`.
    pub fn forward(&self, batch: &Tensor, capture: &[usize]) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        self.check_batch(batch)?;
        let positions = self.conv_positions();
        let mut wanted = BTreeMap::new();
        for &l in capture {
            if l == 0 || l > positions.len() {
                return Err(Error::UnknownLayer(l));
            }
            wanted.insert(positions[l - 1], l);
        }
        let mut captured = BTreeMap::new();
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(&l) = wanted.get(&i) {
                captured.insert(l, x.clone());
            }
            x = layer.forward(&x)?;
        }
        Ok((x, captured))
    }

    /// Copy with filters of conv `mask.layer` zeroed (weights and bias) where bits are 0.
    pub fn apply_mask(&self, mask: &FilterMask) -> Result<Network> {
        let pos = self.conv_position(mask.layer)?;
        let mut out = self.clone();
        if let Layer::Conv(p) = &mut out.layers[pos] {
            mask.check(p.out_channels)?;
            *p = masked_conv(p, &mask.bits);
        }
        Ok(out)
    }

    /// Next parametric layer after `pos`, and the non-parametric ones in between.
    fn next_parametric(&self, pos: usize) -> Option<(usize, Vec<Layer>)> {
        let mut between = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().skip(pos + 1) {
            if layer.is_parametric() {
                return Some((i, between));
            }
            between.push(layer.clone());
        }
        None
    }

    pub fn extract_subnetwork(&self, ordinal: usize) -> Result<SubNetwork> {
        let pos = self.conv_position(ordinal)?;
        let first = self.conv(ordinal)?.clone();
        let (next, between) = self.next_parametric(pos).ok_or_else(|| {
            Error::InvalidArgument(format!("conv {ordinal} has no following parametric layer"))
        })?;
        SubNetwork::new(ordinal, first, between, self.layers[next].clone())
    }

    /// Physically removes pruned filters and the input slices they feed.
    pub fn compact(&self, masks: &BTreeMap<usize, FilterMask>) -> Result<Network> {
        let positions = self.conv_positions();
        let mut keep_out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&l, mask) in masks {
            if mask.layer != l {
                return Err(Error::InvalidMask(format!(
                    "mask keyed {l} targets layer {}",
                    mask.layer
                )));
            }
            let p = self.conv(l)?;
            mask.check(p.out_channels)?;
            keep_out.insert(positions[l - 1], mask.kept_indices());
        }

        let mut layers = Vec::with_capacity(self.layers.len());
        // channels kept from the most recent conv output, if it was pruned
        let mut pending: Option<(usize, Vec<usize>)> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(p) => {
                    let mut p = p.clone();
                    if let Some((total, kept)) = pending.take() {
                        p = keep_conv_inputs(&p, total, &kept)?;
                    }
                    if let Some(kept) = keep_out.get(&i) {
                        pending = Some((p.out_channels, kept.clone()));
                        p = keep_conv_outputs(&p, kept)?;
                    }
                    layers.push(Layer::Conv(p));
                }
                Layer::Dense(d) => {
                    let mut d = d.clone();
                    if let Some((total, kept)) = pending.take() {
                        d = keep_dense_inputs(&d, total, &kept)?;
                    }
                    layers.push(Layer::Dense(d));
                }
                other => layers.push(other.clone()),
            }
        }
        Network::new(self.input_shape, layers)
    }

    pub fn count_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Multiply-accumulates counted as two operations; biases and
    /// non-parametric layers are not counted.
    pub fn count_flops(&self, input_hw: (usize, usize)) -> Result<u64> {
        let mut shape = vec![self.input_shape[0], input_hw.0, input_hw.1];
        let mut flops = 0u64;
        for layer in &self.layers {
            let next = layer.output_shape(&shape)?;
            match layer {
                Layer::Conv(p) => {
                    flops += 2
                        * (p.in_channels * p.kernel_h * p.kernel_w * p.out_channels) as u64
                        * (next[1] * next[2]) as u64;
                }
                Layer::Dense(p) => flops += 2 * (p.in_features() * p.out_features()) as u64,
                _ => {}
            }
            shape = next;
        }
        Ok(flops)
    }

    /// Parameter count after compaction with the given retained filter
    /// counts, derived from the layer geometry alone.
    pub fn params_with_retained(&self, retained: &BTreeMap<usize, usize>) -> Result<usize> {
        let shapes = self.layer_input_shapes()?;
        let mut ordinal = 0;
        let mut channels_in = self.input_shape[0];
        let mut total = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(p) => {
                    ordinal += 1;
                    let out = retained.get(&ordinal).copied().unwrap_or(p.out_channels);
                    if out == 0 || out > p.out_channels {
                        return Err(Error::InvalidMask(format!(
                            "retained count {out} for layer {ordinal} with {} filters",
                            p.out_channels
                        )));
                    }
                    total += channels_in * p.kernel_h * p.kernel_w * out + out;
                    channels_in = out;
                }
                Layer::Flatten => {
                    let spatial: usize = shapes[i].iter().skip(1).product();
                    channels_in *= spatial.max(1);
                }
                Layer::Dense(p) => {
                    total += channels_in * p.out_features() + p.out_features();
                    channels_in = p.out_features();
                }
                _ => {}
            }
        }
        Ok(total)
    }
}

fn keep_conv_outputs(p: &ConvParams, kept: &[usize]) -> Result<ConvParams> {
    let flen = p.in_channels * p.kernel_h * p.kernel_w;
    let mut w = Vec::with_capacity(kept.len() * flen);
    let mut b = Vec::with_capacity(kept.len());
    for &f in kept {
        w.extend_from_slice(p.filter(f));
        b.push(p.bias.data()[f]);
    }
    ConvParams::new(
        Tensor::new(vec![kept.len(), p.in_channels, p.kernel_h, p.kernel_w], w)?,
        Tensor::new(vec![kept.len()], b)?,
        p.stride,
        p.padding,
    )
}

fn keep_conv_inputs(p: &ConvParams, total: usize, kept: &[usize]) -> Result<ConvParams> {
    if p.in_channels != total {
        return Err(Error::InvalidMask(format!(
            "conv consumes {} channels but producer had {total}",
            p.in_channels
        )));
    }
    let k = p.kernel_h * p.kernel_w;
    let mut w = Vec::with_capacity(p.out_channels * kept.len() * k);
    for f in 0..p.out_channels {
        let filt = p.filter(f);
        for &c in kept {
            w.extend_from_slice(&filt[c * k..(c + 1) * k]);
        }
    }
    ConvParams::new(
        Tensor::new(vec![p.out_channels, kept.len(), p.kernel_h, p.kernel_w], w)?,
        p.bias.clone(),
        p.stride,
        p.padding,
    )
}

fn keep_dense_inputs(d: &DenseParams, total: usize, kept: &[usize]) -> Result<DenseParams> {
    let din = d.in_features();
    if !din.is_multiple_of(total) {
        return Err(Error::InvalidMask(format!(
            "dense input width {din} is not a multiple of {total} channels"
        )));
    }
    let span = din / total;
    let o = d.out_features();
    let mut w = Vec::with_capacity(kept.len() * span * o);
    for &c in kept {
        w.extend_from_slice(&d.weights.data()[c * span * o..(c + 1) * span * o]);
    }
    DenseParams::new(
        Tensor::new(vec![kept.len() * span, o], w)?,
        d.bias.clone(),
    )
}

/// A compact description of a plain VGG-style network: conv widths and
/// `M` pooling markers, followed by flatten and one dense classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: [usize; 3],
    pub features: String,
    pub classes: usize,
}

impl ArchSpec {
    pub fn vgg14() -> Self {
        Self {
            input: [3, 32, 32],
            features: "64,64,M,128,128,M,256,256,256,M,512,512,512,M,512,512,512,M".into(),
            classes: 10,
        }
    }

    /// Four 3x3 conv layers of 8-16 filters with two pooling stages.
    pub fn toy(input: [usize; 3], classes: usize) -> Self {
        Self {
            input,
            features: "8,16,M,16,16,M".into(),
            classes,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut channels = self.input[0];
        for item in self.features.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item.eq_ignore_ascii_case("m") {
                layers.push(Layer::MaxPool);
                continue;
            }
            let out: usize = item
                .parse()
                .map_err(|_| Error::Config(format!("bad architecture item '{item}'")))?;
            if out == 0 {
                return Err(Error::Config("conv width must be positive".into()));
            }
            let w = he_normal(&[out, channels, 3, 3], channels * 9, &mut rng);
            layers.push(Layer::Conv(ConvParams::new(w, Tensor::zeros(&[out]), 1, 1)?));
            layers.push(Layer::Relu);
            channels = out;
        }
        layers.push(Layer::Flatten);
        let probe = Network::new(self.input, layers.clone())?;
        let flat = probe
            .layer_input_shapes()?
            .last()
            .map(|s| s.iter().product())
            .unwrap_or(0);
        let w = he_normal(&[flat, self.classes], flat, &mut rng);
        layers.push(Layer::Dense(DenseParams::new(w, Tensor::zeros(&[self.classes]))?));
        Network::new(self.input, layers)
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// VGG-16 conv backbone with a single 512 -> 10 classifier, He-initialised.
pub fn build_vgg14(seed: u64) -> Network {
    ArchSpec::vgg14().build(seed).expect("VGG-14 geometry is valid")
}
