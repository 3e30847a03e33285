//! Dense row-major `f64` tensors and the forward/backward kernels the
//! pruning pipeline needs: convolution, ReLU, 2x2 max-pooling, dense
//! layers, softmax cross-entropy, and momentum SGD.
//!
//! Convolution is cross-correlation (no kernel flip). Every kernel is a
//! pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies samples `indices` along the leading axis into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.shape[0];
        let stride = self.data.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(Error::InvalidShape(format!(
                    "row {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    fn dims4(&self, what: &str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::InvalidShape(format!(
                "{what} must be 4-D, got {:?}",
                self.shape
            ))),
        }
    }

    fn dims2(&self, what: &str) -> Result<[usize; 2]> {
        match *self.shape.as_slice() {
            [a, b] => Ok([a, b]),
            _ => Err(Error::InvalidShape(format!(
                "{what} must be 2-D, got {:?}",
                self.shape
            ))),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::InvalidShape(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Convolution layer parameters. Weights are `[out, in, kh, kw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [out_channels, in_channels, kernel_h, kernel_w] = weights.dims4("conv weights")?;
        if bias.shape() != [out_channels] {
            return Err(Error::InvalidShape(format!(
                "conv bias shape {:?}, expected [{out_channels}]",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidGeometry("stride must be >= 1".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            bias,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self::new(
            Tensor::zeros(&[out_ch, in_ch, k, k]),
            Tensor::zeros(&[out_ch]),
            stride,
            padding,
        )
        .expect("consistent zero conv")
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            out_dim(h, self.kernel_h, self.stride, self.padding)?,
            out_dim(w, self.kernel_w, self.stride, self.padding)?,
        ))
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn filter_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Flattened weight slice of output filter `f`.
    pub fn filter(&self, f: usize) -> &[f64] {
        let len = self.filter_len();
        &self.weights.data()[f * len..(f + 1) * len]
    }
}

fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::InvalidGeometry(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::InvalidGeometry(format!(
            "input {input} with kernel {kernel}, pad {pad}, stride {stride} gives a fractional output size"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output positions `o` in `0..out` whose input index `o*stride + k - pad` lies in `0..input`.
#[inline]
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k {
        ((input - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let [n, cin, h, w] = input.dims4("conv input")?;
    if cin != params.in_channels {
        return Err(Error::InvalidShape(format!(
            "conv expects {} input channels, got {cin}",
            params.in_channels
        )));
    }
    let (oh, ow) = params.output_hw(h, w)?;
    let cout = params.out_channels;
    let (kh_n, kw_n, s, p) = (params.kernel_h, params.kernel_w, params.stride, params.padding);
    let wdata = params.weights.data();
    let x = input.data();
    let mut out = vec![0.0; n * cout * oh * ow];

    for b in 0..n {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            plane.fill(params.bias.data()[co]);
            for ci in 0..cin {
                let in_plane = &x[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                for kh in 0..kh_n {
                    let (oy_lo, oy_hi) = valid_range(oh, h, kh, s, p);
                    for kw in 0..kw_n {
                        let wv = wdata[((co * cin + ci) * kh_n + kh) * kw_n + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(ow, w, kw, s, p);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + kh - p;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let off = ox_lo + kw - p;
                                let len = ox_hi - ox_lo;
                                for (o, i) in out_row[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&in_row[off..off + len])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox * s + kw - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let [n, cin, h, w] = input.dims4("conv input")?;
    if cin != params.in_channels {
        return Err(Error::InvalidShape(format!(
            "conv expects {} input channels, got {cin}",
            params.in_channels
        )));
    }
    let (oh, ow) = params.output_hw(h, w)?;
    let cout = params.out_channels;
    if grad_out.shape() != [n, cout, oh, ow] {
        return Err(Error::InvalidShape(format!(
            "conv grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [n, cout, oh, ow]
        )));
    }
    let (kh_n, kw_n, s, p) = (params.kernel_h, params.kernel_w, params.stride, params.padding);
    let wdata = params.weights.data();
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wdata.len()];
    let mut gb = vec![0.0; cout];

    for b in 0..n {
        for co in 0..cout {
            let gplane = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            gb[co] += gplane.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (b * cin + ci) * h * w;
                for kh in 0..kh_n {
                    let (oy_lo, oy_hi) = valid_range(oh, h, kh, s, p);
                    for kw in 0..kw_n {
                        let widx = ((co * cin + ci) * kh_n + kh) * kw_n + kw;
                        let wv = wdata[widx];
                        let (ox_lo, ox_hi) = valid_range(ow, w, kw, s, p);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + kh - p;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let row_base = base + iy * w;
                            for ox in ox_lo..ox_hi {
                                let ix = row_base + ox * s + kw - p;
                                acc += grow[ox] * x[ix];
                                gx[ix] += wv * grow[ox];
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(params.weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient passes only where the input is strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(input, grad_out)?;
    Ok(Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Flat input index of the selected maximum for every pooled output.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = input.dims4("maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidGeometry(format!(
            "2x2 max-pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                // row-major scan, strict > keeps the first maximum
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::InvalidShape(format!(
            "max-pool grad_out has {} values, expected {}",
            grad_out.len(),
            indices.argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(&indices.input_shape);
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.data()) {
        gx.data[idx] += g;
    }
    Ok(gx)
}

/// Fully-connected layer: weights `[in, out]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let [_, o] = weights.dims2("dense weights")?;
        if bias.shape() != [o] {
            return Err(Error::InvalidShape(format!(
                "dense bias shape {:?}, expected [{o}]",
                bias.shape()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

pub fn dense_forward(input: &Tensor, params: &DenseParams) -> Result<Tensor> {
    let [n, d] = input.dims2("dense input")?;
    let (din, o) = (params.in_features(), params.out_features());
    if d != din {
        return Err(Error::InvalidShape(format!(
            "dense expects {din} inputs, got {d}"
        )));
    }
    let w = params.weights.data();
    let mut out = Vec::with_capacity(n * o);
    for row in input.data().chunks_exact(d) {
        let mut acc = params.bias.data().to_vec();
        for (i, &xi) in row.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&w[i * o..(i + 1) * o]) {
                *a += xi * wv;
            }
        }
        out.extend(acc);
    }
    Tensor::new(vec![n, o], out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, params: &DenseParams, grad_out: &Tensor) -> Result<DenseGrads> {
    let [n, d] = input.dims2("dense input")?;
    let (din, o) = (params.in_features(), params.out_features());
    if d != din || grad_out.shape() != [n, o] {
        return Err(Error::InvalidShape(format!(
            "dense backward: input {:?}, grad_out {:?}, weights {:?}",
            input.shape(),
            grad_out.shape(),
            params.weights.shape()
        )));
    }
    let w = params.weights.data();
    let mut gx = vec![0.0; n * d];
    let mut gw = vec![0.0; d * o];
    let mut gb = vec![0.0; o];
    for b in 0..n {
        let x = &input.data()[b * d..(b + 1) * d];
        let g = &grad_out.data()[b * o..(b + 1) * o];
        for (acc, &gv) in gb.iter_mut().zip(g) {
            *acc += gv;
        }
        for i in 0..d {
            let wrow = &w[i * o..(i + 1) * o];
            gx[b * d + i] = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
            let xi = x[i];
            for (acc, &gv) in gw[i * o..(i + 1) * o].iter_mut().zip(g) {
                *acc += xi * gv;
            }
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, d], gx)?,
        weights: Tensor::new(vec![d, o], gw)?,
        bias: Tensor::new(vec![o], gb)?,
    })
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, c] = logits.dims2("logits")?;
    if labels.len() != n {
        return Err(Error::InvalidShape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(Error::InvalidLabel { label, classes: c });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push((p - target) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, c], grad)?))
}

/// In-place momentum SGD step: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

pub fn frobenius_norm(t: &Tensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn inner_product(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(dot(&a.data, &b.data))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let [n, cin, h, w] = x.dims4("x").unwrap();
        let (oh, ow) = p.output_hw(h, w).unwrap();
        let mut out = Tensor::zeros(&[n, p.out_channels, oh, ow]);
        for b in 0..n {
            for co in 0..p.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[co];
                        for ci in 0..cin {
                            for ky in 0..p.kernel_h {
                                for kx in 0..p.kernel_w {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = p.weights.data()
                                        [((co * cin + ci) * p.kernel_h + ky) * p.kernel_w + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((b * p.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let p = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn full_window_sum() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = ConvParams::new(Tensor::full(&[1, 1, 2, 2], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad, k, h) in &[(1, 1, 3, 8), (2, 1, 3, 9), (1, 0, 2, 5), (2, 2, 3, 7), (3, 0, 1, 7)] {
            let x = random(&[2, 3, h, h], &mut rng);
            let p = ConvParams::new(random(&[4, 3, k, k], &mut rng), random(&[4], &mut rng), stride, pad)
                .unwrap();
            let fast = conv2d_forward(&x, &p).unwrap();
            let slow = naive_conv(&x, &p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_shape_and_geometry_errors() {
        let p = ConvParams::zeros(2, 3, 3, 1, 1);
        assert!(matches!(
            conv2d_forward(&Tensor::zeros(&[1, 2, 4, 4]), &p),
            Err(Error::InvalidShape(_))
        ));
        let p = ConvParams::zeros(2, 1, 3, 2, 0);
        assert!(matches!(
            conv2d_forward(&Tensor::zeros(&[1, 1, 6, 6]), &p),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let p = ConvParams::new(random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng), 1, 1).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_grad_hits_weight() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 0.5), Tensor::zeros(&[1]), 1, 0).unwrap();
        let mut g = Tensor::zeros(&[1, 1, 2, 2]);
        g.data_mut()[3] = 1.0;
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        assert_eq!(grads.weights.data(), &[4.0]);
        assert_eq!(grads.bias.data(), &[1.0]);
        assert_eq!(grads.input.data(), &[0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn conv_backward_rejects_bad_grad_shape() {
        let p = ConvParams::zeros(2, 1, 3, 1, 1);
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(
            conv2d_backward(&x, &p, &Tensor::zeros(&[1, 2, 3, 3])),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn relu_basics() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random(&[50], &mut rng);
        assert_eq!(relu(&relu(&r)), relu(&r));
    }

    #[test]
    fn maxpool_window_and_ties() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2x2(&x).unwrap().0.data(), &[4.0]);

        let c = Tensor::full(&[1, 1, 4, 4], 2.0);
        let (y, idx) = maxpool2x2(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
        let g = maxpool2x2_backward(&idx, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let expect = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.data(), &expect);

        assert!(matches!(
            maxpool2x2(&Tensor::zeros(&[1, 1, 3, 4])),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let (y, _) = maxpool2x2(&x).unwrap();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[c * 16 + (2 * oy + dy) * 4 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(y.data()[c * 4 + oy * 2 + ox], m);
                }
            }
        }
    }

    #[test]
    fn dense_identity_and_zero_weights() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let p = DenseParams::new(eye, Tensor::zeros(&[3])).unwrap();
        assert_eq!(dense_forward(&x, &p).unwrap(), x);

        let bias = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let p = DenseParams::new(Tensor::zeros(&[3, 2]), bias).unwrap();
        assert_eq!(dense_forward(&x, &p).unwrap().data(), &[0.5, -1.0, 0.5, -1.0]);

        assert!(matches!(
            dense_forward(&Tensor::zeros(&[1, 4]), &p),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[1, 10]), &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[2] = 1000.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[10]),
            Err(Error::InvalidLabel { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn sgd_recurrence() {
        let mut p = [0.0];
        let mut v = [0.0];
        sgd_update(&mut p, &[1.0], &mut v, 0.01, 0.0);
        assert!((p[0] + 0.01).abs() < 1e-15);

        let mut p = [1.5];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.0], &mut v, 0.01, 0.9);
        assert_eq!(p[0], 1.5);

        let mut p = [0.0];
        let mut v = [0.0];
        sgd_update(&mut p, &[1.0], &mut v, 0.01, 0.9);
        sgd_update(&mut p, &[1.0], &mut v, 0.01, 0.9);
        assert!((p[0] + 0.01 * 2.9).abs() < 1e-15);
    }

    #[test]
    fn norms_and_inner_products() {
        let v = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&v), 5.0);
        assert_eq!(inner_product(&v, &v).unwrap(), 25.0);
        let e1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(inner_product(&e1, &e2).unwrap(), 0.0);
        assert!(inner_product(&e1, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let y = random(&[1, 2, 5, 5], &mut rng);
        let w1 = random(&[3, 2, 3, 3], &mut rng);
        let w2 = random(&[3, 2, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let p1 = ConvParams::new(w1.clone(), Tensor::zeros(&[3]), 1, 1).unwrap();
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv2d_forward(&mix, &p1).unwrap();
        let fx = conv2d_forward(&x, &p1).unwrap();
        let fy = conv2d_forward(&y, &p1).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs.data()[i] - (a * fx.data()[i] + b * fy.data()[i])).abs() < 1e-9);
        }
        let wmix = Tensor::from_fn(w1.shape(), |i| a * w1.data()[i] + b * w2.data()[i]);
        let pm = ConvParams::new(wmix, Tensor::zeros(&[3]), 1, 1).unwrap();
        let p2 = ConvParams::new(w2, Tensor::zeros(&[3]), 1, 1).unwrap();
        let lhs = conv2d_forward(&x, &pm).unwrap();
        let f2 = conv2d_forward(&x, &p2).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs.data()[i] - (a * fx.data()[i] + b * f2.data()[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_filter_gives_zero_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 2, 6, 6], &mut rng);
        let mut p = ConvParams::new(random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng), 1, 1).unwrap();
        let flen = 2 * 9;
        p.weights.data_mut()[flen..2 * flen].fill(0.0);
        p.bias.data_mut()[1] = 0.0;
        let y = conv2d_forward(&x, &p).unwrap();
        for b in 0..2 {
            assert!(y.data()[(b * 3 + 1) * 36..(b * 3 + 2) * 36].iter().all(|&v| v == 0.0));
        }
    }
}
