//! Backward passes against central differences. Each check returns the worst
//! relative error over `trials` randomized shapes.

use rand::Rng;

use super::{numeric_grad, random_tensor, relative_error, rng, weighted_sum};
use smoea::network::{ArchSpec, Layer, Network};
use smoea::tensor::{self, ConvParams, DenseParams, Tensor};
use smoea::train::loss_and_grads;

const H: f64 = 1e-5;

pub fn conv(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut r = rng(100 + trial);
        let n = r.random_range(1..3);
        let cin = r.random_range(1..4);
        let cout = r.random_range(1..4);
        let k = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..2);
        // smallest size giving an integral output
        let size = (4..9)
            .find(|s| s + 2 * pad >= k && (s + 2 * pad - k) % stride == 0)
            .unwrap();
        let x = random_tensor(&[n, cin, size, size], &mut r);
        let p = ConvParams::new(random_tensor(&[cout, cin, k, k], &mut r), random_tensor(&[cout], &mut r), stride, pad)
            .unwrap();
        let w = random_tensor(tensor::conv2d_forward(&x, &p).unwrap().shape(), &mut r);
        let g = tensor::conv2d_backward(&x, &p, &w).unwrap();
        let with = |ww: &Tensor, bb: &Tensor| ConvParams::new(ww.clone(), bb.clone(), stride, pad).unwrap();

        let gx = numeric_grad(&x, H, |xx| weighted_sum(&tensor::conv2d_forward(xx, &p).unwrap(), &w));
        let gw = numeric_grad(&p.weights, H, |ww| {
            weighted_sum(&tensor::conv2d_forward(&x, &with(ww, &p.bias)).unwrap(), &w)
        });
        let gb = numeric_grad(&p.bias, H, |bb| {
            weighted_sum(&tensor::conv2d_forward(&x, &with(&p.weights, bb)).unwrap(), &w)
        });
        worst = worst
            .max(relative_error(&g.input, &gx))
            .max(relative_error(&g.weights, &gw))
            .max(relative_error(&g.bias, &gb));
    }
    worst
}

pub fn dense(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut r = rng(200 + trial);
        let (n, d, o) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..5));
        let x = random_tensor(&[n, d], &mut r);
        let p = DenseParams::new(random_tensor(&[d, o], &mut r), random_tensor(&[o], &mut r)).unwrap();
        let w = random_tensor(&[n, o], &mut r);
        let g = tensor::dense_backward(&x, &p, &w).unwrap();
        let with = |ww: &Tensor, bb: &Tensor| DenseParams::new(ww.clone(), bb.clone()).unwrap();
        let gx = numeric_grad(&x, H, |xx| weighted_sum(&tensor::dense_forward(xx, &p).unwrap(), &w));
        let gw = numeric_grad(&p.weights, H, |ww| {
            weighted_sum(&tensor::dense_forward(&x, &with(ww, &p.bias)).unwrap(), &w)
        });
        let gb = numeric_grad(&p.bias, H, |bb| {
            weighted_sum(&tensor::dense_forward(&x, &with(&p.weights, bb)).unwrap(), &w)
        });
        worst = worst
            .max(relative_error(&g.input, &gx))
            .max(relative_error(&g.weights, &gw))
            .max(relative_error(&g.bias, &gb));
    }
    worst
}

pub fn relu(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut r = rng(300 + trial);
        let shape = [r.random_range(1..3), r.random_range(1..4), 3, 3];
        // keep inputs clear of the kink so the probe never crosses it
        let x = Tensor::from_fn(&shape, |_| {
            let v: f64 = r.random_range(0.01..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let w = random_tensor(&shape, &mut r);
        let g = tensor::relu_backward(&x, &w).unwrap();
        let gx = numeric_grad(&x, H, |xx| weighted_sum(&tensor::relu(xx), &w));
        worst = worst.max(relative_error(&g, &gx));
    }
    worst
}

pub fn maxpool(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut r = rng(400 + trial);
        let shape = [r.random_range(1..3), r.random_range(1..4), 4, 6];
        // distinct values spaced well beyond the probe step
        let mut order: Vec<usize> = (0..shape.iter().product()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let x = Tensor::new(shape.to_vec(), order.iter().map(|&v| v as f64 * 0.01).collect()).unwrap();
        let (y, idx) = tensor::maxpool2x2(&x).unwrap();
        let w = random_tensor(y.shape(), &mut r);
        let g = tensor::maxpool2x2_backward(&idx, &w).unwrap();
        let gx = numeric_grad(&x, H, |xx| weighted_sum(&tensor::maxpool2x2(xx).unwrap().0, &w));
        worst = worst.max(relative_error(&g, &gx));
    }
    worst
}

pub fn cross_entropy(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut r = rng(500 + trial);
        let (n, c) = (r.random_range(1..5), r.random_range(2..6));
        let logits = random_tensor(&[n, c], &mut r).scale(3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let (_, g) = tensor::softmax_cross_entropy(&logits, &labels).unwrap();
        let gl = numeric_grad(&logits, H, |l| tensor::softmax_cross_entropy(l, &labels).unwrap().0);
        worst = worst.max(relative_error(&g, &gl));
    }
    worst
}

fn replace_params(net: &Network, layer: usize, w: &Tensor, b: &Tensor) -> Network {
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| match (i == layer, l) {
            (true, Layer::Conv(p)) => Layer::Conv(ConvParams::new(w.clone(), b.clone(), p.stride, p.padding).unwrap()),
            (true, Layer::Dense(_)) => Layer::Dense(DenseParams::new(w.clone(), b.clone()).unwrap()),
            (_, other) => other.clone(),
        })
        .collect();
    Network::new(net.input_shape(), layers).unwrap()
}

/// Whole-network backprop through conv, ReLU, pooling, flatten, dense and the loss.
pub fn network(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut r = rng(600 + trial);
        let net = ArchSpec {
            input: [2, 4, 4],
            features: "3,M,4".into(),
            classes: 3,
        }
        .build(trial)
        .unwrap();
        let batch = random_tensor(&[3, 2, 4, 4], &mut r);
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..3)).collect();
        let (_, grads) = loss_and_grads(&net, &batch, &labels).unwrap();
        let loss = |net: &Network| loss_and_grads(net, &batch, &labels).unwrap().0;
        for g in &grads {
            let (w, b) = match &net.layers()[g.layer] {
                Layer::Conv(p) => (p.weights.clone(), p.bias.clone()),
                Layer::Dense(p) => (p.weights.clone(), p.bias.clone()),
                _ => unreachable!(),
            };
            let gw = numeric_grad(&w, H, |ww| loss(&replace_params(&net, g.layer, ww, &b)));
            let gb = numeric_grad(&b, H, |bb| loss(&replace_params(&net, g.layer, &w, bb)));
            worst = worst
                .max(relative_error(&g.weights, &gw))
                .max(relative_error(&g.bias, &gb));
        }
    }
    worst
}
