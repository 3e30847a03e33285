//! Backpropagation through a [`Network`], momentum-SGD fine-tuning with a
//! step learning-rate schedule, and top-1 accuracy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::evolution::stream_rng;
use crate::network::{flatten, Layer, Network};
use crate::parallel;
use crate::tensor::{self, PoolIndices, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Epochs (0-based) at which the learning rate is divided by 10.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FineTuneConfig {
    /// Short schedule for small networks and tests.
    pub fn desk() -> Self {
        Self {
            lr: 0.01,
            epochs: 8,
            milestones: vec![4, 6],
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    /// 160 epochs, lr 0.01 divided by 10 at epochs 50 and 100.
    pub fn full() -> Self {
        Self {
            epochs: 160,
            milestones: vec![50, 100],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1])
            || self.milestones.last().is_some_and(|&m| m >= self.epochs.max(1))
        {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly increasing and below {} epochs",
                self.milestones, self.epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

enum Cache {
    Input(Tensor),
    Pool(PoolIndices),
    Shape(Vec<usize>),
}

fn forward_cached(net: &Network, x: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(net.layers().len());
    let mut x = x.clone();
    for layer in net.layers() {
        let next = match layer {
            Layer::MaxPool => {
                let (y, idx) = tensor::maxpool2x2(&x)?;
                caches.push(Cache::Pool(idx));
                y
            }
            Layer::Flatten => {
                caches.push(Cache::Shape(x.shape().to_vec()));
                flatten(&x)?
            }
            other => {
                let y = other.forward(&x)?;
                caches.push(Cache::Input(x));
                y
            }
        };
        x = next;
    }
    Ok((x, caches))
}

/// Gradients of one parametric layer, in layer-list order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layer: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Mean cross-entropy on `(batch, labels)` and its gradient for every
/// parametric layer.
pub fn loss_and_grads(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<ParamGrads>)> {
    let (logits, caches) = forward_cached(net, batch)?;
    let (loss, mut g) = tensor::softmax_cross_entropy(&logits, labels)?;
    let mut grads = Vec::new();
    for (i, (layer, cache)) in net.layers().iter().zip(&caches).enumerate().rev() {
        g = match (layer, cache) {
            (Layer::Conv(p), Cache::Input(x)) => {
                let cg = tensor::conv2d_backward(x, p, &g)?;
                grads.push(ParamGrads {
                    layer: i,
                    weights: cg.weights,
                    bias: cg.bias,
                });
                cg.input
            }
            (Layer::Dense(p), Cache::Input(x)) => {
                let dg = tensor::dense_backward(x, p, &g)?;
                grads.push(ParamGrads {
                    layer: i,
                    weights: dg.weights,
                    bias: dg.bias,
                });
                dg.input
            }
            (Layer::Relu, Cache::Input(x)) => tensor::relu_backward(x, &g)?,
            (Layer::MaxPool, Cache::Pool(idx)) => tensor::maxpool2x2_backward(idx, &g)?,
            (Layer::Flatten, Cache::Shape(s)) => g.reshape(s.clone())?,
            _ => unreachable!("cache kind matches layer kind"),
        };
    }
    grads.reverse();
    Ok((loss, grads))
}

struct Velocity {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Trains `net` in place; returns the mean training loss of each epoch.
pub fn train_in_place(net: &mut Network, data: &LabeledSet, cfg: &FineTuneConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidData("empty training set".into()));
    }
    let mut velocity: Vec<Option<Velocity>> = net
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv(p) => Some(Velocity {
                weights: vec![0.0; p.weights.len()],
                bias: vec![0.0; p.bias.len()],
            }),
            Layer::Dense(p) => Some(Velocity {
                weights: vec![0.0; p.weights.len()],
                bias: vec![0.0; p.bias.len()],
            }),
            _ => None,
        })
        .collect();

    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, u32::MAX as u64, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.images.select_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads) = loss_and_grads(net, &batch, &labels)?;
            total += loss * chunk.len() as f64;
            for g in grads {
                let v = velocity[g.layer].as_mut().expect("parametric layer");
                let (w, b) = match &mut net.layers_mut()[g.layer] {
                    Layer::Conv(p) => (&mut p.weights, &mut p.bias),
                    Layer::Dense(p) => (&mut p.weights, &mut p.bias),
                    _ => unreachable!("grads only for parametric layers"),
                };
                let mut gw = g.weights.into_data();
                if cfg.weight_decay > 0.0 {
                    for (gv, wv) in gw.iter_mut().zip(w.data()) {
                        *gv += cfg.weight_decay * wv;
                    }
                }
                tensor::sgd_update(w.data_mut(), &gw, &mut v.weights, lr, cfg.momentum);
                tensor::sgd_update(b.data_mut(), g.bias.data(), &mut v.bias, lr, cfg.momentum);
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::InvalidData(format!("training diverged at epoch {epoch}")));
        }
        losses.push(mean);
    }
    Ok(losses)
}

/// Fine-tuned copy of `net` plus per-epoch training losses.
pub fn finetune(net: &Network, data: &LabeledSet, cfg: &FineTuneConfig) -> Result<(Network, Vec<f64>)> {
    let mut out = net.clone();
    let losses = train_in_place(&mut out, data, cfg)?;
    Ok((out, losses))
}

const EVAL_CHUNK: usize = 64;

/// Top-1 accuracy; ties in the logits resolve to the lowest class index.
pub fn evaluate_accuracy(net: &Network, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidData("empty evaluation split".into()));
    }
    let starts: Vec<usize> = (0..set.len()).step_by(EVAL_CHUNK).collect();
    let counts = parallel::map_indexed(&starts, |_, &s| -> Result<usize> {
        let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(set.len())).collect();
        let logits = net.logits(&set.images.select_rows(&idx)?)?;
        let c = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(c)
            .zip(&idx)
            .filter(|(row, &i)| argmax(row) == set.labels[i])
            .count())
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / set.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticParams};
    use crate::network::ArchSpec;
    use crate::tensor::DenseParams;

    #[test]
    fn schedule_steps_down() {
        let cfg = FineTuneConfig::full();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert!((cfg.lr_at(49) - 0.01).abs() < 1e-18);
        assert!((cfg.lr_at(50) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(99) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(100) - 0.0001).abs() < 1e-15);
        assert!((cfg.lr_at(159) - 0.0001).abs() < 1e-15);
        assert!(cfg.validate().is_ok());
        let bad = FineTuneConfig {
            milestones: vec![5, 3],
            ..FineTuneConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let d = generate_synthetic(&SyntheticParams {
            train_per_class: 2,
            test_per_class: 1,
            height: 8,
            width: 8,
            ..Default::default()
        })
        .unwrap();
        let net = ArchSpec::toy([3, 8, 8], 10).build(0).unwrap();
        let cfg = FineTuneConfig {
            epochs: 0,
            milestones: vec![],
            ..FineTuneConfig::desk()
        };
        let (out, losses) = finetune(&net, &d.train, &cfg).unwrap();
        assert_eq!(out, net);
        assert!(losses.is_empty());
    }

    #[test]
    fn constant_logits_give_chance_accuracy() {
        let net = Network::new(
            [1, 2, 2],
            vec![
                Layer::Flatten,
                Layer::Dense(DenseParams::new(Tensor::zeros(&[4, 10]), Tensor::zeros(&[10])).unwrap()),
            ],
        )
        .unwrap();
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let set = LabeledSet::new(Tensor::zeros(&[100, 1, 2, 2]), labels).unwrap();
        assert!((evaluate_accuracy(&net, &set).unwrap() - 0.1).abs() < 1e-12);
        let empty_err = LabeledSet {
            images: Tensor::zeros(&[1, 1, 2, 2]),
            labels: vec![],
        };
        assert!(matches!(evaluate_accuracy(&net, &empty_err), Err(Error::InvalidData(_))));
    }
}
