use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{NasError, Result};
use crate::supernet::{ArchParams, ForwardCtx, Mixing, Network};
use crate::tensor::{scaled_milestones, Sgd, SgdConfig, Tape, Tensor};

/// Optimization recipe for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 16, lr: 0.1, momentum: 0.9, weight_decay: 6e-4 }
    }
}

impl TrainConfig {
    /// Nesterov SGD with the step schedule stretched to `epochs`.
    pub fn optimizer(&self) -> Sgd<f32> {
        Sgd::new(SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            nesterov: true,
            weight_decay: self.weight_decay,
            milestones: scaled_milestones(self.epochs),
            gamma: 0.1,
        })
    }
}

/// Module selection used while training.
#[derive(Clone, Copy, Debug)]
pub enum TrainMixing<'a> {
    /// A fixed network's own selection.
    Fixed,
    /// Weighted mixture of all modules.
    Continuous(&'a ArchParams),
    /// One module per layer, redrawn for every minibatch.
    Sampled(&'a ArchParams),
}

/// One shuffled pass of minibatch SGD over `indices`. Returns the mean
/// per-sample loss.
pub fn train_epoch(
    net: &mut Network<f32>,
    data: &Dataset,
    indices: &[usize],
    mixing: TrainMixing<'_>,
    opt: &mut Sgd<f32>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(NasError::Data("no training samples".into()));
    }
    if batch_size == 0 {
        return Err(NasError::Config("batch size must be positive".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let (x, y) = data.batch(chunk);
        let choices;
        let mix = match mixing {
            TrainMixing::Fixed => Mixing::Fixed,
            TrainMixing::Continuous(a) => Mixing::Continuous(a),
            TrainMixing::Sampled(a) => {
                choices = a.sample_modules(rng)?;
                Mixing::Sampled(&choices)
            }
        };
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::train();
        let logits = net.forward(&mut tape, &x, &mix, &mut ctx)?;
        let loss = tape.cross_entropy(logits, &y)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(NasError::Numerical(format!("training loss became {value}")));
        }
        total += value * chunk.len() as f64;
        let grads = tape.backward(loss)?;
        grads.accumulate_into(net.store_mut());
        opt.step(net.store_mut());
        net.commit_stats(ctx);
    }
    Ok(total / indices.len() as f64)
}

/// Inference-mode logits, `indices.len() × classes`, computed in
/// independent batches.
pub fn predict_logits(
    net: &Network<f32>,
    data: &Dataset,
    indices: &[usize],
    mixing: &Mixing<'_>,
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let classes = net.config().classes;
    let parts = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let (x, _) = data.batch(chunk);
            let mut tape = Tape::new();
            let y = net.forward(&mut tape, &x, mixing, &mut ForwardCtx::eval())?;
            Ok(tape.value(y).data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&[indices.len(), classes], parts.concat())
}

/// Whether `label` is among the `k` highest scores, ties going to the lower
/// class index.
fn in_top_k(scores: &[f32], label: usize, k: usize) -> bool {
    let s = scores[label];
    let rank = scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < label)).count();
    rank < k
}

/// Fraction of rows whose label is within the top `k` scores.
pub fn topk_accuracy(logits: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64> {
    let &[n, classes] = logits.shape() else {
        return Err(NasError::structural("logits must be a matrix"));
    };
    if n != labels.len() {
        return Err(NasError::structural(format!("{n} rows for {} labels", labels.len())));
    }
    if n == 0 {
        return Err(NasError::Data("cannot score an empty split".into()));
    }
    if k == 0 || k > classes {
        return Err(NasError::argument(format!("top-{k} is undefined for {classes} classes")));
    }
    let hits = logits.data().chunks(classes).zip(labels).filter(|(row, &l)| in_top_k(row, l, k)).count();
    Ok(hits as f64 / n as f64)
}

/// Accuracy and loss of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(k, accuracy)` pairs in request order.
    pub topk: Vec<(usize, f64)>,
    pub loss: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }
}

fn mean_cross_entropy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            lse - row[l] as f64
        })
        .sum();
    total / labels.len() as f64
}

/// Top-k accuracies and mean loss of `net` on `indices`.
pub fn evaluate(
    net: &Network<f32>,
    data: &Dataset,
    indices: &[usize],
    mixing: &Mixing<'_>,
    ks: &[usize],
    batch_size: usize,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(NasError::Data("cannot evaluate an empty split".into()));
    }
    let logits = predict_logits(net, data, indices, mixing, batch_size)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
    let topk = ks.iter().map(|&k| Ok((k, topk_accuracy(&logits, &labels, k)?))).collect::<Result<_>>()?;
    Ok(EvalReport { topk, loss: mean_cross_entropy(&logits, &labels), samples: labels.len() })
}

fn softmax_rows(logits: &Tensor<f32>) -> Vec<f64> {
    let classes = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(classes) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Elementwise sum of the two streams' softmax scores.
pub fn fused_scores(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(NasError::structural(format!("cannot fuse scores of shape {:?} and {:?}", a.shape(), b.shape())));
    }
    let sum = softmax_rows(a).iter().zip(softmax_rows(b)).map(|(x, y)| (x + y) as f32).collect();
    Tensor::new(a.shape(), sum)
}

/// Predicted class per row of the fused scores, ties to the lower index.
pub fn score_fusion(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<usize>> {
    let fused = fused_scores(a, b)?;
    let classes = fused.shape()[1];
    Ok(fused
        .data()
        .chunks(classes)
        .map(|row| (1..classes).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
        .collect())
}
