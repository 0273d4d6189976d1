//! Cross-entropy, soft-target cross-entropy and KL divergence on logits.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub mean: f64,
    pub per_example: Vec<f64>,
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows vs {} labels", logits.rows(), labels.len())));
    }
    let k = logits.cols();
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    Ok(())
}

/// `-log softmax(logits)_y` per example, and its mean.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    check_labels(logits, labels)?;
    let per_example: Vec<f64> =
        labels.iter().enumerate().map(|(i, &y)| -log_softmax(logits.row(i))[y]).collect();
    Ok(CrossEntropy { mean: tensor::mean(&per_example), per_example })
}

/// Gradient of `scale * sum_i CE_i` with respect to the logits.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize], scale: f64) -> Result<Tensor> {
    check_labels(logits, labels)?;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(logits.row(i));
        let g = grad.row_mut(i);
        for (k, pk) in p.into_iter().enumerate() {
            g[k] = scale * (pk - if k == y { 1.0 } else { 0.0 });
        }
    }
    Ok(grad)
}

/// Cross-entropy against target distributions (one row per example).
/// Returns per-example losses and the gradient of `scale * sum_i loss_i`.
pub fn soft_cross_entropy(logits: &Tensor, targets: &[Vec<f64>], scale: f64) -> Result<(Vec<f64>, Tensor)> {
    if logits.rows() != targets.len() || targets.iter().any(|t| t.len() != logits.cols()) {
        return Err(Error::Shape("soft targets do not match logits".into()));
    }
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut losses = Vec::with_capacity(targets.len());
    for (i, t) in targets.iter().enumerate() {
        let logp = log_softmax(logits.row(i));
        losses.push(-tensor::dot(t, &logp));
        let g = grad.row_mut(i);
        for k in 0..t.len() {
            g[k] = scale * (logp[k].exp() - t[k]);
        }
    }
    Ok((losses, grad))
}

/// `KL(softmax(p_logits) || softmax(q_logits))` per example, with gradients of
/// `scale * sum_i KL_i` with respect to both logit tensors.
pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor, scale: f64) -> Result<(Vec<f64>, Tensor, Tensor)> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::Shape("KL arguments differ in shape".into()));
    }
    let mut gp = Tensor::zeros(p_logits.shape().to_vec());
    let mut gq = Tensor::zeros(q_logits.shape().to_vec());
    let mut values = Vec::with_capacity(p_logits.rows());
    for i in 0..p_logits.rows() {
        let logp = log_softmax(p_logits.row(i));
        let logq = log_softmax(q_logits.row(i));
        let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        let kl: f64 = p.iter().zip(logp.iter().zip(&logq)).map(|(pk, (lp, lq))| pk * (lp - lq)).sum();
        values.push(kl);
        let rp = gp.row_mut(i);
        for k in 0..p.len() {
            rp[k] = scale * p[k] * ((logp[k] - logq[k]) - kl);
        }
        let rq = gq.row_mut(i);
        for k in 0..p.len() {
            rq[k] = scale * (logq[k].exp() - p[k]);
        }
    }
    Ok((values, gp, gq))
}
