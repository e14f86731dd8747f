//! Contrastive and nearest-neighbour losses with analytic gradients.

use super::dot;
use super::queue::EmbeddingQueue;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_dims(dim: usize, vs: &[Vec<f64>], what: &str) -> Result<()> {
    match vs.iter().position(|v| v.len() != dim) {
        Some(i) => Err(Error::dim(format!("{what} {i} has dimension {}, expected {dim}", vs[i].len()))),
        None => Ok(()),
    }
}

/// Sum over positives of `-log(e^{a.p/t} / (e^{a.p/t} + sum_n e^{a.n/t}))`.
pub fn contrastive_loss(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<ContrastiveGrads> {
    if positives.is_empty() {
        return Err(Error::domain("contrastive loss needs at least one positive"));
    }
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature {temperature} must be positive")));
    }
    let dim = anchor.len();
    check_dims(dim, positives, "positive")?;
    check_dims(dim, negatives, "negative")?;

    let neg_logits: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / temperature).collect();
    let mut loss = 0.0;
    let mut g_anchor = vec![0.0; dim];
    let mut g_pos = vec![vec![0.0; dim]; positives.len()];
    let mut g_neg = vec![vec![0.0; dim]; negatives.len()];
    let mut logits = Vec::with_capacity(1 + negatives.len());
    for (pi, p) in positives.iter().enumerate() {
        logits.clear();
        logits.push(dot(anchor, p) / temperature);
        logits.extend_from_slice(&neg_logits);
        let lse = log_sum_exp(&logits);
        loss += lse - logits[0];
        // d loss / d logit: softmax minus the one-hot target
        let coef_pos = ((logits[0] - lse).exp() - 1.0) / temperature;
        for d in 0..dim {
            g_anchor[d] += coef_pos * p[d];
            g_pos[pi][d] += coef_pos * anchor[d];
        }
        for (ni, n) in negatives.iter().enumerate() {
            let coef = (logits[1 + ni] - lse).exp() / temperature;
            for d in 0..dim {
                g_anchor[d] += coef * n[d];
                g_neg[ni][d] += coef * anchor[d];
            }
        }
    }
    Ok(ContrastiveGrads {
        loss,
        anchor: g_anchor,
        positives: g_pos,
        negatives: g_neg,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnGrads {
    pub loss: f64,
    pub positive: Vec<f64>,
    /// One gradient per queue slot, oldest first.
    pub queue: Vec<Vec<f64>>,
}

/// Multi-label cross-entropy over queue logits: the mean over neighbour
/// indices of `-log softmax(logits / t)_j`. Returns the loss and its
/// gradient with respect to the raw logits.
pub fn knn_loss_from_logits(logits: &[f64], indices: &[usize], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::domain("nearest-neighbour loss needs at least one neighbour"));
    }
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature {temperature} must be positive")));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= logits.len()) {
        return Err(Error::dim(format!("neighbour index {i} outside queue of {}", logits.len())));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let lse = log_sum_exp(&scaled);
    let k = indices.len() as f64;
    let loss = indices.iter().map(|&j| lse - scaled[j]).sum::<f64>() / k;
    let mut grad: Vec<f64> = scaled.iter().map(|s| (s - lse).exp() / temperature).collect();
    for &j in indices {
        grad[j] -= 1.0 / (k * temperature);
    }
    Ok((loss, grad))
}

/// Nearest-neighbour loss of a positive's head embedding against the head
/// queue, with the neighbours as targets.
pub fn knn_loss(
    positive_head: &[f64],
    queue: &EmbeddingQueue,
    indices: &[usize],
    temperature: f64,
) -> Result<KnnGrads> {
    if positive_head.len() != queue.head_dim() {
        return Err(Error::dim(format!(
            "positive has dimension {}, queue holds {}",
            positive_head.len(),
            queue.head_dim()
        )));
    }
    let entries = queue.head_entries();
    let logits: Vec<f64> = entries.iter().map(|q| dot(positive_head, q)).collect();
    let (loss, dlogits) = knn_loss_from_logits(&logits, indices, temperature)?;
    let mut g_pos = vec![0.0; positive_head.len()];
    let mut g_queue = Vec::with_capacity(entries.len());
    for (q, &c) in entries.iter().zip(&dlogits) {
        for (g, v) in g_pos.iter_mut().zip(q.iter()) {
            *g += c * v;
        }
        g_queue.push(positive_head.iter().map(|p| c * p).collect());
    }
    Ok(KnnGrads {
        loss,
        positive: g_pos,
        queue: g_queue,
    })
}
