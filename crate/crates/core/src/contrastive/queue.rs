//! Fixed-capacity FIFO of unit-norm embeddings, optionally paired with an
//! aligned queue of backbone features used for neighbour mining.

use std::collections::VecDeque;

use super::dot;
use crate::{Error, Result};

pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    head_dim: usize,
    backbone_dim: Option<usize>,
    head: VecDeque<Vec<f64>>,
    backbone: Option<VecDeque<Vec<f64>>>,
}

impl EmbeddingQueue {
    /// A head-only queue when `backbone_dim` is `None`, a dual queue otherwise.
    pub fn new(capacity: usize, head_dim: usize, backbone_dim: Option<usize>) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::domain("queue capacity must be positive"));
        }
        Ok(EmbeddingQueue {
            capacity,
            head_dim,
            backbone_dim,
            head: VecDeque::with_capacity(capacity),
            backbone: backbone_dim.map(|_| VecDeque::with_capacity(capacity)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty()
    }

    pub fn is_dual(&self) -> bool {
        self.backbone.is_some()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn backbone_dim(&self) -> Option<usize> {
        self.backbone_dim
    }

    /// Head-space entries, oldest first.
    pub fn head_entries(&self) -> &VecDeque<Vec<f64>> {
        &self.head
    }

    pub fn backbone_entries(&self) -> Option<&VecDeque<Vec<f64>>> {
        self.backbone.as_ref()
    }

    fn check_batch(batch: &[Vec<f64>], dim: usize, what: &str) -> Result<()> {
        for (i, v) in batch.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::dim(format!("{what} vector {i} has dimension {}, expected {dim}", v.len())));
            }
            let norm = dot(v, v).sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::domain(format!("{what} vector {i} has norm {norm}, expected 1")));
            }
        }
        Ok(())
    }

    /// Enqueues a batch and evicts the oldest entries beyond capacity. The
    /// queue is left untouched when the batch is rejected.
    pub fn push(&mut self, head_batch: &[Vec<f64>], backbone_batch: Option<&[Vec<f64>]>) -> Result<()> {
        Self::check_batch(head_batch, self.head_dim, "head")?;
        match (self.backbone_dim, backbone_batch) {
            (Some(dim), Some(bb)) => {
                if bb.len() != head_batch.len() {
                    return Err(Error::dim(format!(
                        "dual batch misaligned: {} head vs {} backbone vectors",
                        head_batch.len(),
                        bb.len()
                    )));
                }
                Self::check_batch(bb, dim, "backbone")?;
            }
            (Some(_), None) => return Err(Error::dim("dual queue requires a backbone batch")),
            (None, Some(_)) => return Err(Error::dim("head-only queue given a backbone batch")),
            (None, None) => {}
        }

        let skip = head_batch.len().saturating_sub(self.capacity);
        let overflow = (self.head.len() + head_batch.len() - skip).saturating_sub(self.capacity);
        self.head.drain(..overflow);
        self.head.extend(head_batch[skip..].iter().cloned());
        if let (Some(q), Some(bb)) = (self.backbone.as_mut(), backbone_batch) {
            q.drain(..overflow);
            q.extend(bb[skip..].iter().cloned());
        }
        Ok(())
    }
}

/// Indices of the `k` queue entries most similar to `query` in backbone
/// space, most similar first; ties go to the lower (older) index.
pub fn mine_neighbors(query_backbone: &[f64], queue: &EmbeddingQueue, k: usize) -> Result<Vec<usize>> {
    let entries = queue
        .backbone_entries()
        .ok_or_else(|| Error::domain("neighbour mining needs a dual queue"))?;
    if k == 0 {
        return Err(Error::domain("neighbour count must be at least 1"));
    }
    if k > entries.len() {
        return Err(Error::dim(format!("asked for {k} neighbours from a queue of {}", entries.len())));
    }
    if Some(query_backbone.len()) != queue.backbone_dim() {
        return Err(Error::dim("query dimension does not match the backbone queue"));
    }
    let norm = dot(query_backbone, query_backbone).sqrt();
    if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::domain(format!("query has norm {norm}, expected 1")));
    }
    let sims: Vec<f64> = entries.iter().map(|e| dot(query_backbone, e)).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i % dim] = 1.0;
        v
    }

    #[test]
    fn fifo_eviction() {
        let mut q = EmbeddingQueue::new(2, 3, None).unwrap();
        for i in 0..3 {
            q.push(&[e(i, 3)], None).unwrap();
        }
        assert_eq!(q.head_entries().iter().cloned().collect::<Vec<_>>(), vec![e(1, 3), e(2, 3)]);
    }

    #[test]
    fn full_batch_replaces_everything() {
        let mut q = EmbeddingQueue::new(3, 3, None).unwrap();
        q.push(&[e(0, 3), e(0, 3)], None).unwrap();
        let batch = vec![e(1, 3), e(2, 3), e(0, 3)];
        q.push(&batch, None).unwrap();
        assert_eq!(q.head_entries().iter().cloned().collect::<Vec<_>>(), batch);
        let big: Vec<_> = (0..5).map(|i| e(i, 3)).collect();
        q.push(&big, None).unwrap();
        assert_eq!(q.head_entries().iter().cloned().collect::<Vec<_>>(), big[2..].to_vec());
    }

    #[test]
    fn dual_alignment() {
        let mut q = EmbeddingQueue::new(3, 2, Some(4)).unwrap();
        for i in 0..5 {
            q.push(&[e(i, 2)], Some(&[e(i, 4)])).unwrap();
        }
        let (h, b) = (q.head_entries(), q.backbone_entries().unwrap());
        assert_eq!(h.len(), b.len());
        for (k, i) in (2..5).enumerate() {
            assert_eq!(h[k], e(i, 2));
            assert_eq!(b[k], e(i, 4));
        }
    }

    #[test]
    fn rejects_non_unit_and_misaligned() {
        let mut q = EmbeddingQueue::new(3, 2, Some(2)).unwrap();
        assert!(q.push(&[vec![1.0, 1.0]], Some(&[e(0, 2)])).is_err());
        assert!(q.push(&[e(0, 2)], Some(&[e(0, 2), e(1, 2)])).is_err());
        assert!(q.push(&[e(0, 2)], None).is_err());
        assert!(q.is_empty());
    }

    #[test]
    fn self_ranks_first() {
        let mut q = EmbeddingQueue::new(4, 2, Some(2)).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bb = vec![vec![1.0, 0.0], vec![s, s], vec![0.0, 1.0], vec![-1.0, 0.0]];
        q.push(&vec![e(0, 2); 4], Some(&bb)).unwrap();
        assert_eq!(mine_neighbors(&[0.0, 1.0], &q, 1).unwrap(), vec![2]);
        assert_eq!(mine_neighbors(&[1.0, 0.0], &q, 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(mine_neighbors(&[1.0, 0.0], &q, 5).is_err());
    }
}
