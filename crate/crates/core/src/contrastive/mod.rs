//! Contrastive self-supervised learning numerics at desk scale.
//!
//! Embeddings are plain `f64` vectors on the unit sphere. Gradients treat
//! the unit vectors as free variables.

mod crop;
mod loss;
mod queue;

pub use crop::{
    constrained_multicrop, iou_bin, iou_pair_stats, rect_iou, sample_constrained_crop, sample_resized_crop, CropRect,
    IouStats, MultiCropMode, DEFAULT_ASPECT, HISTOGRAM_BINS, MULTI_CROP_LARGE_SCALE, MULTI_CROP_SMALL_SCALE,
    TWO_CROP_SCALE,
};
pub use loss::{contrastive_loss, knn_loss, knn_loss_from_logits, ContrastiveGrads, KnnGrads};
pub use queue::{mine_neighbors, EmbeddingQueue, UNIT_TOLERANCE};

use crate::io::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, serde::Serialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub neighbors: usize,
    pub nn_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.2,
            momentum: 0.999,
            neighbors: 20,
            nn_weight: 0.4,
        }
    }
}

impl ContrastiveConfig {
    /// Defaults for multi-crop training, where the momentum is lowered.
    pub fn multi_crop() -> Self {
        ContrastiveConfig {
            momentum: 0.995,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::domain(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::domain(format!("momentum {} must be in [0, 1]", self.momentum)));
        }
        if self.neighbors < 1 {
            return Err(Error::domain("neighbor count must be at least 1"));
        }
        if !(self.nn_weight >= 0.0) {
            return Err(Error::domain(format!("nn weight {} must be non-negative", self.nn_weight)));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::domain("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// `m * slow + (1 - m) * fast`.
pub fn momentum_update(slow: &Tensor, fast: &Tensor, m: f64) -> Result<Tensor> {
    if slow.shape() != fast.shape() {
        return Err(Error::dim(format!(
            "momentum update of {:?} towards {:?}",
            slow.shape(),
            fast.shape()
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::domain(format!("momentum {m} must be in [0, 1]")));
    }
    let data = slow
        .data()
        .iter()
        .zip(fast.data())
        .map(|(s, f)| m * s + (1.0 - m) * f)
        .collect();
    Tensor::new(slow.dtype(), slow.shape().to_vec(), data)
}

/// `inst + lambda * nn`.
pub fn total_ssl_loss(inst: f64, nn: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::domain(format!("nn weight {lambda} must be non-negative")));
    }
    Ok(inst + lambda * nn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::DType;

    #[test]
    fn normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        let a = l2_normalize(&[1.0, -2.0, 0.5]).unwrap();
        let b = l2_normalize(&[7.0, -14.0, 3.5]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn momentum_limits() {
        let slow = Tensor::new(DType::F64, vec![2], vec![1.0, 2.0]).unwrap();
        let fast = Tensor::new(DType::F64, vec![2], vec![-3.0, 0.5]).unwrap();
        assert_eq!(momentum_update(&slow, &fast, 1.0).unwrap(), slow);
        assert_eq!(momentum_update(&slow, &fast, 0.0).unwrap(), fast);
        assert_eq!(momentum_update(&slow, &slow, 0.37).unwrap(), slow);
        let other = Tensor::new(DType::F64, vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(momentum_update(&slow, &other, 0.5).is_err());
    }

    #[test]
    fn ssl_total() {
        assert_eq!(total_ssl_loss(1.3, 9.0, 0.0).unwrap(), 1.3);
        assert!((total_ssl_loss(1.0, 0.5, 0.4).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(total_ssl_loss(0.7, 0.0, 0.4).unwrap(), 0.7);
        assert!(total_ssl_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn config_defaults() {
        let c = ContrastiveConfig::default();
        assert_eq!((c.temperature, c.momentum, c.neighbors, c.nn_weight), (0.2, 0.999, 20, 0.4));
        assert_eq!(ContrastiveConfig::multi_crop().momentum, 0.995);
        assert!(c.validate().is_ok());
    }
}
