use crate::io::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// Non-negative integer class ids (semantic classes, binarized edges).
    Categorical,
    /// Real-valued targets such as depth or disparity.
    Continuous,
}

/// A dense per-pixel label map in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    kind: LabelKind,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LabelMap {
    pub fn new(kind: LabelKind, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() {
            return Err(Error::dim(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite label {v}")));
        }
        if kind == LabelKind::Categorical {
            if let Some(v) = values.iter().find(|&&v| v < 0.0 || v.fract() != 0.0) {
                return Err(Error::domain(format!(
                    "categorical label {v} is not a non-negative integer"
                )));
            }
        }
        Ok(LabelMap {
            kind,
            height,
            width,
            values,
        })
    }

    pub fn categorical(height: usize, width: usize, classes: &[u32]) -> Result<Self> {
        Self::new(LabelKind::Categorical, height, width, classes.iter().map(|&c| c as f64).collect())
    }

    pub fn continuous(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(LabelKind::Continuous, height, width, values)
    }

    /// Interprets a `[H, W]` tensor as a label map of the given kind.
    pub fn from_tensor(t: &Tensor, kind: LabelKind) -> Result<Self> {
        match t.shape() {
            &[h, w] => Self::new(kind, h, w, t.data().to_vec()),
            other => Err(Error::dim(format!("label map tensor must be [H, W], got {other:?}"))),
        }
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_rejects_fractional() {
        assert!(LabelMap::new(LabelKind::Categorical, 1, 2, vec![0.0, 1.5]).is_err());
        assert!(LabelMap::new(LabelKind::Categorical, 1, 2, vec![0.0, -1.0]).is_err());
        assert!(LabelMap::new(LabelKind::Continuous, 1, 2, vec![0.0, -1.5]).is_ok());
    }

    #[test]
    fn size_checked() {
        assert!(LabelMap::continuous(2, 2, vec![1.0; 3]).is_err());
    }
}
