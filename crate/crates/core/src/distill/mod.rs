//! Forward passes of decoder-side multi-modal distillation operators.
//!
//! - spatial-attention distillation, single scale and per scale
//! - feature harmonization with softmax attention across tasks
//! - squeeze-and-excitation channel gating
//!
//! All parameters are inputs. Convolutions are 1x1 by default; a 3x3
//! kernel with zero padding is also supported.

mod ops;
pub mod reference;

pub use ops::{
    feature_harmonize, feature_propagation, mtinet_distill, padnet_distill, se_gate, HarmonizeOutput, SeOutput,
};

use crate::io::{DType, Tensor};
use crate::{Error, Result};

/// `C x H x W` feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::dim(format!(
                "{channels}x{height}x{width} feature map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            other => Err(Error::dim(format!("feature tensor must be [C, H, W], got {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(DType::F64, vec![self.channels, self.height, self.width], self.data.clone())
            .expect("shape matches by construction")
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// Concatenates maps of equal spatial size along channels.
    pub fn concat(maps: &[FeatureMap]) -> Result<FeatureMap> {
        let first = maps.first().ok_or_else(|| Error::dim("nothing to concatenate"))?;
        if maps.iter().any(|m| (m.height, m.width) != (first.height, first.width)) {
            return Err(Error::dim("concatenated maps differ in spatial size"));
        }
        let channels = maps.iter().map(|m| m.channels).sum();
        let data = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
        FeatureMap::new(channels, first.height, first.width, data)
    }

    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if !self.same_shape(other) {
            return Err(Error::dim("cannot add feature maps of different shapes"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        FeatureMap::new(self.channels, self.height, self.width, data)
    }
}

/// Per-task feature maps sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFeatureStack {
    maps: Vec<FeatureMap>,
}

impl TaskFeatureStack {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::dim("a feature stack needs at least one task"))?;
        if let Some(i) = maps.iter().position(|m| !m.same_shape(first)) {
            return Err(Error::dim(format!("task {i} features differ in shape from task 0")));
        }
        Ok(TaskFeatureStack { maps })
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn num_tasks(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let m = &self.maps[0];
        (m.channels, m.height, m.width)
    }

    pub fn into_maps(self) -> Vec<FeatureMap> {
        self.maps
    }
}

/// 2-D convolution with stride 1 and "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub out_channels: usize,
    pub in_channels: usize,
    /// 1 or 3.
    pub kernel: usize,
    /// `out x in x kernel x kernel`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::domain(format!("kernel size {kernel} unsupported; use 1 or 3")));
        }
        if weight.len() != out_channels * in_channels * kernel * kernel || bias.len() != out_channels {
            return Err(Error::dim(format!(
                "conv {out_channels}<-{in_channels} k{kernel} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Conv {
            out_channels,
            in_channels,
            kernel,
            weight,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Conv {
            out_channels,
            in_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut c = Conv::zeros(channels, channels, 1);
        for i in 0..channels {
            c.weight[i * channels + i] = 1.0;
        }
        c
    }

    /// From a `[out, in]` or `[out, in, k, k]` weight and `[out]` bias.
    pub fn from_tensors(weight: &Tensor, bias: &Tensor) -> Result<Self> {
        let (o, i, k) = match weight.shape() {
            &[o, i] => (o, i, 1),
            &[o, i, k, k2] if k == k2 => (o, i, k),
            other => return Err(Error::dim(format!("conv weight must be [out, in] or [out, in, k, k], got {other:?}"))),
        };
        if bias.shape() != [o] {
            return Err(Error::dim(format!("conv bias must be [{o}], got {:?}", bias.shape())));
        }
        Conv::new(o, i, k, weight.data().to_vec(), bias.data().to_vec())
    }

    pub fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }
}

/// One convolution per ordered task pair `(k, l)`, `k != l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    tasks: usize,
    convs: Vec<Option<Conv>>,
}

impl AttentionParams {
    pub fn new(tasks: usize, mut pair: impl FnMut(usize, usize) -> Conv) -> Self {
        let mut convs = Vec::with_capacity(tasks * tasks);
        for k in 0..tasks {
            for l in 0..tasks {
                convs.push((k != l).then(|| pair(k, l)));
            }
        }
        AttentionParams { tasks, convs }
    }

    /// From `[N, N, C, C(, k, k)]` weights and `[N, N, C]` biases; diagonal
    /// entries are ignored.
    pub fn from_tensors(weight: &Tensor, bias: &Tensor) -> Result<Self> {
        let shape = weight.shape();
        if shape.len() != 4 && shape.len() != 6 {
            return Err(Error::dim(format!("attention weights must be [N, N, C, C(, k, k)], got {shape:?}")));
        }
        let (n, n2, o, i) = (shape[0], shape[1], shape[2], shape[3]);
        let k = if shape.len() == 6 { shape[4] } else { 1 };
        if n != n2 || (shape.len() == 6 && shape[5] != k) {
            return Err(Error::dim(format!("attention weights must be [N, N, C, C(, k, k)], got {shape:?}")));
        }
        if bias.shape() != [n, n, o] {
            return Err(Error::dim(format!("attention biases must be [{n}, {n}, {o}], got {:?}", bias.shape())));
        }
        let per_w = o * i * k * k;
        let mut convs = Vec::with_capacity(n * n);
        for idx in 0..n * n {
            if idx / n == idx % n {
                convs.push(None);
                continue;
            }
            let w = weight.data()[idx * per_w..(idx + 1) * per_w].to_vec();
            let b = bias.data()[idx * o..(idx + 1) * o].to_vec();
            convs.push(Some(Conv::new(o, i, k, w, b)?));
        }
        Ok(AttentionParams { tasks: n, convs })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks
    }

    pub fn get(&self, k: usize, l: usize) -> Option<&Conv> {
        self.convs.get(k * self.tasks + l).and_then(Option::as_ref)
    }
}

/// Per-scale attention (`W`) and value (`W'`) maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub attention: AttentionParams,
    pub value: AttentionParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Feature harmonization: `mix` maps `N*C -> N*C`, `reduce` maps `N*C -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizeParams {
    pub mix: Conv,
    pub activation: Activation,
    pub reduce: Conv,
}

/// Fully connected layer, `out x in` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out_features: usize,
    pub in_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(out_features: usize, in_features: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != out_features * in_features || bias.len() != out_features {
            return Err(Error::dim(format!(
                "dense {out_features}<-{in_features} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Dense {
            out_features,
            in_features,
            weight,
            bias,
        })
    }

    pub fn zeros(out_features: usize, in_features: usize) -> Self {
        Dense {
            out_features,
            in_features,
            weight: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn from_tensors(weight: &Tensor, bias: &Tensor) -> Result<Self> {
        match weight.shape() {
            &[o, i] if bias.shape() == [o] => Dense::new(o, i, weight.data().to_vec(), bias.data().to_vec()),
            other => Err(Error::dim(format!(
                "dense weight [out, in] with bias [out] expected, got {other:?} and {:?}",
                bias.shape()
            ))),
        }
    }
}

/// Excitation MLP `C -> ... -> C` with ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SeMlp {
    pub layers: Vec<Dense>,
}

impl SeMlp {
    /// Bottleneck `C -> C / ratio -> C`.
    pub fn bottleneck(squeeze: Dense, excite: Dense) -> Self {
        SeMlp {
            layers: vec![squeeze, excite],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| Error::dim("SE MLP has no layers"))?;
        if first.in_features != channels {
            return Err(Error::dim(format!("SE MLP expects {} channels, got {channels}", first.in_features)));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_features != pair[1].in_features {
                return Err(Error::dim("SE MLP layers do not chain"));
            }
        }
        if self.layers.last().map(|l| l.out_features) != Some(channels) {
            return Err(Error::dim(format!("SE MLP must output {channels} gates")));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
