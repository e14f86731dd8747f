//! Scalar per-pixel loops used as oracles for the vectorized operators.

use super::{sigmoid, AttentionParams, Conv, FeatureMap, HarmonizeParams, SeMlp, TaskFeatureStack};

/// Convolution output at a single coordinate.
pub fn conv_at(conv: &Conv, input: &FeatureMap, o: usize, y: usize, x: usize) -> f64 {
    let half = (conv.kernel / 2) as isize;
    let mut acc = conv.bias[o];
    for i in 0..conv.in_channels {
        for ky in 0..conv.kernel {
            for kx in 0..conv.kernel {
                let sy = y as isize + ky as isize - half;
                let sx = x as isize + kx as isize - half;
                if sy >= 0 && sx >= 0 && (sy as usize) < input.height && (sx as usize) < input.width {
                    acc += conv.w(o, i, ky, kx) * input.at(i, sy as usize, sx as usize);
                }
            }
        }
    }
    acc
}

pub fn distill(stack: &TaskFeatureStack, attention: &AttentionParams, value: Option<&AttentionParams>) -> Vec<FeatureMap> {
    let maps = stack.maps();
    let (c, h, w) = stack.shape();
    let n = maps.len();
    (0..n)
        .map(|k| {
            let mut out = FeatureMap::zeros(c, h, w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut v = maps[k].at(ch, y, x);
                        for l in 0..n {
                            if l == k {
                                continue;
                            }
                            let mask = sigmoid(conv_at(attention.get(k, l).unwrap(), &maps[l], ch, y, x));
                            let val = match value {
                                Some(p) => conv_at(p.get(k, l).unwrap(), &maps[l], ch, y, x),
                                None => maps[l].at(ch, y, x),
                            };
                            v += mask * val;
                        }
                        out.data[(ch * h + y) * w + x] = v;
                    }
                }
            }
            out
        })
        .collect()
}

/// Returns the shared map and per-task attention.
pub fn harmonize(stack: &TaskFeatureStack, params: &HarmonizeParams) -> (FeatureMap, Vec<FeatureMap>) {
    let maps = stack.maps();
    let (c, h, w) = stack.shape();
    let n = maps.len();
    let concat_at = |ch: usize, y: usize, x: usize| maps[ch / c].at(ch % c, y, x);
    let mut attention = vec![FeatureMap::zeros(c, h, w); n];
    let mut shared = FeatureMap::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut logit = vec![0.0; n * c];
            for (o, z) in logit.iter_mut().enumerate() {
                let mut acc = params.mix.bias[o];
                for i in 0..n * c {
                    acc += params.mix.w(o, i, 0, 0) * concat_at(i, y, x);
                }
                *z = params.activation.apply(acc);
            }
            let mut attended = vec![0.0; n * c];
            for ch in 0..c {
                let exps: Vec<f64> = (0..n).map(|t| logit[t * c + ch].exp()).collect();
                let total: f64 = exps.iter().sum();
                for t in 0..n {
                    let a = exps[t] / total;
                    attention[t].data[(ch * h + y) * w + x] = a;
                    attended[t * c + ch] = a * maps[t].at(ch, y, x);
                }
            }
            for o in 0..c {
                let mut acc = params.reduce.bias[o];
                for (i, a) in attended.iter().enumerate() {
                    acc += params.reduce.w(o, i, 0, 0) * a;
                }
                shared.data[(o * h + y) * w + x] = acc;
            }
        }
    }
    (shared, attention)
}

pub fn se_gate(feature: &FeatureMap, mlp: &SeMlp) -> (FeatureMap, Vec<f64>) {
    let (c, h, w) = (feature.channels, feature.height, feature.width);
    let mut act = vec![0.0; c];
    for (ch, a) in act.iter_mut().enumerate() {
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += feature.at(ch, y, x);
            }
        }
        *a = s / (h * w) as f64;
    }
    for (li, layer) in mlp.layers.iter().enumerate() {
        let mut next = vec![0.0; layer.out_features];
        for (o, v) in next.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for (i, a) in act.iter().enumerate() {
                acc += layer.weight[o * layer.in_features + i] * a;
            }
            *v = if li + 1 < mlp.layers.len() { acc.max(0.0) } else { acc };
        }
        act = next;
    }
    let gates: Vec<f64> = act.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let mut out = feature.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data[(ch * h + y) * w + x] = gates[ch] * feature.at(ch, y, x);
            }
        }
    }
    (out, gates)
}
