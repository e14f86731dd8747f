use super::{
    sigmoid, AttentionParams, Conv, FeatureMap, HarmonizeParams, ScaleParams, SeMlp, TaskFeatureStack,
};
use crate::{Error, Result};

impl Conv {
    /// Applies the convolution plane by plane.
    pub fn apply(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels != self.in_channels {
            return Err(Error::dim(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let (h, w) = (input.height, input.width);
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        let half = (self.kernel / 2) as isize;
        for o in 0..self.out_channels {
            let dst = &mut out.data[o * h * w..(o + 1) * h * w];
            dst.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.plane(i);
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wt = self.w(o, i, ky, kx);
                        if wt == 0.0 {
                            continue;
                        }
                        let (dy, dx) = (ky as isize - half, kx as isize - half);
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                            let drow = &mut dst[y * w..(y + 1) * w];
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (w as isize - dx.max(0)).max(0) as usize;
                            for x in x0..x1.max(x0) {
                                drow[x] += wt * srow[(x as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn check_params(stack: &TaskFeatureStack, params: &AttentionParams) -> Result<()> {
    let n = stack.num_tasks();
    if params.num_tasks() != n {
        return Err(Error::dim(format!(
            "attention params cover {} tasks, stack has {n}",
            params.num_tasks()
        )));
    }
    let (c, _, _) = stack.shape();
    for k in 0..n {
        for l in (0..n).filter(|&l| l != k) {
            let conv = params.get(k, l).expect("off-diagonal entries exist");
            if conv.in_channels != c || conv.out_channels != c {
                return Err(Error::dim(format!(
                    "pair ({k}, {l}) maps {}->{} channels, features have {c}",
                    conv.in_channels, conv.out_channels
                )));
            }
        }
    }
    Ok(())
}

fn distill(stack: &TaskFeatureStack, attention: &AttentionParams, value: Option<&AttentionParams>) -> Result<TaskFeatureStack> {
    check_params(stack, attention)?;
    if let Some(v) = value {
        check_params(stack, v)?;
    }
    let n = stack.num_tasks();
    let maps = stack.maps();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = maps[k].clone();
        for l in (0..n).filter(|&l| l != k) {
            let logits = attention.get(k, l).expect("checked").apply(&maps[l])?;
            let values = match value {
                Some(v) => v.get(k, l).expect("checked").apply(&maps[l])?,
                None => maps[l].clone(),
            };
            for ((a, z), f) in acc.data.iter_mut().zip(&logits.data).zip(&values.data) {
                *a += sigmoid(*z) * f;
            }
        }
        out.push(acc);
    }
    TaskFeatureStack::new(out)
}

/// Single-scale spatial-attention distillation:
/// `F_k + sum_{l != k} sigmoid(W_kl F_l) * F_l`.
pub fn padnet_distill(stack: &TaskFeatureStack, params: &AttentionParams) -> Result<TaskFeatureStack> {
    distill(stack, params, None)
}

/// Per-scale distillation with a separate value map `W'`. Scales are
/// independent.
pub fn mtinet_distill(stacks: &[TaskFeatureStack], params: &[ScaleParams]) -> Result<Vec<TaskFeatureStack>> {
    if stacks.is_empty() {
        return Err(Error::dim("at least one scale is required"));
    }
    if stacks.len() != params.len() {
        return Err(Error::dim(format!(
            "{} feature scales but {} parameter scales",
            stacks.len(),
            params.len()
        )));
    }
    if stacks.iter().any(|s| s.num_tasks() != stacks[0].num_tasks()) {
        return Err(Error::dim("task count differs across scales"));
    }
    stacks
        .iter()
        .zip(params)
        .map(|(s, p)| distill(s, &p.attention, Some(&p.value)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizeOutput {
    /// Shared `C x H x W` map.
    pub shared: FeatureMap,
    /// Per-task attention, each `C x H x W`; sums to one across tasks.
    pub attention: Vec<FeatureMap>,
}

/// Fuses per-task features into one shared map with softmax attention
/// across tasks. The attended task features are concatenated and reduced
/// from `N*C` to `C` channels.
pub fn feature_harmonize(stack: &TaskFeatureStack, params: &HarmonizeParams) -> Result<HarmonizeOutput> {
    let n = stack.num_tasks();
    let (c, h, w) = stack.shape();
    let nc = n * c;
    if params.mix.in_channels != nc || params.mix.out_channels != nc {
        return Err(Error::dim(format!(
            "mix must map {nc}->{nc} channels, got {}->{}",
            params.mix.in_channels, params.mix.out_channels
        )));
    }
    if params.reduce.in_channels != nc || params.reduce.out_channels != c {
        return Err(Error::dim(format!(
            "reduction must map {nc}->{c} channels, got {}->{}",
            params.reduce.in_channels, params.reduce.out_channels
        )));
    }
    let concat = FeatureMap::concat(stack.maps())?;
    let mut logits = params.mix.apply(&concat)?;
    for v in logits.data.iter_mut() {
        *v = params.activation.apply(*v);
    }
    let chunk = c * h * w;
    let mut attention = vec![FeatureMap::zeros(c, h, w); n];
    let mut attended = FeatureMap::zeros(nc, h, w);
    for j in 0..chunk {
        let max = (0..n).map(|t| logits.data[t * chunk + j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).map(|t| (logits.data[t * chunk + j] - max).exp()).sum();
        for t in 0..n {
            let a = (logits.data[t * chunk + j] - max).exp() / denom;
            attention[t].data[j] = a;
            attended.data[t * chunk + j] = a * concat.data[t * chunk + j];
        }
    }
    let shared = params.reduce.apply(&attended)?;
    Ok(HarmonizeOutput { shared, attention })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeOutput {
    pub output: FeatureMap,
    pub gates: Vec<f64>,
}

/// Squeeze-and-excitation channel gating.
pub fn se_gate(feature: &FeatureMap, mlp: &SeMlp) -> Result<SeOutput> {
    mlp.validate(feature.channels)?;
    let hw = (feature.height * feature.width) as f64;
    if hw == 0.0 {
        return Err(Error::dim("SE gating needs a non-empty spatial extent"));
    }
    let mut act: Vec<f64> = (0..feature.channels).map(|c| feature.plane(c).iter().sum::<f64>() / hw).collect();
    for (li, layer) in mlp.layers.iter().enumerate() {
        let mut next = layer.bias.clone();
        for (o, v) in next.iter_mut().enumerate() {
            let row = &layer.weight[o * layer.in_features..(o + 1) * layer.in_features];
            *v += row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
        }
        if li + 1 < mlp.layers.len() {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        act = next;
    }
    let gates: Vec<f64> = act.into_iter().map(sigmoid).collect();
    let mut output = feature.clone();
    let plane = feature.height * feature.width;
    for (c, g) in gates.iter().enumerate() {
        output.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v *= g);
    }
    Ok(SeOutput { output, gates })
}

/// Harmonize, gate the shared map per task, and add the result back to
/// each task's features.
pub fn feature_propagation(
    stack: &TaskFeatureStack,
    harmonize: &HarmonizeParams,
    gates: &[SeMlp],
) -> Result<(TaskFeatureStack, HarmonizeOutput)> {
    if gates.len() != stack.num_tasks() {
        return Err(Error::dim(format!(
            "{} gating MLPs for {} tasks",
            gates.len(),
            stack.num_tasks()
        )));
    }
    let fused = feature_harmonize(stack, harmonize)?;
    let maps = stack
        .maps()
        .iter()
        .zip(gates)
        .map(|(f, mlp)| f.add(&se_gate(&fused.shared, mlp)?.output))
        .collect::<Result<Vec<_>>>()?;
    Ok((TaskFeatureStack::new(maps)?, fused))
}
