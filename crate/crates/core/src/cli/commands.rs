use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::*;
use super::output::{num, OutputSink, RunMetadata};
use crate::affinity::{task_affinity, AffinityTensor, FeatureMatrix};
use crate::balancing::{
    delta_mtl, dtp_weights, dwa_weights, gradnorm_step, magnitude_heuristic_weights, mgda_min_norm, read_metrics,
    uncertainty_objective, GradSnapshot, Strategy, WeightVector,
};
use crate::branch::{search_optimal_tree, BudgetModel};
use crate::contrastive::{
    contrastive_loss, iou_pair_stats, knn_loss, mine_neighbors, rect_iou, sample_constrained_crop,
    sample_resized_crop, total_ssl_loss, ContrastiveConfig, EmbeddingQueue, IouStats, HISTOGRAM_BINS,
};
use crate::distill::{
    feature_harmonize, mtinet_distill, padnet_distill, reference, se_gate, AttentionParams, Conv, Dense, FeatureMap,
    HarmonizeParams, ScaleParams, SeMlp, TaskFeatureStack,
};
use crate::io::{load_tensor, read_trace, LabelMap, TaskTrace};
use crate::pixel::{dilation_sweep, AffinityRule, TaskLabels};
use crate::{Error, Result};

/// Shared state of one invocation.
pub(crate) struct Ctx<'a> {
    pub cfg: &'a ConfigFile,
    pub seed: u64,
    pub output: &'a Path,
}

/// What a subcommand produced: a stdout summary and the written files.
pub(crate) struct Outcome {
    pub summary: String,
    pub files: Vec<std::path::PathBuf>,
}

impl Ctx<'_> {
    fn sink<T: serde::Serialize>(&self, section: &str, value: &T) -> Result<OutputSink> {
        OutputSink::create(
            self.output,
            RunMetadata {
                command: section.to_string(),
                seed: self.seed,
                config_digest: digest(section, value),
            },
        )
    }

    fn tensor(&self, p: &Path) -> Result<crate::io::Tensor> {
        load_tensor(&self.cfg.resolve(p))
    }

    fn open(&self, p: &Path) -> Result<File> {
        let path = self.cfg.resolve(p);
        File::open(&path).map_err(|source| Error::File { path, source })
    }

    fn trace(&self, p: &Path) -> Result<TaskTrace> {
        read_trace(self.open(p)?)
    }
}

fn done(sink: OutputSink, summary: String) -> Result<Outcome> {
    Ok(Outcome {
        summary,
        files: sink.finish()?,
    })
}

pub(crate) fn affinity(ctx: &Ctx) -> Result<Outcome> {
    const S: &str = "affinity";
    let s: AffinitySection = ctx.cfg.section(S)?;
    if s.tasks.is_empty() {
        return Err(Error::config("affinity.tasks", "at least one task is required"));
    }
    if s.locations.is_empty() {
        return Err(Error::config("affinity.locations", "at least one location is required"));
    }
    let features = s
        .locations
        .iter()
        .map(|loc| {
            s.tasks
                .iter()
                .map(|task| {
                    let rel = s.feature_pattern.replace("{location}", loc).replace("{task}", task);
                    FeatureMatrix::from_tensor(&ctx.tensor(Path::new(&rel))?)?.truncate(s.images)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let a = task_affinity(&features, s.tasks.clone(), s.locations.clone())?;
    let mut sink = ctx.sink(S, &s)?;
    sink.tensor("affinity.mtkt", &a.to_tensor())?;
    let mut rows = Vec::new();
    for (l, loc) in a.locations().iter().enumerate() {
        for (i, ti) in a.tasks().iter().enumerate() {
            for (j, tj) in a.tasks().iter().enumerate() {
                rows.push([loc.clone(), ti.clone(), tj.clone(), num(a.get(l, i, j))]);
            }
        }
    }
    sink.csv("affinity.csv", &["location", "task_a", "task_b", "affinity"], rows)?;
    done(sink, a.render_table())
}

pub(crate) fn branch_search(ctx: &Ctx) -> Result<Outcome> {
    const S: &str = "branch-search";
    let s: BranchSection = ctx.cfg.section(S)?;
    let a = AffinityTensor::from_tensor(&ctx.tensor(&s.affinity)?, s.tasks.clone(), s.locations.clone())?;
    if s.shared_costs.len() != a.depth() {
        return Err(Error::config(
            "branch-search.shared_costs",
            format!("expected {} entries, one per location", a.depth()),
        ));
    }
    if s.decoder_costs.len() != a.num_tasks() {
        return Err(Error::config(
            "branch-search.decoder_costs",
            format!("expected {} entries, one per task", a.num_tasks()),
        ));
    }
    let model = BudgetModel {
        shared_costs: s.shared_costs.clone(),
        decoder_costs: s.decoder_costs.clone(),
        budget: s.budget,
    };
    let result = search_optimal_tree(&a, &model)?;
    let take = if s.top == 0 { result.ranked.len() } else { s.top.min(result.ranked.len()) };
    let render = |t: &crate::branch::BranchTree| {
        t.layers().iter().map(|p| p.render(a.tasks())).collect::<Vec<_>>().join(" | ")
    };
    let rows: Vec<[String; 4]> = result.ranked[..take]
        .iter()
        .enumerate()
        .map(|(r, st)| [(r + 1).to_string(), num(st.cost), num(st.resource), render(&st.tree)])
        .collect();
    let mut sink = ctx.sink(S, &s)?;
    sink.csv("ranked.csv", &["rank", "cost", "resource", "tree"], rows)?;
    let summary = format!(
        "best tree (cost {}, resource {}) of {} feasible:\n{}",
        num(result.best.cost),
        num(result.best.resource),
        result.ranked.len(),
        result.best.tree.render(a.tasks(), a.locations())
    );
    done(sink, summary)
}

fn task_names(trace: Option<&TaskTrace>, n: usize) -> Vec<String> {
    match trace {
        Some(t) => t.tasks().to_vec(),
        None => (0..n).map(|i| format!("task{i}")).collect(),
    }
}

fn gradient_rows(ctx: &Ctx, p: &Path) -> Result<Vec<Vec<f64>>> {
    let t = ctx.tensor(p)?;
    let &[n, len] = t.shape() else {
        return Err(Error::dim(format!("gradient tensor must be [N, P], got {:?}", t.shape())));
    };
    Ok((0..n).map(|i| t.data()[i * len..(i + 1) * len].to_vec()).collect())
}

pub(crate) fn balance(ctx: &Ctx) -> Result<Outcome> {
    const S: &str = "balance";
    let s: BalanceSection = ctx.cfg.section(S)?;
    let trace = s.trace.as_deref().map(|p| ctx.trace(p)).transpose()?;
    let iteration = match (s.iteration, &trace) {
        (Some(i), _) => Some(i),
        (None, Some(t)) => t.iterations().last().copied(),
        (None, None) => None,
    };
    let need_trace = || {
        trace
            .as_ref()
            .ok_or_else(|| Error::config("balance.trace", format!("missing; required for {}", s.strategy.name())))
    };
    let need_iter = || {
        iteration.ok_or_else(|| Error::config("balance.iteration", "missing and the trace is empty"))
    };
    let mut details: (Vec<&str>, Vec<Vec<String>>) = (vec![], vec![]);
    let mut extra = String::new();

    let weights: WeightVector = match s.strategy {
        Strategy::Fixed => {
            let w = require(&s.weights, S, "weights", "for fixed weighting")?;
            WeightVector::new(w, Strategy::Fixed, iteration)?
        }
        Strategy::Uncertainty => {
            let t = need_trace()?;
            let it = need_iter()?;
            let losses = t
                .losses_at(it)
                .ok_or_else(|| Error::MissingHistory(format!("no losses for every task at iteration {it}")))?;
            let sigmas = match &s.sigmas {
                Some(sg) => sg.clone(),
                None => losses.iter().map(|l| l.sqrt()).collect(),
            };
            let obj = uncertainty_objective(&losses, &sigmas)?;
            extra = format!("objective {}\n", num(obj.value));
            details.0 = vec!["task", "loss", "sigma", "grad_sigma"];
            details.1 = (0..losses.len())
                .map(|i| {
                    vec![t.tasks()[i].clone(), num(losses[i]), num(sigmas[i]), num(obj.grad_sigma[i])]
                })
                .collect();
            WeightVector::new(obj.effective_weights, Strategy::Uncertainty, Some(it))?
        }
        Strategy::GradNorm => {
            let t = need_trace()?;
            let it = need_iter()?;
            let n = t.num_tasks();
            let grads = match &s.gradients {
                Some(p) => GradSnapshot::Vectors(gradient_rows(ctx, p)?),
                None => GradSnapshot::Magnitudes(t.grad_norms_at(it).ok_or_else(|| {
                    Error::MissingHistory(format!("trace lacks grad_norm for every task at iteration {it}"))
                })?),
            };
            let current = WeightVector::new(s.weights.clone().unwrap_or_else(|| vec![1.0; n]), Strategy::GradNorm, Some(it))?;
            if let Some(w) = current.weights.iter().find(|w| **w <= 0.0) {
                return Err(Error::config("balance.weights", format!("GradNorm weights must be positive, got {w}")));
            }
            let step = gradnorm_step(t, it, &grads, &current)?;
            let g = grads.magnitudes()?;
            // Targets are held constant; d|G_i - target_i|/dw_i = sign * G_i / w_i.
            let updated: Vec<f64> = (0..n)
                .map(|i| {
                    let sign = (g[i] - step.targets[i]).signum() * f64::from(g[i] != step.targets[i]);
                    (current.weights[i] - s.learning_rate * sign * g[i] / current.weights[i]).max(0.0)
                })
                .collect();
            let total: f64 = updated.iter().sum();
            if !(total > 0.0) {
                return Err(Error::domain("GradNorm update drove every weight to zero"));
            }
            details.0 = vec!["task", "grad", "target", "objective", "inverse_rate", "relative_rate"];
            details.1 = (0..n)
                .map(|i| {
                    vec![
                        t.tasks()[i].clone(),
                        num(g[i]),
                        num(step.targets[i]),
                        num(step.objective[i]),
                        num(step.inverse_rates[i]),
                        num(step.relative_rates[i]),
                    ]
                })
                .collect();
            extra = format!("objective sum {}\n", num(step.objective.iter().sum()));
            WeightVector::new(updated.iter().map(|w| w * n as f64 / total).collect(), Strategy::GradNorm, Some(it))?
        }
        Strategy::Dwa => dwa_weights(need_trace()?, need_iter()?, s.temperature)?,
        Strategy::Dtp => {
            let k = require(&s.kpis, S, "kpis", "for dtp")?;
            let f = require(&s.focusing, S, "focusing", "for dtp")?;
            WeightVector {
                iteration,
                ..dtp_weights(&k, &f)?
            }
        }
        Strategy::Mgda => {
            let p = require(&s.gradients, S, "gradients", "for mgda")?;
            let sol = mgda_min_norm(&gradient_rows(ctx, &p)?)?;
            extra = format!("min norm {} after {} iterations\n", num(sol.norm), sol.iterations);
            details.0 = vec!["iteration", "norm"];
            details.1 = sol
                .norm_history
                .iter()
                .enumerate()
                .map(|(i, v)| vec![i.to_string(), num(*v)])
                .collect();
            WeightVector::new(sol.alphas, Strategy::Mgda, iteration)?
        }
        Strategy::Heuristic => {
            let avg = match &s.average_losses {
                Some(a) => a.clone(),
                None => {
                    let t = need_trace()?;
                    let mut sum = vec![0.0; t.num_tasks()];
                    let mut count = vec![0usize; t.num_tasks()];
                    for r in t.records().iter().filter(|r| iteration.is_none_or(|it| r.iteration <= it)) {
                        sum[r.task] += r.loss;
                        count[r.task] += 1;
                    }
                    sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
                }
            };
            WeightVector {
                iteration,
                ..magnitude_heuristic_weights(&avg)?
            }
        }
    };

    let names = task_names(trace.as_ref(), weights.len());
    if names.len() != weights.len() {
        return Err(Error::dim(format!("{} weights for {} trace tasks", weights.len(), names.len())));
    }
    let mut sink = ctx.sink(S, &s)?;
    sink.csv(
        "weights.csv",
        &["task", "weight"],
        names.iter().zip(&weights.weights).map(|(t, w)| [t.clone(), num(*w)]),
    )?;
    if !details.0.is_empty() {
        sink.csv("details.csv", &details.0, details.1)?;
    }
    let mut summary = format!("{} weights", weights.strategy.name());
    if let Some(it) = weights.iteration {
        summary.push_str(&format!(" at iteration {it}"));
    }
    summary.push('\n');
    for (t, w) in names.iter().zip(&weights.weights) {
        summary.push_str(&format!("{t}: {}\n", num(*w)));
    }
    summary.push_str(&extra);
    done(sink, summary)
}

/// Two-decimal percentage without a negative zero.
pub fn format_percent(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" { "0.00%".into() } else { format!("{s}%") }
}

pub(crate) fn delta(ctx: &Ctx) -> Result<Outcome> {
    const S: &str = "delta-mtl";
    let s: DeltaSection = ctx.cfg.section(S)?;
    let model = read_metrics(ctx.open(&s.model)?)?;
    let baseline = read_metrics(ctx.open(&s.baseline)?)?;
    let d = delta_mtl(&model, &baseline)?;
    let n = baseline.tasks.len() as f64;
    let mut rows = Vec::new();
    for (i, task) in baseline.tasks.iter().enumerate() {
        let m = model.tasks.iter().position(|t| t == task).expect("delta_mtl matched every task");
        let (b, v) = (baseline.values[i], model.values[m]);
        let sign = if baseline.lower_is_better[i] { -1.0 } else { 1.0 };
        rows.push([
            task.clone(),
            num(b),
            num(v),
            u8::from(baseline.lower_is_better[i]).to_string(),
            num(100.0 * sign * (v - b) / b / n),
        ]);
    }
    let mut sink = ctx.sink(S, &s)?;
    sink.csv("delta.csv", &["task", "baseline", "model", "lower_is_better", "contribution_pct"], rows)?;
    done(sink, format!("delta_mtl {}\n", format_percent(d)))
}

pub(crate) fn pixel(ctx: &Ctx) -> Result<Outcome> {
    const S: &str = "pixel-affinity";
    let s: PixelSection = ctx.cfg.section(S)?;
    if s.labels.len() < 2 {
        return Err(Error::config("pixel-affinity.labels", "at least two label maps are required"));
    }
    let tasks = s
        .labels
        .iter()
        .map(|l| {
            let map = LabelMap::from_tensor(&ctx.tensor(&l.path)?, l.kind)?;
            let rule = match l.kind {
                crate::io::LabelKind::Categorical => AffinityRule::categorical(s.radius, 1),
                crate::io::LabelKind::Continuous => AffinityRule::relative(l.threshold, s.radius, 1),
            };
            Ok(TaskLabels {
                name: l.name.clone(),
                map,
                rule,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sweep = dilation_sweep(&tasks, &s.dilations)?;
    let mut summary = String::new();
    for r in &sweep {
        summary.push_str(&format!("d={} {}/{}: {:.4}\n", r.dilation, r.task_a, r.task_b, r.correspondence));
    }
    let mut sink = ctx.sink(S, &s)?;
    sink.csv(
        "sweep.csv",
        &["dilation", "task_a", "task_b", "correspondence"],
        sweep
            .iter()
            .map(|r| [r.dilation.to_string(), r.task_a.clone(), r.task_b.clone(), num(r.correspondence)]),
    )?;
    done(sink, summary)
}

fn unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(u) = crate::contrastive::l2_normalize(&v) {
            return u;
        }
    }
}

/// `|a - f| / max(|a|, |f|)` over whole vectors.
pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|f| f * f).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for d in 0..x.len() {
        probe[d] = x[d] + h;
        let up = f(&probe)?;
        probe[d] = x[d] - h;
        let down = f(&probe)?;
        probe[d] = x[d];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub(crate) fn contrastive(ctx: &Ctx) -> Result<Outcome> {
    const S: &str = "contrastive-check";
    let s: ContrastiveSection = ctx.cfg.section(S)?;
    let params: ContrastiveConfig = s.params.into();
    params.validate().map_err(|e| Error::config("contrastive-check.params", e.to_string()))?;
    if s.neighbors_exceed_queue() {
        return Err(Error::config("contrastive-check.params.neighbors", "must not exceed queue_size"));
    }
    if s.dim == 0 || s.backbone_dim == 0 || s.instances == 0 || s.positives == 0 {
        return Err(Error::config(S, "dim, backbone_dim, positives and instances must be positive"));
    }
    if !(s.fd_step > 0.0) {
        return Err(Error::config("contrastive-check.fd_step", "must be positive"));
    }
    let tau = params.temperature;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut rows = Vec::with_capacity(s.instances);
    let (mut worst_c, mut worst_k) = (0.0f64, 0.0f64);
    for inst in 0..s.instances {
        let anchor = unit(&mut rng, s.dim);
        let positives: Vec<_> = (0..s.positives).map(|_| unit(&mut rng, s.dim)).collect();
        let negatives: Vec<_> = (0..s.negatives).map(|_| unit(&mut rng, s.dim)).collect();
        let cg = contrastive_loss(&anchor, &positives, &negatives, tau)?;
        let fd = central_difference(&anchor, s.fd_step, |a| Ok(contrastive_loss(a, &positives, &negatives, tau)?.loss))?;
        let err_c = relative_error(&cg.anchor, &fd);

        let mut queue = EmbeddingQueue::new(s.queue_size, s.dim, Some(s.backbone_dim))?;
        // Overfill so the FIFO eviction path is exercised.
        for _ in 0..2 {
            let heads: Vec<_> = (0..s.queue_size).map(|_| unit(&mut rng, s.dim)).collect();
            let backs: Vec<_> = (0..s.queue_size).map(|_| unit(&mut rng, s.backbone_dim)).collect();
            queue.push(&heads, Some(&backs))?;
        }
        let query = unit(&mut rng, s.backbone_dim);
        let idx = mine_neighbors(&query, &queue, params.neighbors)?;
        let positive = unit(&mut rng, s.dim);
        let kg = knn_loss(&positive, &queue, &idx, tau)?;
        let fd = central_difference(&positive, s.fd_step, |p| Ok(knn_loss(p, &queue, &idx, tau)?.loss))?;
        let err_k = relative_error(&kg.positive, &fd);
        let total = total_ssl_loss(cg.loss, kg.loss, params.nn_weight)?;
        worst_c = worst_c.max(err_c);
        worst_k = worst_k.max(err_k);
        rows.push([inst.to_string(), num(cg.loss), num(err_c), num(kg.loss), num(err_k), num(total)]);
    }
    let mut sink = ctx.sink(S, &s)?;
    sink.csv(
        "checks.csv",
        &["instance", "contrastive_loss", "contrastive_grad_error", "knn_loss", "knn_grad_error", "total_loss"],
        rows,
    )?;
    let summary = format!(
        "{} instances; max relative gradient error: contrastive {:.3e}, knn {:.3e}\n",
        s.instances, worst_c, worst_k
    );
    done(sink, summary)
}

impl ContrastiveSection {
    fn neighbors_exceed_queue(&self) -> bool {
        self.params.neighbors > self.queue_size
    }
}

pub(crate) fn crop(ctx: &Ctx) -> Result<Outcome> {
    const S: &str = "crop-stats";
    let s: CropSection = ctx.cfg.section(S)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let (counts, summary_rows): (Vec<u64>, Vec<(&str, String)>) = match s.mode {
        CropStatsMode::Pairs => {
            let stats = iou_pair_stats(s.width, s.height, s.scale, s.aspect, s.threshold, s.samples, &mut rng)?;
            let rows = vec![
                ("pairs", stats.total().to_string()),
                ("draws", stats.draws.to_string()),
                ("acceptance_rate", num(stats.acceptance_rate)),
            ];
            (stats.counts, rows)
        }
        CropStatsMode::Multicrop => {
            if s.samples == 0 || s.crops == 0 {
                return Err(Error::config("crop-stats.samples", "samples and crops must be positive"));
            }
            let mut counts = vec![0u64; HISTOGRAM_BINS];
            let (mut attempts, mut iou_sum, mut area_sum) = (0usize, 0.0, 0.0);
            for _ in 0..s.samples {
                let anchor = sample_resized_crop(s.width, s.height, s.scale, s.aspect, &mut rng)?;
                for _ in 0..s.crops {
                    let (c, a) = sample_constrained_crop(&anchor, s.small_scale, s.aspect, s.constraint, &mut rng)?;
                    let iou = rect_iou(&anchor, &c);
                    counts[crate::contrastive::iou_bin(iou)] += 1;
                    attempts += a;
                    iou_sum += iou;
                    area_sum += c.area_fraction();
                }
            }
            let total = (s.samples * s.crops) as f64;
            let rows = vec![
                ("crops", (s.samples * s.crops).to_string()),
                ("mean_attempts", num(attempts as f64 / total)),
                ("mean_iou_with_anchor", num(iou_sum / total)),
                ("mean_area_fraction", num(area_sum / total)),
            ];
            (counts, rows)
        }
    };
    let mut sink = ctx.sink(S, &s)?;
    sink.csv(
        "histogram.csv",
        &["iou_lo", "iou_hi", "count"],
        counts.iter().enumerate().map(|(i, c)| {
            let (lo, hi) = IouStats::bin_edges(i);
            [num(lo), num(hi), c.to_string()]
        }),
    )?;
    let summary = summary_rows.iter().map(|(k, v)| format!("{k}: {v}\n")).collect::<String>();
    sink.csv("summary.csv", &["key", "value"], summary_rows.iter().map(|(k, v)| [k.to_string(), v.clone()]))?;
    done(sink, summary)
}

fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn load_stack(ctx: &Ctx, paths: &[std::path::PathBuf]) -> Result<TaskFeatureStack> {
    TaskFeatureStack::new(
        paths
            .iter()
            .map(|p| FeatureMap::from_tensor(&ctx.tensor(p)?))
            .collect::<Result<Vec<_>>>()?,
    )
}

pub(crate) fn distill(ctx: &Ctx) -> Result<Outcome> {
    const S: &str = "distill-check";
    let s: DistillSection = ctx.cfg.section(S)?;
    let mut report: Vec<(String, f64)> = Vec::new();
    let mut outputs: Vec<(String, FeatureMap)> = Vec::new();
    match s.op {
        DistillOp::Padnet => {
            let stack = load_stack(ctx, &require(&s.features, S, "features", "for padnet")?)?;
            let params = AttentionParams::from_tensors(
                &ctx.tensor(&require(&s.attention_weight, S, "attention_weight", "for padnet")?)?,
                &ctx.tensor(&require(&s.attention_bias, S, "attention_bias", "for padnet")?)?,
            )?;
            let out = padnet_distill(&stack, &params)?;
            let oracle = reference::distill(&stack, &params, None);
            for (k, (m, r)) in out.maps().iter().zip(&oracle).enumerate() {
                report.push((format!("task{k}"), max_abs_diff(m, r)));
                outputs.push((format!("task{k}.mtkt"), m.clone()));
            }
        }
        DistillOp::Mtinet => {
            let specs = require(&s.scales, S, "scales", "for mtinet")?;
            let mut stacks = Vec::new();
            let mut params = Vec::new();
            for sc in &specs {
                stacks.push(load_stack(ctx, &sc.features)?);
                params.push(ScaleParams {
                    attention: AttentionParams::from_tensors(&ctx.tensor(&sc.attention_weight)?, &ctx.tensor(&sc.attention_bias)?)?,
                    value: AttentionParams::from_tensors(&ctx.tensor(&sc.value_weight)?, &ctx.tensor(&sc.value_bias)?)?,
                });
            }
            let out = mtinet_distill(&stacks, &params)?;
            for (si, (o, (st, p))) in out.iter().zip(stacks.iter().zip(&params)).enumerate() {
                let oracle = reference::distill(st, &p.attention, Some(&p.value));
                for (k, (m, r)) in o.maps().iter().zip(&oracle).enumerate() {
                    report.push((format!("scale{si}_task{k}"), max_abs_diff(m, r)));
                    outputs.push((format!("scale{si}_task{k}.mtkt"), m.clone()));
                }
            }
        }
        DistillOp::Fpm => {
            let stack = load_stack(ctx, &require(&s.features, S, "features", "for fpm")?)?;
            let conv = |w: &Option<std::path::PathBuf>, b: &Option<std::path::PathBuf>, wk: &str, bk: &str| -> Result<Conv> {
                Conv::from_tensors(
                    &ctx.tensor(&require(w, S, wk, "for fpm")?)?,
                    &ctx.tensor(&require(b, S, bk, "for fpm")?)?,
                )
            };
            let params = HarmonizeParams {
                mix: conv(&s.mix_weight, &s.mix_bias, "mix_weight", "mix_bias")?,
                activation: s.activation,
                reduce: conv(&s.reduce_weight, &s.reduce_bias, "reduce_weight", "reduce_bias")?,
            };
            let fused = feature_harmonize(&stack, &params)?;
            let (shared_ref, att_ref) = reference::harmonize(&stack, &params);
            report.push(("shared".into(), max_abs_diff(&fused.shared, &shared_ref)));
            for (k, (a, r)) in fused.attention.iter().zip(&att_ref).enumerate() {
                report.push((format!("attention{k}"), max_abs_diff(a, r)));
                outputs.push((format!("attention{k}.mtkt"), a.clone()));
            }
            let sum_err = (0..fused.shared.data.len())
                .map(|j| (fused.attention.iter().map(|a| a.data[j]).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            report.push(("attention_sum".into(), sum_err));
            outputs.push(("shared.mtkt".into(), fused.shared.clone()));
            if let Some(gates) = &s.gates {
                if gates.len() != stack.num_tasks() {
                    return Err(Error::config(
                        "distill-check.gates",
                        format!("expected one gate per task ({})", stack.num_tasks()),
                    ));
                }
                for (k, (g, f)) in gates.iter().zip(stack.maps()).enumerate() {
                    let mlp = SeMlp::bottleneck(
                        Dense::from_tensors(&ctx.tensor(&g.squeeze_weight)?, &ctx.tensor(&g.squeeze_bias)?)?,
                        Dense::from_tensors(&ctx.tensor(&g.excite_weight)?, &ctx.tensor(&g.excite_bias)?)?,
                    );
                    let gated = se_gate(&fused.shared, &mlp)?;
                    let (gated_ref, _) = reference::se_gate(&fused.shared, &mlp);
                    report.push((format!("gate{k}"), max_abs_diff(&gated.output, &gated_ref)));
                    // The gated shared map is added back to the task's own features.
                    outputs.push((format!("task{k}.mtkt"), f.add(&gated.output)?));
                }
            }
        }
    }
    let mut sink = ctx.sink(S, &s)?;
    for (name, map) in &outputs {
        sink.tensor(name, &map.to_tensor())?;
    }
    let failures: Vec<&str> = report.iter().filter(|(_, d)| !(*d <= s.tolerance)).map(|(n, _)| n.as_str()).collect();
    sink.csv(
        "report.csv",
        &["output", "max_abs_diff", "tolerance", "pass"],
        report
            .iter()
            .map(|(n, d)| [n.clone(), num(*d), num(s.tolerance), (*d <= s.tolerance).to_string()]),
    )?;
    let files = sink.finish()?;
    if !failures.is_empty() {
        return Err(Error::domain(format!("outputs disagree with the reference: {}", failures.join(", "))));
    }
    Ok(Outcome {
        summary: format!("{} outputs match the reference within {:e}\n", report.len(), s.tolerance),
        files,
    })
}
