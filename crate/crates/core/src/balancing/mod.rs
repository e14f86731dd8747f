//! Task-balancing strategies.
//!
//! Every strategy maps a slice of training history (per-task losses,
//! gradient magnitudes, KPIs) to weights `w_i` of the multi-task objective
//! `sum_i w_i * L_i`.

mod metric;
mod mgda;

pub use metric::{delta_mtl, read_metrics, MetricReport};
pub use mgda::{mgda_min_norm, min_norm_two, MinNormSolution};

use crate::io::TaskTrace;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Fixed,
    Uncertainty,
    GradNorm,
    Dwa,
    Dtp,
    Mgda,
    Heuristic,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fixed => "fixed",
            Strategy::Uncertainty => "uncertainty",
            Strategy::GradNorm => "gradnorm",
            Strategy::Dwa => "dwa",
            Strategy::Dtp => "dtp",
            Strategy::Mgda => "mgda",
            Strategy::Heuristic => "heuristic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub strategy: Strategy,
    pub iteration: Option<u64>,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>, strategy: Strategy, iteration: Option<u64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::domain(format!("weight {w} must be finite and non-negative")));
        }
        Ok(WeightVector {
            weights,
            strategy,
            iteration,
        })
    }

    pub fn uniform(n: usize, strategy: Strategy, iteration: Option<u64>) -> Self {
        WeightVector {
            weights: vec![1.0; n],
            strategy,
            iteration,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Shared-layer gradients of each task, either as full vectors or as norms.
#[derive(Debug, Clone, PartialEq)]
pub enum GradSnapshot {
    Vectors(Vec<Vec<f64>>),
    Magnitudes(Vec<f64>),
}

impl GradSnapshot {
    pub fn num_tasks(&self) -> usize {
        match self {
            GradSnapshot::Vectors(v) => v.len(),
            GradSnapshot::Magnitudes(m) => m.len(),
        }
    }

    pub fn magnitudes(&self) -> Result<Vec<f64>> {
        let mags = match self {
            GradSnapshot::Vectors(v) => {
                if let Some(first) = v.first() {
                    if v.iter().any(|g| g.len() != first.len()) {
                        return Err(Error::dim("task gradients have different shapes"));
                    }
                }
                v.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
            }
            GradSnapshot::Magnitudes(m) => m.clone(),
        };
        if let Some(g) = mags.iter().find(|g| !g.is_finite() || **g < 0.0) {
            return Err(Error::domain(format!("gradient magnitude {g} must be finite and non-negative")));
        }
        Ok(mags)
    }
}

/// `sum_i w_i * L_i`.
pub fn weighted_mtl_loss(weights: &WeightVector, losses: &[f64]) -> Result<f64> {
    if weights.len() != losses.len() {
        return Err(Error::dim(format!("{} weights for {} losses", weights.len(), losses.len())));
    }
    Ok(weights.weights.iter().zip(losses).map(|(w, l)| w * l).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyObjective {
    pub value: f64,
    /// Derivative of `value` with respect to each `sigma_i`.
    pub grad_sigma: Vec<f64>,
    /// `1 / (2 sigma_i^2)`.
    pub effective_weights: Vec<f64>,
}

/// Homoscedastic uncertainty objective `sum_i L_i / (2 s_i^2) + log s_i`.
pub fn uncertainty_objective(losses: &[f64], sigmas: &[f64]) -> Result<UncertaintyObjective> {
    if losses.len() != sigmas.len() {
        return Err(Error::dim(format!("{} losses for {} noise parameters", losses.len(), sigmas.len())));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::domain(format!("noise parameter {s} must be positive")));
    }
    let mut value = 0.0;
    let mut grad_sigma = Vec::with_capacity(sigmas.len());
    let mut effective_weights = Vec::with_capacity(sigmas.len());
    for (&l, &s) in losses.iter().zip(sigmas) {
        let w = 1.0 / (2.0 * s * s);
        value += w * l + s.ln();
        grad_sigma.push(-l / (s * s * s) + 1.0 / s);
        effective_weights.push(w);
    }
    Ok(UncertaintyObjective {
        value,
        grad_sigma,
        effective_weights,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradNormStep {
    /// `|G_i - mean(G) * r_i|`.
    pub objective: Vec<f64>,
    /// `L_i(t) / L_i(0)`.
    pub inverse_rates: Vec<f64>,
    /// Inverse rate relative to the task mean.
    pub relative_rates: Vec<f64>,
    /// Target magnitude `mean(G) * r_i` each `G_i` is pulled towards.
    pub targets: Vec<f64>,
    /// Caller weights rescaled to sum to the task count.
    pub renormalized_weights: WeightVector,
}

/// GradNorm quantities at iteration `t`. `grads` are the magnitudes of the
/// weighted task gradients at `t`.
pub fn gradnorm_step(trace: &TaskTrace, t: u64, grads: &GradSnapshot, weights: &WeightVector) -> Result<GradNormStep> {
    let n = trace.num_tasks();
    if grads.num_tasks() != n || weights.len() != n {
        return Err(Error::dim(format!(
            "trace has {n} tasks, gradients {}, weights {}",
            grads.num_tasks(),
            weights.len()
        )));
    }
    let initial = trace
        .losses_at(0)
        .ok_or_else(|| Error::MissingHistory("GradNorm needs losses of every task at iteration 0".into()))?;
    if let Some(i) = initial.iter().position(|&l| l <= 0.0) {
        return Err(Error::domain(format!("initial loss of task {} is zero", trace.tasks()[i])));
    }
    let current = trace
        .losses_at(t)
        .ok_or_else(|| Error::MissingHistory(format!("no losses for every task at iteration {t}")))?;
    let g = grads.magnitudes()?;

    let inverse_rates: Vec<f64> = current.iter().zip(&initial).map(|(c, i)| c / i).collect();
    let mean_rate = inverse_rates.iter().sum::<f64>() / n as f64;
    let relative_rates: Vec<f64> = if mean_rate > 0.0 {
        inverse_rates.iter().map(|r| r / mean_rate).collect()
    } else {
        vec![1.0; n]
    };
    let mean_g = g.iter().sum::<f64>() / n as f64;
    let targets: Vec<f64> = relative_rates.iter().map(|r| mean_g * r).collect();
    let objective = g.iter().zip(&targets).map(|(gi, ti)| (gi - ti).abs()).collect();

    let total = weights.sum();
    if !(total > 0.0) {
        return Err(Error::domain("weights must have a positive sum to be renormalized"));
    }
    let scale = n as f64 / total;
    let renormalized_weights = WeightVector::new(
        weights.weights.iter().map(|w| w * scale).collect(),
        Strategy::GradNorm,
        Some(t),
    )?;
    Ok(GradNormStep {
        objective,
        inverse_rates,
        relative_rates,
        targets,
        renormalized_weights,
    })
}

/// Dynamic weight averaging for iteration `t` from the loss ratios at
/// `t-1` and `t-2`.
pub fn dwa_weights(trace: &TaskTrace, t: u64, temperature: f64) -> Result<WeightVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::domain(format!("temperature {temperature} must be positive")));
    }
    if t < 2 {
        return Err(Error::MissingHistory(format!(
            "iteration {t} lacks two previous iterations; use fixed weights until iteration 2"
        )));
    }
    let (prev, prev2) = match (trace.losses_at(t - 1), trace.losses_at(t - 2)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::MissingHistory(format!(
                "iterations {} and {} must log every task; use fixed weights meanwhile",
                t - 2,
                t - 1
            )))
        }
    };
    if let Some(i) = prev2.iter().position(|&l| l <= 0.0) {
        return Err(Error::domain(format!(
            "loss of task {} at iteration {} must be positive",
            trace.tasks()[i],
            t - 2
        )));
    }
    let rates: Vec<f64> = prev.iter().zip(&prev2).map(|(a, b)| a / b).collect();
    dwa_from_rates(&rates, temperature, Some(t))
}

/// `N * softmax(r / T)`.
pub fn dwa_from_rates(rates: &[f64], temperature: f64, iteration: Option<u64>) -> Result<WeightVector> {
    if rates.is_empty() {
        return Err(Error::dim("no tasks"));
    }
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature {temperature} must be positive")));
    }
    let n = rates.len() as f64;
    let scaled: Vec<f64> = rates.iter().map(|r| r / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    WeightVector::new(exps.iter().map(|e| n * e / z).collect(), Strategy::Dwa, iteration)
}

/// Dynamic task prioritization: `-(1 - k_i)^g_i * ln k_i`.
pub fn dtp_weights(kpis: &[f64], focusing: &[f64]) -> Result<WeightVector> {
    if kpis.len() != focusing.len() {
        return Err(Error::dim(format!("{} KPIs for {} focusing parameters", kpis.len(), focusing.len())));
    }
    if let Some(k) = kpis.iter().find(|k| !(**k > 0.0 && **k < 1.0)) {
        return Err(Error::domain(format!("KPI {k} must lie in (0, 1)")));
    }
    if let Some(g) = focusing.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
        return Err(Error::domain(format!("focusing parameter {g} must be non-negative")));
    }
    let w = kpis
        .iter()
        .zip(focusing)
        .map(|(&k, &g)| -(1.0 - k).powf(g) * k.ln())
        .collect();
    WeightVector::new(w, Strategy::Dtp, None)
}

/// Weights that equalize the averaged task losses: the largest-loss task
/// gets weight 1.
pub fn magnitude_heuristic_weights(avg_losses: &[f64]) -> Result<WeightVector> {
    if avg_losses.is_empty() {
        return Err(Error::dim("no tasks"));
    }
    if let Some(l) = avg_losses.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::domain(format!("average loss {l} must be positive")));
    }
    let max = avg_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    WeightVector::new(avg_losses.iter().map(|l| max / l).collect(), Strategy::Heuristic, None)
}
