//! Representation dissimilarity matrices and the task-affinity tensor.
//!
//! For every network location and task, the activations of `K` probe images
//! are flattened into a `K x C` feature matrix. Its RDM holds `1 - pearson`
//! between every pair of rows. Two tasks are compared at a location by the
//! Spearman correlation of the strict upper triangles of their RDMs.

use rayon::prelude::*;

use crate::io::{DType, Tensor};
use crate::{Error, Result};

/// `K` flattened activation vectors, one per probe image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "{rows}x{cols} feature matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    /// Uses the leading dimension as the image axis and linearizes the rest.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (&rows, rest) = t
            .shape()
            .split_first()
            .ok_or_else(|| Error::dim("feature tensor must have at least one dimension"))?;
        let cols = rest.iter().product::<usize>();
        Self::new(rows, cols, t.data().to_vec())
    }

    /// Keeps only the first `k` images.
    pub fn truncate(mut self, k: usize) -> Result<Self> {
        if k > self.rows {
            return Err(Error::dim(format!("requested {k} images but the dump holds {}", self.rows)));
        }
        self.rows = k;
        self.data.truncate(k * self.cols);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Symmetric `K x K` matrix of `1 - rho` with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    k: usize,
    values: Vec<f64>,
}

impl Rdm {
    pub fn from_values(k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != k * k {
            return Err(Error::dim(format!("RDM of size {k} needs {} values", k * k)));
        }
        for i in 0..k {
            if values[i * k + i] != 0.0 {
                return Err(Error::domain(format!("RDM diagonal entry {i} is not zero")));
            }
            for j in (i + 1)..k {
                let v = values[i * k + j];
                if v != values[j * k + i] {
                    return Err(Error::domain(format!("RDM is not symmetric at ({i}, {j})")));
                }
                if !(0.0..=2.0).contains(&v) {
                    return Err(Error::domain(format!("RDM entry {v} outside [0, 2]")));
                }
            }
        }
        Ok(Rdm { k, values })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Strict upper triangle in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k * (self.k.saturating_sub(1)) / 2);
        for i in 0..self.k {
            out.extend_from_slice(&self.values[i * self.k + i + 1..(i + 1) * self.k]);
        }
        out
    }
}

/// Builds the RDM of a feature matrix.
pub fn rdm_from_features(features: &FeatureMatrix) -> Result<Rdm> {
    let k = features.rows;
    if k < 2 {
        return Err(Error::dim(format!("need at least 2 images, got {k}")));
    }
    if features.cols < 2 {
        return Err(Error::dim(format!("need at least 2 features per image, got {}", features.cols)));
    }
    // Standardize each row once so every correlation is a single dot product.
    let mut z = Vec::with_capacity(features.data.len());
    for i in 0..k {
        let row = features.row(i);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let ss: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum();
        if !(ss > 0.0) || !ss.is_finite() {
            return Err(Error::Degenerate(format!("feature row {i} has zero variance")));
        }
        let inv = 1.0 / ss.sqrt();
        z.extend(row.iter().map(|v| (v - mean) * inv));
    }
    let c = features.cols;
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        let zi = &z[i * c..(i + 1) * c];
        for j in (i + 1)..k {
            let zj = &z[j * c..(j + 1) * c];
            let rho = zi.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
            let d = 1.0 - rho;
            values[i * k + j] = d;
            values[j * k + i] = d;
        }
    }
    Ok(Rdm { k, values })
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation of the strict upper triangles of two RDMs.
pub fn spearman_upper(a: &Rdm, b: &Rdm) -> Result<f64> {
    if a.k != b.k {
        return Err(Error::dim(format!("RDM sizes differ: {} vs {}", a.k, b.k)));
    }
    if a.k < 3 {
        return Err(Error::dim(format!("RDMs need at least 3 images, got {}", a.k)));
    }
    let ra = average_ranks(&a.upper_triangle());
    let rb = average_ranks(&b.upper_triangle());
    pearson(&ra, &rb).ok_or_else(|| Error::Degenerate("constant triangle vector".into()))
}

/// `D x N x N` task affinities with task and location labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityTensor {
    tasks: Vec<String>,
    locations: Vec<String>,
    values: Vec<f64>,
}

impl AffinityTensor {
    pub fn new(tasks: Vec<String>, locations: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let (n, d) = (tasks.len(), locations.len());
        if values.len() != d * n * n {
            return Err(Error::dim(format!(
                "affinity tensor {d}x{n}x{n} needs {} values, got {}",
                d * n * n,
                values.len()
            )));
        }
        for l in 0..d {
            for i in 0..n {
                if values[(l * n + i) * n + i] != 1.0 {
                    return Err(Error::domain(format!("location {l}: diagonal entry {i} is not 1")));
                }
                for j in (i + 1)..n {
                    let v = values[(l * n + i) * n + j];
                    if v != values[(l * n + j) * n + i] {
                        return Err(Error::domain(format!("location {l}: not symmetric at ({i}, {j})")));
                    }
                    if !(-1.0..=1.0).contains(&v) {
                        return Err(Error::domain(format!("affinity {v} outside [-1, 1]")));
                    }
                }
            }
        }
        Ok(AffinityTensor { tasks, locations, values })
    }

    /// Reads a `[D, N, N]` tensor; unnamed tasks and locations get index labels.
    pub fn from_tensor(t: &Tensor, tasks: Option<Vec<String>>, locations: Option<Vec<String>>) -> Result<Self> {
        let &[d, n, n2] = t.shape() else {
            return Err(Error::dim(format!("affinity tensor must be [D, N, N], got {:?}", t.shape())));
        };
        if n != n2 {
            return Err(Error::dim(format!("affinity slices must be square, got {n}x{n2}")));
        }
        let tasks = tasks.unwrap_or_else(|| (0..n).map(|i| format!("task{i}")).collect());
        let locations = locations.unwrap_or_else(|| (0..d).map(|i| format!("loc{i}")).collect());
        if tasks.len() != n || locations.len() != d {
            return Err(Error::dim(format!(
                "labels ({} tasks, {} locations) do not match tensor [{d}, {n}, {n}]",
                tasks.len(),
                locations.len()
            )));
        }
        Self::new(tasks, locations, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        let (d, n) = (self.depth(), self.num_tasks());
        Tensor::new(DType::F64, vec![d, n, n], self.values.clone()).expect("shape matches by construction")
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn depth(&self) -> usize {
        self.locations.len()
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn locations(&self) -> &[String] {
        &self.locations
    }

    pub fn get(&self, location: usize, i: usize, j: usize) -> f64 {
        let n = self.tasks.len();
        self.values[(location * n + i) * n + j]
    }

    /// Task dissimilarity `1 - A[d][i][j]`.
    pub fn dissimilarity(&self, location: usize, i: usize, j: usize) -> f64 {
        1.0 - self.get(location, i, j)
    }

    /// Fixed-width text table, one block per location.
    pub fn render_table(&self) -> String {
        let width = self.tasks.iter().map(|t| t.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        for (l, loc) in self.locations.iter().enumerate() {
            out.push_str(&format!("location {loc}\n"));
            out.push_str(&format!("{:width$}", ""));
            for t in &self.tasks {
                out.push_str(&format!(" {t:>width$}"));
            }
            out.push('\n');
            for (i, ti) in self.tasks.iter().enumerate() {
                out.push_str(&format!("{ti:width$}"));
                for j in 0..self.tasks.len() {
                    out.push_str(&format!(" {:>width$.4}", self.get(l, i, j)));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Computes the affinity tensor from `features[location][task]`.
pub fn task_affinity(
    features: &[Vec<FeatureMatrix>],
    tasks: Vec<String>,
    locations: Vec<String>,
) -> Result<AffinityTensor> {
    let (d, n) = (locations.len(), tasks.len());
    if features.len() != d {
        return Err(Error::dim(format!("expected {d} locations, got {}", features.len())));
    }
    for (l, per_task) in features.iter().enumerate() {
        if per_task.len() != n {
            return Err(Error::dim(format!("location {l}: expected {n} tasks, got {}", per_task.len())));
        }
        if let Some(first) = per_task.first() {
            if let Some((t, f)) = per_task.iter().enumerate().find(|(_, f)| f.rows != first.rows) {
                return Err(Error::dim(format!(
                    "location {l}: task {t} has {} images, task 0 has {}",
                    f.rows, first.rows
                )));
            }
        }
    }

    let slices: Vec<Vec<f64>> = features
        .par_iter()
        .map(|per_task| -> Result<Vec<f64>> {
            let rdms = per_task.iter().map(rdm_from_features).collect::<Result<Vec<_>>>()?;
            let mut slice = vec![0.0; n * n];
            for i in 0..n {
                slice[i * n + i] = 1.0;
                for j in (i + 1)..n {
                    let r = spearman_upper(&rdms[i], &rdms[j])?;
                    slice[i * n + j] = r;
                    slice[j * n + i] = r;
                }
            }
            Ok(slice)
        })
        .collect::<Result<_>>()?;
    AffinityTensor::new(tasks, locations, slices.concat())
}
