//! Min-norm point of the convex hull of task gradients.
//!
//! Minimizes `|sum_i a_i g_i|^2` over the probability simplex with
//! pairwise Frank-Wolfe iterations on the Gram matrix. Each step moves
//! weight from the active vertex with the largest inner product to the
//! vertex with the smallest one, using the exact two-point line search.
//! An exact affine solve on the final support, with Wolfe-style minor
//! cycles, removes the slow linear tail.

use crate::io::{DType, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MinNormSolution {
    pub alphas: Vec<f64>,
    pub direction: Tensor,
    pub norm: f64,
    /// Norm of the combined direction after initialization and every step.
    pub norm_history: Vec<f64>,
    pub iterations: usize,
}

/// Weight `gamma` on the first point minimizing `|gamma a + (1 - gamma) b|`,
/// given `a.a`, `a.b` and `b.b`.
fn line_search(aa: f64, ab: f64, bb: f64) -> f64 {
    let denom = aa + bb - 2.0 * ab;
    if denom <= 0.0 {
        return 1.0;
    }
    ((bb - ab) / denom).clamp(0.0, 1.0)
}

/// Closed-form min-norm weight of `g1` for two gradients.
pub fn min_norm_two(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::dim("gradients have different lengths"));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (aa, ab, bb) = (dot(g1, g1), dot(g1, g2), dot(g2, g2));
    if aa + bb - 2.0 * ab <= 0.0 {
        return Ok(0.5);
    }
    Ok(line_search(aa, ab, bb))
}

const MIN_IMPROVEMENT: f64 = 1e-10;

/// Minimizes over the affine hull of the support, then walks back toward
/// `alphas` whenever that minimizer leaves the simplex, dropping the vertex
/// that hits zero. A tiny ridge keeps affinely dependent supports solvable.
fn polish(gram: &[f64], alphas: &[f64]) -> Option<Vec<f64>> {
    let n = alphas.len();
    let scale = (0..n).map(|i| gram[i * n + i]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    let ridge = 1e-14 * scale;
    let mut current = alphas.to_vec();
    for _ in 0..n {
        let support: Vec<usize> = (0..n).filter(|&i| current[i] > 0.0).collect();
        let z = affine_minimizer(gram, n, &support, ridge)?;
        let mut theta = 1.0f64;
        for (&i, &zi) in support.iter().zip(&z) {
            if zi < 0.0 {
                theta = theta.min(current[i] / (current[i] - zi));
            }
        }
        for (&i, &zi) in support.iter().zip(&z) {
            current[i] += theta * (zi - current[i]);
        }
        if theta >= 1.0 {
            return Some(current);
        }
        for &i in &support {
            if current[i] <= 1e-300 {
                current[i] = 0.0;
            }
        }
        let total: f64 = current.iter().sum();
        current.iter_mut().for_each(|a| *a /= total);
    }
    Some(current)
}

/// Solves the bordered system `[M_S + rI, 1; 1^T, 0] [z; -l] = [0; 1]`.
fn affine_minimizer(gram: &[f64], n: usize, support: &[usize], ridge: f64) -> Option<Vec<f64>> {
    let k = support.len();
    let mut a = vec![vec![0.0; k + 2]; k + 1];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r][c] = gram[i * n + j] + if r == c { ridge } else { 0.0 };
        }
        a[r][k] = 1.0;
        a[k][r] = 1.0;
    }
    a[k][k + 1] = 1.0;
    let m = k + 1;
    for col in 0..m {
        let pivot = (col..m).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col] == 0.0 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..m {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..=m {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    let z: Vec<f64> = (0..k).map(|i| a[i][m] / a[i][i]).collect();
    z.iter().all(|v| v.is_finite()).then_some(z)
}

pub fn mgda_min_norm(grads: &[Vec<f64>]) -> Result<MinNormSolution> {
    let n = grads.len();
    if n < 2 {
        return Err(Error::dim(format!("need at least 2 task gradients, got {n}")));
    }
    let p = grads[0].len();
    if grads.iter().any(|g| g.len() != p) {
        return Err(Error::dim("task gradients have different shapes"));
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("gradients contain non-finite values"));
    }

    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }

    let mut alphas = vec![1.0 / n as f64; n];
    let mut m_alpha: Vec<f64> = (0..n).map(|i| (0..n).map(|j| gram[i * n + j] * alphas[j]).sum()).collect();
    let mut sq = quad(&alphas, &m_alpha);
    let mut norm_history = vec![sq.max(0.0).sqrt()];
    let max_iter = 10 * n * n;
    let mut iterations = 0;

    while iterations < max_iter {
        // Pairwise step: shift mass from the worst active vertex to the
        // best vertex, with the exact line search along that edge.
        let s = (0..n)
            .min_by(|&a, &b| m_alpha[a].total_cmp(&m_alpha[b]))
            .expect("at least two tasks");
        let v = (0..n)
            .filter(|&i| alphas[i] > 0.0)
            .max_by(|&a, &b| m_alpha[a].total_cmp(&m_alpha[b]))
            .expect("the simplex point has support");
        let gap = m_alpha[v] - m_alpha[s];
        if s == v || !(gap > 0.0) {
            break;
        }
        let curvature = gram[s * n + s] + gram[v * n + v] - 2.0 * gram[s * n + v];
        let step = if curvature > 0.0 { (gap / curvature).min(alphas[v]) } else { alphas[v] };
        let mut next = alphas.clone();
        next[s] += step;
        next[v] = if step == alphas[v] { 0.0 } else { next[v] - step };
        let next_m: Vec<f64> = (0..n)
            .map(|i| m_alpha[i] + step * (gram[i * n + s] - gram[i * n + v]))
            .collect();
        let next_sq = quad(&next, &next_m);
        if next_sq > sq {
            break;
        }
        iterations += 1;
        let improvement = sq.max(0.0).sqrt() - next_sq.max(0.0).sqrt();
        alphas = next;
        m_alpha = next_m;
        sq = next_sq;
        norm_history.push(sq.max(0.0).sqrt());
        if improvement < MIN_IMPROVEMENT {
            break;
        }
    }

    // Pairwise steps converge only linearly on interior optima, so finish
    // with the exact minimizer over the affine hull of the support.
    if let Some(polished) = polish(&gram, &alphas) {
        let polished_m: Vec<f64> = (0..n).map(|i| (0..n).map(|j| gram[i * n + j] * polished[j]).sum()).collect();
        let polished_sq = quad(&polished, &polished_m);
        if polished_sq < sq {
            alphas = polished;
            sq = polished_sq;
            norm_history.push(sq.max(0.0).sqrt());
        }
    }

    let mut direction = vec![0.0; p];
    for (a, g) in alphas.iter().zip(grads) {
        for (d, v) in direction.iter_mut().zip(g) {
            *d += a * v;
        }
    }
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    Ok(MinNormSolution {
        alphas,
        direction: Tensor::new(DType::F64, vec![p], direction)?,
        norm,
        norm_history,
        iterations,
    })
}

fn quad(alpha: &[f64], m_alpha: &[f64]) -> f64 {
    alpha.iter().zip(m_alpha).map(|(a, m)| a * m).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_gradients_cancel() {
        let g = vec![0.3, -1.2, 2.0];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let s = mgda_min_norm(&[g, neg]).unwrap();
        assert_eq!(s.alphas, vec![0.5, 0.5]);
        assert!(s.norm <= 1e-12);
    }

    #[test]
    fn orthogonal_unit_gradients() {
        let s = mgda_min_norm(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((s.alphas[0] - 0.5).abs() < 1e-15);
        assert_eq!(s.direction.data(), &[0.5, 0.5]);
        assert!((s.norm - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn two_task_closed_form_clips() {
        // g2 is longer and aligned with g1: the min-norm point is g1 alone.
        let g1 = vec![1.0, 0.0];
        let g2 = vec![3.0, 0.0];
        assert_eq!(min_norm_two(&g1, &g2).unwrap(), 1.0);
        let s = mgda_min_norm(&[g1, g2]).unwrap();
        assert!((s.alphas[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(mgda_min_norm(&[vec![1.0]]).is_err());
        assert!(mgda_min_norm(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(mgda_min_norm(&[vec![f64::NAN], vec![1.0]]).is_err());
    }
}
