//! Local pixel-affinity agreement between label maps.
//!
//! For each pixel and each offset of a dilated `(2r+1) x (2r+1)` kernel, a
//! task decides whether the two pixels are similar: equal classes for
//! categorical maps, a relative difference below a threshold for continuous
//! ones. Two tasks agree on a pair when they make the same decision.

use rayon::prelude::*;

use crate::io::{LabelKind, LabelMap};
use crate::{Error, Result};

pub const RELATIVE_EPS: f64 = 1e-12;
pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimilarityKind {
    /// Same class id.
    Equality,
    /// `|a - b| / max(|a|, |b|, eps) <= threshold`.
    RelativeThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityRule {
    pub kind: SimilarityKind,
    pub radius: usize,
    pub dilation: usize,
}

impl AffinityRule {
    pub fn categorical(radius: usize, dilation: usize) -> Self {
        AffinityRule {
            kind: SimilarityKind::Equality,
            radius,
            dilation,
        }
    }

    pub fn relative(threshold: f64, radius: usize, dilation: usize) -> Self {
        AffinityRule {
            kind: SimilarityKind::RelativeThreshold(threshold),
            radius,
            dilation,
        }
    }

    pub fn with_dilation(self, dilation: usize) -> Self {
        AffinityRule { dilation, ..self }
    }

    fn validate(&self, map: &LabelMap) -> Result<()> {
        if self.radius < 1 || self.dilation < 1 {
            return Err(Error::domain("kernel radius and dilation must be at least 1"));
        }
        match (self.kind, map.kind()) {
            (SimilarityKind::Equality, LabelKind::Categorical) => Ok(()),
            (SimilarityKind::RelativeThreshold(t), LabelKind::Continuous) => {
                if t > 0.0 && t.is_finite() {
                    Ok(())
                } else {
                    Err(Error::domain(format!("relative threshold {t} must be positive")))
                }
            }
            (SimilarityKind::Equality, LabelKind::Continuous) => {
                Err(Error::domain("categorical rule applied to a continuous map"))
            }
            (SimilarityKind::RelativeThreshold(_), LabelKind::Categorical) => {
                Err(Error::domain("relative-threshold rule applied to a categorical map"))
            }
        }
    }
}

/// Unordered pixel pair `p < q` (raster indices) and the task's verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffinitySample {
    pub p: usize,
    pub q: usize,
    pub similar: bool,
}

/// Kernel offsets `(dy, dx)` pointing forward in raster order.
fn forward_offsets(radius: usize, dilation: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let d = dilation as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy > 0 || (dy == 0 && dx > 0) {
                out.push((dy * d, dx * d));
            }
        }
    }
    out
}

/// Closed-form number of in-bounds unordered pairs for a geometry.
pub fn pair_count(height: usize, width: usize, radius: usize, dilation: usize) -> usize {
    forward_offsets(radius, dilation)
        .into_iter()
        .map(|(dy, dx)| {
            let rows = (height as isize - dy.abs()).max(0) as usize;
            let cols = (width as isize - dx.abs()).max(0) as usize;
            rows * cols
        })
        .sum()
}

fn similar(kind: SimilarityKind, a: f64, b: f64) -> bool {
    match kind {
        SimilarityKind::Equality => a == b,
        SimilarityKind::RelativeThreshold(t) => {
            a == b || (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_EPS) <= t
        }
    }
}

/// All in-bounds pairs of the dilated kernel, in raster order of `p` and
/// kernel order of the offset. Pairs leaving the image are dropped.
pub fn label_affinity_pairs(map: &LabelMap, rule: &AffinityRule) -> Result<Vec<AffinitySample>> {
    rule.validate(map)?;
    let (h, w) = (map.height() as isize, map.width() as isize);
    let offsets = forward_offsets(rule.radius, rule.dilation);
    let values = map.values();
    let rows: Vec<Vec<AffinitySample>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::new();
            for x in 0..w {
                let p = (y * w + x) as usize;
                for &(dy, dx) in &offsets {
                    let (qy, qx) = (y + dy, x + dx);
                    if qy < 0 || qy >= h || qx < 0 || qx >= w {
                        continue;
                    }
                    let q = (qy * w + qx) as usize;
                    out.push(AffinitySample {
                        p,
                        q,
                        similar: similar(rule.kind, values[p], values[q]),
                    });
                }
            }
            out
        })
        .collect();
    Ok(rows.concat())
}

/// Fraction of pairs on which both tasks make the same decision.
pub fn cross_task_correspondence(a: &[AffinitySample], b: &[AffinitySample]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("pair sets differ in size: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::dim("no pixel pairs to compare"));
    }
    let mut matches = 0usize;
    for (x, y) in a.iter().zip(b) {
        if (x.p, x.q) != (y.p, y.q) {
            return Err(Error::dim(format!(
                "pair sets differ: ({}, {}) vs ({}, {})",
                x.p, x.q, y.p, y.q
            )));
        }
        matches += usize::from(x.similar == y.similar);
    }
    Ok(matches as f64 / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dilation: usize,
    pub task_a: String,
    pub task_b: String,
    pub correspondence: f64,
}

/// A named label map with its similarity rule.
#[derive(Debug, Clone)]
pub struct TaskLabels {
    pub name: String,
    pub map: LabelMap,
    pub rule: AffinityRule,
}

/// Correspondence of every unordered task pair at every dilation.
pub fn dilation_sweep(tasks: &[TaskLabels], dilations: &[usize]) -> Result<Vec<SweepRow>> {
    if let Some(first) = tasks.first() {
        if let Some(t) = tasks
            .iter()
            .find(|t| (t.map.height(), t.map.width()) != (first.map.height(), first.map.width()))
        {
            return Err(Error::dim(format!(
                "label map `{}` is {}x{}, expected {}x{}",
                t.name,
                t.map.height(),
                t.map.width(),
                first.map.height(),
                first.map.width()
            )));
        }
    }
    let mut rows = Vec::new();
    for &d in dilations {
        let pairs = tasks
            .par_iter()
            .map(|t| label_affinity_pairs(&t.map, &t.rule.with_dilation(d)))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..tasks.len() {
            for j in (i + 1)..tasks.len() {
                rows.push(SweepRow {
                    dilation: d,
                    task_a: tasks[i].name.clone(),
                    task_b: tasks[j].name.clone(),
                    correspondence: cross_task_correspondence(&pairs[i], &pairs[j])?,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_maps_are_all_similar() {
        let m = LabelMap::categorical(4, 5, &[3; 20]).unwrap();
        let pairs = label_affinity_pairs(&m, &AffinityRule::categorical(1, 1)).unwrap();
        assert!(pairs.iter().all(|s| s.similar));
        let d = LabelMap::continuous(4, 5, vec![2.5; 20]).unwrap();
        let pairs = label_affinity_pairs(&d, &AffinityRule::relative(1e-6, 2, 1)).unwrap();
        assert!(pairs.iter().all(|s| s.similar));
    }

    #[test]
    fn checkerboard_2x2() {
        let m = LabelMap::categorical(2, 2, &[0, 1, 1, 0]).unwrap();
        let pairs = label_affinity_pairs(&m, &AffinityRule::categorical(1, 1)).unwrap();
        assert_eq!(pairs.len(), 6);
        for s in pairs {
            let (py, px) = (s.p / 2, s.p % 2);
            let (qy, qx) = (s.q / 2, s.q % 2);
            let diagonal = py != qy && px != qx;
            assert_eq!(s.similar, diagonal, "{s:?}");
        }
    }

    #[test]
    fn counts_match_closed_form() {
        let m = LabelMap::categorical(7, 5, &[0; 35]).unwrap();
        for (r, d) in [(1, 1), (1, 3), (2, 2), (3, 4)] {
            let pairs = label_affinity_pairs(&m, &AffinityRule::categorical(r, d)).unwrap();
            assert_eq!(pairs.len(), pair_count(7, 5, r, d));
        }
    }

    #[test]
    fn kind_mismatch_rejected() {
        let m = LabelMap::categorical(2, 2, &[0; 4]).unwrap();
        assert!(label_affinity_pairs(&m, &AffinityRule::relative(0.1, 1, 1)).is_err());
        let d = LabelMap::continuous(2, 2, vec![1.0; 4]).unwrap();
        assert!(label_affinity_pairs(&d, &AffinityRule::categorical(1, 1)).is_err());
    }

    #[test]
    fn correspondence_counting() {
        let s = |p, q, similar| AffinitySample { p, q, similar };
        let a = [s(0, 1, true), s(0, 2, true), s(0, 3, false), s(1, 2, false), s(1, 3, true), s(2, 3, true)];
        let b = [s(0, 1, true), s(0, 2, false), s(0, 3, false), s(1, 2, true), s(1, 3, true), s(2, 3, true)];
        assert!((cross_task_correspondence(&a, &b).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(cross_task_correspondence(&a, &a).unwrap(), 1.0);
        let neg: Vec<_> = a.iter().map(|x| s(x.p, x.q, !x.similar)).collect();
        assert_eq!(cross_task_correspondence(&a, &neg).unwrap(), 0.0);
        assert!(cross_task_correspondence(&a, &b[..5]).is_err());
    }
}
