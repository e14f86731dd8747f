//! Brute-force oracles written independently of the library algorithms.

#![allow(dead_code)]

use mtl_lab::branch::{BranchTree, Partition};

/// Every set partition of `0..n` as a canonical label vector, found by
/// scanning all `n^n` labelings.
pub fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let total = n.pow(n as u32);
    for code in 0..total {
        let mut labels = vec![0; n];
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % n;
            c /= n;
        }
        // Canonical: first appearance order 0, 1, 2, ...
        let mut seen = Vec::new();
        let canon: Vec<usize> = labels
            .iter()
            .map(|l| match seen.iter().position(|s| s == l) {
                Some(p) => p,
                None => {
                    seen.push(*l);
                    seen.len() - 1
                }
            })
            .collect();
        if canon == labels {
            out.push(canon);
        }
    }
    out
}

/// `fine` refines `coarse` when tasks sharing a block in `fine` also share
/// one in `coarse`.
pub fn refines(fine: &[usize], coarse: &[usize]) -> bool {
    (0..fine.len()).all(|i| (0..fine.len()).all(|j| fine[i] != fine[j] || coarse[i] == coarse[j]))
}

/// Recursive chain counter: layer 0 is any partition, each later layer
/// refines the previous one.
pub fn count_chains(n: usize, depth: usize) -> u64 {
    let parts = all_partitions(n);
    fn go(parts: &[Vec<usize>], prev: Option<&Vec<usize>>, left: usize) -> u64 {
        if left == 0 {
            return 1;
        }
        parts
            .iter()
            .filter(|p| prev.is_none_or(|q| refines(p, q)))
            .map(|p| go(parts, Some(p), left - 1))
            .sum()
    }
    go(&parts, None, depth)
}

pub fn all_chains(n: usize, depth: usize) -> Vec<Vec<Vec<usize>>> {
    let parts = all_partitions(n);
    let mut out: Vec<Vec<Vec<usize>>> = parts.iter().map(|p| vec![p.clone()]).collect();
    for _ in 1..depth {
        out = out
            .into_iter()
            .flat_map(|chain| {
                let last = chain.last().unwrap().clone();
                parts
                    .iter()
                    .filter(move |p| refines(p, &last))
                    .map(move |p| {
                        let mut c = chain.clone();
                        c.push(p.clone());
                        c
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
    }
    out
}

pub fn to_tree(chain: &[Vec<usize>]) -> BranchTree {
    let layers = chain
        .iter()
        .map(|labels| {
            let k = labels.iter().max().unwrap() + 1;
            let blocks = (0..k).map(|b| (0..labels.len()).filter(|&i| labels[i] == b).collect()).collect();
            Partition::new(blocks).unwrap()
        })
        .collect();
    BranchTree::new(layers).unwrap()
}

/// `affinity` is `[D, N, N]` row-major.
pub fn chain_cost(chain: &[Vec<usize>], affinity: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for (l, labels) in chain.iter().enumerate() {
        let k = labels.iter().max().unwrap() + 1;
        let mut sum = 0.0;
        for b in 0..k {
            let mut worst = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if i != j && labels[i] == b && labels[j] == b {
                        worst = worst.max(1.0 - affinity[(l * n + i) * n + j]);
                    }
                }
            }
            sum += worst;
        }
        total += sum / k as f64;
    }
    total
}

pub fn chain_resource(chain: &[Vec<usize>], shared: &[f64], decoders: &[f64]) -> f64 {
    chain
        .iter()
        .zip(shared)
        .map(|(labels, c)| (labels.iter().max().unwrap() + 1) as f64 * c)
        .sum::<f64>()
        + decoders.iter().sum::<f64>()
}

/// Exhaustive argmin by (cost, resource, tree order) within the budget.
pub fn best_tree(
    affinity: &[f64],
    n: usize,
    depth: usize,
    shared: &[f64],
    decoders: &[f64],
    budget: f64,
) -> Option<(BranchTree, f64, f64)> {
    let mut best: Option<(BranchTree, f64, f64)> = None;
    for chain in all_chains(n, depth) {
        let r = chain_resource(&chain, shared, decoders);
        if r > budget {
            continue;
        }
        let c = chain_cost(&chain, affinity, n);
        let t = to_tree(&chain);
        let better = match &best {
            None => true,
            Some((bt, bc, br)) => c.total_cmp(bc).then(r.total_cmp(br)).then_with(|| t.cmp(bt)).is_lt(),
        };
        if better {
            best = Some((t, c, r));
        }
    }
    best
}

/// Average ranks by counting: rank = #less + (#equal + 1) / 2.
pub fn ranks_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// `sum_i a_i g_i` squared norm.
pub fn combo_norm(grads: &[Vec<f64>], alphas: &[f64]) -> f64 {
    let dim = grads[0].len();
    (0..dim)
        .map(|d| grads.iter().zip(alphas).map(|(g, a)| a * g[d]).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Minimum of `sqrt(a' M a)` over the simplex on a grid of `step`,
/// restricted to the box `[lo_i, hi_i]`. Returns the best point.
pub fn simplex_grid(gram: &[Vec<f64>], step: f64, lo: &[f64], hi: &[f64]) -> (f64, Vec<f64>) {
    let n = gram.len();
    let units = (1.0 / step).round() as i64;
    let lo_u: Vec<i64> = lo.iter().map(|l| (l / step).floor().max(0.0) as i64).collect();
    let hi_u: Vec<i64> = hi.iter().map(|h| ((h / step).ceil() as i64).min(units)).collect();
    let mut best = (f64::INFINITY, vec![0.0; n]);
    let mut a = vec![0i64; n];
    fn rec(
        i: usize,
        left: i64,
        a: &mut Vec<i64>,
        gram: &[Vec<f64>],
        step: f64,
        lo: &[i64],
        hi: &[i64],
        best: &mut (f64, Vec<f64>),
    ) {
        let n = a.len();
        if i == n - 1 {
            if left < lo[i] || left > hi[i] {
                return;
            }
            a[i] = left;
            let x: Vec<f64> = a.iter().map(|&u| u as f64 * step).collect();
            let mut q = 0.0;
            for r in 0..n {
                for c in 0..n {
                    q += x[r] * x[c] * gram[r][c];
                }
            }
            let v = q.max(0.0).sqrt();
            if v < best.0 {
                *best = (v, x);
            }
            return;
        }
        for u in lo[i]..=hi[i].min(left) {
            a[i] = u;
            rec(i + 1, left - u, a, gram, step, lo, hi, best);
        }
    }
    rec(0, units, &mut a, gram, step, &lo_u, &hi_u, &mut best);
    best
}
