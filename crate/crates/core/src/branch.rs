//! Branched multi-task architecture search.
//!
//! A branch tree over `D` encoder locations is a chain of task partitions
//! where each layer refines the one before it. Every block at depth `l` is
//! one branch instance of layer `l`. Trees are scored by the clustering cost
//! (per depth, the mean over blocks of the largest pairwise task
//! dissimilarity) and filtered by a resource budget.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::affinity::AffinityTensor;
use crate::{Error, Result};

pub const MAX_TASKS: usize = 12;
pub const MAX_DEPTH: usize = 16;

/// A set partition of task indices in canonical form: members ascending
/// within each block, blocks ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(mut blocks: Vec<Vec<usize>>) -> Result<Self> {
        let total: usize = blocks.iter().map(Vec::len).sum();
        let mut seen = vec![false; total];
        for b in &mut blocks {
            if b.is_empty() {
                return Err(Error::domain("partition blocks must be non-empty"));
            }
            b.sort_unstable();
            for &t in b.iter() {
                if t >= total || seen[t] {
                    return Err(Error::domain(format!(
                        "blocks must be disjoint and cover 0..{total}; task {t} is misplaced"
                    )));
                }
                seen[t] = true;
            }
        }
        blocks.sort_unstable_by_key(|b| b[0]);
        Ok(Partition { blocks })
    }

    pub fn shared(n: usize) -> Self {
        Partition {
            blocks: vec![(0..n).collect()],
        }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            blocks: (0..n).map(|t| vec![t]).collect(),
        }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// True if every block of `self` lies inside a block of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        let mut owner = vec![usize::MAX; self.num_tasks()];
        for (bi, b) in coarser.blocks.iter().enumerate() {
            for &t in b {
                if t < owner.len() {
                    owner[t] = bi;
                }
            }
        }
        self.blocks.iter().all(|b| b.iter().all(|&t| owner[t] == owner[b[0]]))
    }

    /// Relabels tasks: task `t` becomes `perm[t]`.
    pub fn permuted(&self, perm: &[usize]) -> Partition {
        Partition::new(self.blocks.iter().map(|b| b.iter().map(|&t| perm[t]).collect()).collect())
            .expect("a permutation preserves the partition structure")
    }

    pub fn render(&self, names: &[String]) -> String {
        self.blocks
            .iter()
            .map(|b| {
                let inner: Vec<&str> = b.iter().map(|&t| names[t].as_str()).collect();
                format!("{{{}}}", inner.join(","))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A chain of partitions, shallowest location first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BranchTree {
    layers: Vec<Partition>,
}

impl BranchTree {
    pub fn new(layers: Vec<Partition>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("a branch tree needs at least one layer"));
        }
        let n = layers[0].num_tasks();
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].num_tasks() != n || !pair[1].refines(&pair[0]) {
                return Err(Error::domain(format!("layer {} does not refine layer {l}", l + 1)));
            }
        }
        Ok(BranchTree { layers })
    }

    pub fn layers(&self) -> &[Partition] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.layers[0].num_tasks()
    }

    pub fn permuted(&self, perm: &[usize]) -> BranchTree {
        BranchTree {
            layers: self.layers.iter().map(|p| p.permuted(perm)).collect(),
        }
    }

    /// One line per depth, blocks in braces.
    pub fn render(&self, tasks: &[String], locations: &[String]) -> String {
        let mut out = String::new();
        for (l, p) in self.layers.iter().enumerate() {
            let loc = locations.get(l).map_or_else(|| format!("depth {l}"), Clone::clone);
            out.push_str(&format!("{loc}: {}\n", p.render(tasks)));
        }
        out
    }
}

/// Per-location branch cost, per-task decoder cost and the budget cap.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
pub struct BudgetModel {
    pub shared_costs: Vec<f64>,
    pub decoder_costs: Vec<f64>,
    pub budget: f64,
}

impl BudgetModel {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self
            .shared_costs
            .iter()
            .chain(&self.decoder_costs)
            .find(|c| !c.is_finite() || **c < 0.0)
        {
            return Err(Error::domain(format!("resource cost {c} must be finite and non-negative")));
        }
        if self.budget.is_nan() {
            return Err(Error::domain("budget is NaN"));
        }
        Ok(())
    }
}

/// Every set partition of `members`, blocks in canonical order.
fn set_partitions(members: &[usize]) -> Vec<Vec<Vec<usize>>> {
    // Restricted growth strings enumerate each partition exactly once.
    fn grow(members: &[usize], pos: usize, blocks: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if pos == members.len() {
            out.push(blocks.clone());
            return;
        }
        for b in 0..blocks.len() {
            blocks[b].push(members[pos]);
            grow(members, pos + 1, blocks, out);
            blocks[b].pop();
        }
        blocks.push(vec![members[pos]]);
        grow(members, pos + 1, blocks, out);
        blocks.pop();
    }
    let mut out = Vec::new();
    if members.is_empty() {
        out.push(Vec::new());
        return out;
    }
    grow(members, 0, &mut Vec::new(), &mut out);
    out
}

/// All partitions refining `p` (including `p` itself).
fn refinements(p: &Partition) -> Vec<Partition> {
    let mut acc: Vec<Vec<Vec<usize>>> = vec![Vec::new()];
    for block in &p.blocks {
        let splits = set_partitions(block);
        let mut next = Vec::with_capacity(acc.len() * splits.len());
        for prefix in &acc {
            for s in &splits {
                let mut blocks = prefix.clone();
                blocks.extend(s.iter().cloned());
                next.push(blocks);
            }
        }
        acc = next;
    }
    acc.into_iter()
        .map(|b| Partition::new(b).expect("refinements of a partition are partitions"))
        .collect()
}

fn check_guard(n: usize, depth: usize) -> Result<()> {
    if n == 0 || n > MAX_TASKS {
        return Err(Error::Capacity(format!("task count {n} outside 1..={MAX_TASKS}")));
    }
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::Capacity(format!("depth {depth} outside 1..={MAX_DEPTH}")));
    }
    Ok(())
}

/// Every length-`depth` refining chain over `n` tasks, in canonical
/// (lexicographic) order.
pub fn enumerate_partition_chains(n: usize, depth: usize) -> Result<Vec<BranchTree>> {
    check_guard(n, depth)?;
    let mut out = Vec::new();
    let mut chain = vec![Partition::shared(n)];
    extend_chains(&mut chain, depth, &mut out);
    out.sort_unstable();
    Ok(out)
}

fn extend_chains(chain: &mut Vec<Partition>, depth: usize, out: &mut Vec<BranchTree>) {
    // The root is the implicit shared stem: layer 0 may be any partition.
    let last = chain.last().expect("chain seeded with the shared partition").clone();
    for next in refinements(&last) {
        chain.push(next);
        if chain.len() == depth + 1 {
            out.push(BranchTree {
                layers: chain[1..].to_vec(),
            });
        } else {
            extend_chains(chain, depth, out);
        }
        chain.pop();
    }
}

/// Number of refining chains without materializing them.
pub fn count_partition_chains(n: usize, depth: usize) -> Result<u64> {
    check_guard(n, depth)?;
    fn count(p: &Partition, remaining: usize) -> u64 {
        if remaining == 0 {
            return 1;
        }
        refinements(p).iter().map(|r| count(r, remaining - 1)).sum()
    }
    Ok(count(&Partition::shared(n), depth))
}

/// Clustering cost: sum over depths of the mean, over blocks, of the
/// maximum pairwise dissimilarity `1 - A` inside the block.
pub fn tree_dissimilarity_cost(tree: &BranchTree, affinity: &AffinityTensor) -> Result<f64> {
    if tree.depth() != affinity.depth() {
        return Err(Error::dim(format!(
            "tree depth {} does not match {} affinity locations",
            tree.depth(),
            affinity.depth()
        )));
    }
    if tree.num_tasks() != affinity.num_tasks() {
        return Err(Error::dim(format!(
            "tree has {} tasks, affinity has {}",
            tree.num_tasks(),
            affinity.num_tasks()
        )));
    }
    let mut total = 0.0;
    for (l, p) in tree.layers.iter().enumerate() {
        let mut sum = 0.0;
        for b in &p.blocks {
            let mut worst: f64 = 0.0;
            for (x, &i) in b.iter().enumerate() {
                for &j in &b[x + 1..] {
                    worst = worst.max(affinity.dissimilarity(l, i, j));
                }
            }
            sum += worst;
        }
        total += sum / p.blocks.len() as f64;
    }
    Ok(total.max(0.0))
}

/// `sum_l b_l * p_l + sum_t decoder_t`.
pub fn tree_resource(tree: &BranchTree, model: &BudgetModel) -> Result<f64> {
    if model.shared_costs.len() != tree.depth() {
        return Err(Error::dim(format!(
            "budget model lists {} locations, tree has depth {}",
            model.shared_costs.len(),
            tree.depth()
        )));
    }
    if model.decoder_costs.len() != tree.num_tasks() {
        return Err(Error::dim(format!(
            "budget model lists {} decoders, tree has {} tasks",
            model.decoder_costs.len(),
            tree.num_tasks()
        )));
    }
    let shared: f64 = tree
        .layers
        .iter()
        .zip(&model.shared_costs)
        .map(|(p, c)| p.num_blocks() as f64 * c)
        .sum();
    Ok(shared + model.decoder_costs.iter().sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTree {
    pub tree: BranchTree,
    pub cost: f64,
    pub resource: f64,
}

impl ScoredTree {
    /// Lower cost, then lower resource, then canonical tree order.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.resource.total_cmp(&other.resource))
            .then_with(|| self.tree.cmp(&other.tree))
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: ScoredTree,
    /// Every feasible tree, best first.
    pub ranked: Vec<ScoredTree>,
}

/// Scores `trees`, keeps those within budget and ranks them.
/// The result does not depend on the order of `trees`.
pub fn rank_trees(trees: Vec<BranchTree>, affinity: &AffinityTensor, model: &BudgetModel) -> Result<SearchResult> {
    model.validate()?;
    let scored: Vec<ScoredTree> = trees
        .into_par_iter()
        .map(|tree| {
            let cost = tree_dissimilarity_cost(&tree, affinity)?;
            let resource = tree_resource(&tree, model)?;
            Ok(ScoredTree { tree, cost, resource })
        })
        .collect::<Result<_>>()?;
    let cheapest = scored.iter().map(|s| s.resource).fold(f64::INFINITY, f64::min);
    let mut ranked: Vec<ScoredTree> = scored.into_iter().filter(|s| s.resource <= model.budget).collect();
    ranked.par_sort_unstable_by(ScoredTree::rank_cmp);
    match ranked.first() {
        Some(best) => Ok(SearchResult {
            best: best.clone(),
            ranked,
        }),
        None => Err(Error::Infeasible {
            budget: model.budget,
            cheapest,
        }),
    }
}

/// Exhaustive search for the minimum-cost tree that fits the budget.
pub fn search_optimal_tree(affinity: &AffinityTensor, model: &BudgetModel) -> Result<SearchResult> {
    let trees = enumerate_partition_chains(affinity.num_tasks(), affinity.depth())?;
    rank_trees(trees, affinity, model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn uniform_affinity(n: usize, d: usize, off: f64) -> AffinityTensor {
        let mut v = vec![off; d * n * n];
        for l in 0..d {
            for i in 0..n {
                v[(l * n + i) * n + i] = 1.0;
            }
        }
        AffinityTensor::new(names(n), (0..d).map(|l| format!("l{l}")).collect(), v).unwrap()
    }

    fn tree(layers: &[&[&[usize]]]) -> BranchTree {
        BranchTree::new(
            layers
                .iter()
                .map(|p| Partition::new(p.iter().map(|b| b.to_vec()).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn documented_counts() {
        assert_eq!(enumerate_partition_chains(2, 3).unwrap().len(), 4);
        assert_eq!(enumerate_partition_chains(3, 1).unwrap().len(), 5);
        assert_eq!(enumerate_partition_chains(3, 2).unwrap().len(), 12);
        assert_eq!(count_partition_chains(3, 2).unwrap(), 12);
    }

    #[test]
    fn guard_rejects_large_inputs() {
        assert!(matches!(enumerate_partition_chains(13, 1), Err(Error::Capacity(_))));
        assert!(matches!(enumerate_partition_chains(0, 1), Err(Error::Capacity(_))));
        assert!(matches!(enumerate_partition_chains(2, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn canonical_order_is_sorted_and_unique() {
        let trees = enumerate_partition_chains(4, 2).unwrap();
        assert!(trees.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn singleton_tree_costs_nothing() {
        let a = uniform_affinity(3, 2, -0.7);
        let t = tree(&[&[&[0], &[1], &[2]], &[&[0], &[1], &[2]]]);
        assert_eq!(tree_dissimilarity_cost(&t, &a).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_block() {
        let a = uniform_affinity(2, 1, 0.6);
        let t = tree(&[&[&[0, 1]]]);
        assert!((tree_dissimilarity_cost(&t, &a).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn resource_arithmetic() {
        let m = BudgetModel {
            shared_costs: vec![10.0, 10.0],
            decoder_costs: vec![1.0, 1.0],
            budget: 100.0,
        };
        assert_eq!(tree_resource(&tree(&[&[&[0, 1]], &[&[0, 1]]]), &m).unwrap(), 22.0);
        assert_eq!(tree_resource(&tree(&[&[&[0], &[1]], &[&[0], &[1]]]), &m).unwrap(), 42.0);
        assert_eq!(tree_resource(&tree(&[&[&[0, 1]], &[&[0], &[1]]]), &m).unwrap(), 32.0);
    }

    #[test]
    fn perfect_affinity_prefers_sharing() {
        let a = uniform_affinity(2, 2, 1.0);
        let m = BudgetModel {
            shared_costs: vec![10.0, 10.0],
            decoder_costs: vec![1.0, 1.0],
            budget: 1000.0,
        };
        let r = search_optimal_tree(&a, &m).unwrap();
        assert_eq!(r.best.cost, 0.0);
        assert_eq!(r.best.tree, tree(&[&[&[0, 1]], &[&[0, 1]]]));
        assert_eq!(r.ranked.len(), 3);
    }

    #[test]
    fn infeasible_budget_reports_cheapest() {
        let a = uniform_affinity(2, 2, 0.5);
        let m = BudgetModel {
            shared_costs: vec![10.0, 10.0],
            decoder_costs: vec![1.0, 1.0],
            budget: 21.0,
        };
        match search_optimal_tree(&a, &m) {
            Err(Error::Infeasible { cheapest, .. }) => assert_eq!(cheapest, 22.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn refinement_check() {
        let coarse = Partition::new(vec![vec![0, 1], vec![2]]).unwrap();
        let fine = Partition::singletons(3);
        assert!(fine.refines(&coarse));
        assert!(!coarse.refines(&fine));
        assert!(BranchTree::new(vec![fine, coarse]).is_err());
    }
}
