//! Bipartite k-core pruning shared by the recipe and meal filters.

use std::collections::{BTreeMap, BTreeSet};

/// Returns the maximal subset of `edges` in which every left and right
/// endpoint has degree at least `k`. Peels violators until a fixpoint.
pub fn prune<L, R>(edges: &BTreeSet<(L, R)>, k: usize) -> BTreeSet<(L, R)>
where
    L: Ord + Copy,
    R: Ord + Copy,
{
    let mut left_adj: BTreeMap<L, Vec<R>> = BTreeMap::new();
    let mut right_adj: BTreeMap<R, Vec<L>> = BTreeMap::new();
    for &(l, r) in edges {
        left_adj.entry(l).or_default().push(r);
        right_adj.entry(r).or_default().push(l);
    }
    let mut left_deg: BTreeMap<L, usize> = left_adj.iter().map(|(&l, v)| (l, v.len())).collect();
    let mut right_deg: BTreeMap<R, usize> = right_adj.iter().map(|(&r, v)| (r, v.len())).collect();

    let mut dead_left = BTreeSet::new();
    let mut dead_right = BTreeSet::new();
    let mut left_queue: Vec<L> = left_deg.iter().filter(|(_, &d)| d < k).map(|(&l, _)| l).collect();
    let mut right_queue: Vec<R> = right_deg.iter().filter(|(_, &d)| d < k).map(|(&r, _)| r).collect();

    while !left_queue.is_empty() || !right_queue.is_empty() {
        while let Some(l) = left_queue.pop() {
            if !dead_left.insert(l) {
                continue;
            }
            for r in &left_adj[&l] {
                if dead_right.contains(r) {
                    continue;
                }
                let d = right_deg.get_mut(r).expect("right degree");
                *d -= 1;
                if *d + 1 == k {
                    right_queue.push(*r);
                }
            }
        }
        while let Some(r) = right_queue.pop() {
            if !dead_right.insert(r) {
                continue;
            }
            for l in &right_adj[&r] {
                if dead_left.contains(l) {
                    continue;
                }
                let d = left_deg.get_mut(l).expect("left degree");
                *d -= 1;
                if *d + 1 == k {
                    left_queue.push(*l);
                }
            }
        }
    }

    edges
        .iter()
        .filter(|(l, r)| !dead_left.contains(l) && !dead_right.contains(r))
        .copied()
        .collect()
}
