//! Layer-wise beam search over a tree.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::{NodeId, Topology};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub node: NodeId,
    /// Video id for a [`super::TreeIndex`], node id for implicit trees.
    pub item: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// At most `k` leaves, best first.
    pub hits: Vec<Hit>,
    /// Number of scorer calls.
    pub visited: usize,
    /// `k` exceeded the number of leaves; every leaf was returned.
    pub truncated: bool,
    /// Every leaf the search scored, in scoring order.
    pub scored_leaves: Vec<Hit>,
}

/// Descending score, then ascending item.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item.cmp(&b.item))
}

/// Beam search keeping the `k` best candidates per level. Leaves reached
/// early are carried forward with their cached score. Internal nodes are
/// scored through their representative, ties broken by node id.
pub fn beam_retrieve<T: Topology + ?Sized>(
    tree: &T,
    k: usize,
    mut score: impl FnMut(NodeId) -> Result<f64>,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::input("beam width must be at least 1"));
    }
    let mut cache: HashMap<NodeId, f64> = HashMap::new();
    let mut scored_leaves = Vec::new();
    let mut frontier = vec![tree.root()];
    loop {
        let mut level: Vec<Hit> = Vec::with_capacity(frontier.len());
        for &node in &frontier {
            let s = match cache.get(&node) {
                Some(&s) => s,
                None => {
                    let s = score(node)?;
                    cache.insert(node, s);
                    let hit = Hit {
                        node,
                        item: tree.item(node),
                        score: s,
                    };
                    if tree.is_leaf(node) {
                        scored_leaves.push(hit);
                    }
                    s
                }
            };
            level.push(Hit {
                node,
                item: tree.item(node),
                score: s,
            });
        }
        if level.iter().all(|h| tree.is_leaf(h.node)) {
            level.sort_by(rank_order);
            level.truncate(k);
            return Ok(RetrievalResult {
                hits: level,
                visited: cache.len(),
                truncated: k > tree.leaf_count(),
                scored_leaves,
            });
        }
        level.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.node.cmp(&b.node)));
        level.truncate(k);
        frontier.clear();
        for h in &level {
            if tree.is_leaf(h.node) {
                frontier.push(h.node);
            } else {
                tree.for_each_child(h.node, &mut |c| frontier.push(c));
            }
        }
    }
}

/// Scorer calls a width-`k` search makes on `tree`, independent of scores.
pub fn count_visited<T: Topology + ?Sized>(tree: &T, k: usize) -> Result<usize> {
    Ok(beam_retrieve(tree, k, |_| Ok(0.0))?.visited)
}

/// Best `k` of an exhaustively scored set, in the same order the beam search
/// reports.
pub fn exhaustive_ranking(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    hits.sort_by(rank_order);
    hits.truncate(k);
    hits
}
