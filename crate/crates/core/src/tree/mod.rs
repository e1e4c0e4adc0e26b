//! Binary search tree over video embeddings.
//!
//! Nodes are numbered breadth-first from the root (`NodeId(0)`), so every
//! level is a contiguous id range. Each node is represented by the medoid
//! video of its subtree; leaves hold exactly one video.

mod build;
mod io;
mod sampling;
mod search;

pub use build::{build_tree, BuildConfig};
pub use io::{load_index, read_index, save_index, write_index, INDEX_MAGIC, INDEX_VERSION};
pub use sampling::{sample_negatives, NegativeSamplingConfig, SamplingStrategy};
pub use search::{beam_retrieve, count_visited, exhaustive_ranking, rank_order, Hit, RetrievalResult};

use std::collections::HashMap;
use std::fmt;

use crate::binio::Fnv64;
use crate::error::{Error, Result};
use crate::model::{ModelParams, VideoId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub id: NodeId,
    /// Root is 0.
    pub depth: u32,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub medoid: VideoId,
    /// The medoid's embedding.
    pub embedding: Vec<f32>,
    /// Videos under this subtree, ascending.
    pub members: Vec<VideoId>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct BuildMetadata {
    pub seed: u64,
    pub medoid_iterations: u32,
    pub embedding_checksum: u64,
    /// Fingerprint of the model that produced the embeddings, 0 if unknown.
    pub model_fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeIndex {
    nodes: Vec<TreeNode>,
    depth: u32,
    dim: usize,
    meta: BuildMetadata,
    leaf_of: HashMap<VideoId, NodeId>,
    /// `levels[d]` = first node id at depth `d`; one past the end is `levels[d + 1]`.
    level_starts: Vec<u32>,
}

impl TreeIndex {
    /// Assemble from breadth-first numbered nodes, rebuilding member sets,
    /// parents and level tables. Checks every structural invariant.
    pub(crate) fn from_nodes(mut nodes: Vec<TreeNode>, dim: usize, meta: BuildMetadata) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Format("tree has no nodes".into()));
        }
        let n_nodes = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id.0 as usize != i {
                return Err(Error::Format(format!("node {i} carries id {}", node.id)));
            }
            if node.embedding.len() != dim {
                return Err(Error::Format(format!("node {i} embedding has wrong width")));
            }
            if node.children.len() == 1 || node.children.len() > 2 {
                return Err(Error::Format(format!("node {i} has {} children", node.children.len())));
            }
            for c in &node.children {
                if c.0 as usize >= n_nodes || c.0 as usize <= i {
                    return Err(Error::Format(format!("node {i} has invalid child {c}")));
                }
            }
        }
        // Parents and depths.
        let mut parent = vec![None; n_nodes];
        for i in 0..n_nodes {
            for c in nodes[i].children.clone() {
                if parent[c.0 as usize].is_some() {
                    return Err(Error::Format(format!("node {c} has two parents")));
                }
                parent[c.0 as usize] = Some(NodeId(i as u32));
            }
        }
        if parent.iter().skip(1).any(Option::is_none) || parent[0].is_some() {
            return Err(Error::Format("nodes do not form a single rooted tree".into()));
        }
        for i in 0..n_nodes {
            let expected = parent[i].map_or(0, |p: NodeId| nodes[p.0 as usize].depth + 1);
            if nodes[i].depth != expected {
                return Err(Error::Format(format!(
                    "node {i} has depth {} expected {expected}",
                    nodes[i].depth
                )));
            }
            if i > 0 && nodes[i].depth < nodes[i - 1].depth {
                return Err(Error::Format("nodes are not in breadth-first order".into()));
            }
            nodes[i].parent = parent[i];
        }
        // Members bottom-up.
        let mut leaf_of = HashMap::new();
        for i in (0..n_nodes).rev() {
            if nodes[i].is_leaf() {
                let v = nodes[i].medoid;
                if leaf_of.insert(v, NodeId(i as u32)).is_some() {
                    return Err(Error::Format(format!("video {v} appears in two leaves")));
                }
                nodes[i].members = vec![v];
            } else {
                let mut m: Vec<VideoId> = nodes[i]
                    .children
                    .iter()
                    .flat_map(|c| nodes[c.0 as usize].members.iter().copied())
                    .collect();
                m.sort_unstable();
                if m.binary_search(&nodes[i].medoid).is_err() {
                    return Err(Error::Format(format!("medoid of node {i} is not a member")));
                }
                nodes[i].members = m;
            }
        }
        let depth = nodes.last().map_or(0, |n| n.depth);
        let mut level_starts = Vec::with_capacity(depth as usize + 2);
        for (i, n) in nodes.iter().enumerate() {
            if n.depth as usize == level_starts.len() {
                level_starts.push(i as u32);
            }
        }
        level_starts.push(n_nodes as u32);
        Ok(Self {
            nodes,
            depth,
            dim,
            meta,
            leaf_of,
            level_starts,
        })
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0 as usize]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of indexed videos (= leaves).
    pub fn len(&self) -> usize {
        self.leaf_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_of.is_empty()
    }

    /// Deepest leaf depth (edges from the root).
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metadata(&self) -> &BuildMetadata {
        &self.meta
    }

    pub fn set_model_fingerprint(&mut self, fp: u64) {
        self.meta.model_fingerprint = fp;
    }

    pub fn leaf_of(&self, video: VideoId) -> Option<NodeId> {
        self.leaf_of.get(&video).copied()
    }

    /// Node ids at depth `d`.
    pub fn level(&self, d: u32) -> impl Iterator<Item = NodeId> + '_ {
        let d = d as usize;
        let (lo, hi) = if d + 1 < self.level_starts.len() {
            (self.level_starts[d], self.level_starts[d + 1])
        } else {
            (0, 0)
        };
        (lo..hi).map(NodeId)
    }

    /// Root-to-node path, root first.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.node(cur).parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Refuse an index whose embeddings came from a different model.
    pub fn check_model(&self, params: &ModelParams) -> Result<()> {
        let fp = params.fingerprint();
        if self.meta.model_fingerprint != 0 && self.meta.model_fingerprint != fp {
            return Err(Error::StaleIndex {
                index: self.meta.model_fingerprint,
                model: fp,
            });
        }
        Ok(())
    }
}

/// Checksum of an embedding table, independent of input order.
pub fn embedding_checksum(embeddings: &[(VideoId, Vec<f64>)]) -> u64 {
    let mut sorted: Vec<&(VideoId, Vec<f64>)> = embeddings.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let mut h = Fnv64::default();
    for (id, e) in sorted {
        h.update(&id.0.to_le_bytes());
        for v in e {
            h.update(&(*v as f32).to_le_bytes());
        }
    }
    h.finish()
}

/// Read-only tree shape, as seen by the beam search.
pub trait Topology {
    fn root(&self) -> NodeId;
    fn is_leaf(&self, node: NodeId) -> bool;
    fn for_each_child(&self, node: NodeId, f: &mut dyn FnMut(NodeId));
    /// Identifier of the item a node stands for; used to order tied leaves.
    fn item(&self, node: NodeId) -> u32;
    fn leaf_count(&self) -> usize;
}

impl Topology for TreeIndex {
    fn root(&self) -> NodeId {
        NodeId(0)
    }

    fn is_leaf(&self, node: NodeId) -> bool {
        self.node(node).is_leaf()
    }

    fn for_each_child(&self, node: NodeId, f: &mut dyn FnMut(NodeId)) {
        self.node(node).children.iter().for_each(|&c| f(c));
    }

    fn item(&self, node: NodeId) -> u32 {
        self.node(node).medoid.0
    }

    fn leaf_count(&self) -> usize {
        self.len()
    }
}

/// Implicit perfect binary tree with `levels` levels (heap numbering), for
/// exercising the search at sizes too large to materialise.
#[derive(Clone, Copy, Debug)]
pub struct BalancedTree {
    levels: u32,
}

impl BalancedTree {
    pub fn with_levels(levels: u32) -> Self {
        assert!((1..=31).contains(&levels), "levels must be in 1..=31");
        Self { levels }
    }

    /// Edges from the root to any leaf.
    pub fn depth(&self) -> u32 {
        self.levels - 1
    }

    fn first_leaf(&self) -> u32 {
        (1u32 << (self.levels - 1)) - 1
    }
}

impl Topology for BalancedTree {
    fn root(&self) -> NodeId {
        NodeId(0)
    }

    fn is_leaf(&self, node: NodeId) -> bool {
        node.0 >= self.first_leaf()
    }

    fn for_each_child(&self, node: NodeId, f: &mut dyn FnMut(NodeId)) {
        if !self.is_leaf(node) {
            f(NodeId(2 * node.0 + 1));
            f(NodeId(2 * node.0 + 2));
        }
    }

    fn item(&self, node: NodeId) -> u32 {
        node.0
    }

    fn leaf_count(&self) -> usize {
        1usize << (self.levels - 1)
    }
}
