//! Top-down hierarchical 2-medoid clustering under cosine distance.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{embedding_checksum, BuildMetadata, NodeId, TreeIndex, TreeNode};
use crate::error::{Error, Result};
use crate::model::VideoId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildConfig {
    pub seed: u64,
    /// Cap on assign/update rounds per split.
    pub max_iterations: u32,
    /// A split putting more than this fraction on one side is replaced by a
    /// balanced split along the principal direction.
    pub imbalance_cap: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iterations: 20,
            imbalance_cap: 0.9,
        }
    }
}

struct Points {
    ids: Vec<VideoId>,
    unit: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
}

impl Points {
    fn distance(&self, a: usize, b: usize) -> f64 {
        let dot: f64 = self.unit[a].iter().zip(&self.unit[b]).map(|(x, y)| x * y).sum();
        1.0 - dot
    }

    /// Member with the least total distance to the others; ties go to the
    /// smallest video id (members are kept in id order).
    fn medoid(&self, members: &[usize]) -> usize {
        let mut best = members[0];
        let mut best_cost = f64::INFINITY;
        for &m in members {
            let cost: f64 = members.iter().map(|&o| self.distance(m, o)).sum();
            if cost < best_cost {
                best = m;
                best_cost = cost;
            }
        }
        best
    }
}

/// Build the tree. Ids are assigned breadth-first; every node's medoid is
/// the medoid of its whole subtree.
pub fn build_tree(
    embeddings: &[(VideoId, Vec<f64>)],
    labels: Option<&HashMap<VideoId, u32>>,
    cfg: &BuildConfig,
) -> Result<TreeIndex> {
    if embeddings.is_empty() {
        return Err(Error::input("cannot build a tree over zero videos"));
    }
    let dim = embeddings[0].1.len();
    if dim == 0 || embeddings.iter().any(|(_, e)| e.len() != dim) {
        return Err(Error::input("embeddings must share one non-zero dimension"));
    }
    let mut seen = HashSet::new();
    if let Some((dup, _)) = embeddings.iter().find(|(id, _)| !seen.insert(*id)) {
        return Err(Error::input(format!("duplicate video id {dup}")));
    }
    if !(0.5..1.0).contains(&cfg.imbalance_cap) {
        return Err(Error::Config("imbalance cap must be in [0.5, 1)".into()));
    }

    let mut sorted: Vec<&(VideoId, Vec<f64>)> = embeddings.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let points = Points {
        ids: sorted.iter().map(|(id, _)| *id).collect(),
        unit: sorted
            .iter()
            .map(|(_, e)| {
                let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    e.iter().map(|v| v / n).collect()
                } else {
                    e.clone()
                }
            })
            .collect(),
        raw: sorted.iter().map(|(_, e)| e.clone()).collect(),
    };
    let point_labels: Option<Vec<Option<u32>>> =
        labels.map(|l| points.ids.iter().map(|id| l.get(id).copied()).collect());

    let mut nodes: Vec<TreeNode> = Vec::new();
    // (member indices in ascending id order, depth, parent)
    let mut queue: VecDeque<(Vec<usize>, u32, Option<NodeId>)> = VecDeque::new();
    queue.push_back(((0..points.ids.len()).collect(), 0, None));
    while let Some((members, depth, parent)) = queue.pop_front() {
        let id = NodeId(nodes.len() as u32);
        if let Some(p) = parent {
            nodes[p.0 as usize].children.push(id);
        }
        let medoid = points.medoid(&members);
        nodes.push(TreeNode {
            id,
            depth,
            parent,
            children: Vec::new(),
            medoid: points.ids[medoid],
            embedding: points.raw[medoid].iter().map(|&v| v as f32).collect(),
            members: members.iter().map(|&m| points.ids[m]).collect(),
        });
        if members.len() > 1 {
            let (left, right) = split(&points, &members, point_labels.as_deref(), cfg, id);
            queue.push_back((left, depth + 1, Some(id)));
            queue.push_back((right, depth + 1, Some(id)));
        }
    }

    let meta = BuildMetadata {
        seed: cfg.seed,
        medoid_iterations: cfg.max_iterations,
        embedding_checksum: embedding_checksum(embeddings),
        model_fingerprint: 0,
    };
    TreeIndex::from_nodes(nodes, dim, meta)
}

/// Two non-empty halves, each in ascending id order; the half holding the
/// smallest id comes first.
fn split(
    points: &Points,
    members: &[usize],
    labels: Option<&[Option<u32>]>,
    cfg: &BuildConfig,
    node: NodeId,
) -> (Vec<usize>, Vec<usize>) {
    let n = members.len();
    if n == 2 {
        return (vec![members[0]], vec![members[1]]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (node.0 as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let clustered = seed_medoids(points, members, labels, &mut rng)
        .map(|seeds| two_medoids(points, members, seeds, cfg.max_iterations));

    let acceptable = |a: &[usize], b: &[usize]| {
        let big = a.len().max(b.len()) as f64;
        !a.is_empty() && !b.is_empty() && big <= cfg.imbalance_cap * n as f64
    };
    let (mut a, mut b) = match clustered {
        Some((a, b)) if acceptable(&a, &b) => (a, b),
        _ => principal_split(points, members),
    };
    if b[0] < a[0] {
        std::mem::swap(&mut a, &mut b);
    }
    (a, b)
}

/// Initial medoids: the medoids of the two largest label groups when labels
/// are available, otherwise k-means++ style seeding.
fn seed_medoids(
    points: &Points,
    members: &[usize],
    labels: Option<&[Option<u32>]>,
    rng: &mut ChaCha8Rng,
) -> Option<[usize; 2]> {
    if let Some(labels) = labels {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &m in members {
            if let Some(l) = labels[m] {
                groups.entry(l).or_default().push(m);
            }
        }
        if groups.len() >= 2 {
            let mut by_size: Vec<(&u32, &Vec<usize>)> = groups.iter().collect();
            by_size.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
            return Some([points.medoid(by_size[0].1), points.medoid(by_size[1].1)]);
        }
    }
    let first = members[rng.gen_range(0..members.len())];
    let weights: Vec<f64> = members
        .iter()
        .map(|&m| points.distance(first, m).max(0.0).powi(2))
        .collect();
    let dist = WeightedIndex::new(&weights).ok()?;
    let second = members[dist.sample(rng)];
    (second != first).then_some([first, second])
}

fn two_medoids(points: &Points, members: &[usize], mut medoids: [usize; 2], max_iter: u32) -> (Vec<usize>, Vec<usize>) {
    let mut parts = (Vec::new(), Vec::new());
    for _ in 0..max_iter.max(1) {
        parts = (Vec::new(), Vec::new());
        for &m in members {
            if points.distance(m, medoids[0]) <= points.distance(m, medoids[1]) {
                parts.0.push(m);
            } else {
                parts.1.push(m);
            }
        }
        if parts.0.is_empty() || parts.1.is_empty() {
            break;
        }
        let next = [points.medoid(&parts.0), points.medoid(&parts.1)];
        if next == medoids {
            break;
        }
        medoids = next;
    }
    parts
}

/// Balanced split at the median projection on the top principal direction
/// (ties and degenerate spreads fall back to id order).
fn principal_split(points: &Points, members: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let d = points.unit[members[0]].len();
    let n = members.len() as f64;
    let mut mean = vec![0.0; d];
    for &m in members {
        for (a, v) in mean.iter_mut().zip(&points.unit[m]) {
            *a += v / n;
        }
    }
    let centred: Vec<Vec<f64>> = members
        .iter()
        .map(|&m| points.unit[m].iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();
    let mut dir: Vec<f64> = centred
        .iter()
        .find(|c| c.iter().any(|v| v.abs() > 1e-12))
        .cloned()
        .unwrap_or_else(|| vec![0.0; d]);
    for _ in 0..50 {
        let mut next = vec![0.0; d];
        for c in &centred {
            let proj: f64 = c.iter().zip(&dir).map(|(a, b)| a * b).sum();
            for (x, v) in next.iter_mut().zip(c) {
                *x += proj * v;
            }
        }
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            break;
        }
        dir = next.into_iter().map(|v| v / norm).collect();
    }
    let mut order: Vec<(f64, usize)> = centred
        .iter()
        .zip(members)
        .map(|(c, &m)| (c.iter().zip(&dir).map(|(a, b)| a * b).sum(), m))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let half = members.len().div_ceil(2);
    let mut left: Vec<usize> = order[..half].iter().map(|&(_, m)| m).collect();
    let mut right: Vec<usize> = order[half..].iter().map(|&(_, m)| m).collect();
    left.sort_unstable();
    right.sort_unstable();
    (left, right)
}
