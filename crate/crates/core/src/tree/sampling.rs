//! Per-level negative sampling along a positive leaf's root path.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, TreeIndex};
use crate::error::{Error, Result};

/// How many negatives to draw at depth `level`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingStrategy {
    /// The same count at every level.
    Uniform { base: usize },
    /// `level` negatives.
    Arithmetic,
    /// `⌈level^alpha⌉` negatives.
    Geometric { alpha: f64 },
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy::Geometric { alpha: 1.4 }
    }
}

impl SamplingStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingStrategy::Geometric { alpha } if !(alpha.is_finite() && alpha > 1.0) => {
                Err(Error::Config(format!("geometric growth needs alpha > 1, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    /// Requested count before capping by the level population.
    pub fn count(&self, level: u32) -> usize {
        match *self {
            SamplingStrategy::Uniform { base } => base,
            SamplingStrategy::Arithmetic => level as usize,
            SamplingStrategy::Geometric { alpha } => {
                if level == 0 {
                    return 0;
                }
                let v = (level as f64).powf(alpha);
                // Exact integer powers (e.g. 32^1.4 = 128) must not round up.
                let r = v.round();
                if (v - r).abs() <= 1e-9 * v {
                    r as usize
                } else {
                    v.ceil() as usize
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NegativeSamplingConfig {
    pub strategy: SamplingStrategy,
}

/// Draw negatives at every level on the path from the root to `positive`
/// (a leaf), excluding the path node itself. Counts are capped at the
/// level population minus one; the root level is always empty.
pub fn sample_negatives(
    tree: &TreeIndex,
    positive: NodeId,
    cfg: &NegativeSamplingConfig,
    seed: u64,
) -> Result<BTreeMap<u32, Vec<NodeId>>> {
    cfg.strategy.validate()?;
    if positive.0 as usize >= tree.node_count() || !tree.node(positive).is_leaf() {
        return Err(Error::input(format!("node {positive} is not a leaf")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for on_path in tree.path_to(positive) {
        let level = tree.node(on_path).depth;
        let pool: Vec<NodeId> = tree.level(level).filter(|&n| n != on_path).collect();
        let want = cfg.strategy.count(level).min(pool.len());
        let mut drawn: Vec<NodeId> = sample(&mut rng, pool.len(), want)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        drawn.sort_unstable();
        out.insert(level, drawn);
    }
    Ok(out)
}
