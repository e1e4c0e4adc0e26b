//! Retrieval evaluation over a corpus.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;

use super::corpus::Corpus;
use super::metrics::{evaluate_map, evaluate_pr_auc};
use crate::binio::Fnv64;
use crate::error::{Error, Result};
use crate::model::{ModelParams, QueryFeatures, Scorer, VideoFeatures, VideoId};
use crate::tree::{beam_retrieve, exhaustive_ranking, Hit, NodeId, RetrievalResult, TreeIndex};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub map_at_1: f64,
    pub map_at_3: f64,
    pub map_at_5: f64,
    pub pr_auc: f64,
    pub mean_visited: f64,
    pub query_count: usize,
    /// Queries without relevant videos, left out of mAP.
    pub excluded: usize,
    pub fingerprint: u64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "map@1={:.6}", self.map_at_1)?;
        writeln!(f, "map@3={:.6}", self.map_at_3)?;
        writeln!(f, "map@5={:.6}", self.map_at_5)?;
        writeln!(f, "pr_auc={:.6}", self.pr_auc)?;
        writeln!(f, "mean_visited={:.3}", self.mean_visited)?;
        writeln!(f, "queries={}", self.query_count)?;
        writeln!(f, "excluded={}", self.excluded)?;
        write!(f, "fingerprint={:016x}", self.fingerprint)
    }
}

/// One query's ranked output plus the labelled scores used for PR-AUC.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome {
    pub query: u32,
    pub hits: Vec<Hit>,
    pub visited: usize,
    pub scored: Vec<(f64, bool)>,
}

/// Video features addressable by id.
pub struct VideoTable {
    features: Vec<VideoFeatures>,
    index: HashMap<VideoId, usize>,
}

impl VideoTable {
    pub fn new(features: Vec<VideoFeatures>) -> Self {
        let index = features.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
        Self { features, index }
    }

    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        Ok(Self::new(corpus.video_features()?))
    }

    pub fn get(&self, id: VideoId) -> Result<&VideoFeatures> {
        self.index
            .get(&id)
            .map(|&i| &self.features[i])
            .ok_or_else(|| Error::input(format!("video {id} is not in the corpus")))
    }

    pub fn features(&self) -> &[VideoFeatures] {
        &self.features
    }
}

/// Beam search for one query, scoring each node through its medoid.
pub fn retrieve(
    scorer: &mut Scorer<'_>,
    tree: &TreeIndex,
    videos: &VideoTable,
    query: &QueryFeatures,
    beam: usize,
) -> Result<RetrievalResult> {
    beam_retrieve(tree, beam, |n| scorer.cross(query, videos.get(tree.node(n).medoid)?))
}

/// Score every video and keep the best `k`, ordered like the beam search.
pub fn retrieve_exhaustive(
    scorer: &mut Scorer<'_>,
    videos: &VideoTable,
    query: &QueryFeatures,
    k: usize,
) -> Result<Vec<Hit>> {
    let hits = videos
        .features()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            Ok(Hit {
                node: NodeId(i as u32),
                item: v.id.0,
                score: scorer.cross(query, v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(exhaustive_ranking(hits, k))
}

/// Run retrieval for every query of `corpus` in parallel. With `tree` set
/// the beam search is used; otherwise every video is scored.
pub fn run_queries(
    params: &ModelParams,
    corpus: &Corpus,
    tree: Option<&TreeIndex>,
    beam: usize,
) -> Result<Vec<QueryOutcome>> {
    if let Some(t) = tree {
        t.check_model(params)?;
    }
    let videos = VideoTable::from_corpus(corpus)?;
    let pairs: Vec<_> = corpus.pairs().map(|(q, _)| q).collect();
    pairs
        .par_iter()
        .map_init(
            || params.scorer(),
            |scorer, q| {
                let label = |h: &Hit| q.relevant.binary_search(&VideoId(h.item)).is_ok();
                let (hits, visited, scored) = match tree {
                    Some(t) => {
                        let r = retrieve(scorer, t, &videos, &q.features, beam)?;
                        let scored = r.scored_leaves.iter().map(|h| (h.score, label(h))).collect();
                        (r.hits, r.visited, scored)
                    }
                    None => {
                        let all = retrieve_exhaustive(scorer, &videos, &q.features, usize::MAX)?;
                        let scored = all.iter().map(|h| (h.score, label(h))).collect();
                        let visited = all.len();
                        (all.into_iter().take(beam).collect(), visited, scored)
                    }
                };
                Ok(QueryOutcome {
                    query: q.id,
                    hits,
                    visited,
                    scored,
                })
            },
        )
        .collect()
}

/// Summarise query outcomes against the corpus relevance labels.
pub fn summarize(corpus: &Corpus, outcomes: &[QueryOutcome], fingerprint: u64) -> Result<EvalReport> {
    let relevance: HashMap<u32, &[VideoId]> = corpus.pairs().map(|(q, _)| (q.id, q.relevant.as_slice())).collect();
    let rankings: Vec<Vec<VideoId>> = outcomes
        .iter()
        .map(|o| o.hits.iter().map(|h| VideoId(h.item)).collect())
        .collect();
    let rel: Vec<Vec<VideoId>> = outcomes
        .iter()
        .map(|o| relevance.get(&o.query).map_or_else(Vec::new, |r| r.to_vec()))
        .collect();
    let m1 = evaluate_map(&rankings, &rel, 1)?;
    let m3 = evaluate_map(&rankings, &rel, 3)?;
    let m5 = evaluate_map(&rankings, &rel, 5)?;
    let (scores, labels): (Vec<f64>, Vec<bool>) = outcomes.iter().flat_map(|o| o.scored.iter().copied()).unzip();
    // Without both classes among scored leaves the curve is undefined; report 0.
    let pr_auc = evaluate_pr_auc(&scores, &labels).unwrap_or(0.0);
    let visited: usize = outcomes.iter().map(|o| o.visited).sum();
    Ok(EvalReport {
        map_at_1: m1.value,
        map_at_3: m3.value,
        map_at_5: m5.value,
        pr_auc,
        mean_visited: if outcomes.is_empty() {
            0.0
        } else {
            visited as f64 / outcomes.len() as f64
        },
        query_count: outcomes.len(),
        excluded: m1.excluded,
        fingerprint,
    })
}

/// Fingerprint of everything an evaluation depends on.
pub fn evaluation_fingerprint(params: &ModelParams, tree: Option<&TreeIndex>, beam: usize) -> u64 {
    let mut h = Fnv64::default();
    h.update(&params.fingerprint().to_le_bytes());
    h.update(&tree.map_or(0, |t| t.metadata().embedding_checksum).to_le_bytes());
    h.update(&(beam as u64).to_le_bytes());
    h.finish()
}

/// Retrieval quality of `params` (and `tree`, when given) on `corpus`.
pub fn evaluate(params: &ModelParams, corpus: &Corpus, tree: Option<&TreeIndex>, beam: usize) -> Result<EvalReport> {
    let outcomes = run_queries(params, corpus, tree, beam)?;
    summarize(corpus, &outcomes, evaluation_fingerprint(params, tree, beam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::synth::{generate_synthetic_corpus, SyntheticConfig};
    use crate::pipeline::train::build_index;
    use crate::tree::BuildConfig;

    fn zero_noise(clusters: usize, per: usize) -> Corpus {
        generate_synthetic_corpus(&SyntheticConfig {
            clusters,
            per_cluster: per,
            noise: 0.0,
            seed: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn residual_only_scorer_separates_zero_noise_clusters() {
        let c = zero_noise(6, 5);
        let p = ModelParams::residual_only(ModelConfig::desk_scale(), 0).unwrap();
        let r = evaluate(&p, &c, None, 5).unwrap();
        assert_eq!(r.map_at_1, 1.0);
        assert_eq!(r.map_at_5, 1.0);
        assert_eq!(r.pr_auc, 1.0);
        assert_eq!(r.mean_visited, 30.0);
    }

    #[test]
    fn full_beam_matches_exhaustive_and_is_deterministic() {
        let c = zero_noise(4, 4);
        let p = ModelParams::init(ModelConfig::desk_scale(), 3).unwrap();
        let videos = VideoTable::from_corpus(&c).unwrap();
        let tree = build_index(&p, videos.features(), None, &BuildConfig::default()).unwrap();
        let mut s = p.scorer();
        for (q, _) in c.pairs() {
            let beam = retrieve(&mut s, &tree, &videos, &q.features, 16).unwrap();
            let all = retrieve_exhaustive(&mut s, &videos, &q.features, 16).unwrap();
            let a: Vec<(u32, u64)> = beam.hits.iter().map(|h| (h.item, h.score.to_bits())).collect();
            let b: Vec<(u32, u64)> = all.iter().map(|h| (h.item, h.score.to_bits())).collect();
            assert_eq!(a, b);
        }
        assert_eq!(
            evaluate(&p, &c, Some(&tree), 2).unwrap(),
            evaluate(&p, &c, Some(&tree), 2).unwrap()
        );
    }

    #[test]
    fn stale_index_is_refused() {
        let c = zero_noise(2, 2);
        let p = ModelParams::init(ModelConfig::desk_scale(), 3).unwrap();
        let other = ModelParams::init(ModelConfig::desk_scale(), 4).unwrap();
        let feats = c.video_features().unwrap();
        let tree = build_index(&other, &feats, None, &BuildConfig::default()).unwrap();
        assert_eq!(evaluate(&p, &c, Some(&tree), 1).unwrap_err().kind(), "stale-index");
    }
}
