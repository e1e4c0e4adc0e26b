//! Alternating training: minibatch descent on the joint objective with
//! tree-sampled negatives, interleaved with rebuilding the tree from fresh
//! video embeddings.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::corpus::Corpus;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{hinge_sum_var, mse_var, sum_scalars, triplet_loss_var, LossConfig};
use crate::model::{
    build_input_sequence, forward_cross_path, forward_embed_path, forward_student, query_sequence, video_sequence,
    Modality, ModelConfig, ModelParams, QueryFeatures, VideoFeatures, VideoId, Weights,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scoring::embed_similarity_var;
use crate::tensor::Tensor;
use crate::tree::{build_tree, sample_negatives, BuildConfig, NegativeSamplingConfig, TreeIndex};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampling: NegativeSamplingConfig,
    /// Add tree-sampled negatives to the teacher losses.
    pub tree_negatives: bool,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    /// Pairs per minibatch; pairs in one batch are mutually irrelevant.
    pub batch_size: usize,
    /// Tree rebuilds spread evenly over training (a final rebuild always follows).
    pub rebuilds: usize,
    pub seed: u64,
    /// Stop gradients flowing from the distillation term into the teacher.
    pub detach_teacher: bool,
    pub tree: BuildConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_scale(),
            loss: LossConfig::default(),
            sampling: NegativeSamplingConfig::default(),
            tree_negatives: true,
            optimizer: OptimizerKind::default(),
            learning_rate: 0.01,
            steps: 200,
            batch_size: 8,
            rebuilds: 3,
            seed: 0,
            detach_teacher: true,
            tree: BuildConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.sampling.strategy.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One minibatch: `queries[k]` was written for `videos[k]`; `negatives[k]`
/// holds extra videos irrelevant to query `k`.
#[derive(Clone, Debug, Default)]
pub struct TrainingBatch<'a> {
    pub queries: Vec<&'a QueryFeatures>,
    pub videos: Vec<&'a VideoFeatures>,
    pub negatives: Vec<Vec<&'a VideoFeatures>>,
}

impl TrainingBatch<'_> {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Graph handles of the loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cross: Var,
    pub embed: Option<Var>,
    pub distill: Option<Var>,
    pub total: Var,
}

fn scalar(g: &Graph, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).item())
}

/// Joint objective of one batch: teacher cross triplet loss, plus `λ` times
/// the embedding triplet loss, plus `β` times (student triplet loss + `γ` ·
/// MSE between teacher and student cross scores). Terms with a zero weight
/// are skipped entirely.
pub fn batch_objective(
    g: &mut Graph,
    w: &Weights<Var>,
    model: &ModelConfig,
    loss: &LossConfig,
    batch: &TrainingBatch<'_>,
    detach_teacher: bool,
) -> Result<LossTerms> {
    let n = batch.len();
    if n < 2 || batch.videos.len() != n || batch.negatives.len() > n {
        return Err(Error::input("a batch needs at least two aligned query/video pairs"));
    }
    let m = loss.margin;
    let seq = |q: &QueryFeatures, v: &VideoFeatures| build_input_sequence(q, v, model.positional);

    // cross[i][j]: video i against query j.
    let mut cross = vec![Vec::with_capacity(n); n];
    for (i, v) in batch.videos.iter().enumerate() {
        for q in &batch.queries {
            let s = forward_cross_path(g, w, model, &seq(q, v)?, q.len())?;
            cross[i].push(s);
        }
    }
    let mut cross_terms = vec![triplet_loss_var(g, &cross, m)?];
    for (k, negs) in batch.negatives.iter().enumerate() {
        let q = batch.queries[k];
        let scores = negs
            .iter()
            .map(|v| forward_cross_path(g, w, model, &seq(q, v)?, q.len()))
            .collect::<Result<Vec<_>>>()?;
        cross_terms.extend(hinge_sum_var(g, cross[k][k], &scores, m)?);
    }
    let l_cross = sum_scalars(g, &cross_terms)?;
    let mut total = l_cross;

    let mut l_embed = None;
    if loss.lambda > 0.0 {
        let qe = batch
            .queries
            .iter()
            .map(|q| forward_embed_path(g, w, model, Modality::Query, &query_sequence(q, model.positional)?))
            .collect::<Result<Vec<_>>>()?;
        let video_embed = |g: &mut Graph, v: &VideoFeatures| {
            forward_embed_path(g, w, model, Modality::Video, &video_sequence(v, model.positional)?)
        };
        let ve = batch
            .videos
            .iter()
            .map(|v| video_embed(g, v))
            .collect::<Result<Vec<_>>>()?;
        let mut embed = vec![Vec::with_capacity(n); n];
        for (i, &v) in ve.iter().enumerate() {
            for &q in &qe {
                embed[i].push(embed_similarity_var(g, q, v)?);
            }
        }
        let mut terms = vec![triplet_loss_var(g, &embed, m)?];
        for (k, negs) in batch.negatives.iter().enumerate() {
            let scores = negs
                .iter()
                .map(|v| {
                    let e = video_embed(g, v)?;
                    embed_similarity_var(g, qe[k], e)
                })
                .collect::<Result<Vec<_>>>()?;
            terms.extend(hinge_sum_var(g, embed[k][k], &scores, m)?);
        }
        let e = sum_scalars(g, &terms)?;
        let weighted = g.scale(e, loss.lambda);
        total = g.add(total, weighted)?;
        l_embed = Some(e);
    }

    let mut l_distill = None;
    if loss.beta > 0.0 {
        let mut student = vec![Vec::with_capacity(n); n];
        for (i, v) in batch.videos.iter().enumerate() {
            for q in &batch.queries {
                let s = forward_student(g, w, model, &seq(q, v)?, q.len())?;
                student[i].push(s);
            }
        }
        let student_triplet = triplet_loss_var(g, &student, m)?;
        let teacher: Vec<Var> = cross
            .iter()
            .flatten()
            .map(|&t| if detach_teacher { g.detach(t) } else { t })
            .collect();
        let flat: Vec<Var> = student.iter().flatten().copied().collect();
        let mse = mse_var(g, &teacher, &flat)?;
        let weighted_mse = g.scale(mse, loss.gamma);
        let d = g.add(student_triplet, weighted_mse)?;
        let weighted = g.scale(d, loss.beta);
        total = g.add(total, weighted)?;
        l_distill = Some(d);
    }

    Ok(LossTerms {
        cross: l_cross,
        embed: l_embed,
        distill: l_distill,
        total,
    })
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub cross: f64,
    pub embed: f64,
    pub distill: f64,
    pub total: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} l_cross={:.6} l_embed={:.6} l_distill={:.6} total={:.6}",
            self.step, self.cross, self.embed, self.distill, self.total
        )
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    /// Objective over the fixed evaluation batches before the first step.
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Steps after which the tree was rebuilt.
    pub rebuilt_at: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub tree: TreeIndex,
    pub log: TrainingLog,
}

/// Training pairs and their mutual relevance.
struct PairTable<'a> {
    queries: Vec<&'a QueryFeatures>,
    relevant: Vec<&'a [VideoId]>,
    /// Index into the feature table of the video each query was written for.
    video: Vec<usize>,
}

impl PairTable<'_> {
    fn compatible(&self, a: usize, b: usize, features: &[VideoFeatures]) -> bool {
        let (va, vb) = (features[self.video[a]].id, features[self.video[b]].id);
        va != vb && self.relevant[a].binary_search(&vb).is_err() && self.relevant[b].binary_search(&va).is_err()
    }

    /// Greedily take pairs in `order` that are irrelevant to everything taken.
    fn greedy_batch(&self, order: impl Iterator<Item = usize>, size: usize, features: &[VideoFeatures]) -> Vec<usize> {
        let mut chosen: Vec<usize> = Vec::with_capacity(size);
        for p in order {
            if chosen.len() == size {
                break;
            }
            if chosen.iter().all(|&c| self.compatible(c, p, features)) {
                chosen.push(p);
            }
        }
        chosen
    }

    /// Deterministic partition used to measure the objective.
    fn evaluation_batches(&self, size: usize, features: &[VideoFeatures]) -> Vec<Vec<usize>> {
        let mut remaining: Vec<usize> = (0..self.queries.len()).collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let batch = self.greedy_batch(remaining.iter().copied(), size, features);
            remaining.retain(|p| !batch.contains(p));
            if batch.len() >= 2 {
                out.push(batch);
            } else {
                break;
            }
        }
        out
    }
}

/// Embed every video with the current weights, in parallel.
pub fn embed_videos(params: &ModelParams, features: &[VideoFeatures]) -> Result<Vec<(VideoId, Vec<f64>)>> {
    features
        .par_iter()
        .map_init(|| params.scorer(), |scorer, v| Ok((v.id, scorer.video_embedding(v)?)))
        .collect()
}

/// Build a tree over fresh embeddings, tagged with the model's fingerprint.
pub fn build_index(
    params: &ModelParams,
    features: &[VideoFeatures],
    labels: Option<&HashMap<VideoId, u32>>,
    cfg: &BuildConfig,
) -> Result<TreeIndex> {
    let embeddings = embed_videos(params, features)?;
    let mut tree = build_tree(&embeddings, labels, cfg)?;
    tree.set_model_fingerprint(params.fingerprint());
    Ok(tree)
}

fn flatten(w: &Weights<Tensor>) -> Vec<Tensor> {
    let mut out = Vec::new();
    w.for_each(&mut |_, t| out.push(t.clone()));
    out
}

/// Mean joint objective over the fixed evaluation batches.
fn objective(
    params: &ModelParams,
    cfg: &TrainConfig,
    table: &PairTable<'_>,
    batches: &[Vec<usize>],
    features: &[VideoFeatures],
) -> Result<f64> {
    let values = batches
        .par_iter()
        .map(|b| {
            let batch = TrainingBatch {
                queries: b.iter().map(|&p| table.queries[p]).collect(),
                videos: b.iter().map(|&p| &features[table.video[p]]).collect(),
                negatives: Vec::new(),
            };
            let mut g = Graph::new();
            let w = params.bind(&mut g, false);
            let terms = batch_objective(&mut g, &w, &params.config, &cfg.loss, &batch, true)?;
            Ok(g.value(terms.total).item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Run alternating training from a seeded initialisation.
pub fn alternating_train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = ModelParams::init(cfg.model, cfg.seed)?;
    train_from(corpus, cfg, params)
}

/// Run alternating training starting from `params`.
pub fn train_from(corpus: &Corpus, cfg: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.config != cfg.model {
        return Err(Error::Config(
            "initial weights disagree with the configured geometry".into(),
        ));
    }
    if corpus.dim() != cfg.model.d_model {
        return Err(Error::Config(format!(
            "corpus width {} differs from model width {}",
            corpus.dim(),
            cfg.model.d_model
        )));
    }
    let features = corpus.video_features()?;
    let index_of: HashMap<VideoId, usize> = features.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
    let table = PairTable {
        queries: corpus.pairs().map(|(q, _)| &q.features).collect(),
        relevant: corpus.pairs().map(|(q, _)| q.relevant.as_slice()).collect(),
        video: corpus.pairs().map(|(_, r)| index_of[&r.video]).collect(),
    };
    let eval_batches = table.evaluation_batches(cfg.batch_size, &features);
    if eval_batches.is_empty() {
        return Err(Error::input(
            "corpus cannot supply two mutually irrelevant query/video pairs",
        ));
    }
    let categories = corpus.categories();
    let labels = (!categories.is_empty()).then_some(&categories);

    let mut log = TrainingLog {
        initial_objective: objective(&params, cfg, &table, &eval_batches, &features)?,
        ..Default::default()
    };
    let mut tree = if cfg.tree_negatives && cfg.steps > 0 {
        Some(build_index(&params, &features, labels, &cfg.tree)?)
    } else {
        None
    };
    let interval = (cfg.steps / (cfg.rebuilds + 1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..table.queries.len()).collect();

    for step in 0..cfg.steps {
        if step > 0 && step % interval == 0 && log.rebuilt_at.len() < cfg.rebuilds {
            if let Some(t) = tree.as_mut() {
                *t = build_index(&params, &features, labels, &cfg.tree)?;
                log.rebuilt_at.push(step);
            }
        }
        order.shuffle(&mut rng);
        let chosen = table.greedy_batch(order.iter().copied(), cfg.batch_size, &features);
        let mut batch = TrainingBatch {
            queries: chosen.iter().map(|&p| table.queries[p]).collect(),
            videos: chosen.iter().map(|&p| &features[table.video[p]]).collect(),
            negatives: Vec::new(),
        };
        if let Some(t) = &tree {
            for (k, &p) in chosen.iter().enumerate() {
                let leaf = t
                    .leaf_of(features[table.video[p]].id)
                    .ok_or_else(|| Error::Contract("training video missing from tree".into()))?;
                let seed = cfg.seed ^ ((step as u64) << 20) ^ k as u64;
                let drawn = sample_negatives(t, leaf, &cfg.sampling, seed)?;
                let mut seen = HashSet::new();
                let negs = drawn
                    .values()
                    .flatten()
                    .map(|&n| t.node(n).medoid)
                    .filter(|v| table.relevant[p].binary_search(v).is_err() && seen.insert(*v))
                    .map(|v| &features[index_of[&v]])
                    .collect();
                batch.negatives.push(negs);
            }
        }
        if batch.len() < 2 {
            return Err(Error::input("could not draw two mutually irrelevant pairs for a batch"));
        }

        let mut g = Graph::new();
        let w = params.bind(&mut g, true);
        let terms =
            batch_objective(&mut g, &w, &cfg.model, &cfg.loss, &batch, cfg.detach_teacher).map_err(|e| match e {
                Error::NumericDomain { op, detail } => Error::Diverged {
                    step,
                    detail: format!("{op}: {detail}"),
                },
                other => other,
            })?;
        let entry = StepLog {
            step,
            cross: g.value(terms.cross).item(),
            embed: scalar(&g, terms.embed),
            distill: scalar(&g, terms.distill),
            total: g.value(terms.total).item(),
        };
        if !entry.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: entry.to_string(),
            });
        }
        let grads = g.backward(terms.total)?;
        let mut grad_list = Vec::new();
        w.for_each(&mut |_, v| grad_list.push(grads.get(*v)));
        if grad_list.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient; {entry}"),
            });
        }
        let mut flat = flatten(&params.weights);
        let mut refs: Vec<&mut Tensor> = flat.iter_mut().collect();
        optimizer.step(&mut refs, &grad_list);
        let mut updated = flat.into_iter();
        params
            .weights
            .for_each_mut(&mut |t| *t = updated.next().expect("same parameter count"));
        log.steps.push(entry);
    }

    log.final_objective = objective(&params, cfg, &table, &eval_batches, &features)?;
    if !log.final_objective.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            detail: format!("final objective {}", log.final_objective),
        });
    }
    let tree = build_index(&params, &features, labels, &cfg.tree)?;
    Ok(TrainOutcome { params, tree, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{distill_loss, dual_loss, total_loss, triplet_loss};
    use crate::pipeline::synth::{generate_synthetic_corpus, SyntheticConfig};
    use crate::scoring::ScoreMatrix;

    fn corpus() -> Corpus {
        generate_synthetic_corpus(&SyntheticConfig {
            clusters: 4,
            per_cluster: 4,
            noise: 0.1,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    /// The graph objective agrees with the scalar loss functions applied to
    /// independently computed scores.
    #[test]
    fn batch_objective_matches_scalar_losses() {
        let c = corpus();
        let feats = c.video_features().unwrap();
        let params = ModelParams::init(ModelConfig::desk_scale(), 1).unwrap();
        let picks = [0usize, 4, 8, 12];
        let batch = TrainingBatch {
            queries: picks.iter().map(|&i| &c.records()[i].queries[0].features).collect(),
            videos: picks.iter().map(|&i| &feats[i]).collect(),
            negatives: Vec::new(),
        };
        let loss = LossConfig::default();
        let mut g = Graph::new();
        let w = params.bind(&mut g, false);
        let terms = batch_objective(&mut g, &w, &params.config, &loss, &batch, true).unwrap();

        let mut s = params.scorer();
        let n = picks.len();
        let (mut cross, mut embed, mut student) = (vec![], vec![], vec![]);
        for i in 0..n {
            for j in 0..n {
                let out = s.dual(batch.queries[j], batch.videos[i]).unwrap();
                cross.push(out.sim_cross);
                embed.push(out.sim_embed);
                student.push(out.sim_cross_student);
            }
        }
        let m = |v: &Vec<f64>| ScoreMatrix::new(n, v.clone()).unwrap();
        let lc = triplet_loss(&m(&cross), loss.margin).unwrap();
        let le = triplet_loss(&m(&embed), loss.margin).unwrap();
        let ls = triplet_loss(&m(&student), loss.margin).unwrap();
        let ld = distill_loss(ls, &cross, &student, loss.gamma).unwrap();
        let want = total_loss(dual_loss(lc, le, loss.lambda), ld, loss.beta);
        let got = g.value(terms.total).item();
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            rebuilds: 1,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let c = corpus();
        let a = alternating_train(&c, &quick(6)).unwrap();
        let b = alternating_train(&c, &quick(6)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.tree, b.tree);
        assert_eq!(a.log.rebuilt_at, vec![3]);
        assert_eq!(a.tree.len(), 16);
        assert_eq!(a.tree.metadata().model_fingerprint, a.params.fingerprint());
    }

    #[test]
    fn zero_weights_leave_only_the_cross_loss() {
        let c = corpus();
        let cfg = TrainConfig {
            loss: LossConfig {
                lambda: 0.0,
                beta: 0.0,
                ..Default::default()
            },
            ..quick(3)
        };
        let out = alternating_train(&c, &cfg).unwrap();
        for e in &out.log.steps {
            assert_eq!((e.embed, e.distill), (0.0, 0.0));
            assert_eq!(e.total, e.cross);
        }
        let init = ModelParams::init(cfg.model, cfg.seed).unwrap();
        assert_eq!(out.params.weights.student, init.weights.student);
        assert_eq!(out.params.weights.query_embed, init.weights.query_embed);
    }

    #[test]
    fn zero_steps_keep_the_initialisation() {
        let c = corpus();
        let out = alternating_train(&c, &quick(0)).unwrap();
        assert_eq!(out.params, ModelParams::init(ModelConfig::desk_scale(), 5).unwrap());
        assert_eq!(out.log.initial_objective, out.log.final_objective);
    }

    #[test]
    fn divergence_is_reported() {
        let c = corpus();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..quick(4)
        };
        let err = alternating_train(&c, &cfg).unwrap_err();
        assert_eq!(err.kind(), "diverged");
    }

    #[test]
    fn single_cluster_cannot_form_batches() {
        let c = generate_synthetic_corpus(&SyntheticConfig {
            clusters: 1,
            per_cluster: 4,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(alternating_train(&c, &quick(1)).unwrap_err().kind(), "input");
    }
}
