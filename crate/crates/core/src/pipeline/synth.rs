//! Synthetic clustered corpora for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::corpus::{Corpus, CorpusRecord, QueryRecord};
use crate::error::{Error, Result};
use crate::model::{QueryFeatures, VideoId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    /// Standard deviation of the per-token noise added to the cluster latent.
    pub noise: f64,
    /// Seeds the cluster latents.
    pub seed: u64,
    /// Seeds the noise; two splits with the same `seed` share latents.
    pub split: u64,
    pub boxes: usize,
    pub title_len: usize,
    pub query_len: usize,
    pub queries_per_video: usize,
    /// When non-zero, emit this many raw boxes per video instead of centroids.
    pub raw_boxes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clusters: 16,
            per_cluster: 32,
            dim: 16,
            noise: 0.1,
            seed: 0,
            split: 0,
            boxes: 4,
            title_len: 3,
            query_len: 3,
            queries_per_video: 1,
            raw_boxes: 0,
        }
    }
}

/// Every video and query token is its cluster's latent plus Gaussian noise.
/// Relevance is cluster membership; the cluster index is the category.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<Corpus> {
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::input(format!(
            "noise must be a finite value >= 0, got {}",
            cfg.noise
        )));
    }
    let counts = [
        cfg.clusters,
        cfg.per_cluster,
        cfg.dim,
        cfg.query_len,
        cfg.queries_per_video,
    ];
    if counts.contains(&0) || cfg.boxes + cfg.title_len + cfg.raw_boxes == 0 {
        return Err(Error::input("synthetic corpus counts must be at least 1"));
    }
    let mut latent_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latents: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| (0..cfg.dim).map(|_| latent_rng.sample(StandardNormal)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed.rotate_left(32) ^ cfg.split.wrapping_add(1).wrapping_mul(0x2545_f491_4f6c_dd1d),
    );
    let tokens = |latent: &[f64], n: usize, rng: &mut ChaCha8Rng| -> Option<Tensor> {
        (n > 0).then(|| {
            let cols: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    latent
                        .iter()
                        .map(|&v| v + cfg.noise * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            Tensor::from_columns(&cols).expect("non-empty")
        })
    };

    let mut records = Vec::with_capacity(cfg.clusters * cfg.per_cluster);
    for (c, latent) in latents.iter().enumerate() {
        let members: Vec<VideoId> = (0..cfg.per_cluster)
            .map(|i| VideoId((c * cfg.per_cluster + i) as u32))
            .collect();
        for &video in &members {
            let (raw_boxes, centroids) = if cfg.raw_boxes > 0 {
                (tokens(latent, cfg.raw_boxes, &mut rng), None)
            } else {
                (None, tokens(latent, cfg.boxes, &mut rng))
            };
            let title = tokens(latent, cfg.title_len, &mut rng);
            let queries = (0..cfg.queries_per_video)
                .map(|j| QueryRecord {
                    id: (video.0 as usize * cfg.queries_per_video + j) as u32,
                    features: QueryFeatures::new(tokens(latent, cfg.query_len, &mut rng).expect("query_len > 0")),
                    relevant: members.clone(),
                })
                .collect();
            records.push(CorpusRecord {
                video,
                raw_boxes,
                centroids,
                title,
                category: Some(c as u32),
                queries,
            });
        }
    }
    Corpus::new(cfg.dim, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::corpus::write_corpus;

    #[test]
    fn counts_and_determinism() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a.len(), 512);
        assert_eq!(a.query_count(), 512);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_corpus(&mut x, &a).unwrap();
        write_corpus(&mut y, &generate_synthetic_corpus(&cfg).unwrap()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_noise_tokens_are_latent_copies() {
        let cfg = SyntheticConfig {
            clusters: 3,
            per_cluster: 2,
            noise: 0.0,
            ..Default::default()
        };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let r = &c.records()[2];
        let latent = r.queries[0].features.words.column(0);
        for t in [r.centroids.as_ref().unwrap(), r.title.as_ref().unwrap()] {
            assert!(t.columns().all(|col| col == latent));
        }
        assert_eq!(c.records()[3].queries[0].features.words.column(1), latent);
        assert_ne!(c.records()[4].title.as_ref().unwrap().column(0), latent);
    }

    #[test]
    fn splits_share_latents_but_not_noise() {
        let base = SyntheticConfig {
            clusters: 2,
            per_cluster: 2,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&base).unwrap();
        let b = generate_synthetic_corpus(&SyntheticConfig { split: 1, ..base }).unwrap();
        assert_ne!(a, b);
        let zero = SyntheticConfig { noise: 0.0, ..base };
        assert_eq!(
            generate_synthetic_corpus(&zero).unwrap(),
            generate_synthetic_corpus(&SyntheticConfig { split: 5, ..zero }).unwrap()
        );
    }

    #[test]
    fn negative_noise_is_rejected() {
        let cfg = SyntheticConfig {
            noise: -0.1,
            ..Default::default()
        };
        assert_eq!(generate_synthetic_corpus(&cfg).unwrap_err().kind(), "input");
    }
}
