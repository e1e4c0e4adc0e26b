//! Query/video similarity functions.
//!
//! * [`cross_similarity`]: every query token attends over the video tokens,
//!   and the cosines between each token and its pooled counterpart are summed.
//! * [`soft_attention_pool`]: the older inner-product form of the same
//!   matching, kept for comparison.
//! * [`embed_similarity`]: cosine between two global embeddings.
//!
//! Each has a graph-level variant (suffix `_var`) used during training; the
//! tensor-level functions run the same code on a throwaway graph.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which cross-matching head turns attended tokens into a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SimilarityMode {
    /// Sum of cosines between each query token and its attention pool.
    #[default]
    Cosine,
    /// Sum of raw inner products (legacy soft-attention head).
    InnerProduct,
}

impl SimilarityMode {
    pub fn as_u8(self) -> u8 {
        match self {
            SimilarityMode::Cosine => 0,
            SimilarityMode::InnerProduct => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SimilarityMode::Cosine),
            1 => Some(SimilarityMode::InnerProduct),
            _ => None,
        }
    }
}

fn check_widths(g: &Graph, q: Var, v: Var, op: &'static str) -> Result<()> {
    if g.shape(q)[0] != g.shape(v)[0] {
        return Err(Error::Dimension {
            op,
            left: g.shape(q),
            right: g.shape(v),
        });
    }
    Ok(())
}

/// `Σ_j cos(q_j, V softmax(Vᵀ q_j))` for `q: d × L`, `v: d × T`.
pub fn cross_similarity_var(g: &mut Graph, q: Var, v: Var) -> Result<Var> {
    check_widths(g, q, v, "cross_similarity")?;
    let vt = g.transpose(v);
    let logits = g.matmul(vt, q)?;
    let attn = g.softmax_cols(logits)?;
    let pooled = g.matmul(v, attn)?;
    let cos = g.column_cosine(q, pooled)?;
    Ok(g.sum(cos))
}

/// Soft-attention pooling of words `w: d × M` over centroids `c: d × K`.
/// Returns the pooled words `W̃ = C softmax_cols(Cᵀ W)` and `Σ_i ⟨w̃_i, w_i⟩`.
pub fn soft_attention_pool_var(g: &mut Graph, c: Var, w: Var) -> Result<(Var, Var)> {
    check_widths(g, c, w, "soft_attention_pool")?;
    let ct = g.transpose(c);
    let s = g.matmul(ct, w)?;
    let s_tilde = g.softmax_cols(s)?;
    let pooled = g.matmul(c, s_tilde)?;
    let prod = g.mul(pooled, w)?;
    let score = g.sum(prod);
    Ok((pooled, score))
}

/// Cosine of two `d × 1` embeddings.
pub fn embed_similarity_var(g: &mut Graph, q: Var, v: Var) -> Result<Var> {
    check_widths(g, q, v, "embed_similarity")?;
    if g.value(v).norm() == 0.0 {
        return Err(Error::input("zero-norm video embedding"));
    }
    let c = g.column_cosine(q, v)?;
    g.element(c, 0, 0)
}

/// Cross-matching head selected by `mode`, on query tokens `q` and video tokens `v`.
pub fn match_var(g: &mut Graph, mode: SimilarityMode, q: Var, v: Var) -> Result<Var> {
    match mode {
        SimilarityMode::Cosine => cross_similarity_var(g, q, v),
        SimilarityMode::InnerProduct => Ok(soft_attention_pool_var(g, v, q)?.1),
    }
}

pub fn cross_similarity(q: &Tensor, v: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let vv = g.constant(v.clone());
    let s = cross_similarity_var(&mut g, qv, vv)?;
    Ok(g.value(s).item())
}

pub fn soft_attention_pool(c: &Tensor, w: &Tensor) -> Result<(Tensor, f64)> {
    let mut g = Graph::new();
    let cv = g.constant(c.clone());
    let wv = g.constant(w.clone());
    let (pooled, score) = soft_attention_pool_var(&mut g, cv, wv)?;
    Ok((g.value(pooled).clone(), g.value(score).item()))
}

pub fn embed_similarity(q: &[f64], v: &[f64]) -> Result<f64> {
    if q.len() != v.len() || q.is_empty() {
        return Err(Error::Dimension {
            op: "embed_similarity",
            left: [q.len(), 1],
            right: [v.len(), 1],
        });
    }
    let mut g = Graph::new();
    let qv = g.constant(Tensor::vector(q.to_vec()));
    let vv = g.constant(Tensor::vector(v.to_vec()));
    let s = embed_similarity_var(&mut g, qv, vv)?;
    Ok(g.value(s).item())
}

/// Pairwise scores over a minibatch: row = video `i`, column = sentence `j`,
/// ground-truth pairs on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::input(format!(
                "{} entries for a {n}x{n} score matrix",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                op: "score matrix",
                detail: "non-finite score".into(),
            });
        }
        Ok(Self { n, entries })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let entries = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self::new(n, entries)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Score of video `i` against sentence `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.get(j, i)).expect("same entries")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.n, self.entries.iter().map(|&v| f(v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax;
    use proptest::prelude::*;

    fn cols(c: &[Vec<f64>]) -> Tensor {
        Tensor::from_columns(c).unwrap()
    }

    #[test]
    fn identical_unit_vectors_score_one() {
        let u = vec![0.6, 0.8, 0.0];
        let s = cross_similarity(&cols(std::slice::from_ref(&u)), &cols(std::slice::from_ref(&u))).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let s = cross_similarity(&cols(&vec![u.clone(); 3]), &cols(&vec![u; 4])).unwrap();
        assert!((s - 3.0).abs() < 1e-14);
    }

    /// Line-by-line evaluation of the cross-matching loop on a 2-token query
    /// and a 3-token video.
    #[test]
    fn manual_trace_two_by_three() {
        let q = [vec![1.0, 0.0], vec![0.5, -1.0]];
        let v = [vec![1.0, 1.0], vec![0.0, 2.0], vec![-1.0, 0.5]];
        let mut expected = 0.0;
        for qj in &q {
            let logits: Vec<f64> = v.iter().map(|vk| vk[0] * qj[0] + vk[1] * qj[1]).collect();
            let a = softmax(&logits).unwrap();
            let pooled = [
                (0..3).map(|k| a[k] * v[k][0]).sum::<f64>(),
                (0..3).map(|k| a[k] * v[k][1]).sum::<f64>(),
            ];
            let dot = qj[0] * pooled[0] + qj[1] * pooled[1];
            let nq = (qj[0] * qj[0] + qj[1] * qj[1]).sqrt();
            let np = (pooled[0] * pooled[0] + pooled[1] * pooled[1]).sqrt();
            expected += dot / (nq * np);
        }
        let got = cross_similarity(&cols(&q), &cols(&v)).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn zero_query_token_is_an_error_and_dead_pool_counts_zero() {
        let err = cross_similarity(&cols(&[vec![0.0, 0.0]]), &cols(&[vec![1.0, 0.0]]));
        assert!(matches!(err, Err(Error::Input(_))));
        // All video tokens zero: the pooled vector is zero, cosine term is 0.
        let s = cross_similarity(&cols(&[vec![1.0, 0.0]]), &cols(&[vec![0.0, 0.0]])).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn soft_pool_single_centroid() {
        let c1 = vec![1.0, 2.0];
        let w = cols(&[vec![0.5, 0.5], vec![-1.0, 3.0]]);
        let (pooled, score) = soft_attention_pool(&cols(std::slice::from_ref(&c1)), &w).unwrap();
        for j in 0..2 {
            assert_eq!(pooled.column(j), c1);
        }
        let want: f64 = w.columns().map(|wi| c1[0] * wi[0] + c1[1] * wi[1]).sum();
        assert!((score - want).abs() < 1e-14);
    }

    #[test]
    fn soft_pool_orthonormal_closed_form() {
        let k = 3usize;
        let c = Tensor::identity(k);
        let (_, score) = soft_attention_pool(&c, &c).unwrap();
        let e = 1f64.exp();
        let want = k as f64 * e / (e + (k as f64 - 1.0));
        assert!((score - want).abs() < 1e-14);
    }

    #[test]
    fn soft_pool_recomputation_oracle() {
        let c = cols(&[vec![0.3, -0.2, 1.0], vec![1.5, 0.1, -0.4]]);
        let w = cols(&[vec![1.0, 0.0, 0.5], vec![-0.5, 2.0, 0.25], vec![0.0, 0.0, 1.0]]);
        for scale in [1.0, 2.0] {
            let ws = w.map(|x| x * scale);
            let (_, got) = soft_attention_pool(&c, &ws).unwrap();
            let mut want = 0.0;
            for wi in ws.columns() {
                let s: Vec<f64> = c
                    .columns()
                    .map(|ck| ck.iter().zip(&wi).map(|(a, b)| a * b).sum())
                    .collect();
                let st = softmax(&s).unwrap();
                for r in 0..3 {
                    let pooled: f64 = (0..2).map(|k| c.get(r, k) * st[k]).sum();
                    want += pooled * wi[r];
                }
            }
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_similarity_examples() {
        assert!((embed_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(embed_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let s = embed_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            embed_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            embed_similarity(&[1.0, 0.0], &[0.0, 0.0]),
            Err(Error::Input(_))
        ));
    }

    fn token_matrix(d: usize, n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, d * n)
            .prop_filter("no zero tokens", move |v| {
                (0..n).all(|c| (0..d).any(|r| v[r * n + c].abs() > 1e-3))
            })
            .prop_map(move |v| Tensor::from_vec(d, n, v).unwrap())
    }

    proptest! {
        #[test]
        fn cross_similarity_bounded_and_video_order_free(
            q in token_matrix(4, 3),
            v in token_matrix(4, 5),
            rot in 1usize..5,
        ) {
            let s = cross_similarity(&q, &v).unwrap();
            prop_assert!(s.abs() <= 3.0 + 1e-12);
            let permuted: Vec<Vec<f64>> = (0..5).map(|k| v.column((k + rot) % 5)).collect();
            let sp = cross_similarity(&q, &cols(&permuted)).unwrap();
            prop_assert!((s - sp).abs() <= 1e-12);
        }

        #[test]
        fn rescaling_a_query_token_keeps_its_attention_argmax(
            q in token_matrix(3, 1),
            v in token_matrix(3, 4),
            scale in 0.1f64..10.0,
        ) {
            let argmax = |q: &Tensor| {
                let logits: Vec<f64> = v.columns().map(|vk| vk.iter().zip(q.data()).map(|(a, b)| a * b).sum()).collect();
                let a = softmax(&logits).unwrap();
                (0..a.len()).fold(0, |b, i| if a[i] > a[b] { i } else { b })
            };
            prop_assert_eq!(argmax(&q), argmax(&q.map(|x| x * scale)));
        }

        #[test]
        fn embed_similarity_scale_invariant(
            q in proptest::collection::vec(0.1f64..2.0, 4),
            v in proptest::collection::vec(-2.0f64..2.0, 4),
            a in 0.01f64..100.0,
        ) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let s = embed_similarity(&q, &v).unwrap();
            let sa: Vec<f64> = q.iter().map(|x| x * a).collect();
            prop_assert!((s - embed_similarity(&sa, &v).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
