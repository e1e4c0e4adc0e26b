//! Multi-head self-attention with add-and-norm.
//!
//! Per head, queries, keys and values are bias-free projections of the
//! token matrix. Token `j` attends with `a_j = softmax(Kᵀ q_j)` and pools
//! `f_j = V a_j`. Head outputs are stacked and mapped back to `d_model` by
//! one output projection, then `o_j = layer_norm(x_j + f_j)`.

use rand::Rng;

use crate::autodiff::{Graph, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Role of a token inside a [`HiddenSequence`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenRole {
    QueryWord,
    BoxCentroid,
    TitleWord,
    ClassToken,
}

/// Token matrix (`d_model × T`, one token per column) with a role tag per token.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence {
    pub tokens: Tensor,
    pub roles: Vec<TokenRole>,
}

impl HiddenSequence {
    pub fn new(tokens: Tensor, roles: Vec<TokenRole>) -> Result<Self> {
        if roles.len() != tokens.cols() {
            return Err(Error::input(format!(
                "{} role tags for {} tokens",
                roles.len(),
                tokens.cols()
            )));
        }
        Ok(Self { tokens, roles })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.tokens.rows()
    }
}

/// Weights of one attention layer, generic over storage so the same layout
/// serves as owned tensors ([`AttentionLayerParams`]) and as graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<T> {
    /// One `d_head × d_model` matrix per head.
    pub w_query: Vec<T>,
    pub w_key: Vec<T>,
    pub w_value: Vec<T>,
    /// `d_model × (heads · d_head)`.
    pub w_out: T,
    pub ln_gain: T,
    pub ln_shift: T,
}

pub type AttentionLayerParams = AttentionLayer<Tensor>;

impl<T> AttentionLayer<T> {
    pub fn heads(&self) -> usize {
        self.w_query.len()
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionLayer<U> {
        AttentionLayer {
            w_query: self.w_query.iter().map(&mut *f).collect(),
            w_key: self.w_key.iter().map(&mut *f).collect(),
            w_value: self.w_value.iter().map(&mut *f).collect(),
            w_out: f(&self.w_out),
            ln_gain: f(&self.ln_gain),
            ln_shift: f(&self.ln_shift),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&T)) {
        self.w_query.iter().for_each(&mut *f);
        self.w_key.iter().for_each(&mut *f);
        self.w_value.iter().for_each(&mut *f);
        f(&self.w_out);
        f(&self.ln_gain);
        f(&self.ln_shift);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.w_query.iter_mut().for_each(&mut *f);
        self.w_key.iter_mut().for_each(&mut *f);
        self.w_value.iter_mut().for_each(&mut *f);
        f(&mut self.w_out);
        f(&mut self.ln_gain);
        f(&mut self.ln_shift);
    }
}

impl AttentionLayerParams {
    /// Uniform `±1/√d_in` weights, unit gain, zero shift.
    pub fn init<R: Rng + ?Sized>(d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide d_model = {d_model}"
            )));
        }
        let d_head = d_model / heads;
        let bound = 1.0 / (d_model as f64).sqrt();
        let proj = |rng: &mut R| -> Vec<Tensor> {
            (0..heads)
                .map(|_| Tensor::uniform(d_head, d_model, bound, rng))
                .collect()
        };
        let w_query = proj(rng);
        let w_key = proj(rng);
        let w_value = proj(rng);
        Ok(Self {
            w_query,
            w_key,
            w_value,
            w_out: Tensor::uniform(d_model, heads * d_head, bound, rng),
            ln_gain: Tensor::filled(d_model, 1, 1.0),
            ln_shift: Tensor::zeros(d_model, 1),
        })
    }

    /// All projections zeroed: the layer reduces to `layer_norm(x)`.
    pub fn residual_only(d_model: usize, heads: usize) -> Result<Self> {
        let mut p = Self::init(d_model, heads, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        for w in p
            .w_query
            .iter_mut()
            .chain(&mut p.w_key)
            .chain(&mut p.w_value)
            .chain(std::iter::once(&mut p.w_out))
        {
            w.data_mut().fill(0.0);
        }
        Ok(p)
    }

    pub fn d_model(&self) -> usize {
        self.w_out.rows()
    }

    pub fn d_head(&self) -> usize {
        self.w_query[0].rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.d_model(), self.heads());
        if h == 0 || self.w_key.len() != h || self.w_value.len() != h {
            return Err(Error::Config("inconsistent head count".into()));
        }
        let dh = self.d_head();
        if dh * h != d {
            return Err(Error::Config(format!("heads {h} x d_head {dh} != d_model {d}")));
        }
        let proj_ok = self
            .w_query
            .iter()
            .chain(&self.w_key)
            .chain(&self.w_value)
            .all(|w| w.shape() == [dh, d]);
        if !proj_ok
            || self.w_out.shape() != [d, h * dh]
            || self.ln_gain.shape() != [d, 1]
            || self.ln_shift.shape() != [d, 1]
        {
            return Err(Error::Config("projection extents disagree with d_model".into()));
        }
        Ok(())
    }

    /// Register every weight on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AttentionLayer<Var> {
        self.map(&mut |t| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Run the layer on a tensor-level sequence.
    pub fn forward(&self, x: &HiddenSequence, scaled_logits: bool) -> Result<HiddenSequence> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.tokens.clone());
        let out = attention_layer(&mut g, xv, &p, scaled_logits)?;
        HiddenSequence::new(g.value(out).clone(), x.roles.clone())
    }
}

/// One head's projections.
#[derive(Clone, Copy, Debug)]
pub struct HeadProjections {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Per-head bias-free query/key/value projections of the `d_model × T` input.
pub fn project_qkv(g: &mut Graph, x: Var, p: &AttentionLayer<Var>) -> Result<Vec<HeadProjections>> {
    let d_model = g.shape(x)[0];
    let expected = g.shape(p.w_out)[0];
    if d_model != expected {
        return Err(Error::Config(format!(
            "sequence width {d_model} does not match layer width {expected}"
        )));
    }
    (0..p.heads())
        .map(|h| {
            Ok(HeadProjections {
                query: g.linear_nobias(x, p.w_query[h])?,
                key: g.linear_nobias(x, p.w_key[h])?,
                value: g.linear_nobias(x, p.w_value[h])?,
            })
        })
        .collect()
}

/// Output of [`attention_layer_traced`].
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Var,
    /// Per head, a `T × T` matrix whose column `j` is `a_j`.
    pub weights: Vec<Var>,
}

pub fn attention_layer(g: &mut Graph, x: Var, p: &AttentionLayer<Var>, scaled_logits: bool) -> Result<Var> {
    Ok(attention_layer_traced(g, x, p, scaled_logits)?.output)
}

pub fn attention_layer_traced(
    g: &mut Graph,
    x: Var,
    p: &AttentionLayer<Var>,
    scaled_logits: bool,
) -> Result<AttentionTrace> {
    let heads = project_qkv(g, x, p)?;
    let mut pooled = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    for h in heads {
        let kt = g.transpose(h.key);
        // Column j holds Kᵀ q_j.
        let mut logits = g.matmul(kt, h.query)?;
        if scaled_logits {
            let d_head = g.shape(h.query)[0] as f64;
            logits = g.scale(logits, 1.0 / d_head.sqrt());
        }
        let a = g.softmax_cols(logits)?;
        pooled.push(g.matmul(h.value, a)?);
        weights.push(a);
    }
    let stacked = if pooled.len() == 1 {
        pooled[0]
    } else {
        g.concat_rows(&pooled)?
    };
    let f = g.linear_nobias(stacked, p.w_out)?;
    let residual = g.add(x, f)?;
    let output = g.layer_norm_cols(residual, p.ln_gain, p.ln_shift, LAYER_NORM_EPS)?;
    Ok(AttentionTrace { output, weights })
}
