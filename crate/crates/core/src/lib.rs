//! Tree-indexed combo-attention retrieval.
//!
//! A dual-path attention scorer ranks videos for a text query. Its
//! embedding path places every video in a hierarchical 2-medoid tree; its
//! expensive cross path is evaluated only on the nodes a beam search visits.

pub mod attention;
pub mod autodiff;
mod binio;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scoring;
pub mod tensor;
pub mod tree;

pub use attention::{AttentionLayerParams, HiddenSequence, TokenRole};
pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use losses::LossConfig;
pub use model::{ModelConfig, ModelParams, QueryFeatures, VideoFeatures, VideoId};
pub use optim::{Optimizer, OptimizerKind};
pub use pipeline::{Corpus, EvalReport, TrainConfig};
pub use scoring::{ScoreMatrix, SimilarityMode};
pub use tensor::Tensor;
pub use tree::{NodeId, TreeIndex};
