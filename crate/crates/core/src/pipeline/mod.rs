//! Corpus handling, synthetic data, training and evaluation.

mod corpus;
mod eval;
mod kmeans;
mod metrics;
mod synth;
mod train;

pub use corpus::{
    load_corpus, read_corpus, save_corpus, write_corpus, Corpus, CorpusRecord, QueryRecord, CORPUS_MAGIC,
    CORPUS_VERSION,
};
pub use eval::{
    evaluate, evaluation_fingerprint, retrieve, retrieve_exhaustive, run_queries, summarize, EvalReport, QueryOutcome,
    VideoTable,
};
pub use kmeans::cluster_boxes;
pub use metrics::{average_precision_at_k, evaluate_map, evaluate_pr_auc, recall_at_k, spearman, MapSummary};
pub use synth::{generate_synthetic_corpus, SyntheticConfig};
pub use train::{
    alternating_train, batch_objective, build_index, embed_videos, train_from, LossTerms, StepLog, TrainConfig,
    TrainOutcome, TrainingBatch, TrainingLog,
};
