//! Synthetic corpus, experiment runner and metrics reporting.

pub mod corpus;
pub mod experiment;
pub mod metrics;

pub use corpus::{collapse, generate_corpus, Corpus, Split, SyntheticCorpusConfig, Utterance};
pub use experiment::{
    corpus_lm, decode_condition, eval_utterances, evaluate, run_experiment, run_id, run_variant, write_outputs,
    Condition, Evaluation, ExperimentConfig, ExperimentOutput, LmConfig, ModelShape, RunOutput, Variant,
};
pub use metrics::{final_records, read_csv, report, spearman_columns, write_csv, Column, MetricsRecord, Report, CSV_HEADER};
