//! Experiment harness for textual entailment over clinical trial reports.
//!
//! The crate is organised along the pipeline:
//!
//! - [`corpus`]: CTR documents and NLI instances, loading, validation, statistics
//! - [`prompt`]: prompt templates, n-shot demonstrations, CoT and contrastive CoT
//! - [`inference`]: completion backends, answer parsing, prediction files
//! - [`ensemble`]: hard and soft voting
//! - [`metrics`]: Entailment F1, Faithfulness, Consistency, breakdown tables
//! - [`pipeline`]: declarative, resumable runs tying the stages together

pub mod corpus;
pub mod ensemble;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod tokenize;

pub use corpus::{
    ClinicalTrialRecord, ContrastMeta, Corpus, CorpusError, CorpusStats, Instance, InstanceType,
    InterventionType, Label, SectionName, Semantics, Split,
};
pub use ensemble::{EnsembleSpec, TieBreak, VotingMethod};
pub use inference::{BackendConfig, Prediction, PredictionSet, Scores};
pub use metrics::{EvaluationReport, MetricReport};
pub use pipeline::{Pipeline, RunConfig, RunManifest, Stage};
pub use prompt::{ExplanationStyle, RenderedPrompt, ShotPlan, TemplateId};
pub use tokenize::TokenizerConfig;
