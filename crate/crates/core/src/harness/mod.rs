//! Experiment driver: configuration, evaluation, the end-to-end pipeline and
//! the pruning, confidence and ablation studies, with CSV/JSON reports.

pub mod commands;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use eval::{evaluate, Decoder, EvalReport, Retriever};
pub use experiment::{Pipeline, PruneMode, StageContext, StageError};
