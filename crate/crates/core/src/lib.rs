//! Insulin-resistance screening pipeline.
//!
//! The crate covers the full path from raw cohort files to evaluated
//! models: HOMA-IR ground truth and class thresholds ([`domain`]),
//! cohort ingestion and quality control ([`ingest`]), rolling-window
//! feature aggregation and fold-scoped standardization ([`featureset`]),
//! gradient-boosted regression with tree and linear learners ([`gbm`]),
//! masked-autoencoder representation learning ([`autoencoder`]),
//! cross-validated experiment orchestration ([`pipeline`]), the metric
//! and statistical-test suite ([`metrics`] and [`stats`]), SHAP
//! attribution ([`explain`]), time-window robustness analysis
//! ([`robustness`]), synthetic cohort generation ([`synthcohort`]), and
//! the deterministic tool protocol ([`tools`]).

pub mod artifacts;
pub mod autoencoder;
pub mod config;
pub mod domain;
pub mod explain;
pub mod featureset;
pub mod gbm;
pub mod ingest;
pub mod metrics;
pub mod model_io;
pub mod pipeline;
pub mod robustness;
pub mod stats;
pub mod synthcohort;
pub mod tools;
