//! Graph classification with a mixture of diverse experts.
//!
//! A gating network scores each graph embedding against per-expert
//! prototypes and softly partitions the dataset; per-expert linear
//! classifiers are trained on their share of it. The split is the point:
//! under class imbalance, minority-heavy regions of embedding space get
//! experts of their own instead of being averaged away.
//!
//! The crate provides the full pipeline: graph data model, GCN/GIN feature
//! extraction, the mixture head with prior- and posterior-weighted
//! training (EM with a KL pull between posterior and gate), imbalanced
//! baselines, evaluation metrics, dataset/checkpoint formats, and the
//! `graphdive` CLI.

pub mod baselines;
pub mod gnn;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod train;
