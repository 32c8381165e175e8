//! Community-based dataset distillation over labeled embedding pools.
//!
//! The pipeline builds one weighted directed graph per class, partitions it
//! by greedily minimizing the map equation, keeps the most central nodes of
//! every community, and trains a linear softmax classifier on what was kept
//! with a cross-entropy plus boundary contrastive loss.

pub mod centrality_selector;
pub mod community_optimizer;
pub mod distilled_trainer;
pub mod embedding_io;
pub mod error;
pub mod eval_metrics;
pub mod graph_builder;
pub mod map_equation;
pub mod pipeline;

pub use error::{Error, Result};
