//! Generative recommendation over semantic IDs with decomposed embedding
//! fusion and contextual token composition.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod decor_embedding;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod recommender;
pub mod semantic_indexer;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::{DataPaths, PipelineConfig};
pub use error::{Error, Result};
