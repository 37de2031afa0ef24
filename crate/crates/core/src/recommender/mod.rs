//! Encoder-decoder sequence model over semantic-ID tokens.

mod config;
mod generate;
mod model;
mod tokens;
mod train;
mod trie;

pub use config::RecommenderConfig;
pub use generate::{generate, Recommendation};
pub use model::{Dropout, EmbeddingMode, EncodedContext, ForwardOutput, LevelAttention, RecommenderModel};
pub use tokens::{build_inputs, tokenize_example, Batch, Catalog, TokenizedSequence};
pub use train::{EpochRecord, RngState, TrainData, TrainProgress, TrainState, Trainer};
pub use trie::SemanticTrie;

#[cfg(test)]
pub(crate) mod tests;
