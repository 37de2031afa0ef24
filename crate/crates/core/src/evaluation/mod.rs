//! Ranking metrics, full-corpus evaluation and embedding-usage analysis.

mod metrics;
mod utilization;

use rayon::prelude::*;

pub use metrics::{ndcg_at_k, normalized_mutual_information, recall_at_k, EvalReport, UserRanking};
pub use utilization::{dump_embeddings, static_usage, utilization, DumpRow, LevelUtilization, UtilizationReport};

use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::recommender::{build_inputs, generate, Catalog, RecommenderModel, SemanticTrie};

/// Largest cutoff reported.
pub const TOP_K: usize = 10;

/// Produces a ranked item list for one evaluation example.
pub trait Ranker: Sync {
    fn rank(&self, example: &Example, top_k: usize) -> Result<Vec<String>>;
}

/// Trie-constrained beam search over a trained model.
pub struct ModelRanker<'a, F> {
    pub model: &'a RecommenderModel<F>,
    pub catalog: &'a Catalog,
    pub trie: &'a SemanticTrie,
    pub beam_size: usize,
}

impl<F: Real> Ranker for ModelRanker<'_, F> {
    fn rank(&self, example: &Example, top_k: usize) -> Result<Vec<String>> {
        let history = build_inputs(&example.history, self.catalog, self.model.config.max_history_items)?;
        let recs = generate(self.model, self.trie, &history, self.beam_size, top_k)?;
        Ok(recs.into_iter().map(|r| r.item).collect())
    }
}

/// Ranks every example (in parallel) and averages metrics in input order.
pub fn evaluate<R: Ranker + ?Sized>(ranker: &R, examples: &[Example]) -> Result<(EvalReport, Vec<UserRanking>)> {
    let rankings = examples
        .par_iter()
        .map(|ex| {
            let ranked = ranker.rank(ex, TOP_K).map_err(|e| Error::User {
                user: ex.user.clone(),
                source: Box::new(e),
            })?;
            Ok(UserRanking {
                user: ex.user.clone(),
                truth: ex.target.clone(),
                ranked,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_rankings(&rankings)?, rankings))
}
