use serde::{Deserialize, Serialize};

use super::model::RecommenderModel;
use super::trie::SemanticTrie;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real};

/// One ranked item with its summed token log-probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: String,
    pub score: f64,
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    node: usize,
    score: f64,
}

/// Log-softmax over the logits of `allowed` tokens only.
pub(crate) fn restricted_log_softmax<F: Real>(logits: &[F], allowed: &[(usize, usize)]) -> Vec<f64> {
    let vals: Vec<f64> = allowed.iter().map(|&(t, _)| logits[t].f64()).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    vals.iter().map(|v| v - lse).collect()
}

/// Trie-constrained beam search for one user's history tokens.
pub fn generate<F: Real>(
    model: &RecommenderModel<F>,
    trie: &SemanticTrie,
    history: &[usize],
    beam_size: usize,
    top_k: usize,
) -> Result<Vec<Recommendation>> {
    if top_k == 0 || beam_size < top_k {
        return Err(Error::Config(format!(
            "beam_size {beam_size} must be at least top_k {top_k} >= 1"
        )));
    }
    let mut g = Graph::inference(&model.store);
    let ctx = model.encode_user(&mut g, history)?;
    let v = model.vocab.size();
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        node: SemanticTrie::ROOT,
        score: 0.0,
    }];
    for _ in 0..trie.depth() {
        let prefixes: Vec<usize> = beams.iter().flat_map(|h| h.tokens.iter().copied()).collect();
        let logits = model.step_logits(&mut g, &ctx, &prefixes, beams.len())?;
        let logits = g.value(logits).data();
        let mut next = Vec::new();
        for (b, h) in beams.iter().enumerate() {
            let children = trie.children(h.node);
            let row = &logits[b * v..(b + 1) * v];
            for (&(tok, child), lp) in children.iter().zip(restricted_log_softmax(row, children)) {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                next.push(Hypothesis {
                    tokens,
                    node: child,
                    score: h.score + lp,
                });
            }
        }
        if next.iter().any(|h| !h.score.is_finite()) {
            return Err(Error::NonFinite("beam scores".into()));
        }
        next.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
        next.truncate(beam_size);
        beams = next;
    }
    let mut out: Vec<Recommendation> = beams
        .iter()
        .filter_map(|h| {
            trie.item(h.node).map(|item| Recommendation {
                item: item.to_string(),
                score: h.score,
            })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.item.cmp(&b.item)));
    if out.len() < top_k {
        return Err(Error::BeamExhausted {
            found: out.len(),
            wanted: top_k,
        });
    }
    out.truncate(top_k);
    Ok(out)
}
