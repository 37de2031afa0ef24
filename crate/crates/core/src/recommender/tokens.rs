use std::collections::BTreeMap;

use crate::datasets::Example;
use crate::decor_embedding::Vocab;
use crate::error::{Error, Result};
use crate::semantic_indexer::SemanticId;

/// Item id → its `M + 1` tokens (codes then collision digit).
#[derive(Clone, Debug)]
pub struct Catalog {
    pub vocab: Vocab,
    items: BTreeMap<String, Vec<usize>>,
}

impl Catalog {
    pub fn new(sids: &BTreeMap<String, SemanticId>, vocab: Vocab) -> Result<Self> {
        if sids.is_empty() {
            return Err(Error::Empty("catalog"));
        }
        let items = sids
            .iter()
            .map(|(id, sid)| Ok((id.clone(), vocab.item_tokens(sid)?)))
            .collect::<Result<_>>()?;
        Ok(Catalog { vocab, items })
    }

    pub fn tokens(&self, item: &str) -> Result<&[usize]> {
        self.items
            .get(item)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownItem(item.to_string()))
    }

    pub fn contains(&self, item: &str) -> bool {
        self.items.contains_key(item)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.items.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// Flattened history tokens and the target item's tokens followed by EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub history: Vec<usize>,
    pub target: Vec<usize>,
}

/// History tokens, keeping the most recent `max_items` items.
pub fn build_inputs(history: &[String], catalog: &Catalog, max_items: usize) -> Result<Vec<usize>> {
    let start = history.len().saturating_sub(max_items);
    let mut out = Vec::with_capacity((history.len() - start) * catalog.vocab.item_len());
    for item in &history[start..] {
        out.extend_from_slice(catalog.tokens(item)?);
    }
    Ok(out)
}

pub fn tokenize_example(example: &Example, catalog: &Catalog, max_items: usize) -> Result<TokenizedSequence> {
    let history = build_inputs(&example.history, catalog, max_items)?;
    if history.is_empty() {
        return Err(Error::Data(format!("example for user {} has no history", example.user)));
    }
    let mut target = catalog.tokens(&example.target)?.to_vec();
    target.push(catalog.vocab.eos());
    Ok(TokenizedSequence { history, target })
}

/// Right-padded batch of tokenized sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub hist_len: usize,
    /// `[size, hist_len]`, PAD-filled.
    pub history: Vec<usize>,
    /// `[size, hist_len]`, `true` at real tokens.
    pub hist_mask: Vec<bool>,
    /// `[size, M + 2]`: codes, collision digit, EOS.
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn new(seqs: &[&TokenizedSequence], vocab: &Vocab) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let hist_len = seqs.iter().map(|s| s.history.len()).max().unwrap_or(0);
        let tlen = vocab.item_len() + 1;
        let mut history = Vec::with_capacity(seqs.len() * hist_len);
        let mut hist_mask = Vec::with_capacity(seqs.len() * hist_len);
        let mut targets = Vec::with_capacity(seqs.len() * tlen);
        for s in seqs {
            if s.history.is_empty() || s.target.len() != tlen {
                return Err(Error::shape(
                    "batch",
                    format!("history {} target {}", s.history.len(), s.target.len()),
                ));
            }
            history.extend_from_slice(&s.history);
            hist_mask.extend(std::iter::repeat_n(true, s.history.len()));
            let pad = hist_len - s.history.len();
            history.extend(std::iter::repeat_n(vocab.pad(), pad));
            hist_mask.extend(std::iter::repeat_n(false, pad));
            targets.extend_from_slice(&s.target);
        }
        Ok(Batch {
            size: seqs.len(),
            hist_len,
            history,
            hist_mask,
            targets,
        })
    }

    /// Decoder input tokens `[size, M + 1]`: target tokens without EOS.
    pub fn decoder_tokens(&self, target_len: usize) -> Vec<usize> {
        self.targets
            .chunks(target_len)
            .flat_map(|t| t[..target_len - 1].iter().copied())
            .collect()
    }
}
