use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real};
use crate::recommender::{Batch, Catalog, Dropout, EmbeddingMode, RecommenderModel, TokenizedSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelUtilization {
    /// 1-based quantization level.
    pub level: usize,
    pub static_used: f64,
    pub composition_active: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub levels: Vec<LevelUtilization>,
}

/// Per level, which codes occur in at least one item's semantic ID.
pub fn static_usage(catalog: &Catalog) -> Vec<Vec<bool>> {
    let vocab = catalog.vocab;
    let mut used = vec![vec![false; vocab.codebook_size]; vocab.levels];
    for (_, tokens) in catalog.iter() {
        for (l, &t) in tokens[..vocab.levels].iter().enumerate() {
            used[l][t - l * vocab.codebook_size] = true;
        }
    }
    used
}

/// Per level, codes whose composition weight exceeds `1/K` at some
/// teacher-forced decoding position over `contexts`.
fn composition_usage<F: Real>(
    model: &RecommenderModel<F>,
    contexts: &[TokenizedSequence],
    batch_size: usize,
) -> Result<Vec<Vec<bool>>> {
    let vocab = model.vocab;
    let k = vocab.codebook_size;
    let mut active = vec![vec![false; k]; vocab.levels];
    if model.decor().alpha == 0.0 {
        return Ok(active);
    }
    let threshold = F::of(1.0 / k as f64);
    for chunk in contexts.chunks(batch_size.max(1)) {
        let refs: Vec<&TokenizedSequence> = chunk.iter().collect();
        let batch = Batch::new(&refs, &vocab)?;
        let mut g = Graph::inference(&model.store);
        let out = model.forward_with(&mut g, &batch, EmbeddingMode::Composed, &mut Dropout::off())?;
        for la in &out.attentions {
            for row in g.value(la.attention).data().chunks(k) {
                for (code, &w) in row.iter().enumerate() {
                    if w > threshold {
                        active[la.level][code] = true;
                    }
                }
            }
        }
    }
    Ok(active)
}

pub fn utilization<F: Real>(
    model: &RecommenderModel<F>,
    contexts: &[TokenizedSequence],
    catalog: &Catalog,
    batch_size: usize,
) -> Result<UtilizationReport> {
    let stat = static_usage(catalog);
    let comp = composition_usage(model, contexts, batch_size)?;
    let k = model.vocab.codebook_size as f64;
    let frac = |v: &mut dyn Iterator<Item = bool>| v.filter(|&b| b).count() as f64 / k;
    let levels = stat
        .iter()
        .zip(&comp)
        .enumerate()
        .map(|(l, (s, c))| LevelUtilization {
            level: l + 1,
            static_used: frac(&mut s.iter().copied()),
            composition_active: frac(&mut c.iter().copied()),
            combined: frac(&mut s.iter().zip(c).map(|(a, b)| *a || *b)),
        })
        .collect();
    Ok(UtilizationReport { levels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub token: usize,
    pub kind: String,
    pub context_id: Option<usize>,
    pub vector: Vec<f64>,
}

/// Static fused embeddings of every code at `level` (0-based), then the
/// composed embedding of each context's target token at that level.
pub fn dump_embeddings<F: Real, W: Write>(
    model: &RecommenderModel<F>,
    level: usize,
    contexts: &[TokenizedSequence],
    out: &mut W,
) -> Result<usize> {
    let vocab = model.vocab;
    if level >= vocab.levels {
        return Err(Error::Config(format!(
            "level {} outside 1..={}",
            level + 1,
            vocab.levels
        )));
    }
    let d = model.config.d_model;
    let k = vocab.codebook_size;
    let mut g = Graph::inference(&model.store);
    let fused = model.embedding.fused_codes(&mut g)?;
    let mut rows = 0;
    for (code, v) in g.value(fused).data()[level * k * d..(level + 1) * k * d]
        .chunks(d)
        .enumerate()
    {
        write_row(out, vocab.code(level, code), "static", None, v)?;
        rows += 1;
    }
    for (i, ctx) in contexts.iter().enumerate() {
        let batch = Batch::new(&[ctx], &vocab)?;
        let mut g = Graph::inference(&model.store);
        let mode = model.default_mode();
        let enc = model.encode(
            &mut g,
            &batch.history,
            &batch.hist_mask,
            batch.hist_len,
            mode,
            &mut Dropout::off(),
        )?;
        let prefix = batch.decoder_tokens(vocab.item_len() + 1);
        let (x, _, _) = model.decoder_inputs(&mut g, &enc, &prefix, 1, mode)?;
        let v = &g.value(x).data()[(level + 1) * d..(level + 2) * d];
        write_row(out, ctx.target[level], "composed", Some(i), v)?;
        rows += 1;
    }
    Ok(rows)
}

fn write_row<F: Real, W: Write>(
    out: &mut W,
    token: usize,
    kind: &str,
    context_id: Option<usize>,
    v: &[F],
) -> Result<()> {
    let row = DumpRow {
        token,
        kind: kind.to_string(),
        context_id,
        vector: v.iter().map(|x| x.f64()).collect(),
    };
    serde_json::to_writer(&mut *out, &row)?;
    out.write_all(b"\n")?;
    Ok(())
}
