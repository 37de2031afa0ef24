//! Token embedding layer: decomposed fusion of frozen pretrained codebook
//! vectors with learnable collaborative vectors, and context-conditioned
//! composition over same-level tokens (including the BOS query set).

mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use vocab::{TokenKind, Vocab};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecorConfig {
    /// Residual mix weight: `α·composed + (1 − α)·static`.
    pub alpha: f64,
    /// Number of BOS query vectors; 0 uses a plain learnable BOS embedding.
    pub bos_queries: usize,
    /// Also compose encoder-side history tokens.
    pub encoder_side_composition: bool,
    /// Separate query/key projections per quantization level.
    pub per_level_heads: bool,
}

impl Default for DecorConfig {
    fn default() -> Self {
        DecorConfig {
            alpha: 0.4,
            bos_queries: 32,
            encoder_side_composition: false,
            per_level_heads: false,
        }
    }
}

impl DecorConfig {
    /// Composition disabled everywhere: a static-lookup model.
    pub fn is_static(&self) -> bool {
        self.alpha == 0.0 && self.bos_queries == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("decor.alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Parameter ids of the fusion path.
#[derive(Clone, Copy, Debug)]
pub struct FusedEmbeddingTable {
    pub e_pre: ParamId,
    pub e_collab: ParamId,
    pub w_pre: ParamId,
    pub w_collab: ParamId,
    pub ln_pre: (ParamId, ParamId),
    pub ln_collab: (ParamId, ParamId),
    pub w_fuse: ParamId,
    pub special: ParamId,
}

/// Attention pooling `Σ softmax(wᵀ tanh(W h + b)) h` followed by a
/// one-hidden-layer tanh MLP.
#[derive(Clone, Copy, Debug)]
pub struct ContextPooler {
    pub w: ParamId,
    pub b: ParamId,
    pub score: ParamId,
    pub mlp_hidden: (ParamId, ParamId),
    pub mlp_out: (ParamId, ParamId),
}

#[derive(Clone, Copy, Debug)]
pub struct CompositionHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
}

/// Graph output of one composition: the mixed embedding and the attention
/// distribution over candidates.
#[derive(Clone, Copy, Debug)]
pub struct Composed {
    pub embedding: Var,
    pub attention: Var,
}

/// The embedding layer the recommender calls. Holds parameter ids into a
/// shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DecorEmbedding {
    pub vocab: Vocab,
    pub dim: usize,
    pub config: DecorConfig,
    pub table: FusedEmbeddingTable,
    pub pooler: ContextPooler,
    heads: Vec<CompositionHead>,
    bos_head: CompositionHead,
    bos_queries: Option<ParamId>,
}

fn head_name(config: &DecorConfig, level: Option<usize>) -> String {
    match (config.per_level_heads, level) {
        (false, _) => "compose".into(),
        (true, Some(l)) => format!("compose.level{l}"),
        (true, None) => "compose.bos".into(),
    }
}

impl DecorEmbedding {
    /// Registers all parameters in `store`. `pretrained` is the exported
    /// `[M, K, d]` (or `[M·K, d]`) codebook stack; it is stored frozen.
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        vocab: Vocab,
        pretrained: &Tensor<F>,
        config: DecorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = *pretrained.shape().last().expect("non-empty shape");
        if pretrained.len() != vocab.num_codes() * d {
            return Err(Error::shape(
                "decor_embedding",
                format!("codebooks {:?} for {} codes", pretrained.shape(), vocab.num_codes()),
            ));
        }
        let e_pre = store.add_frozen("fusion.e_pre", pretrained.clone().reshaped(&[vocab.num_codes(), d])?);
        let inv = 1.0 / (d as f64).sqrt();
        let table = FusedEmbeddingTable {
            e_pre,
            e_collab: store.add_normal("fusion.e_collab", &[vocab.num_codes(), d], inv, rng),
            w_pre: store.add_linear("fusion.w_pre", d, d, rng),
            w_collab: store.add_linear("fusion.w_collab", d, d, rng),
            ln_pre: (
                store.add_filled("fusion.ln_pre.gain", &[d], 1.0),
                store.add_filled("fusion.ln_pre.bias", &[d], 0.0),
            ),
            ln_collab: (
                store.add_filled("fusion.ln_collab.gain", &[d], 1.0),
                store.add_filled("fusion.ln_collab.bias", &[d], 0.0),
            ),
            w_fuse: store.add_linear("fusion.w_fuse", d, 2 * d, rng),
            special: store.add_normal("fusion.special", &[vocab.num_special(), d], 0.5, rng),
        };
        let pooler = ContextPooler {
            w: store.add_linear("pool.w", d, d, rng),
            b: store.add_filled("pool.b", &[d], 0.0),
            score: store.add_normal("pool.score", &[1, d], inv, rng),
            mlp_hidden: (
                store.add_linear("pool.mlp.hidden.weight", d, d, rng),
                store.add_filled("pool.mlp.hidden.bias", &[d], 0.0),
            ),
            mlp_out: (
                store.add_linear("pool.mlp.out.weight", d, d, rng),
                store.add_filled("pool.mlp.out.bias", &[d], 0.0),
            ),
        };
        let mut add_head = |store: &mut ParamStore<F>, prefix: String| CompositionHead {
            w_q: store.add_linear(format!("{prefix}.w_q"), d, d, rng),
            w_k: store.add_linear(format!("{prefix}.w_k"), d, d, rng),
        };
        let heads: Vec<CompositionHead> = if config.per_level_heads {
            (0..vocab.levels)
                .map(|l| add_head(store, head_name(&config, Some(l))))
                .collect()
        } else {
            vec![add_head(store, head_name(&config, None))]
        };
        let bos_head = if config.per_level_heads {
            add_head(store, head_name(&config, None))
        } else {
            heads[0]
        };
        let bos_queries =
            (config.bos_queries > 0).then(|| store.add_normal("bos.queries", &[config.bos_queries, d], 0.5, rng));
        Ok(DecorEmbedding {
            vocab,
            dim: d,
            config,
            table,
            pooler,
            heads,
            bos_head,
            bos_queries,
        })
    }

    /// Re-resolves parameter ids by name in a loaded store.
    pub fn bind<F: Real>(store: &ParamStore<F>, vocab: Vocab, dim: usize, config: DecorConfig) -> Result<Self> {
        config.validate()?;
        let d = dim;
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.tensor(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    store.tensor(id).shape()
                )));
            }
            Ok(id)
        };
        let nc = vocab.num_codes();
        let table = FusedEmbeddingTable {
            e_pre: find("fusion.e_pre", &[nc, d])?,
            e_collab: find("fusion.e_collab", &[nc, d])?,
            w_pre: find("fusion.w_pre", &[d, d])?,
            w_collab: find("fusion.w_collab", &[d, d])?,
            ln_pre: (find("fusion.ln_pre.gain", &[d])?, find("fusion.ln_pre.bias", &[d])?),
            ln_collab: (
                find("fusion.ln_collab.gain", &[d])?,
                find("fusion.ln_collab.bias", &[d])?,
            ),
            w_fuse: find("fusion.w_fuse", &[d, 2 * d])?,
            special: find("fusion.special", &[vocab.num_special(), d])?,
        };
        let pooler = ContextPooler {
            w: find("pool.w", &[d, d])?,
            b: find("pool.b", &[d])?,
            score: find("pool.score", &[1, d])?,
            mlp_hidden: (
                find("pool.mlp.hidden.weight", &[d, d])?,
                find("pool.mlp.hidden.bias", &[d])?,
            ),
            mlp_out: (find("pool.mlp.out.weight", &[d, d])?, find("pool.mlp.out.bias", &[d])?),
        };
        let head = |prefix: String| -> Result<CompositionHead> {
            Ok(CompositionHead {
                w_q: find(&format!("{prefix}.w_q"), &[d, d])?,
                w_k: find(&format!("{prefix}.w_k"), &[d, d])?,
            })
        };
        let heads = if config.per_level_heads {
            (0..vocab.levels)
                .map(|l| head(head_name(&config, Some(l))))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![head(head_name(&config, None))?]
        };
        let bos_head = if config.per_level_heads {
            head(head_name(&config, None))?
        } else {
            heads[0]
        };
        let bos_queries = if config.bos_queries > 0 {
            Some(find("bos.queries", &[config.bos_queries, d])?)
        } else {
            None
        };
        Ok(DecorEmbedding {
            vocab,
            dim: d,
            config,
            table,
            pooler,
            heads,
            bos_head,
            bos_queries,
        })
    }

    pub fn head(&self, level: usize) -> CompositionHead {
        if self.config.per_level_heads {
            self.heads[level]
        } else {
            self.heads[0]
        }
    }

    pub fn bos_head(&self) -> CompositionHead {
        self.bos_head
    }

    pub fn bos_queries(&self) -> Option<ParamId> {
        self.bos_queries
    }

    // ---- fusion --------------------------------------------------------------

    /// Fused embeddings of every codebook token, `[M·K, d]`:
    /// `W_fuse [LN(W_pre e_pre) ‖ LN(W_collab e_collab)]`.
    pub fn fused_codes<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let t = &self.table;
        let e_pre = g.param(t.e_pre);
        let w_pre = g.param(t.w_pre);
        let p = g.linear(e_pre, w_pre)?;
        let (gain, bias) = (g.param(t.ln_pre.0), g.param(t.ln_pre.1));
        let p = g.layer_norm(p, gain, bias, LN_EPS)?;
        let e_collab = g.param(t.e_collab);
        let w_collab = g.param(t.w_collab);
        let c = g.linear(e_collab, w_collab)?;
        let (gain, bias) = (g.param(t.ln_collab.0), g.param(t.ln_collab.1));
        let c = g.layer_norm(c, gain, bias, LN_EPS)?;
        let cat = g.concat(&[p, c], 1)?;
        let w_fuse = g.param(t.w_fuse);
        g.linear(cat, w_fuse)
    }

    /// Static embedding of every token, `[V, d]`: fused codebook rows then
    /// the special table.
    pub fn token_table<F: Real>(&self, g: &mut Graph<'_, F>, fused: Var) -> Result<Var> {
        let special = g.param(self.table.special);
        g.concat(&[fused, special], 0)
    }

    /// Static embeddings `[n, d]` of `tokens` from a [`token_table`](Self::token_table).
    pub fn lookup<F: Real>(&self, g: &mut Graph<'_, F>, table: Var, tokens: &[usize]) -> Result<Var> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab.size()) {
            return Err(Error::UnknownToken(t));
        }
        g.gather_rows(table, tokens)
    }

    /// Same-level candidate set `[K, d]` for codebook level `level`.
    pub fn level_candidates<F: Real>(&self, g: &mut Graph<'_, F>, fused: Var, level: usize) -> Result<Var> {
        let k = self.vocab.codebook_size;
        g.narrow(fused, 0, level * k, k)
    }

    // ---- context pooling -----------------------------------------------------

    fn pool_scores<F: Real>(&self, g: &mut Graph<'_, F>, h: Var) -> Result<Var> {
        let sh = g.shape(h).to_vec();
        if sh.len() != 3 || sh[2] != self.dim {
            return Err(Error::shape("pool_context", format!("{sh:?}")));
        }
        let p = &self.pooler;
        let (w, bias, score) = (g.param(p.w), g.param(p.b), g.param(p.score));
        let hidden = g.affine(h, w, bias)?;
        let hidden = g.tanh(hidden);
        let s = g.linear(hidden, score)?;
        g.reshape(s, &sh[..2])
    }

    /// Pooling weights `[B, P, Lh + T]` over a history part `hist [Bh, Lh, d]`
    /// (`Bh` is `B`, or 1 to share one history across the batch) and an
    /// optional per-row part `prefix [B, T, d]`. `mask` has `B·P·(Lh + T)`
    /// entries: row `(b, p)` attends to the positions marked `true`.
    pub fn pool_weights_split<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        hist: Var,
        prefix: Option<Var>,
        batch: usize,
        mask: &[bool],
        positions: usize,
    ) -> Result<Var> {
        let mut s = self.pool_scores(g, hist)?;
        let bh = g.shape(s)[0];
        if bh != batch {
            if bh != 1 {
                return Err(Error::shape(
                    "pool_context",
                    format!("history batch {bh} for {batch} rows"),
                ));
            }
            s = g.gather_rows(s, &vec![0; batch])?;
        }
        if let Some(pre) = prefix {
            let sp = self.pool_scores(g, pre)?;
            s = g.concat(&[s, sp], 1)?;
        }
        let l = g.shape(s)[1];
        if mask.len() != batch * positions * l {
            return Err(Error::shape(
                "pool_context",
                format!("mask {} for {batch}x{positions}x{l}", mask.len()),
            ));
        }
        if positions == 0 || mask.chunks(l).any(|row| !row.contains(&true)) {
            return Err(Error::Empty("pool_context"));
        }
        let s = g.reshape(s, &[batch, 1, l])?;
        let s = if positions > 1 {
            let copies = vec![s; positions];
            g.concat(&copies, 1)?
        } else {
            s
        };
        g.softmax(s, Some(mask.to_vec()))
    }

    /// Pooled contexts `u [B, P, d]`; see
    /// [`pool_weights_split`](Self::pool_weights_split).
    pub fn pool_split<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        hist: Var,
        prefix: Option<Var>,
        batch: usize,
        mask: &[bool],
        positions: usize,
    ) -> Result<Var> {
        let weights = self.pool_weights_split(g, hist, prefix, batch, mask, positions)?;
        let hs = g.shape(hist).to_vec();
        let (bh, lh, d) = (hs[0], hs[1], hs[2]);
        let total = g.shape(weights)[2];
        let w_hist = if prefix.is_some() {
            g.narrow(weights, 2, 0, lh)?
        } else {
            weights
        };
        let mut pooled = if bh == batch {
            g.matmul(w_hist, hist, false, false)?
        } else {
            let w = g.reshape(w_hist, &[batch * positions, lh])?;
            let h = g.reshape(hist, &[lh, d])?;
            let p = g.matmul(w, h, false, false)?;
            g.reshape(p, &[batch, positions, d])?
        };
        if let Some(pre) = prefix {
            let w_pre = g.narrow(weights, 2, lh, total - lh)?;
            let p = g.matmul(w_pre, pre, false, false)?;
            pooled = g.add(pooled, p)?;
        }
        let p = &self.pooler;
        let (w1, b1) = (g.param(p.mlp_hidden.0), g.param(p.mlp_hidden.1));
        let x = g.affine(pooled, w1, b1)?;
        let x = g.tanh(x);
        let (w2, b2) = (g.param(p.mlp_out.0), g.param(p.mlp_out.1));
        g.affine(x, w2, b2)
    }

    /// Pooling weights `[B, P, L]` over `h [B, L, d]`.
    pub fn pool_weights<F: Real>(&self, g: &mut Graph<'_, F>, h: Var, mask: &[bool], positions: usize) -> Result<Var> {
        let b = g.shape(h)[0];
        self.pool_weights_split(g, h, None, b, mask, positions)
    }

    /// Pooled contexts `u [B, P, d]` over `h [B, L, d]`.
    pub fn pool<F: Real>(&self, g: &mut Graph<'_, F>, h: Var, mask: &[bool], positions: usize) -> Result<Var> {
        let b = g.shape(h)[0];
        self.pool_split(g, h, None, b, mask, positions)
    }

    // ---- composition -----------------------------------------------------------

    /// `softmax_c ⟨W_q u, W_k e_c⟩` for `u [B, d]` against `candidates [n, d]`.
    pub fn composition_attention<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        head: CompositionHead,
        u: Var,
        candidates: Var,
    ) -> Result<Var> {
        let (wq, wk) = (g.param(head.w_q), g.param(head.w_k));
        let q = g.linear(u, wq)?;
        let k = g.linear(candidates, wk)?;
        let scores = g.matmul(q, k, false, true)?;
        g.softmax(scores, None)
    }

    /// `α·Σ_c a_c e_c + (1 − α)·static` with `a` from
    /// [`composition_attention`](Self::composition_attention).
    pub fn compose<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        head: CompositionHead,
        u: Var,
        candidates: Var,
        static_emb: Var,
    ) -> Result<Composed> {
        let attention = self.composition_attention(g, head, u, candidates)?;
        let mixed = g.matmul(attention, candidates, false, false)?;
        let embedding = self.residual_mix(g, mixed, static_emb)?;
        Ok(Composed { embedding, attention })
    }

    fn residual_mix<F: Real>(&self, g: &mut Graph<'_, F>, composed: Var, static_emb: Var) -> Result<Var> {
        let a = self.config.alpha;
        let x = g.scale(composed, F::of(a));
        let y = g.scale(static_emb, F::of(1.0 - a));
        g.add(x, y)
    }

    /// BOS embedding for each context `u [B, d]`: composition over the
    /// query set, or the static BOS row broadcast when there are no queries.
    pub fn compose_bos<F: Real>(&self, g: &mut Graph<'_, F>, table: Var, u: Var) -> Result<(Var, Option<Var>)> {
        let b = g.shape(u)[0];
        let static_bos = g.gather_rows(table, &vec![self.vocab.bos(); b])?;
        match self.bos_queries {
            None => Ok((static_bos, None)),
            Some(q) => {
                let queries = g.param(q);
                let c = self.compose(g, self.bos_head, u, queries, static_bos)?;
                Ok((c.embedding, Some(c.attention)))
            }
        }
    }

    /// Encoder-side composition of history tokens `[B·Lh]` against one
    /// context per row `u [B, d]`. Non-codebook tokens stay static.
    pub fn compose_history<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        fused: Var,
        static_hist: Var,
        u: Var,
        tokens: &[usize],
    ) -> Result<Var> {
        let b = g.shape(u)[0];
        let d = self.dim;
        let lh = tokens.len() / b;
        let flat = g.reshape(static_hist, &[b * lh, d])?;
        let mut per_level = Vec::with_capacity(self.vocab.levels);
        for l in 0..self.vocab.levels {
            let cands = self.level_candidates(g, fused, l)?;
            let att = self.composition_attention(g, self.head(l), u, cands)?;
            per_level.push(g.matmul(att, cands, false, false)?);
        }
        per_level.push(flat);
        let pool = g.concat(&per_level, 0)?;
        let m = self.vocab.levels;
        let idx: Vec<usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| match self.vocab.level_of(t) {
                Some(l) => l * b + i / lh,
                None => m * b + i,
            })
            .collect();
        let target = g.gather_rows(pool, &idx)?;
        let mixed = self.residual_mix(g, target, flat)?;
        g.reshape(mixed, &[b, lh, d])
    }

    // ---- single-vector conveniences -------------------------------------------

    /// Static (fused or special) embedding of one token.
    pub fn fuse_token<F: Real>(&self, store: &ParamStore<F>, token: usize) -> Result<Vec<F>> {
        let mut g = Graph::inference(store);
        let fused = self.fused_codes(&mut g)?;
        let table = self.token_table(&mut g, fused)?;
        let v = self.lookup(&mut g, table, &[token])?;
        Ok(g.value(v).data().to_vec())
    }

    /// Context vector of a single sequence of `d`-wide embeddings.
    pub fn pool_context<F: Real>(&self, store: &ParamStore<F>, h_seq: &[Vec<F>]) -> Result<Vec<F>> {
        if h_seq.is_empty() {
            return Err(Error::Empty("pool_context"));
        }
        let mut g = Graph::inference(store);
        let data: Vec<F> = h_seq.iter().flatten().copied().collect();
        let h = g.constant(Tensor::new(vec![1, h_seq.len(), self.dim], data)?);
        let u = self.pool(&mut g, h, &vec![true; h_seq.len()], 1)?;
        Ok(g.value(u).data().to_vec())
    }

    /// Composed embedding of codebook token `token` under context `u`.
    pub fn compose_token<F: Real>(&self, store: &ParamStore<F>, token: usize, u: &[F]) -> Result<Vec<F>> {
        let level = match self.vocab.kind(token)? {
            TokenKind::Code { level, .. } => level,
            _ => return Err(Error::NotComposable(token)),
        };
        let mut g = Graph::inference(store);
        let fused = self.fused_codes(&mut g)?;
        let table = self.token_table(&mut g, fused)?;
        let static_emb = self.lookup(&mut g, table, &[token])?;
        let uv = g.constant(Tensor::new(vec![1, self.dim], u.to_vec())?);
        let cands = self.level_candidates(&mut g, fused, level)?;
        let c = self.compose(&mut g, self.head(level), uv, cands, static_emb)?;
        Ok(g.value(c.embedding).data().to_vec())
    }

    /// Composed BOS embedding under context `u`.
    pub fn compose_bos_vector<F: Real>(&self, store: &ParamStore<F>, u: &[F]) -> Result<Vec<F>> {
        let mut g = Graph::inference(store);
        let fused = self.fused_codes(&mut g)?;
        let table = self.token_table(&mut g, fused)?;
        let uv = g.constant(Tensor::new(vec![1, self.dim], u.to_vec())?);
        let (e, _) = self.compose_bos(&mut g, table, uv)?;
        Ok(g.value(e).data().to_vec())
    }

    /// Attention weights of `u` over arbitrary candidates `[n, d]`.
    pub fn attention_weights<F: Real>(
        &self,
        store: &ParamStore<F>,
        head: CompositionHead,
        u: &[F],
        candidates: &Tensor<F>,
    ) -> Result<Vec<F>> {
        let mut g = Graph::inference(store);
        let uv = g.constant(Tensor::new(vec![1, self.dim], u.to_vec())?);
        let c = g.constant(candidates.clone());
        let a = self.composition_attention(&mut g, head, uv, c)?;
        Ok(g.value(a).data().to_vec())
    }
}

#[cfg(test)]
mod tests;
