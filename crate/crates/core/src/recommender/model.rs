use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::RecommenderConfig;
use super::tokens::Batch;
use crate::decor_embedding::{DecorConfig, DecorEmbedding, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Dense,
    down: Dense,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: Ffn,
}

enum Init {
    Linear,
    Zeros,
    Ones,
    Normal(f64),
}

/// Creates parameters (when given an RNG) or re-resolves them by name.
struct Builder<'s, F, R> {
    store: &'s mut ParamStore<F>,
    rng: Option<&'s mut R>,
}

impl<F: Real, R: Rng> Builder<'_, F, R> {
    fn get(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        match &mut self.rng {
            Some(rng) => Ok(match init {
                Init::Linear => self.store.add_linear(name, shape[0], shape[1], *rng),
                Init::Zeros => self.store.add_filled(name, shape, 0.0),
                Init::Ones => self.store.add_filled(name, shape, 1.0),
                Init::Normal(std) => self.store.add_normal(name, shape, std, *rng),
            }),
            None => {
                let id = self
                    .store
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                if self.store.tensor(id).shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        self.store.tensor(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) -> Result<Dense> {
        Ok(Dense {
            w: self.get(format!("{name}.weight"), &[out, inp], Init::Linear)?,
            b: self.get(format!("{name}.bias"), &[out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.get(format!("{name}.gain"), &[d], Init::Ones)?,
            bias: self.get(format!("{name}.bias"), &[d], Init::Zeros)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.dense(&format!("{name}.q"), d, d)?,
            k: self.dense(&format!("{name}.k"), d, d)?,
            v: self.dense(&format!("{name}.v"), d, d)?,
            o: self.dense(&format!("{name}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Result<Ffn> {
        Ok(Ffn {
            up: self.dense(&format!("{name}.up"), hidden, d)?,
            down: self.dense(&format!("{name}.down"), d, hidden)?,
        })
    }
}

/// How decoder-side token embeddings are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// Context pooling, composition and BOS queries.
    Composed,
    /// Plain lookup of fused/special embeddings.
    Static,
}

/// Dropout with an optional RNG; without one it is the identity.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn new(p: f64, rng: Option<&'r mut ChaCha8Rng>) -> Self {
        Dropout { p, rng }
    }

    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    fn apply<F: Real>(&mut self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 => g.dropout(x, self.p, *rng),
            _ => Ok(x),
        }
    }
}

/// Composition attention recorded for one decoder position.
#[derive(Clone, Copy, Debug)]
pub struct LevelAttention {
    pub level: usize,
    /// `[B, K]`.
    pub attention: Var,
}

pub struct ForwardOutput {
    /// `[B, T, V]`.
    pub logits: Var,
    pub attentions: Vec<LevelAttention>,
    pub bos_attention: Option<Var>,
}

/// Encoder-side state shared by every decoding step of one batch.
pub struct EncodedContext {
    pub fused: Var,
    pub table: Var,
    /// `[Bh, Lh, d]` static history embeddings.
    pub hist_static: Var,
    pub hist_mask: Vec<bool>,
    pub hist_len: usize,
    /// `[Bh, Lh, d]`.
    pub memory: Var,
}

/// Pre-norm transformer encoder-decoder over semantic-ID tokens with the
/// fused/composed embedding layer on its inputs.
#[derive(Clone, Debug)]
pub struct RecommenderModel<F> {
    pub config: RecommenderConfig,
    pub vocab: Vocab,
    pub store: ParamStore<F>,
    pub embedding: DecorEmbedding,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: Norm,
    dec_norm: Norm,
    head: ParamId,
}

impl<F: Real> RecommenderModel<F> {
    /// Fresh model over frozen pretrained codebooks `[M, K, d]`.
    pub fn new<R: Rng>(
        config: RecommenderConfig,
        decor: DecorConfig,
        vocab: Vocab,
        codebooks: &Tensor<F>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if codebooks.shape().last() != Some(&d) {
            return Err(Error::Config(format!(
                "tokenizer latent width {:?} differs from d_model {d}",
                codebooks.shape().last()
            )));
        }
        let mut store = ParamStore::new();
        let embedding = DecorEmbedding::new(&mut store, vocab, codebooks, decor, rng)?;
        let mut b = Builder {
            store: &mut store,
            rng: Some(rng),
        };
        let parts = Self::layout(&config, &vocab, &mut b)?;
        Ok(Self::assemble(config, vocab, store, embedding, parts))
    }

    /// Re-binds a model to a loaded parameter store.
    pub fn bind(config: RecommenderConfig, decor: DecorConfig, vocab: Vocab, mut store: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let embedding = DecorEmbedding::bind(&store, vocab, config.d_model, decor)?;
        let mut b = Builder::<F, ChaCha8Rng> {
            store: &mut store,
            rng: None,
        };
        let parts = Self::layout(&config, &vocab, &mut b)?;
        Ok(Self::assemble(config, vocab, store, embedding, parts))
    }

    #[allow(clippy::type_complexity)]
    fn layout<R: Rng>(
        config: &RecommenderConfig,
        vocab: &Vocab,
        b: &mut Builder<'_, F, R>,
    ) -> Result<(
        ParamId,
        ParamId,
        Vec<EncoderLayer>,
        Vec<DecoderLayer>,
        Norm,
        Norm,
        ParamId,
    )> {
        let d = config.d_model;
        let hidden = d * config.ffn_mult;
        let enc_positions = config.max_history_items * vocab.item_len();
        let enc_pos = b.get("encoder.positions".into(), &[enc_positions, d], Init::Normal(0.1))?;
        let dec_pos = b.get(
            "decoder.positions".into(),
            &[vocab.item_len() + 1, d],
            Init::Normal(0.1),
        )?;
        let encoder = (0..config.enc_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                Ok(EncoderLayer {
                    norm1: b.norm(&format!("{p}.norm1"), d)?,
                    attn: b.attention(&format!("{p}.attn"), d)?,
                    norm2: b.norm(&format!("{p}.norm2"), d)?,
                    ffn: b.ffn(&format!("{p}.ffn"), d, hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.dec_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                Ok(DecoderLayer {
                    norm1: b.norm(&format!("{p}.norm1"), d)?,
                    self_attn: b.attention(&format!("{p}.self_attn"), d)?,
                    norm2: b.norm(&format!("{p}.norm2"), d)?,
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d)?,
                    norm3: b.norm(&format!("{p}.norm3"), d)?,
                    ffn: b.ffn(&format!("{p}.ffn"), d, hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = b.norm("encoder.final_norm", d)?;
        let dec_norm = b.norm("decoder.final_norm", d)?;
        let head = b.get("output.weight".into(), &[vocab.size(), d], Init::Linear)?;
        Ok((enc_pos, dec_pos, encoder, decoder, enc_norm, dec_norm, head))
    }

    fn assemble(
        config: RecommenderConfig,
        vocab: Vocab,
        store: ParamStore<F>,
        embedding: DecorEmbedding,
        parts: (
            ParamId,
            ParamId,
            Vec<EncoderLayer>,
            Vec<DecoderLayer>,
            Norm,
            Norm,
            ParamId,
        ),
    ) -> Self {
        let (enc_pos, dec_pos, encoder, decoder, enc_norm, dec_norm, head) = parts;
        RecommenderModel {
            config,
            vocab,
            store,
            embedding,
            enc_pos,
            dec_pos,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            head,
        }
    }

    pub fn decor(&self) -> &DecorConfig {
        &self.embedding.config
    }

    /// Mode used by [`forward`](Self::forward): static lookup when both
    /// composition mechanisms are switched off.
    pub fn default_mode(&self) -> EmbeddingMode {
        if self.decor().is_static() {
            EmbeddingMode::Static
        } else {
            EmbeddingMode::Composed
        }
    }

    // ---- building blocks -------------------------------------------------------

    fn dense(g: &mut Graph<'_, F>, d: Dense, x: Var) -> Result<Var> {
        let (w, b) = (g.param(d.w), g.param(d.b));
        g.affine(x, w, b)
    }

    fn norm(g: &mut Graph<'_, F>, n: Norm, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(n.gain), g.param(n.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn ffn(g: &mut Graph<'_, F>, f: Ffn, x: Var, drop: &mut Dropout<'_>) -> Result<Var> {
        let h = Self::dense(g, f.up, x)?;
        let h = g.relu(h);
        let h = drop.apply(g, h)?;
        Self::dense(g, f.down, h)
    }

    fn split_heads(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let h = self.config.heads;
        let x = g.reshape(x, &[sh[0], sh[1], h, sh[2] / h])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// Multi-head attention of `xq [Bq, Tq, d]` over `xkv [Bk, Tk, d]`,
    /// where `Bk` is `Bq` or 1 (one memory shared by all query rows).
    /// `keep(b, i, j)` says whether query `i` of row `b` may attend to key `j`.
    fn attention(
        &self,
        g: &mut Graph<'_, F>,
        a: Attention,
        xq: Var,
        xkv: Var,
        keep: impl Fn(usize, usize, usize) -> bool,
    ) -> Result<Var> {
        let (bq, tq, d) = {
            let s = g.shape(xq);
            (s[0], s[1], s[2])
        };
        let (bk, tk) = (g.shape(xkv)[0], g.shape(xkv)[1]);
        let h = self.config.heads;
        let dh = d / h;
        let q = Self::dense(g, a.q, xq)?;
        let k = Self::dense(g, a.k, xkv)?;
        let v = Self::dense(g, a.v, xkv)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let folded = bk == 1 && bq > 1;
        let q = if folded {
            // [Bq, Tq, d] -> [1, H, Bq·Tq, dh]
            let q = g.reshape(q, &[bq, tq, h, dh])?;
            let q = g.permute(q, &[2, 0, 1, 3])?;
            g.reshape(q, &[1, h, bq * tq, dh])?
        } else if bk == bq {
            self.split_heads(g, q)?
        } else {
            return Err(Error::shape("attention", format!("query batch {bq}, key batch {bk}")));
        };
        let scores = g.matmul(q, k, false, true)?;
        let scores = g.scale(scores, scale);
        let rows = if folded { bq * tq } else { tq };
        let outer = if folded { 1 } else { bq };
        let mut mask = Vec::with_capacity(outer * h * rows * tk);
        for ob in 0..outer {
            for _ in 0..h {
                for r in 0..rows {
                    let (b, i) = if folded { (r / tq, r % tq) } else { (ob, r) };
                    mask.extend((0..tk).map(|j| keep(b, i, j)));
                }
            }
        }
        let att = g.softmax(scores, Some(mask))?;
        let out = g.matmul(att, v, false, false)?;
        let out = if folded {
            let o = g.reshape(out, &[h, bq, tq, dh])?;
            g.permute(o, &[1, 2, 0, 3])?
        } else {
            g.permute(out, &[0, 2, 1, 3])?
        };
        let out = g.reshape(out, &[bq, tq, d])?;
        Self::dense(g, a.o, out)
    }

    // ---- encoder ------------------------------------------------------------------

    /// Embeds and encodes `history [Bh·Lh]` (right-padded, `mask` marks real
    /// tokens).
    pub fn encode(
        &self,
        g: &mut Graph<'_, F>,
        history: &[usize],
        mask: &[bool],
        hist_len: usize,
        mode: EmbeddingMode,
        drop: &mut Dropout<'_>,
    ) -> Result<EncodedContext> {
        let d = self.config.d_model;
        let bh = history.len() / hist_len.max(1);
        if hist_len == 0 || bh * hist_len != history.len() || mask.len() != history.len() {
            return Err(Error::shape(
                "encode",
                format!("{} tokens, length {hist_len}", history.len()),
            ));
        }
        let max = self.config.max_history_items * self.vocab.item_len();
        if hist_len > max {
            return Err(Error::shape(
                "encode",
                format!("history of {hist_len} tokens exceeds {max}"),
            ));
        }
        let emb = &self.embedding;
        let fused = emb.fused_codes(g)?;
        let table = emb.token_table(g, fused)?;
        let flat = emb.lookup(g, table, history)?;
        let hist_static = g.reshape(flat, &[bh, hist_len, d])?;

        let mut x = hist_static;
        if mode == EmbeddingMode::Composed && emb.config.encoder_side_composition {
            let u = emb.pool_split(g, hist_static, None, bh, mask, 1)?;
            let u = g.reshape(u, &[bh, d])?;
            x = emb.compose_history(g, fused, hist_static, u, history)?;
        }
        let pos = g.param(self.enc_pos);
        let pos = g.narrow(pos, 0, 0, hist_len)?;
        x = g.add(x, pos)?;
        x = drop.apply(g, x)?;
        let key_ok = |b: usize, _: usize, j: usize| mask[b * hist_len + j];
        for layer in &self.encoder {
            let h = Self::norm(g, layer.norm1, x)?;
            let a = self.attention(g, layer.attn, h, h, key_ok)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, layer.norm2, x)?;
            let f = Self::ffn(g, layer.ffn, h, drop)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        let memory = Self::norm(g, self.enc_norm, x)?;
        Ok(EncodedContext {
            fused,
            table,
            hist_static,
            hist_mask: mask.to_vec(),
            hist_len,
            memory,
        })
    }

    // ---- decoder inputs -------------------------------------------------------

    /// Decoder input embeddings `[B, T + 1, d]` for BOS followed by the
    /// `T` known target tokens `prefix [B·T]`.
    pub fn decoder_inputs(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &EncodedContext,
        prefix: &[usize],
        batch: usize,
        mode: EmbeddingMode,
    ) -> Result<(Var, Vec<LevelAttention>, Option<Var>)> {
        let d = self.config.d_model;
        let emb = &self.embedding;
        let t = prefix.len() / batch;
        if t * batch != prefix.len() || t > self.vocab.item_len() {
            return Err(Error::shape(
                "decoder_inputs",
                format!("{} prefix tokens for {batch} rows", prefix.len()),
            ));
        }
        let bh = g.shape(ctx.hist_static)[0];
        let row = |b: usize| if bh == 1 { 0 } else { b };

        if mode == EmbeddingMode::Static {
            let mut toks = Vec::with_capacity(batch * (t + 1));
            for b in 0..batch {
                toks.push(self.vocab.bos());
                toks.extend_from_slice(&prefix[b * t..(b + 1) * t]);
            }
            let x = emb.lookup(g, ctx.table, &toks)?;
            return Ok((g.reshape(x, &[batch, t + 1, d])?, Vec::new(), None));
        }

        // Contexts for positions 0..=min(t, M): history plus prefix[..p].
        let composed_positions = t.min(self.vocab.levels) + 1;
        let known = composed_positions - 1;
        let prefix_static = if known > 0 {
            let toks: Vec<usize> = (0..batch)
                .flat_map(|b| prefix[b * t..b * t + known].iter().copied())
                .collect();
            let x = emb.lookup(g, ctx.table, &toks)?;
            Some(g.reshape(x, &[batch, known, d])?)
        } else {
            None
        };
        let lh = ctx.hist_len;
        let width = lh + known;
        let mut mask = Vec::with_capacity(batch * composed_positions * width);
        for b in 0..batch {
            for p in 0..composed_positions {
                mask.extend((0..width).map(|k| {
                    if k < lh {
                        ctx.hist_mask[row(b) * lh + k]
                    } else {
                        k - lh < p
                    }
                }));
            }
        }
        let u = emb.pool_split(g, ctx.hist_static, prefix_static, batch, &mask, composed_positions)?;

        let mut parts = Vec::with_capacity(t + 1);
        let u0 = g.narrow(u, 1, 0, 1)?;
        let u0 = g.reshape(u0, &[batch, d])?;
        let (bos, bos_attention) = emb.compose_bos(g, ctx.table, u0)?;
        parts.push(g.reshape(bos, &[batch, 1, d])?);
        let mut attentions = Vec::new();
        for j in 1..=t {
            let toks: Vec<usize> = (0..batch).map(|b| prefix[b * t + j - 1]).collect();
            let stat = emb.lookup(g, ctx.table, &toks)?;
            let level = j - 1;
            let e = if level < self.vocab.levels {
                if let Some(&bad) = toks.iter().find(|&&tk| self.vocab.level_of(tk) != Some(level)) {
                    return Err(Error::NotComposable(bad));
                }
                let uj = g.narrow(u, 1, j, 1)?;
                let uj = g.reshape(uj, &[batch, d])?;
                let cands = emb.level_candidates(g, ctx.fused, level)?;
                let c = emb.compose(g, emb.head(level), uj, cands, stat)?;
                attentions.push(LevelAttention {
                    level,
                    attention: c.attention,
                });
                c.embedding
            } else {
                stat
            };
            parts.push(g.reshape(e, &[batch, 1, d])?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        Ok((x, attentions, bos_attention))
    }

    // ---- decoder ----------------------------------------------------------------

    /// Runs the decoder stack on `y [B, T, d]` and returns hidden states.
    fn decode(&self, g: &mut Graph<'_, F>, ctx: &EncodedContext, y: Var, drop: &mut Dropout<'_>) -> Result<Var> {
        let (b, t) = (g.shape(y)[0], g.shape(y)[1]);
        let pos = g.param(self.dec_pos);
        let pos = g.narrow(pos, 0, 0, t)?;
        let mut x = g.add(y, pos)?;
        x = drop.apply(g, x)?;
        let bh = g.shape(ctx.memory)[0];
        let lh = ctx.hist_len;
        let mem_mask = &ctx.hist_mask;
        let mem_ok = |row: usize, _: usize, j: usize| mem_mask[if bh == 1 { 0 } else { row } * lh + j];
        let _ = b;
        for layer in &self.decoder {
            let h = Self::norm(g, layer.norm1, x)?;
            let a = self.attention(g, layer.self_attn, h, h, |_, i, j| j <= i)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, layer.norm2, x)?;
            let a = self.attention(g, layer.cross_attn, h, ctx.memory, mem_ok)?;
            let a = drop.apply(g, a)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, layer.norm3, x)?;
            let f = Self::ffn(g, layer.ffn, h, drop)?;
            let f = drop.apply(g, f)?;
            x = g.add(x, f)?;
        }
        Self::norm(g, self.dec_norm, x)
    }

    fn project(&self, g: &mut Graph<'_, F>, hidden: Var) -> Result<Var> {
        let head = g.param(self.head);
        g.linear(hidden, head)
    }

    // ---- public passes ------------------------------------------------------------

    /// Teacher-forced logits `[B, M + 2, V]` in the model's default mode.
    pub fn forward(&self, g: &mut Graph<'_, F>, batch: &Batch, drop: &mut Dropout<'_>) -> Result<ForwardOutput> {
        self.forward_with(g, batch, self.default_mode(), drop)
    }

    pub fn forward_with(
        &self,
        g: &mut Graph<'_, F>,
        batch: &Batch,
        mode: EmbeddingMode,
        drop: &mut Dropout<'_>,
    ) -> Result<ForwardOutput> {
        let ctx = self.encode(g, &batch.history, &batch.hist_mask, batch.hist_len, mode, drop)?;
        let tlen = self.vocab.item_len() + 1;
        let prefix = batch.decoder_tokens(tlen);
        let (y, attentions, bos_attention) = self.decoder_inputs(g, &ctx, &prefix, batch.size, mode)?;
        let hidden = self.decode(g, &ctx, y, drop)?;
        let logits = self.project(g, hidden)?;
        Ok(ForwardOutput {
            logits,
            attentions,
            bos_attention,
        })
    }

    /// Mean next-token cross-entropy over all target positions.
    pub fn loss(&self, g: &mut Graph<'_, F>, batch: &Batch, drop: &mut Dropout<'_>) -> Result<Var> {
        let out = self.forward(g, batch, drop)?;
        let v = self.vocab.size();
        let flat = g.reshape(out.logits, &[batch.targets.len(), v])?;
        let pad = self.vocab.pad();
        let targets: Vec<Option<usize>> = batch.targets.iter().map(|&t| (t != pad).then_some(t)).collect();
        g.cross_entropy(flat, &targets)
    }

    /// Encoder pass for one user's history, reused across decoding steps.
    pub fn encode_user(&self, g: &mut Graph<'_, F>, history: &[usize]) -> Result<EncodedContext> {
        if history.is_empty() {
            return Err(Error::Empty("history"));
        }
        let mask = vec![true; history.len()];
        self.encode(
            g,
            history,
            &mask,
            history.len(),
            self.default_mode(),
            &mut Dropout::off(),
        )
    }

    /// Next-token logits `[B, V]` for `B` prefixes of equal length sharing
    /// one encoded history.
    pub fn step_logits(
        &self,
        g: &mut Graph<'_, F>,
        ctx: &EncodedContext,
        prefixes: &[usize],
        batch: usize,
    ) -> Result<Var> {
        let (y, _, _) = self.decoder_inputs(g, ctx, prefixes, batch, self.default_mode())?;
        let hidden = self.decode(g, ctx, y, &mut Dropout::off())?;
        let t = g.shape(hidden)[1];
        let last = g.narrow(hidden, 1, t - 1, 1)?;
        let last = g.reshape(last, &[batch, self.config.d_model])?;
        self.project(g, last)
    }

    pub fn frozen_table(&self) -> ParamId {
        self.embedding.table.e_pre
    }
}
