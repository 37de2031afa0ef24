use rand::Rng;
use serde::{Deserialize, Serialize};

use super::quantize::{quantize, QuantizationTrace};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RqVaeConfig {
    /// Number of quantization levels M.
    pub levels: usize,
    /// Entries per codebook K.
    pub codebook_size: usize,
    /// Latent width d; must match the recommender's model width.
    pub latent_dim: usize,
    pub beta: f64,
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Initialise codebooks by k-means on the first encoded batch.
    pub kmeans_init: bool,
    pub kmeans_iters: usize,
    /// Size of the collision-digit vocabulary.
    pub collision_vocab: usize,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        RqVaeConfig {
            levels: 3,
            codebook_size: 256,
            latent_dim: 128,
            beta: 0.25,
            input_dim: 768,
            encoder_hidden: vec![512, 256],
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 256,
            seed: 2025,
            kmeans_init: true,
            kmeans_iters: 25,
            collision_vocab: 64,
        }
    }
}

impl RqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tokenizer: {m}")));
        if self.levels < 1 {
            return bad("levels must be >= 1");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be >= 2");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be > 0");
        }
        if self.latent_dim == 0 || self.input_dim == 0 || self.encoder_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.collision_vocab == 0 {
            return bad("collision_vocab must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

/// One quantization level's `[K, d]` table (0-based `level`).
#[derive(Clone, Copy, Debug)]
pub struct Codebook<'a, F> {
    pub level: usize,
    pub entries: &'a Tensor<F>,
}

/// Graph nodes of the tokenizer objective for one batch.
pub struct LossTerms {
    pub recon: Var,
    pub rq: Var,
    pub total: Var,
    /// Chosen code per level for each batch row.
    pub indices: Vec<Vec<usize>>,
}

/// MLP encoder/decoder around `M` residual codebooks.
#[derive(Clone, Debug)]
pub struct RqVaeModel<F> {
    pub config: RqVaeConfig,
    pub store: ParamStore<F>,
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
    codebooks: Vec<ParamId>,
}

fn widths(config: &RqVaeConfig) -> (Vec<usize>, Vec<usize>) {
    let mut enc = vec![config.input_dim];
    enc.extend(&config.encoder_hidden);
    enc.push(config.latent_dim);
    let dec: Vec<usize> = enc.iter().rev().copied().collect();
    (enc, dec)
}

impl<F: Real> RqVaeModel<F> {
    /// Fresh model; codebooks start as small Gaussian noise and are normally
    /// replaced by k-means at the first training batch.
    pub fn new<R: Rng>(config: RqVaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (enc_w, dec_w) = widths(&config);
        let dense = |store: &mut ParamStore<F>, prefix: &str, ws: &[usize], rng: &mut R| {
            ws.windows(2)
                .enumerate()
                .map(|(i, p)| Dense {
                    w: store.add_linear(format!("{prefix}.{i}.weight"), p[1], p[0], rng),
                    b: store.add_filled(format!("{prefix}.{i}.bias"), &[p[1]], 0.0),
                })
                .collect::<Vec<_>>()
        };
        let encoder = dense(&mut store, "encoder", &enc_w, rng);
        let decoder = dense(&mut store, "decoder", &dec_w, rng);
        let codebooks = (0..config.levels)
            .map(|l| {
                store.add_normal(
                    format!("codebook.{l}"),
                    &[config.codebook_size, config.latent_dim],
                    0.1,
                    rng,
                )
            })
            .collect();
        Ok(RqVaeModel {
            config,
            store,
            encoder,
            decoder,
            codebooks,
        })
    }

    /// Rebinds a model to parameters loaded elsewhere (e.g. a checkpoint).
    pub fn from_store(config: RqVaeConfig, store: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let (enc_w, dec_w) = widths(&config);
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tokenizer parameter {name}")))?;
            if store.tensor(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    store.tensor(id).shape()
                )));
            }
            Ok(id)
        };
        let dense = |prefix: &str, ws: &[usize]| -> Result<Vec<Dense>> {
            ws.windows(2)
                .enumerate()
                .map(|(i, p)| {
                    Ok(Dense {
                        w: find(format!("{prefix}.{i}.weight"), &[p[1], p[0]])?,
                        b: find(format!("{prefix}.{i}.bias"), &[p[1]])?,
                    })
                })
                .collect()
        };
        let encoder = dense("encoder", &enc_w)?;
        let decoder = dense("decoder", &dec_w)?;
        let codebooks = (0..config.levels)
            .map(|l| find(format!("codebook.{l}"), &[config.codebook_size, config.latent_dim]))
            .collect::<Result<_>>()?;
        Ok(RqVaeModel {
            config,
            store,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn codebook(&self, level: usize) -> Codebook<'_, F> {
        Codebook {
            level,
            entries: self.store.tensor(self.codebooks[level]),
        }
    }

    pub fn codebook_tensors(&self) -> Vec<&Tensor<F>> {
        self.codebooks.iter().map(|&id| self.store.tensor(id)).collect()
    }

    pub(crate) fn codebook_id(&self, level: usize) -> ParamId {
        self.codebooks[level]
    }

    pub fn encoder_layers(&self) -> Vec<(ParamId, ParamId)> {
        self.encoder.iter().map(|d| (d.w, d.b)).collect()
    }

    fn mlp(g: &mut Graph<'_, F>, layers: &[Dense], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            let (w, b) = (g.param(layer.w), g.param(layer.b));
            h = g.affine(h, w, b)?;
            if i + 1 < layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// `x [n, input_dim] -> z0 [n, d]`.
    pub fn encode_graph(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.config.input_dim) {
            return Err(Error::shape(
                "encode",
                format!("input {:?}, expected width {}", g.shape(x), self.config.input_dim),
            ));
        }
        Self::mlp(g, &self.encoder, x)
    }

    pub fn decode_graph(&self, g: &mut Graph<'_, F>, z: Var) -> Result<Var> {
        Self::mlp(g, &self.decoder, z)
    }

    /// Latent of a single item embedding.
    pub fn encode(&self, x: &[F]) -> Result<Vec<F>> {
        let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.encode_batch(&t)?.into_data())
    }

    /// Latents of `[n, input_dim]` rows.
    pub fn encode_batch(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::inference(&self.store);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn quantize(&self, z0: &[F]) -> QuantizationTrace<F> {
        quantize(z0, &self.codebook_tensors())
    }

    /// Builds the full objective on a batch `x [n, input_dim]`:
    /// reconstruction through a straight-through quantized latent plus the
    /// codebook/commitment terms. Both are averaged over rows.
    pub fn loss_terms(&self, g: &mut Graph<'_, F>, x: Var) -> Result<LossTerms> {
        let z0 = self.encode_graph(g, x)?;
        let rows = g.shape(z0)[0];
        let d = self.config.latent_dim;
        let cbs = self.codebook_tensors();
        let indices: Vec<Vec<usize>> = (0..rows)
            .map(|r| quantize(&g.value(z0).data()[r * d..(r + 1) * d], &cbs).indices)
            .collect();
        let cb_vars: Vec<Var> = self.codebooks.iter().map(|&id| g.param(id)).collect();
        let (rq, r_tilde) = residual_quantization_loss(g, z0, &cb_vars, &indices, self.config.beta)?;

        // z_q = z0 + sg[r̃ - z0]
        let gap = g.sub(r_tilde, z0)?;
        let gap = g.stop_gradient(gap)?;
        let zq = g.add(z0, gap)?;
        let recon_x = self.decode_graph(g, zq)?;
        let diff = g.sub(x, recon_x)?;
        let sq = g.sum_squares(diff);
        let recon = g.scale(sq, F::of(1.0 / rows as f64));
        let total = g.add(recon, rq)?;
        Ok(LossTerms {
            recon,
            rq,
            total,
            indices,
        })
    }

    /// `(L_RECON, L_RQ, L_SQ)` for one item.
    pub fn rqvae_losses(&self, x: &[F]) -> Result<(f64, f64, f64)> {
        let mut g = Graph::inference(&self.store);
        let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let t = self.loss_terms(&mut g, xv)?;
        Ok((g.scalar(t.recon).f64(), g.scalar(t.rq).f64(), g.scalar(t.total).f64()))
    }
}

/// `Σ_l ‖sg[z_{l-1}] − e_l‖² + β‖z_{l-1} − sg[e_l]‖²`, averaged over rows,
/// with `z_l = z_{l-1} − sg[e_l]`. Returns the loss and `r̃ = Σ_l e_l`.
///
/// Codebook entries therefore receive only `2(e − z_{l-1})` and the latent
/// only `2β(z_{l-1} − e)` from each level.
pub fn residual_quantization_loss<F: Real>(
    g: &mut Graph<'_, F>,
    z0: Var,
    codebooks: &[Var],
    indices: &[Vec<usize>],
    beta: f64,
) -> Result<(Var, Var)> {
    let rows = g.shape(z0)[0];
    if indices.len() != rows || indices.iter().any(|r| r.len() != codebooks.len()) {
        return Err(Error::shape("rq_loss", "indices do not match batch/levels"));
    }
    let mut z = z0;
    let mut terms = Vec::with_capacity(codebooks.len());
    let mut r_tilde: Option<Var> = None;
    for (l, &cb) in codebooks.iter().enumerate() {
        let idx: Vec<usize> = indices.iter().map(|r| r[l]).collect();
        let e = g.gather_rows(cb, &idx)?;
        let z_sg = g.stop_gradient(z)?;
        let d1 = g.sub(z_sg, e)?;
        let codebook_term = g.sum_squares(d1);
        let e_sg = g.stop_gradient(e)?;
        let d2 = g.sub(z, e_sg)?;
        let commit = g.sum_squares(d2);
        let commit = g.scale(commit, F::of(beta));
        terms.push(g.add(codebook_term, commit)?);
        z = g.sub(z, e_sg)?;
        r_tilde = Some(match r_tilde {
            None => e,
            Some(acc) => g.add(acc, e)?,
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, F::of(1.0 / rows as f64));
    Ok((loss, r_tilde.expect("at least one level")))
}
