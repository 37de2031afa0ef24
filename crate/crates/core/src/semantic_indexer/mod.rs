//! Residual-quantized autoencoder that turns item embeddings into semantic
//! IDs: `M` code indices plus a collision digit.

mod kmeans;
mod model;
mod quantize;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kmeans::{break_duplicates, kmeans};
pub use model::{residual_quantization_loss, Codebook, LossTerms, RqVaeConfig, RqVaeModel};
pub use quantize::{quantize, quantize_level, sq_dist, QuantizationTrace};

use crate::datasets::ItemEmbeddings;
use crate::error::{Error, Result};
use crate::numerics::optim::{AdamW, AdamWConfig};
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<usize>,
    pub collision: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub rq: f64,
    /// Fraction of each level's codebook selected at least once this epoch.
    pub usage: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

fn item_matrix(items: &ItemEmbeddings, rows: &[usize]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(rows.len() * items.dim);
    for &r in rows {
        data.extend_from_slice(items.row(r));
    }
    Tensor::new(vec![rows.len(), items.dim], data).expect("row-major item block")
}

/// Replaces every codebook with k-means centroids of the residuals of
/// `latents` at that level.
fn init_codebooks(model: &mut RqVaeModel<f32>, latents: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
    let (k, d) = (model.config.codebook_size, model.config.latent_dim);
    let n = latents.shape()[0];
    if n < k {
        log::warn!("{n} items < codebook size {k}; keeping random codebook init");
        return Ok(());
    }
    let mut residual: Vec<f64> = latents.to_f64_vec();
    for level in 0..model.levels() {
        let mut centroids = kmeans(&residual, d, k, model.config.kmeans_iters, rng);
        break_duplicates(&mut centroids, d, 1e-4, rng);
        let table = Tensor::<f32>::from_f64(&[k, d], &centroids)?;
        for r in 0..n {
            let z: Vec<f32> = residual[r * d..(r + 1) * d].iter().map(|&x| x as f32).collect();
            let (idx, _) = quantize_level(&z, &table);
            for (x, &e) in residual[r * d..(r + 1) * d].iter_mut().zip(table.row(idx)) {
                *x -= e as f64;
            }
        }
        let id = model.codebook_id(level);
        model.store.set(id, table)?;
    }
    Ok(())
}

/// Trains the tokenizer with AdamW at a constant learning rate on
/// reconstruction + residual-quantization loss.
pub fn train_rqvae(items: &ItemEmbeddings, config: &RqVaeConfig) -> Result<(RqVaeModel<f32>, TrainingLog)> {
    config.validate()?;
    if items.dim != config.input_dim {
        return Err(Error::Config(format!(
            "tokenizer input_dim {} does not match item embedding width {}",
            config.input_dim, items.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RqVaeModel::<f32>::new(config.clone(), &mut rng)?;
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok((model, log));
    }
    let n = items.len();
    let mut opt = AdamW::new(AdamWConfig::default(), &model.store);
    let mut order: Vec<usize> = (0..n).collect();
    let (m, k) = (config.levels, config.codebook_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![vec![false; k]; m];
        let (mut recon_sum, mut rq_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if epoch == 0 && b == 0 && config.kmeans_init {
                let init_rows: Vec<usize> = if batch.len() >= k {
                    batch.to_vec()
                } else {
                    (0..n).collect()
                };
                let latents = model.encode_batch(&item_matrix(items, &init_rows))?;
                init_codebooks(&mut model, &latents, &mut rng)?;
            }
            let x = item_matrix(items, batch);
            let (grads, recon, rq, indices) = {
                let mut g = Graph::with_params(&model.store);
                let xv = g.constant(x);
                let terms = model.loss_terms(&mut g, xv)?;
                let (recon, rq) = (g.scalar(terms.recon) as f64, g.scalar(terms.rq) as f64);
                if !(recon.is_finite() && rq.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "tokenizer loss became non-finite at epoch {epoch}"
                    )));
                }
                let grads = g.backward(terms.total)?;
                let owned: Vec<_> = grads.params().into_iter().map(|(id, v)| (id, v.to_vec())).collect();
                (owned, recon, rq, terms.indices)
            };
            opt.update(&mut model.store, &grads, config.learning_rate);
            recon_sum += recon * batch.len() as f64;
            rq_sum += rq * batch.len() as f64;
            for row in &indices {
                for (l, &c) in row.iter().enumerate() {
                    used[l][c] = true;
                }
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            recon: recon_sum / n as f64,
            rq: rq_sum / n as f64,
            usage: used
                .iter()
                .map(|u| u.iter().filter(|&&x| x).count() as f64 / k as f64)
                .collect(),
        };
        log::debug!(
            "tokenizer epoch {} recon {:.5} rq {:.5} usage {:?}",
            entry.epoch,
            entry.recon,
            entry.rq,
            entry.usage
        );
        log.epochs.push(entry);
    }
    Ok((model, log))
}

/// Code indices for every item, in item order.
pub fn item_codes(items: &ItemEmbeddings, model: &RqVaeModel<f32>) -> Result<Vec<Vec<usize>>> {
    if items.dim != model.config.input_dim {
        return Err(Error::shape(
            "assign_semantic_ids",
            format!(
                "items have width {}, tokenizer expects {}",
                items.dim, model.config.input_dim
            ),
        ));
    }
    let rows: Vec<usize> = (0..items.len()).collect();
    let cbs = model.codebook_tensors();
    let mut out = Vec::with_capacity(items.len());
    for chunk in rows.chunks(1024) {
        let z = model.encode_batch(&item_matrix(items, chunk))?;
        for r in 0..chunk.len() {
            out.push(quantize(z.row(r), &cbs).indices);
        }
    }
    Ok(out)
}

/// Items sharing all `M` codes get collision digits `0, 1, …` in ascending
/// item-id order.
pub fn assign_semantic_ids(items: &ItemEmbeddings, model: &RqVaeModel<f32>) -> Result<BTreeMap<String, SemanticId>> {
    let codes = item_codes(items, model)?;
    let capacity = model.config.collision_vocab;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items.ids[a].cmp(&items.ids[b]));
    let mut next: HashMap<&[usize], usize> = HashMap::new();
    let mut out = BTreeMap::new();
    for i in order {
        let ordinal = next.entry(codes[i].as_slice()).or_insert(0);
        if *ordinal >= capacity {
            return Err(Error::CollisionOverflow {
                codes: codes[i].clone(),
                ordinal: *ordinal,
                capacity,
            });
        }
        out.insert(
            items.ids[i].clone(),
            SemanticId {
                codes: codes[i].clone(),
                collision: *ordinal,
            },
        );
        *ordinal += 1;
    }
    Ok(out)
}

/// Stacked `[M, K, d]` copy of the codebooks, for use as a frozen table.
pub fn export_codebooks(model: &RqVaeModel<f32>) -> Tensor<f32> {
    let c = &model.config;
    let mut data = Vec::with_capacity(c.levels * c.codebook_size * c.latent_dim);
    for t in model.codebook_tensors() {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![c.levels, c.codebook_size, c.latent_dim], data).expect("stacked codebooks")
}

#[derive(Serialize, Deserialize)]
struct SidRecord {
    item_id: String,
    codes: Vec<usize>,
    collision: usize,
}

pub fn write_semantic_ids(path: &Path, sids: &BTreeMap<String, SemanticId>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (item, sid) in sids {
        serde_json::to_writer(
            &mut w,
            &SidRecord {
                item_id: item.clone(),
                codes: sid.codes.clone(),
                collision: sid.collision,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a semantic-ID file; all records must have the same number of codes
/// and item ids must be unique.
pub fn read_semantic_ids(path: &Path) -> Result<BTreeMap<String, SemanticId>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    let mut levels = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: SidRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if *levels.get_or_insert(rec.codes.len()) != rec.codes.len() || rec.codes.is_empty() {
            return Err(err(format!(
                "expected {} codes, got {}",
                levels.unwrap_or(0),
                rec.codes.len()
            )));
        }
        let sid = SemanticId {
            codes: rec.codes,
            collision: rec.collision,
        };
        if out.insert(rec.item_id.clone(), sid).is_some() {
            return Err(err(format!("duplicate item_id {}", rec.item_id)));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no semantic ids in {}", path.display())));
    }
    Ok(out)
}
