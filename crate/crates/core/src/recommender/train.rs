use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Dropout, RecommenderModel};
use super::tokens::{tokenize_example, Batch, Catalog, TokenizedSequence};
use super::trie::SemanticTrie;
use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, ModelRanker, TOP_K};
use crate::numerics::optim::{clip_grad_norm, warmup_cosine, AdamW, AdamWConfig};
use crate::numerics::{Graph, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg10: f64,
    pub learning_rate: f64,
}

/// Serializable ChaCha position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything besides the live parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epochs_done: usize,
    pub step: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val_ndcg10: Option<f64>,
    pub bad_epochs: usize,
    pub finished: bool,
    pub log: Vec<EpochRecord>,
    pub rng: RngState,
}

#[derive(Clone, Debug)]
pub struct TrainState<F> {
    pub progress: TrainProgress,
    pub optimizer: AdamW<F>,
    /// Parameters at the best validation epoch so far.
    pub best: Option<ParamStore<F>>,
}

pub struct TrainData<'a> {
    pub catalog: &'a Catalog,
    pub trie: &'a SemanticTrie,
    pub train: &'a [Example],
    pub valid: &'a [Example],
}

/// AdamW with warmup + cosine decay, gradient clipping and early stopping
/// on validation NDCG@10.
pub struct Trainer<'a, F: Real> {
    pub model: RecommenderModel<F>,
    pub state: TrainState<F>,
    data: TrainData<'a>,
    /// Tokenized training examples grouped by user, in input order.
    by_user: Vec<Vec<TokenizedSequence>>,
    valid: &'a [Example],
    rng: ChaCha8Rng,
}

fn group_by_user(examples: &[Example], catalog: &Catalog, max_items: usize) -> Result<Vec<Vec<TokenizedSequence>>> {
    let mut groups: Vec<Vec<TokenizedSequence>> = Vec::new();
    let mut last: Option<&str> = None;
    for ex in examples {
        if last != Some(ex.user.as_str()) {
            groups.push(Vec::new());
            last = Some(&ex.user);
        }
        groups
            .last_mut()
            .expect("pushed")
            .push(tokenize_example(ex, catalog, max_items)?);
    }
    Ok(groups)
}

impl<'a, F: Real> Trainer<'a, F> {
    pub fn new(model: RecommenderModel<F>, data: TrainData<'a>) -> Result<Self> {
        let cfg = &model.config;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            &model.store,
        );
        let progress = TrainProgress {
            epochs_done: 0,
            step: 0,
            total_steps: 0,
            warmup_steps: 0,
            best_epoch: None,
            best_val_ndcg10: None,
            bad_epochs: 0,
            finished: cfg.max_epochs == 0,
            log: Vec::new(),
            rng: RngState::capture(&rng),
        };
        let state = TrainState {
            progress,
            optimizer,
            best: None,
        };
        let mut t = Self::resume(model, state, data)?;
        let steps = t.steps_per_epoch() * t.model.config.max_epochs;
        t.state.progress.total_steps = steps;
        t.state.progress.warmup_steps = t.model.config.warmup_steps.unwrap_or(steps / 20);
        Ok(t)
    }

    pub fn resume(model: RecommenderModel<F>, state: TrainState<F>, data: TrainData<'a>) -> Result<Self> {
        let cfg = &model.config;
        cfg.validate()?;
        if cfg.val_beam() < TOP_K {
            return Err(Error::Config(format!(
                "validation beam {} below top-{TOP_K}",
                cfg.val_beam()
            )));
        }
        if data.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if data.valid.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        let by_user = group_by_user(data.train, data.catalog, cfg.max_history_items)?;
        let n_val = cfg.val_users.unwrap_or(data.valid.len()).min(data.valid.len());
        let valid = &data.valid[..n_val];
        let rng = state.progress.rng.restore()?;
        Ok(Trainer {
            model,
            state,
            data,
            by_user,
            valid,
            rng,
        })
    }

    fn examples_per_epoch(&self) -> usize {
        let cap = self.model.config.examples_per_user.unwrap_or(usize::MAX);
        self.by_user.iter().map(|u| u.len().min(cap)).sum()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.examples_per_epoch().div_ceil(self.model.config.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.state.progress.finished
    }

    fn epoch_order(&mut self) -> Vec<(usize, usize)> {
        let cap = self.model.config.examples_per_user;
        let mut order = Vec::with_capacity(self.examples_per_epoch());
        for (u, exs) in self.by_user.iter().enumerate() {
            match cap {
                Some(n) if n < exs.len() => {
                    let mut pick = index::sample(&mut self.rng, exs.len(), n).into_vec();
                    pick.sort_unstable();
                    order.extend(pick.into_iter().map(|i| (u, i)));
                }
                _ => order.extend((0..exs.len()).map(|i| (u, i))),
            }
        }
        order.shuffle(&mut self.rng);
        order
    }

    /// Runs one epoch of updates followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let cfg = self.model.config.clone();
        let order = self.epoch_order();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&TokenizedSequence> = chunk.iter().map(|&(u, i)| &self.by_user[u][i]).collect();
            let batch = Batch::new(&seqs, &self.model.vocab)?;
            let mut grads = {
                let mut g = Graph::with_params(&self.model.store);
                let mut drop = Dropout::new(cfg.dropout, Some(&mut self.rng));
                let loss = self.model.loss(&mut g, &batch, &mut drop)?;
                let value = g.scalar(loss).f64();
                if !value.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss {value} at step {}",
                        self.state.progress.step
                    )));
                }
                loss_sum += value * chunk.len() as f64;
                let grads = g.backward(loss)?;
                grads
                    .params()
                    .into_iter()
                    .map(|(id, g)| (id, g.to_vec()))
                    .collect::<Vec<_>>()
            };
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            let p = &self.state.progress;
            lr = warmup_cosine(p.step, cfg.learning_rate, p.warmup_steps, p.total_steps);
            self.state.optimizer.update(&mut self.model.store, &grads, lr);
            self.state.progress.step += 1;
        }
        let train_loss = loss_sum / order.len() as f64;
        let train_secs = started.elapsed().as_secs_f64();
        let val = self.validate()?;
        let p = &mut self.state.progress;
        p.epochs_done += 1;
        let record = EpochRecord {
            epoch: p.epochs_done,
            train_loss,
            val_ndcg10: val,
            learning_rate: lr,
        };
        p.log.push(record.clone());
        if p.best_val_ndcg10.is_none_or(|b| val > b) {
            p.best_val_ndcg10 = Some(val);
            p.best_epoch = Some(p.epochs_done);
            p.bad_epochs = 0;
            self.state.best = Some(self.model.store.clone());
        } else {
            p.bad_epochs += 1;
        }
        if p.epochs_done >= cfg.max_epochs || p.bad_epochs >= cfg.early_stop_patience {
            p.finished = true;
        }
        p.rng = RngState::capture(&self.rng);
        log::info!(
            "epoch {} loss {:.4} val ndcg@10 {:.4} lr {:.2e} (train {:.1}s, total {:.1}s)",
            record.epoch,
            record.train_loss,
            record.val_ndcg10,
            lr,
            train_secs,
            started.elapsed().as_secs_f64()
        );
        Ok(record)
    }

    /// NDCG@10 on the (possibly truncated) validation split.
    pub fn validate(&self) -> Result<f64> {
        let ranker = ModelRanker {
            model: &self.model,
            catalog: self.data.catalog,
            trie: self.data.trie,
            beam_size: self.model.config.val_beam(),
        };
        Ok(evaluate(&ranker, self.valid)?.0.ndcg_10)
    }

    /// Trains until finished, or for at most `max_epochs` more epochs.
    pub fn fit(&mut self, max_epochs: Option<usize>) -> Result<()> {
        let mut ran = 0;
        while !self.is_finished() && max_epochs.is_none_or(|m| ran < m) {
            self.run_epoch()?;
            ran += 1;
        }
        Ok(())
    }

    /// The model with best-validation parameters (current ones if no
    /// epoch ran) and the final state.
    pub fn into_best(self) -> (RecommenderModel<F>, TrainState<F>) {
        let mut model = self.model;
        if let Some(best) = &self.state.best {
            model.store = best.clone();
        }
        (model, self.state)
    }
}
