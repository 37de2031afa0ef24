use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::generate::restricted_log_softmax;
use super::*;
use crate::datasets::Example;
use crate::decor_embedding::{DecorConfig, Vocab};
use crate::numerics::{grad_check, GradCheckOptions, Graph, Real, Tensor};
use crate::semantic_indexer::SemanticId;

pub(crate) const M: usize = 3;
pub(crate) const K: usize = 6;
const C: usize = 3;

pub(crate) fn toy_config(d: usize, layers: usize) -> RecommenderConfig {
    RecommenderConfig {
        d_model: d,
        enc_layers: layers,
        dec_layers: layers,
        heads: 2,
        ffn_mult: 2,
        max_history_items: 6,
        ..RecommenderConfig::default()
    }
}

pub(crate) fn catalog(n: usize, seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeMap::new();
    let mut sids = BTreeMap::new();
    while sids.len() < n {
        let codes: Vec<usize> = (0..M).map(|_| rng.random_range(0..K)).collect();
        let ordinal = seen.entry(codes.clone()).or_insert(0usize);
        if *ordinal >= C {
            continue;
        }
        sids.insert(
            format!("item{:03}", sids.len()),
            SemanticId {
                codes,
                collision: *ordinal,
            },
        );
        *ordinal += 1;
    }
    Catalog::new(&sids, Vocab::new(M, K, C)).unwrap()
}

pub(crate) fn model<F: Real>(d: usize, layers: usize, decor: DecorConfig, seed: u64) -> RecommenderModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = M * K * d;
    let books = Tensor::<f64>::new(vec![M, K, d], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut cfg = toy_config(d, layers);
    cfg.dropout = 0.0;
    RecommenderModel::new(cfg, decor, Vocab::new(M, K, C), &books.cast(), &mut rng).unwrap()
}

pub(crate) fn random_batch(cat: &Catalog, size: usize, rng: &mut ChaCha8Rng) -> (Vec<TokenizedSequence>, Batch) {
    let ids: Vec<&str> = cat.iter().map(|(id, _)| id).collect();
    let seqs: Vec<TokenizedSequence> = (0..size)
        .map(|u| {
            let len = rng.random_range(1..=5);
            let ex = Example {
                user: format!("u{u}"),
                history: (0..len)
                    .map(|_| ids[rng.random_range(0..ids.len())].to_string())
                    .collect(),
                target: ids[rng.random_range(0..ids.len())].to_string(),
            };
            tokenize_example(&ex, cat, 6).unwrap()
        })
        .collect();
    let refs: Vec<&TokenizedSequence> = seqs.iter().collect();
    let batch = Batch::new(&refs, &cat.vocab).unwrap();
    (seqs, batch)
}

fn logits_of<F: Real>(m: &RecommenderModel<F>, batch: &Batch, mode: EmbeddingMode) -> Vec<f64> {
    let mut g = Graph::inference(&m.store);
    let out = m.forward_with(&mut g, batch, mode, &mut Dropout::off()).unwrap();
    g.value(out.logits).to_f64_vec()
}

#[test]
fn static_settings_match_plain_lookup() {
    let cat = catalog(40, 1);
    let decor = DecorConfig {
        alpha: 0.0,
        bos_queries: 0,
        ..DecorConfig::default()
    };
    let m: RecommenderModel<f32> = model(16, 1, decor, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (_, batch) = random_batch(&cat, 4, &mut rng);
        let a = logits_of(&m, &batch, EmbeddingMode::Composed);
        let b = logits_of(&m, &batch, EmbeddingMode::Static);
        assert_eq!(a.len(), 4 * (M + 2) * m.vocab.size());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn composition_changes_logits_when_enabled() {
    let cat = catalog(40, 1);
    let m: RecommenderModel<f64> = model(16, 1, DecorConfig::default(), 2);
    let (_, batch) = random_batch(&cat, 3, &mut ChaCha8Rng::seed_from_u64(4));
    let a = logits_of(&m, &batch, EmbeddingMode::Composed);
    let b = logits_of(&m, &batch, EmbeddingMode::Static);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-4));
}

#[test]
fn perturbing_a_target_token_leaves_earlier_logits_unchanged() {
    let cat = catalog(60, 5);
    let m: RecommenderModel<f64> = model(16, 2, DecorConfig::default(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = m.vocab.size();
    let tlen = M + 2;
    for j in 0..=M {
        let (_, batch) = random_batch(&cat, 3, &mut rng);
        let mut other = batch.clone();
        for b in 0..batch.size {
            let t = &mut other.targets[b * tlen + j];
            *t = if j < M {
                m.vocab.code(j, (*t - j * K + 1) % K)
            } else {
                m.vocab.collision((*t + 1 - M * K) % C)
            };
        }
        let a = logits_of(&m, &batch, EmbeddingMode::Composed);
        let b = logits_of(&m, &other, EmbeddingMode::Composed);
        for row in 0..batch.size {
            for pos in 0..tlen {
                let s = (row * tlen + pos) * v;
                let same = a[s..s + v]
                    .iter()
                    .zip(&b[s..s + v])
                    .all(|(x, y)| (x - y).abs() <= 1e-12);
                if pos <= j {
                    assert!(same, "position {pos} changed after perturbing {j}");
                } else if pos == j + 1 {
                    assert!(!same, "position {pos} ignored token {j}");
                }
            }
        }
    }
}

#[test]
fn untrained_cross_entropy_near_log_vocab() {
    let cat = catalog(80, 8);
    let m: RecommenderModel<f32> = model(32, 2, DecorConfig::default(), 9);
    let (_, batch) = random_batch(&cat, 16, &mut ChaCha8Rng::seed_from_u64(10));
    let mut g = Graph::inference(&m.store);
    let loss = m.loss(&mut g, &batch, &mut Dropout::off()).unwrap();
    let ce = g.scalar(loss).f64();
    let ln_v = (m.vocab.size() as f64).ln();
    assert!((ce - ln_v).abs() <= 0.2 * ln_v, "ce {ce} vs ln V {ln_v}");
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let cat = catalog(30, 11);
    for (seed, decor) in [
        (12, DecorConfig::default()),
        (
            13,
            DecorConfig {
                bos_queries: 3,
                encoder_side_composition: true,
                per_level_heads: true,
                ..DecorConfig::default()
            },
        ),
    ] {
        let m: RecommenderModel<f64> = model(16, 1, decor, seed);
        let (_, batch) = random_batch(&cat, 2, &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let loss = |g: &mut Graph<f64>| m.loss(g, &batch, &mut Dropout::off());
        let opts = GradCheckOptions {
            max_probes_per_input: Some(6),
            ..GradCheckOptions::default()
        };
        let report = grad_check("recommender", &m.store, loss, &opts).unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }
}

#[test]
fn incremental_steps_match_teacher_forcing() {
    let cat = catalog(50, 14);
    let m: RecommenderModel<f64> = model(16, 2, DecorConfig::default(), 15);
    let (seqs, _) = random_batch(&cat, 3, &mut ChaCha8Rng::seed_from_u64(16));
    let v = m.vocab.size();
    let hist = &seqs[0].history;
    // Several beams sharing one history, each with a different target.
    let refs: Vec<TokenizedSequence> = seqs
        .iter()
        .map(|s| TokenizedSequence {
            history: hist.clone(),
            target: s.target.clone(),
        })
        .collect();
    let batch = Batch::new(&refs.iter().collect::<Vec<_>>(), &m.vocab).unwrap();
    let full = logits_of(&m, &batch, EmbeddingMode::Composed);
    for t in 0..=M + 1 {
        let mut g = Graph::inference(&m.store);
        let ctx = m.encode_user(&mut g, hist).unwrap();
        let prefixes: Vec<usize> = refs.iter().flat_map(|s| s.target[..t].iter().copied()).collect();
        let step = m.step_logits(&mut g, &ctx, &prefixes, refs.len()).unwrap();
        let step = g.value(step).to_f64_vec();
        for b in 0..refs.len() {
            let s = (b * (M + 2) + t) * v;
            for (x, y) in step[b * v..(b + 1) * v].iter().zip(&full[s..s + v]) {
                assert!((x - y).abs() <= 1e-9, "step {t} beam {b}: {x} vs {y}");
            }
        }
    }
}

/// Greedy constrained decoding driven by full teacher-forced passes.
fn greedy_oracle(m: &RecommenderModel<f64>, trie: &SemanticTrie, hist: &[usize]) -> (Vec<usize>, f64) {
    let v = m.vocab.size();
    let mut node = SemanticTrie::ROOT;
    let mut tokens: Vec<usize> = Vec::new();
    let mut score = 0.0;
    for t in 0..trie.depth() {
        // Fill the unknown suffix with any valid path; causality makes it irrelevant.
        let mut filler = tokens.clone();
        let mut n = node;
        while filler.len() < trie.depth() {
            let (tok, child) = trie.children(n)[0];
            filler.push(tok);
            n = child;
        }
        filler.push(m.vocab.eos());
        let seq = TokenizedSequence {
            history: hist.to_vec(),
            target: filler,
        };
        let batch = Batch::new(&[&seq], &m.vocab).unwrap();
        let logits = logits_of(m, &batch, EmbeddingMode::Composed);
        let row = &logits[t * v..(t + 1) * v];
        let children = trie.children(node);
        let lps = restricted_log_softmax(row, children);
        let mut best = 0;
        for i in 1..children.len() {
            if lps[i] > lps[best] {
                best = i;
            }
        }
        tokens.push(children[best].0);
        node = children[best].1;
        score += lps[best];
    }
    (tokens, score)
}

#[test]
fn beam_of_one_is_greedy() {
    let cat = catalog(70, 17);
    let trie = SemanticTrie::build(&cat).unwrap();
    let m: RecommenderModel<f64> = model(16, 1, DecorConfig::default(), 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..5 {
        let (seqs, _) = random_batch(&cat, 1, &mut rng);
        let got = generate(&m, &trie, &seqs[0].history, 1, 1).unwrap();
        let (tokens, score) = greedy_oracle(&m, &trie, &seqs[0].history);
        assert_eq!(got[0].item, trie.lookup(&tokens).unwrap());
        assert!((got[0].score - score).abs() <= 1e-9);
    }
}

#[test]
fn beam_results_are_valid_sorted_and_monotone() {
    let cat = catalog(120, 20);
    let trie = SemanticTrie::build(&cat).unwrap();
    let m: RecommenderModel<f32> = model(16, 1, DecorConfig::default(), 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..5 {
        let (seqs, _) = random_batch(&cat, 1, &mut rng);
        let mut prev = f64::NEG_INFINITY;
        for beam in [1, 2, 5, 10, 20] {
            let recs = generate(&m, &trie, &seqs[0].history, beam, 1.min(beam)).unwrap();
            assert!(recs[0].score >= prev - 1e-6, "beam {beam}: {} < {prev}", recs[0].score);
            prev = recs[0].score;
        }
        let recs = generate(&m, &trie, &seqs[0].history, 20, 10).unwrap();
        assert_eq!(recs.len(), 10);
        let mut items: Vec<&str> = recs.iter().map(|r| r.item.as_str()).collect();
        assert!(items.iter().all(|i| cat.contains(i)));
        assert!(recs
            .windows(2)
            .all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].item < w[1].item)));
        items.sort();
        items.dedup();
        assert_eq!(items.len(), 10);
    }
}

#[test]
fn single_item_corpus_has_probability_one() {
    let cat = catalog(1, 23);
    let trie = SemanticTrie::build(&cat).unwrap();
    let m: RecommenderModel<f64> = model(16, 1, DecorConfig::default(), 24);
    let hist = cat.tokens("item000").unwrap().to_vec();
    let recs = generate(&m, &trie, &hist, 3, 1).unwrap();
    assert_eq!(recs[0].item, "item000");
    assert!(recs[0].score.abs() < 1e-12);
    assert!(matches!(
        generate(&m, &trie, &hist, 3, 2),
        Err(crate::Error::BeamExhausted { found: 1, wanted: 2 })
    ));
    assert!(generate(&m, &trie, &hist, 1, 2).is_err());
}

#[test]
fn binding_a_store_reproduces_the_model() {
    let cat = catalog(30, 25);
    let m: RecommenderModel<f64> = model(16, 1, DecorConfig::default(), 26);
    let again = RecommenderModel::bind(m.config.clone(), m.decor().clone(), m.vocab, m.store.clone()).unwrap();
    let (_, batch) = random_batch(&cat, 2, &mut ChaCha8Rng::seed_from_u64(27));
    assert_eq!(
        logits_of(&m, &batch, EmbeddingMode::Composed),
        logits_of(&again, &batch, EmbeddingMode::Composed)
    );
}

#[test]
fn rejects_width_mismatch() {
    let books = Tensor::<f32>::zeros(&[M, K, 8]);
    let r = RecommenderModel::new(
        toy_config(16, 1),
        DecorConfig::default(),
        Vocab::new(M, K, C),
        &books,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(matches!(r, Err(crate::Error::Config(_))));
}

mod training {
    use super::*;
    use crate::datasets::{leave_one_out_split, Splits};

    /// Users cycle through a fixed item order, so the next item is learnable.
    fn cyclic_data(cat: &Catalog, users: usize, seed: u64) -> Splits {
        let ids: Vec<String> = cat.iter().map(|(i, _)| i.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..users)
            .map(|u| {
                let start = rng.random_range(0..ids.len());
                let len = rng.random_range(6..10);
                (
                    format!("u{u:03}"),
                    (0..len).map(|t| ids[(start + t) % ids.len()].clone()).collect(),
                )
            })
            .collect();
        leave_one_out_split(&crate::datasets::InteractionDataset::new(data)).unwrap()
    }

    fn trainer_config(m: &mut RecommenderModel<f32>, epochs: usize, lr: f64) {
        m.config.max_epochs = epochs;
        m.config.learning_rate = lr;
        m.config.batch_size = 32;
        m.config.beam_size = 10;
        m.config.early_stop_patience = 100;
        m.config.dropout = 0.1;
    }

    fn run(
        cat: &Catalog,
        trie: &SemanticTrie,
        splits: &Splits,
        epochs: usize,
        lr: f64,
    ) -> (RecommenderModel<f32>, RecommenderModel<f32>, TrainState<f32>) {
        let mut m: RecommenderModel<f32> = model(16, 1, DecorConfig::default(), 40);
        trainer_config(&mut m, epochs, lr);
        let init = m.clone();
        let data = TrainData {
            catalog: cat,
            trie,
            train: &splits.train,
            valid: &splits.valid,
        };
        let mut t = Trainer::new(m, data).unwrap();
        t.fit(None).unwrap();
        let (best, state) = t.into_best();
        (init, best, state)
    }

    #[test]
    fn loss_falls_and_frozen_table_stays_put() {
        let cat = catalog(24, 41);
        let trie = SemanticTrie::build(&cat).unwrap();
        let splits = cyclic_data(&cat, 60, 42);
        let (init, _, state) = run(&cat, &trie, &splits, 12, 0.01);
        let log = &state.progress.log;
        assert_eq!(log.len(), 12);
        assert!(log[11].train_loss < 0.6 * log[0].train_loss, "{log:?}");
        let e_pre = init.frozen_table();
        let last = state.best.as_ref().unwrap();
        assert_eq!(init.store.tensor(e_pre).data(), last.tensor(e_pre).data());
        let collab = init.store.id("fusion.e_collab").unwrap();
        assert_ne!(init.store.tensor(collab).data(), last.tensor(collab).data());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cat = catalog(24, 43);
        let trie = SemanticTrie::build(&cat).unwrap();
        let splits = cyclic_data(&cat, 30, 44);
        let mut m: RecommenderModel<f32> = model(16, 1, DecorConfig::default(), 45);
        trainer_config(&mut m, 3, 0.0);
        m.config.dropout = 0.0;
        m.config.batch_size = 10_000;
        let init = m.clone();
        let data = TrainData {
            catalog: &cat,
            trie: &trie,
            train: &splits.train,
            valid: &splits.valid,
        };
        let mut t = Trainer::new(m, data).unwrap();
        t.fit(None).unwrap();
        for (id, p) in init.store.iter() {
            assert_eq!(p.tensor.data(), t.model.store.tensor(id).data(), "{}", p.name);
        }
        let log = &t.state.progress.log;
        for r in log {
            assert!((r.train_loss - log[0].train_loss).abs() <= 1e-5 * log[0].train_loss);
            assert_eq!(r.val_ndcg10, log[0].val_ndcg10);
        }
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let cat = catalog(24, 46);
        let trie = SemanticTrie::build(&cat).unwrap();
        let splits = cyclic_data(&cat, 30, 47);
        let (_, best_a, a) = run(&cat, &trie, &splits, 4, 0.005);
        let (_, _, b) = run(&cat, &trie, &splits, 4, 0.005);
        assert_eq!(a.progress, b.progress);

        let mut m: RecommenderModel<f32> = model(16, 1, DecorConfig::default(), 40);
        trainer_config(&mut m, 4, 0.005);
        let data = || TrainData {
            catalog: &cat,
            trie: &trie,
            train: &splits.train,
            valid: &splits.valid,
        };
        let mut t = Trainer::new(m, data()).unwrap();
        t.fit(Some(2)).unwrap();
        assert_eq!(t.state.progress.epochs_done, 2);
        let (model_now, state_now) = (t.model.clone(), t.state.clone());
        drop(t);
        let mut resumed = Trainer::resume(model_now, state_now, data()).unwrap();
        resumed.fit(None).unwrap();
        let (best_c, c) = resumed.into_best();
        assert_eq!(c.progress, a.progress);
        for (id, p) in best_a.store.iter() {
            assert_eq!(p.tensor.data(), best_c.store.tensor(id).data());
        }
    }

    #[test]
    fn early_stopping_and_budget_knobs() {
        let cat = catalog(24, 48);
        let trie = SemanticTrie::build(&cat).unwrap();
        let splits = cyclic_data(&cat, 30, 49);
        let mut m: RecommenderModel<f32> = model(16, 1, DecorConfig::default(), 50);
        trainer_config(&mut m, 50, 0.0);
        m.config.early_stop_patience = 2;
        m.config.examples_per_user = Some(1);
        m.config.val_users = Some(5);
        let data = TrainData {
            catalog: &cat,
            trie: &trie,
            train: &splits.train,
            valid: &splits.valid,
        };
        let mut t = Trainer::new(m, data).unwrap();
        assert_eq!(t.steps_per_epoch(), 1);
        t.fit(None).unwrap();
        // Flat validation: best at epoch 1, then two non-improving epochs.
        assert_eq!(t.state.progress.epochs_done, 3);
        assert_eq!(t.state.progress.best_epoch, Some(1));
    }

    #[test]
    fn nan_loss_is_divergence() {
        let cat = catalog(24, 51);
        let trie = SemanticTrie::build(&cat).unwrap();
        let splits = cyclic_data(&cat, 10, 52);
        let mut m: RecommenderModel<f32> = model(16, 1, DecorConfig::default(), 53);
        trainer_config(&mut m, 2, 0.01);
        let head = m.store.id("output.weight").unwrap();
        m.store.tensor_mut(head).data_mut()[0] = f32::NAN;
        let data = TrainData {
            catalog: &cat,
            trie: &trie,
            train: &splits.train,
            valid: &splits.valid,
        };
        let mut t = Trainer::new(m, data).unwrap();
        assert!(matches!(t.fit(None), Err(crate::Error::Divergence(_))));
    }
}
