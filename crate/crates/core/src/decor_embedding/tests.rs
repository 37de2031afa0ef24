use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check, GradCheckOptions};

const D: usize = 8;

fn vocab() -> Vocab {
    Vocab::new(2, 4, 3)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn setup(seed: u64, config: DecorConfig) -> (ParamStore<f64>, DecorEmbedding) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let pre = random(&mut rng, &[2, 4, D]);
    let emb = DecorEmbedding::new(&mut store, vocab(), &pre, config, &mut rng).unwrap();
    (store, emb)
}

fn with_alpha(emb: &DecorEmbedding, alpha: f64) -> DecorEmbedding {
    let mut e = emb.clone();
    e.config.alpha = alpha;
    e
}

// ---- plain-loop reference implementation ----------------------------------------

fn matvec(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.shape()[0])
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn layer_norm_ref(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
        .collect()
}

fn softmax_ref(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn fused_ref(store: &ParamStore<f64>, emb: &DecorEmbedding, token: usize) -> Vec<f64> {
    let t = &emb.table;
    let p = matvec(store.tensor(t.w_pre), store.tensor(t.e_pre).row(token));
    let p = layer_norm_ref(&p, store.tensor(t.ln_pre.0).data(), store.tensor(t.ln_pre.1).data());
    let c = matvec(store.tensor(t.w_collab), store.tensor(t.e_collab).row(token));
    let c = layer_norm_ref(
        &c,
        store.tensor(t.ln_collab.0).data(),
        store.tensor(t.ln_collab.1).data(),
    );
    let cat: Vec<f64> = p.into_iter().chain(c).collect();
    matvec(store.tensor(t.w_fuse), &cat)
}

fn compose_ref(store: &ParamStore<f64>, emb: &DecorEmbedding, token: usize, u: &[f64]) -> Vec<f64> {
    let k = emb.vocab.codebook_size;
    let level = token / k;
    let head = emb.head(level);
    let q = matvec(store.tensor(head.w_q), u);
    let cands: Vec<Vec<f64>> = (0..k).map(|c| fused_ref(store, emb, level * k + c)).collect();
    let scores: Vec<f64> = cands
        .iter()
        .map(|e| {
            matvec(store.tensor(head.w_k), e)
                .iter()
                .zip(&q)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let w = softmax_ref(&scores);
    let stat = fused_ref(store, emb, token);
    let a = emb.config.alpha;
    (0..D)
        .map(|j| a * (0..k).map(|c| w[c] * cands[c][j]).sum::<f64>() + (1.0 - a) * stat[j])
        .collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

// ---- fusion ---------------------------------------------------------------------

#[test]
fn fusion_matches_reference_and_specials_bypass() {
    let (store, emb) = setup(1, DecorConfig::default());
    for token in 0..8 {
        assert_close(
            &emb.fuse_token(&store, token).unwrap(),
            &fused_ref(&store, &emb, token),
            1e-12,
        );
    }
    let bos = emb.vocab.bos();
    assert_eq!(
        emb.fuse_token(&store, bos).unwrap(),
        store.tensor(emb.table.special).row(bos - 8)
    );
    assert!(matches!(emb.fuse_token(&store, 99), Err(Error::UnknownToken(99))));
}

#[test]
fn zero_fusion_matrix_gives_zero() {
    let (mut store, emb) = setup(2, DecorConfig::default());
    store.set(emb.table.w_fuse, Tensor::zeros(&[D, 2 * D])).unwrap();
    assert!(emb.fuse_token(&store, 3).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn identity_projections_give_normalized_pretrained_row() {
    let (mut store, emb) = setup(3, DecorConfig::default());
    store.set(emb.table.w_pre, Tensor::eye(D)).unwrap();
    store.set(emb.table.w_collab, Tensor::eye(D)).unwrap();
    let mut fuse = vec![0.0; D * 2 * D];
    for i in 0..D {
        fuse[i * 2 * D + i] = 1.0;
    }
    store
        .set(emb.table.w_fuse, Tensor::new(vec![D, 2 * D], fuse).unwrap())
        .unwrap();
    let row = store.tensor(emb.table.e_pre).row(5).to_vec();
    let expect = layer_norm_ref(&row, &[1.0; D], &[0.0; D]);
    assert_close(&emb.fuse_token(&store, 5).unwrap(), &expect, 1e-10);
}

#[test]
fn fusion_gradients_skip_frozen_table() {
    let (store, emb) = setup(4, DecorConfig::default());
    let tokens = [0, 3, 5, 7, emb.vocab.collision(1)];
    let weights = random(&mut ChaCha8Rng::seed_from_u64(40), &[tokens.len(), D]);
    let loss = |g: &mut Graph<f64>| {
        let fused = emb.fused_codes(g)?;
        let table = emb.token_table(g, fused)?;
        let x = emb.lookup(g, table, &tokens)?;
        let w = g.constant(weights.clone());
        let y = g.mul(x, w)?;
        let y = g.tanh(y);
        Ok(g.sum(y))
    };
    let mut g = Graph::with_params(&store);
    let l = loss(&mut g).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.param(emb.table.e_pre).is_none());
    for id in [
        emb.table.e_collab,
        emb.table.w_pre,
        emb.table.w_collab,
        emb.table.w_fuse,
        emb.table.special,
    ] {
        assert!(grads.param(id).unwrap().iter().any(|&x| x != 0.0));
    }
    drop(g);
    let report = grad_check("fuse_token", &store, loss, &GradCheckOptions::default()).unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

// ---- pooling --------------------------------------------------------------------

fn random_seq(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..D).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn pool_weights_of(store: &ParamStore<f64>, emb: &DecorEmbedding, seq: &[Vec<f64>]) -> Vec<f64> {
    let mut g = Graph::inference(store);
    let h = g.constant(Tensor::new(vec![1, seq.len(), D], seq.concat()).unwrap());
    let w = emb.pool_weights(&mut g, h, &vec![true; seq.len()], 1).unwrap();
    g.value(w).data().to_vec()
}

fn mlp_ctx_ref(store: &ParamStore<f64>, emb: &DecorEmbedding, x: &[f64]) -> Vec<f64> {
    let p = &emb.pooler;
    let h: Vec<f64> = matvec(store.tensor(p.mlp_hidden.0), x)
        .iter()
        .zip(store.tensor(p.mlp_hidden.1).data())
        .map(|(a, b)| (a + b).tanh())
        .collect();
    matvec(store.tensor(p.mlp_out.0), &h)
        .iter()
        .zip(store.tensor(p.mlp_out.1).data())
        .map(|(a, b)| a + b)
        .collect()
}

#[test]
fn singleton_and_symmetric_pooling() {
    let (store, emb) = setup(5, DecorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let one = random_seq(&mut rng, 1);
    assert_eq!(pool_weights_of(&store, &emb, &one), vec![1.0]);
    assert_close(
        &emb.pool_context(&store, &one).unwrap(),
        &mlp_ctx_ref(&store, &emb, &one[0]),
        1e-12,
    );
    let twins = vec![one[0].clone(), one[0].clone()];
    assert_eq!(pool_weights_of(&store, &emb, &twins), vec![0.5, 0.5]);
    assert!(matches!(emb.pool_context(&store, &[]), Err(Error::Empty(_))));
}

#[test]
fn pooling_is_order_free_and_normalized() {
    let (store, emb) = setup(6, DecorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for n in 2..9 {
        let seq = random_seq(&mut rng, n);
        let w = pool_weights_of(&store, &emb, &seq);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6 && w.iter().all(|&x| x >= 0.0));
        let mut rev = seq.clone();
        rev.rotate_left(1);
        rev.reverse();
        assert_close(
            &emb.pool_context(&store, &seq).unwrap(),
            &emb.pool_context(&store, &rev).unwrap(),
            1e-12,
        );
    }
}

#[test]
fn masked_pooling_per_position() {
    let (store, emb) = setup(7, DecorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let seq = random_seq(&mut rng, 3);
    let mut g = Graph::inference(&store);
    let h = g.constant(Tensor::new(vec![1, 3, D], seq.concat()).unwrap());
    // position 0 sees the first element, position 1 all three
    let mask = [true, false, false, true, true, true];
    let u = emb.pool(&mut g, h, &mask, 2).unwrap();
    let got = g.value(u).data().to_vec();
    assert_close(&got[..D], &emb.pool_context(&store, &seq[..1]).unwrap(), 1e-12);
    assert_close(&got[D..], &emb.pool_context(&store, &seq).unwrap(), 1e-12);
    assert!(emb.pool(&mut g, h, &[false, false, false], 1).is_err());
}

// ---- composition ------------------------------------------------------------------

#[test]
fn composition_matches_reference() {
    for per_level_heads in [false, true] {
        let config = DecorConfig {
            alpha: 0.55,
            per_level_heads,
            ..Default::default()
        };
        let (store, emb) = setup(8, config);
        let u: Vec<f64> = (0..D).map(|i| (i as f64 * 0.3).sin()).collect();
        for token in 0..8 {
            assert_close(
                &emb.compose_token(&store, token, &u).unwrap(),
                &compose_ref(&store, &emb, token, &u),
                1e-10,
            );
        }
    }
}

#[test]
fn alpha_extremes_and_affinity() {
    let (mut store, emb) = setup(9, DecorConfig::default());
    let u: Vec<f64> = (0..D).map(|i| i as f64 * 0.1 - 0.4).collect();
    let token = 6;
    let stat = emb.fuse_token(&store, token).unwrap();
    assert_eq!(with_alpha(&emb, 0.0).compose_token(&store, token, &u).unwrap(), stat);

    let e0 = with_alpha(&emb, 0.0).compose_token(&store, token, &u).unwrap();
    let e1 = with_alpha(&emb, 1.0).compose_token(&store, token, &u).unwrap();
    let eh = with_alpha(&emb, 0.5).compose_token(&store, token, &u).unwrap();
    for j in 0..D {
        assert!((eh[j] - 0.5 * (e0[j] + e1[j])).abs() <= 1e-6);
    }

    store.set(emb.head(1).w_q, Tensor::zeros(&[D, D])).unwrap();
    let got = with_alpha(&emb, 1.0).compose_token(&store, token, &u).unwrap();
    let mean: Vec<f64> = (0..D)
        .map(|j| (4..8).map(|t| fused_ref(&store, &emb, t)[j]).sum::<f64>() / 4.0)
        .collect();
    assert_close(&got, &mean, 1e-12);
    assert!(matches!(
        emb.compose_token(&store, emb.vocab.bos(), &u),
        Err(Error::NotComposable(_))
    ));
}

#[test]
fn composed_embedding_stays_near_static() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..20 {
        let (store, emb) = setup(
            100 + seed,
            DecorConfig {
                alpha: rng.random_range(0.0..1.0),
                ..Default::default()
            },
        );
        let u: Vec<f64> = (0..D).map(|_| rng.random_range(-2.0..2.0)).collect();
        let token = rng.random_range(0..8);
        let level = token / 4;
        let out = emb.compose_token(&store, token, &u).unwrap();
        let stat = fused_ref(&store, &emb, token);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let bound = (0..4)
            .map(|c| dist(&fused_ref(&store, &emb, level * 4 + c), &stat))
            .fold(0.0, f64::max);
        assert!(dist(&out, &stat) <= emb.config.alpha * bound + 1e-12);
    }
}

#[test]
fn attention_is_uniform_at_zero_query_and_monotone_in_score() {
    let (mut store, emb) = setup(11, DecorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let cands = random(&mut rng, &[6, D]);
    let u: Vec<f64> = (0..D).map(|_| rng.random_range(-1.0..1.0)).collect();
    let head = emb.head(0);
    let w = emb.attention_weights(&store, head, &u, &cands).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let q = matvec(store.tensor(head.w_q), &u);
    let scores: Vec<f64> = (0..6)
        .map(|c| {
            matvec(store.tensor(head.w_k), cands.row(c))
                .iter()
                .zip(&q)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    for a in 0..6 {
        for b in 0..6 {
            if scores[a] > scores[b] {
                assert!(w[a] > w[b]);
            }
        }
    }
    store.set(head.w_q, Tensor::zeros(&[D, D])).unwrap();
    let w = emb.attention_weights(&store, head, &u, &cands).unwrap();
    assert!(w.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn bos_composition() {
    let config = DecorConfig {
        bos_queries: 1,
        alpha: 0.3,
        ..Default::default()
    };
    let (store, emb) = setup(12, config);
    let u = vec![0.2; D];
    let stat = store.tensor(emb.table.special).row(emb.vocab.bos() - 8).to_vec();
    let q = store.tensor(emb.bos_queries().unwrap()).row(0).to_vec();
    let expect: Vec<f64> = (0..D).map(|j| 0.3 * q[j] + 0.7 * stat[j]).collect();
    assert_close(&emb.compose_bos_vector(&store, &u).unwrap(), &expect, 1e-12);
    assert_eq!(with_alpha(&emb, 0.0).compose_bos_vector(&store, &u).unwrap(), stat);

    let (store, emb) = setup(
        13,
        DecorConfig {
            bos_queries: 0,
            ..Default::default()
        },
    );
    let stat = store.tensor(emb.table.special).row(emb.vocab.bos() - 8).to_vec();
    assert_eq!(emb.compose_bos_vector(&store, &u).unwrap(), stat);

    let (store, emb) = setup(
        14,
        DecorConfig {
            bos_queries: 32,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(140);
    for _ in 0..10 {
        let u: Vec<f64> = (0..D).map(|_| rng.random_range(-3.0..3.0)).collect();
        let qs = store.tensor(emb.bos_queries().unwrap()).clone();
        let w = emb.attention_weights(&store, emb.bos_head(), &u, &qs).unwrap();
        assert_eq!(w.len(), 32);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn history_composition_leaves_specials_static() {
    let (store, emb) = setup(
        15,
        DecorConfig {
            alpha: 0.5,
            ..Default::default()
        },
    );
    let v = emb.vocab;
    let tokens = [
        v.code(0, 1),
        v.code(1, 2),
        v.collision(0),
        v.pad(),
        v.code(0, 3),
        v.code(1, 0),
        v.collision(2),
        v.pad(),
    ];
    let mut g = Graph::inference(&store);
    let fused = emb.fused_codes(&mut g).unwrap();
    let table = emb.token_table(&mut g, fused).unwrap();
    let stat = emb.lookup(&mut g, table, &tokens).unwrap();
    let stat = g.reshape(stat, &[2, 4, D]).unwrap();
    let u = g.constant(random(&mut ChaCha8Rng::seed_from_u64(150), &[2, D]));
    let out = emb.compose_history(&mut g, fused, stat, u, &tokens).unwrap();
    let (o, s) = (g.value(out).data().to_vec(), g.value(stat).data().to_vec());
    for (i, &t) in tokens.iter().enumerate() {
        let (a, b) = (&o[i * D..(i + 1) * D], &s[i * D..(i + 1) * D]);
        if v.level_of(t).is_some() {
            assert!(a != b);
            let ub = g.value(u).row(i / 4).to_vec();
            assert_close(a, &compose_ref(&store, &emb, t, &ub), 1e-10);
        } else {
            assert_close(a, b, 1e-15);
        }
    }
}

// ---- gradient checks ----------------------------------------------------------------

#[test]
fn composed_path_gradients() {
    for seed in 0..20 {
        let config = DecorConfig {
            alpha: 0.4,
            bos_queries: 3,
            per_level_heads: seed % 2 == 1,
            ..Default::default()
        };
        let (mut store, emb) = setup(200 + seed, config);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let hist = store.add_frozen("hist", random(&mut rng, &[2, 3, D]));
        let target = random(&mut rng, &[2, D]);
        let token = rng.random_range(0..8);
        let level = token / 4;
        let mask = [true, true, false, true, true, true];
        let loss = |g: &mut Graph<f64>| {
            let fused = emb.fused_codes(g)?;
            let table = emb.token_table(g, fused)?;
            let h = g.param(hist);
            let u = emb.pool(g, h, &mask, 1)?;
            let u = g.reshape(u, &[2, D])?;
            let stat = emb.lookup(g, table, &[token, token])?;
            let cands = emb.level_candidates(g, fused, level)?;
            let c = emb.compose(g, emb.head(level), u, cands, stat)?;
            let (bos, _) = emb.compose_bos(g, table, u)?;
            let both = g.add(c.embedding, bos)?;
            let t = g.constant(target.clone());
            let diff = g.sub(both, t)?;
            Ok(g.sum_squares(diff))
        };
        let report = grad_check(
            "pool_context+compose_token+compose_bos",
            &store,
            loss,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-5), "seed {seed}: {report:?}");
    }
}

#[test]
fn split_pooling_matches_concatenated() {
    let (store, emb) = setup(16, DecorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(160);
    let hist = random(&mut rng, &[1, 3, D]);
    let pre = random(&mut rng, &[2, 2, D]);
    let mut g = Graph::inference(&store);
    let (hv, pv) = (g.constant(hist.clone()), g.constant(pre.clone()));
    // two positions: history only, then history + first prefix element
    let mask = [
        true, true, true, false, false, true, true, true, true, false, //
        true, true, true, false, false, true, true, true, true, false,
    ];
    let u = emb.pool_split(&mut g, hv, Some(pv), 2, &mask, 2).unwrap();
    let got = g.value(u).data().to_vec();
    for b in 0..2 {
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| hist.data()[i * D..(i + 1) * D].to_vec()).collect();
        let u0 = emb.pool_context(&store, &rows).unwrap();
        rows.push(pre.data()[(b * 2) * D..(b * 2 + 1) * D].to_vec());
        let u1 = emb.pool_context(&store, &rows).unwrap();
        assert_close(&got[(b * 2) * D..(b * 2 + 1) * D], &u0, 1e-12);
        assert_close(&got[(b * 2 + 1) * D..(b * 2 + 2) * D], &u1, 1e-12);
    }
}

#[test]
fn split_pooling_gradients() {
    let (mut store, emb) = setup(17, DecorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(170);
    let hist = store.add("hist", random(&mut rng, &[1, 3, D]));
    let pre = store.add("pre", random(&mut rng, &[2, 2, D]));
    let mask: Vec<bool> = (0..2 * 3 * 5).map(|i| i % 5 < 3 || (i % 5) - 3 < (i / 5) % 3).collect();
    let report = grad_check(
        "pool_context",
        &store,
        |g| {
            let (h, p) = (g.param(hist), g.param(pre));
            let u = emb.pool_split(g, h, Some(p), 2, &mask, 3)?;
            let u = g.tanh(u);
            Ok(g.sum(u))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}
