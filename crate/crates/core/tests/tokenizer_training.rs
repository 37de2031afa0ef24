use decor_core::datasets::{generate_synthetic, SyntheticSpec};
use decor_core::semantic_indexer::{assign_semantic_ids, train_rqvae, RqVaeConfig};

#[test]
fn reconstruction_loss_halves_on_synthetic_items() {
    let spec = SyntheticSpec {
        n_items: 1000,
        n_users: 10,
        ..Default::default()
    };
    let corpus = generate_synthetic(&spec).unwrap();
    let config = RqVaeConfig {
        levels: 3,
        codebook_size: 32,
        input_dim: spec.embed_dim,
        epochs: 200,
        ..Default::default()
    };
    let t = std::time::Instant::now();
    let (model, log) = train_rqvae(&corpus.items, &config).unwrap();
    eprintln!("trained in {:?}", t.elapsed());
    let first = log.epochs.first().unwrap().recon;
    let last = log.epochs.last().unwrap().recon;
    eprintln!("recon {first} -> {last}; usage {:?}", log.epochs.last().unwrap().usage);
    assert!(last < 0.5 * first, "recon {first} -> {last}");

    let sids = assign_semantic_ids(&corpus.items, &model).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    assert!(sids.values().all(|s| seen.insert(s.clone())));
    assert_eq!(sids.len(), 1000);
}
