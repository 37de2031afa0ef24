//! Pipeline stages shared by the binary and integration tests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use decor_core::datasets::{
    filter_5core, generate_synthetic, ingest_interactions, ingest_items, leave_one_out_split, Example, Splits,
    SyntheticCorpus, SyntheticSpec,
};
use decor_core::decor_embedding::Vocab;
use decor_core::evaluation::{self, EvalReport, ModelRanker, UserRanking, UtilizationReport};
use decor_core::numerics::Tensor;
use decor_core::recommender::{
    tokenize_example, Catalog, RecommenderModel, SemanticTrie, TokenizedSequence, TrainData, TrainState, Trainer,
};
use decor_core::semantic_indexer::{
    assign_semantic_ids, export_codebooks, read_semantic_ids, train_rqvae, write_semantic_ids, RqVaeModel, SemanticId,
    TrainingLog,
};
use decor_core::{Checkpoint, Error, PipelineConfig, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} path given (flag or data.{what})")))
}

pub fn synth(spec: &SyntheticSpec, out: &Path) -> Result<SyntheticCorpus> {
    let corpus = generate_synthetic(spec)?;
    corpus.write(out)?;
    Ok(corpus)
}

#[derive(Debug, Serialize)]
pub struct TokenizerSummary {
    #[serde(rename = "L_RECON")]
    pub recon: f64,
    #[serde(rename = "L_RQ")]
    pub rq: f64,
    pub epochs: usize,
    pub codebook_usage: Vec<f64>,
}

/// Trains the tokenizer on `config.data.items`. The item file fixes the
/// input width.
pub fn train_tokenizer(config: &mut PipelineConfig) -> Result<(RqVaeModel<f32>, TrainingLog, TokenizerSummary)> {
    let items = ingest_items(required(&config.data.items, "items")?)?;
    if config.tokenizer.input_dim != items.dim {
        log::info!("tokenizer input_dim set to item width {}", items.dim);
        config.tokenizer.input_dim = items.dim;
    }
    config.tokenizer.validate()?;
    let (model, log) = train_rqvae(&items, &config.tokenizer)?;
    let (recon, rq, usage) = match log.epochs.last() {
        Some(e) => (e.recon, e.rq, e.usage.clone()),
        None => {
            let (mut recon, mut rq) = (0.0, 0.0);
            for i in 0..items.len() {
                let (r, q, _) = model.rqvae_losses(items.row(i))?;
                recon += r / items.len() as f64;
                rq += q / items.len() as f64;
            }
            (recon, rq, Vec::new())
        }
    };
    let summary = TokenizerSummary {
        recon,
        rq,
        epochs: log.epochs.len(),
        codebook_usage: usage,
    };
    Ok((model, log, summary))
}

pub fn tokenize(ckpt: &Path, items: &Path, out: &Path) -> Result<BTreeMap<String, SemanticId>> {
    let (_, model) = Checkpoint::load(ckpt)?.into_tokenizer()?;
    let items = ingest_items(items)?;
    let sids = assign_semantic_ids(&items, &model)?;
    write_semantic_ids(out, &sids)?;
    Ok(sids)
}

/// Everything the recommender stages read from disk.
pub struct RecData {
    pub vocab: Vocab,
    pub catalog: Catalog,
    pub trie: SemanticTrie,
    pub splits: Splits,
    pub codebooks: Tensor<f32>,
}

impl RecData {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let (tok_config, tokenizer) =
            Checkpoint::load(required(&config.data.tokenizer_checkpoint, "tokenizer_checkpoint")?)?.into_tokenizer()?;
        let t = &tok_config.tokenizer;
        let vocab = Vocab::new(t.levels, t.codebook_size, t.collision_vocab);
        let sids = read_semantic_ids(required(&config.data.sids, "sids")?)?;
        let raw = ingest_interactions(required(&config.data.interactions, "interactions")?)?;
        let missing: Vec<&str> = raw.items().into_iter().filter(|i| !sids.contains_key(*i)).collect();
        if !missing.is_empty() {
            return Err(Error::Universe(format!(
                "{} interaction items have no semantic id (first: {})",
                missing.len(),
                missing[0]
            )));
        }
        if let Some(bad) = sids
            .values()
            .find(|s| s.codes.len() != t.levels || s.codes.iter().any(|&c| c >= t.codebook_size))
        {
            return Err(Error::Universe(format!(
                "semantic id {bad:?} does not fit the tokenizer"
            )));
        }
        let splits = leave_one_out_split(&filter_5core(&raw)?)?;
        let catalog = Catalog::new(&sids, vocab)?;
        let trie = SemanticTrie::build(&catalog)?;
        Ok(RecData {
            vocab,
            catalog,
            trie,
            splits,
            codebooks: export_codebooks(&tokenizer),
        })
    }

    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "test" => Ok(&self.splits.test),
            "val" | "valid" => Ok(&self.splits.valid),
            other => Err(Error::Config(format!("unknown split `{other}` (test|val)"))),
        }
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            catalog: &self.catalog,
            trie: &self.trie,
            train: &self.splits.train,
            valid: &self.splits.valid,
        }
    }
}

/// Freshly initialized recommender for `config`.
pub fn init_recommender(config: &PipelineConfig, data: &RecData) -> Result<RecommenderModel<f32>> {
    config.recommender.validate()?;
    config.decor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    RecommenderModel::new(
        config.recommender.clone(),
        config.decor.clone(),
        data.vocab,
        &data.codebooks,
        &mut rng,
    )
}

pub struct TrainOutcome {
    pub model: RecommenderModel<f32>,
    pub state: TrainState<f32>,
    pub finished: bool,
}

/// Trains from scratch or continues `resume`, for at most `max_epochs`
/// further epochs. A finished run returns its best-validation parameters.
pub fn train_recommender(
    config: &PipelineConfig,
    data: &RecData,
    resume: Option<(RecommenderModel<f32>, TrainState<f32>)>,
    max_epochs: Option<usize>,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some((model, state)) => Trainer::resume(model, state, data.train_data())?,
        None => Trainer::new(init_recommender(config, data)?, data.train_data())?,
    };
    trainer.fit(max_epochs)?;
    let finished = trainer.is_finished();
    let (model, state) = if finished {
        trainer.into_best()
    } else {
        (trainer.model, trainer.state)
    };
    Ok(TrainOutcome { model, state, finished })
}

pub fn evaluate_split(
    model: &RecommenderModel<f32>,
    data: &RecData,
    split: &str,
    beam_size: usize,
) -> Result<(EvalReport, Vec<UserRanking>)> {
    let ranker = ModelRanker {
        model,
        catalog: &data.catalog,
        trie: &data.trie,
        beam_size,
    };
    evaluation::evaluate(&ranker, data.split(split)?)
}

pub fn contexts(examples: &[Example], data: &RecData, max_items: usize) -> Result<Vec<TokenizedSequence>> {
    examples
        .iter()
        .map(|e| tokenize_example(e, &data.catalog, max_items))
        .collect()
}

/// Utilization over validation contexts, plus an optional embedding dump of
/// `dump = (1-based level, path)`.
pub fn analyze(
    model: &RecommenderModel<f32>,
    data: &RecData,
    dump: Option<(usize, &Path)>,
) -> Result<UtilizationReport> {
    let ctx = contexts(&data.splits.valid, data, model.config.max_history_items)?;
    if let Some((level, path)) = dump {
        if level == 0 || level > data.vocab.levels {
            return Err(Error::Config(format!(
                "level {level} outside 1..={}",
                data.vocab.levels
            )));
        }
        let mut w = BufWriter::new(File::create(path)?);
        evaluation::dump_embeddings(model, level - 1, &ctx, &mut w)?;
        w.flush()?;
    }
    evaluation::utilization(model, &ctx, &data.catalog, model.config.batch_size)
}
