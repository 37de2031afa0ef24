//! `decor` command-line pipeline: synthetic data, tokenizer pretraining,
//! tokenization, recommender training, evaluation and analysis.

pub mod pipeline;

use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use decor_core::datasets::SyntheticSpec;
use decor_core::{Checkpoint, Error, PipelineConfig, Result};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "decor", version, about = "Generative recommendation over semantic IDs")]
pub struct Cli {
    /// Overrides the configured seed everywhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Pipeline configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set decor.alpha=0.4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (items, interactions, truth).
    Synth {
        /// SyntheticSpec JSON; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the residual-quantization tokenizer.
    TrainTokenizer {
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign semantic IDs to every item.
    Tokenize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sequence recommender.
    TrainRec {
        #[arg(long)]
        sids: Option<PathBuf>,
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        tokenizer_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (resumably) after this many epochs in this invocation.
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Full-corpus ranking metrics on a split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-user rankings as JSON Lines.
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Embedding-utilization report and optional embedding dump.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 1-based quantization level to dump.
        #[arg(long)]
        dump_embeddings: Option<usize>,
        /// Dump destination; defaults next to `--out`.
        #[arg(long)]
        dump_out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    PrintConfig,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::User { source, .. } => exit_code(source),
        Error::Io(_) | Error::Checkpoint(_) => 3,
        Error::Divergence(_) | Error::NonFinite(_) => 4,
        Error::CollisionOverflow { .. } => 5,
        Error::Universe(_) | Error::UnknownItem(_) => 6,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

fn fingerprint(config: &PipelineConfig) -> String {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    config.to_json().hash(&mut h);
    format!("{:016x}", h.finish())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs one command and returns the JSON document for stdout.
pub fn run(cli: &Cli) -> Result<Value> {
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::PrintConfig => Ok(serde_json::to_value(&config)?),
        Command::Synth { spec, out } => {
            let mut spec: SyntheticSpec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let corpus = pipeline::synth(&spec, out)?;
            Ok(json!({
                "items": corpus.items.len(),
                "users": corpus.interactions.users.len(),
                "interactions": corpus.interactions.num_interactions(),
                "out": out,
            }))
        }
        Command::TrainTokenizer { items, out } => {
            if let Some(p) = items {
                config.data.items = Some(p.clone());
            }
            let (model, log, summary) = pipeline::train_tokenizer(&mut config)?;
            Checkpoint::tokenizer(&config, &model).save(out)?;
            let mut v = serde_json::to_value(&summary)?;
            v["log"] = serde_json::to_value(&log)?;
            Ok(v)
        }
        Command::Tokenize { ckpt, items, out } => {
            let sids = pipeline::tokenize(ckpt, items, out)?;
            let unique: std::collections::BTreeSet<_> = sids.values().collect();
            Ok(json!({ "items": sids.len(), "unique_ids": unique.len(), "out": out }))
        }
        Command::TrainRec {
            sids,
            interactions,
            tokenizer_ckpt,
            out,
            resume,
            stop_after_epochs,
        } => {
            let resumed = match resume {
                Some(p) => {
                    let (cfg, model, state) = Checkpoint::load(p)?.into_recommender()?;
                    let state = state.ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
                    config = cfg;
                    Some((model, state))
                }
                None => {
                    let d = &mut config.data;
                    for (slot, flag) in [
                        (&mut d.sids, sids),
                        (&mut d.interactions, interactions),
                        (&mut d.tokenizer_checkpoint, tokenizer_ckpt),
                    ] {
                        if let Some(p) = flag {
                            *slot = Some(p.clone());
                        }
                    }
                    None
                }
            };
            let data = pipeline::RecData::load(&config)?;
            if data.codebooks.shape()[2] != config.recommender.d_model {
                return Err(Error::Config(format!(
                    "recommender.d_model {} differs from tokenizer latent width {}",
                    config.recommender.d_model,
                    data.codebooks.shape()[2]
                )));
            }
            log::info!("config fingerprint {}", fingerprint(&config));
            let outcome = pipeline::train_recommender(&config, &data, resumed, *stop_after_epochs)?;
            Checkpoint::recommender(&config, &outcome.model, Some(&outcome.state)).save(out)?;
            let p = &outcome.state.progress;
            Ok(json!({
                "finished": outcome.finished,
                "epochs": p.log,
                "best_epoch": p.best_epoch,
                "best_val_ndcg10": p.best_val_ndcg10,
            }))
        }
        Command::Evaluate {
            ckpt,
            split,
            out,
            rankings,
        } => {
            let (cfg, model, _) = Checkpoint::load(ckpt)?.into_recommender()?;
            let data = pipeline::RecData::load(&cfg)?;
            log::info!("config fingerprint {}", fingerprint(&cfg));
            let (report, per_user) = pipeline::evaluate_split(&model, &data, split, cfg.recommender.beam_size)?;
            write_json(out, &report)?;
            if let Some(path) = rankings {
                let mut text = String::new();
                for r in &per_user {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                std::fs::write(path, text)?;
            }
            Ok(serde_json::to_value(&report)?)
        }
        Command::Analyze {
            ckpt,
            out,
            dump_embeddings,
            dump_out,
        } => {
            let (cfg, model, _) = Checkpoint::load(ckpt)?.into_recommender()?;
            let data = pipeline::RecData::load(&cfg)?;
            let dump_path = dump_out
                .clone()
                .unwrap_or_else(|| out.with_extension("embeddings.jsonl"));
            let dump = dump_embeddings.map(|l| (l, dump_path.as_path()));
            let report = pipeline::analyze(&model, &data, dump)?;
            write_json(out, &report)?;
            Ok(serde_json::to_value(&report)?)
        }
    }
}
