//! Command-line interface for the entity-linking pipeline.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 training
//! divergence.

use anylink::encoder::{BiEncoderModel, CrossEncoderModel};
use anylink::eval::{
    self, check_provenance, ExperimentConfig, ExperimentData, EvalError,
};
use anylink::ingest::{self, IngestError, SyntheticSpec};
use anylink::retrieval;
use anylink::serialize::SeparatorRegistry;
use anylink::training::{self, MetricsLog, MixedDataset};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "anylink", version, about = "Zero-shot entity linking: candidate generation, reranking, and cross-KB evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cross-schema benchmark (train + test KBs and mentions)
    Synth {
        #[arg(long)]
        entities: usize,
        #[arg(long, default_value_t = 6)]
        schema_size: usize,
        #[arg(long, default_value_t = 0.3)]
        overlap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        mentions_per_entity: usize,
        #[arg(long, default_value_t = 3)]
        attributes_min: usize,
        #[arg(long, default_value_t = 5)]
        attributes_max: usize,
    },
    /// Validate a KB file (and optionally mentions); print summary statistics
    Ingest {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        kb_id: String,
        #[arg(long)]
        mentions: Option<PathBuf>,
        /// Keep only the N most frequent attributes
        #[arg(long)]
        top_attributes: Option<usize>,
        /// Where to write the (optionally filtered) KB
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a separator registry from a training KB
    Registry {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        kb_id: String,
        #[arg(long, default_value_t = 100)]
        capacity: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bi-encoder candidate generator
    TrainCandgen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed a KB with a candidate-generation checkpoint
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        kb_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cross-encoder reranker on candidates from a fixed candidate generator
    TrainRerank {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        candgen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Schema-aware fine-tuning of a reranker on a fraction of target documents
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        candgen: PathBuf,
        #[arg(long)]
        rerank: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint pair on the test split
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        candgen: PathBuf,
        #[arg(long)]
        rerank: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the full multi-seed pipeline and write result.json
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Resolves the effective seed: the config file wins over the flag on
/// conflict, with a warning.
fn resolve_seed(cfg: &ExperimentConfig, flag: Option<u64>) -> u64 {
    match flag {
        None => cfg.train.seeds[0],
        Some(s) if cfg.train.seeds.contains(&s) => s,
        Some(s) => {
            eprintln!(
                "warning: --seed {s} not in config train.seeds {:?}; config wins, using {}",
                cfg.train.seeds, cfg.train.seeds[0]
            );
            cfg.train.seeds[0]
        }
    }
}

fn map_ingest(e: IngestError) -> EvalError {
    match e {
        IngestError::InfeasibleSpec(msg) => EvalError::Config(msg),
        other => EvalError::Data(other.to_string()),
    }
}

fn load_train_mix<'a>(
    data: &'a ExperimentData,
    capacity: usize,
) -> Result<MixedDataset<'a>, EvalError> {
    training::mix_datasets(vec![(&data.train_split, &data.train_kb)], capacity)
        .map_err(EvalError::Train)
}

fn dispatch(cmd: Cmd) -> Result<(), EvalError> {
    match cmd {
        Cmd::Synth {
            entities,
            schema_size,
            overlap,
            seed,
            out,
            mentions_per_entity,
            attributes_min,
            attributes_max,
        } => {
            let spec = SyntheticSpec {
                num_entities: entities,
                attributes_min,
                attributes_max,
                schema_size,
                schema_overlap: overlap,
                mentions_per_entity,
                seed,
            };
            let bench = ingest::generate_synthetic(&spec).map_err(map_ingest)?;
            std::fs::create_dir_all(&out)?;
            ingest::save_kb(&bench.train_kb, &out.join("train_kb.jsonl")).map_err(map_ingest)?;
            ingest::save_kb(&bench.test_kb, &out.join("test_kb.jsonl")).map_err(map_ingest)?;
            ingest::save_mentions(&bench.train_split, &out.join("train_mentions.jsonl"))
                .map_err(map_ingest)?;
            ingest::save_mentions(&bench.test_split, &out.join("test_mentions.jsonl"))
                .map_err(map_ingest)?;
            println!(
                "wrote benchmark to {}: train {} entities / {} mentions, test {} entities / {} mentions",
                out.display(),
                bench.train_kb.len(),
                bench.train_split.mentions.len(),
                bench.test_kb.len(),
                bench.test_split.mentions.len()
            );
            Ok(())
        }
        Cmd::Ingest {
            kb,
            kb_id,
            mentions,
            top_attributes,
            out,
        } => {
            let mut loaded = ingest::load_kb(&kb, &kb_id).map_err(map_ingest)?;
            if let Some(n) = top_attributes {
                loaded = ingest::filter_top_attributes(&loaded, n);
            }
            let mut summary = serde_json::json!({
                "kb_id": loaded.kb_id,
                "entities": loaded.len(),
                "distinct_attributes": loaded.attribute_counts().len(),
            });
            if let Some(path) = mentions {
                let split = ingest::load_mentions(&path, &loaded, "ingest").map_err(map_ingest)?;
                summary["mentions"] = split.mentions.len().into();
                summary["dropped_nil_count"] = split.dropped_nil_count.into();
                summary["documents"] = split.document_ids().len().into();
            }
            if let Some(path) = out {
                ingest::save_kb(&loaded, &path).map_err(map_ingest)?;
            }
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(())
        }
        Cmd::Registry {
            kb,
            kb_id,
            capacity,
            out,
        } => {
            let loaded = ingest::load_kb(&kb, &kb_id).map_err(map_ingest)?;
            let registry = SeparatorRegistry::build(&loaded, capacity);
            registry.save(&out)?;
            println!(
                "wrote registry with {} separators to {}",
                registry.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::TrainCandgen { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = resolve_seed(&cfg, seed);
            let data = eval::load_data(&cfg)?;
            let mut bi = eval::init_bi_model(&cfg, &data, seed)?;
            let mix = load_train_mix(&data, cfg.serialization.registry_capacity)?;
            std::fs::create_dir_all(&out)?;
            let mut metrics = MetricsLog::to_file(&out.join("metrics.jsonl"));
            training::train_candgen(
                &mut bi,
                &mix,
                None,
                &eval::ser_train_config(&cfg),
                &eval::candgen_train_config(&cfg, seed),
                seed,
                &mut metrics,
                Some(&out),
            )?;
            let digest = bi.save(&out.join("final"))?;
            println!("candgen checkpoint {} ({digest})", out.join("final").display());
            Ok(())
        }
        Cmd::Index {
            checkpoint,
            kb,
            kb_id,
            out,
        } => {
            let (bi, digest) = BiEncoderModel::load(&checkpoint)?;
            let loaded = ingest::load_kb(&kb, &kb_id).map_err(map_ingest)?;
            let index = retrieval::build_index(&bi, &loaded, &digest)?;
            index.save(&out)?;
            println!(
                "indexed {} entities of {} into {}",
                index.len(),
                loaded.kb_id,
                out.display()
            );
            Ok(())
        }
        Cmd::TrainRerank {
            config,
            candgen,
            out,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = resolve_seed(&cfg, seed);
            let data = eval::load_data(&cfg)?;
            let (bi, _) = BiEncoderModel::load(&candgen)?;
            let mix = load_train_mix(&data, cfg.serialization.registry_capacity)?;
            let candidates = training::precompute_candidates(&bi, &mix, cfg.train.k, true)?;
            let mut cross = eval::init_cross_model(&bi, seed);
            std::fs::create_dir_all(&out)?;
            let mut metrics = MetricsLog::to_file(&out.join("metrics.jsonl"));
            training::train_rerank(
                &mut cross,
                &mix,
                &candidates,
                None,
                &eval::ser_train_config(&cfg),
                &eval::rerank_train_config(&cfg, seed),
                seed,
                &mut metrics,
                Some(&out),
            )?;
            cross.save(&out.join("final"))?;
            println!("rerank checkpoint {}", out.join("final").display());
            Ok(())
        }
        Cmd::Finetune {
            config,
            candgen,
            rerank,
            fraction,
            out,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = resolve_seed(&cfg, seed);
            let fraction = match (cfg.data.finetune_fraction, fraction) {
                (Some(c), Some(f)) if c != f => {
                    eprintln!(
                        "warning: --fraction {f} conflicts with config finetune_fraction {c}; config wins"
                    );
                    c
                }
                (Some(c), _) => c,
                (None, Some(f)) => f,
                (None, None) => {
                    return Err(EvalError::Config(
                        "no fine-tune fraction given (flag or config)".into(),
                    ))
                }
            };
            if cfg.data.cross_kb {
                return Err(EvalError::Config(
                    "fine-tuning requires cross_kb = false (schema-aware run)".into(),
                ));
            }
            let data = eval::load_data(&cfg)?;
            let (bi, _) = BiEncoderModel::load(&candgen)?;
            let (mut cross, _) = CrossEncoderModel::load(&rerank)?;
            let heldout = eval::heldout_documents(&data.test_split, cfg.data.heldout_docs);
            std::fs::create_dir_all(&out)?;
            let mut metrics = MetricsLog::to_file(&out.join("metrics.jsonl"));
            let picked = training::finetune(
                &mut cross,
                &bi,
                &data.test_split,
                &data.test_kb,
                &heldout,
                fraction,
                &eval::finetune_train_config(&cfg, seed),
                seed,
                &mut metrics,
                Some(&out),
            )?;
            cross.save(&out.join("final"))?;
            println!(
                "fine-tuned on {} documents; checkpoint {}",
                picked.len(),
                out.join("final").display()
            );
            Ok(())
        }
        Cmd::Evaluate {
            config,
            candgen,
            rerank,
            k,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let k = match k {
                Some(flag_k) if flag_k != cfg.train.k => {
                    eprintln!(
                        "warning: --k {flag_k} conflicts with config train.k {}; config wins",
                        cfg.train.k
                    );
                    cfg.train.k
                }
                _ => cfg.train.k,
            };
            let data = eval::load_data(&cfg)?;
            check_provenance(
                &data.test_kb.kb_id,
                &[data.train_kb.kb_id.clone()],
                cfg.data.cross_kb,
            )?;
            let (bi, _) = BiEncoderModel::load(&candgen)?;
            let (cross, _) = CrossEncoderModel::load(&rerank)?;
            let mut mentions = data.test_split.mentions.clone();
            if cfg.data.heldout_docs > 0 {
                let heldout = eval::heldout_documents(&data.test_split, cfg.data.heldout_docs);
                mentions.retain(|m| heldout.contains(&m.document_id));
            }
            let metrics = eval::evaluate(&bi, &cross, &data.test_kb, &mentions, k)?;
            println!(
                "{}",
                serde_json::json!({
                    "accuracy": metrics.accuracy,
                    "recall_at_k": metrics.recall_at_k,
                    "k": k,
                    "mentions": metrics.n,
                })
            );
            Ok(())
        }
        Cmd::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = eval::run_experiment(&cfg, Some(Path::new(&out)))?;
            println!(
                "accuracy {:.4}{} recall@{} {:.4} over {} seed(s); result.json in {}",
                result.mean_accuracy,
                result
                    .std_accuracy
                    .map(|s| format!(" ±{s:.4}"))
                    .unwrap_or_default(),
                result.k,
                result.mean_recall,
                result.per_seed.len(),
                out.display()
            );
            Ok(())
        }
    }
}

