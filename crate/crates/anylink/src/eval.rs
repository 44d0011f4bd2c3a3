//! End-to-end experiment runner: cross-KB evaluation, metric aggregation over
//! seeds, and the TOML experiment-config surface.

use crate::encoder::{
    self, augment_vocabulary, BiEncoderModel, CrossEncoderModel, EncoderError, EncoderSpec,
};
use crate::ingest::{self, DatasetSplit, IngestError, SyntheticSpec};
use crate::kb::KnowledgeBase;
use crate::nn::{self, LrSchedule};
use crate::retrieval::{build_index, retrieve_for_mention, IndexError};
use crate::serialize::{
    serialize_entity, serialize_mention, SeparatorRegistry, SerializationConfig, SerializationMode,
};
use crate::tokenizer::Vocab;
use crate::training::{
    self, mix_datasets, MetricsLog, Stage, TrainConfig, TrainError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("provenance violation: test KB `{0}` appears in a training component of a cross-KB experiment")]
    Provenance(String),
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<IngestError> for EvalError {
    fn from(e: IngestError) -> Self {
        EvalError::Data(e.to_string())
    }
}

impl EvalError {
    /// Process exit code: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvalError::Config(_) => 2,
            EvalError::Data(_) | EvalError::Provenance(_) => 3,
            EvalError::Train(TrainError::Diverged { .. }) => 4,
            EvalError::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    fn at(self, stage: &'static str) -> Self {
        EvalError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

// ---------------------------------------------------------------------------
// Experiment config
// ---------------------------------------------------------------------------

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_kb: Option<PathBuf>,
    pub train_mentions: Option<PathBuf>,
    pub test_kb: Option<PathBuf>,
    pub test_mentions: Option<PathBuf>,
    /// Generate the benchmark in-process instead of loading files.
    pub synth_entities: Option<usize>,
    #[serde(default = "defaults::attributes_min")]
    pub synth_attributes_min: usize,
    #[serde(default = "defaults::attributes_max")]
    pub synth_attributes_max: usize,
    #[serde(default = "defaults::schema_size")]
    pub synth_schema_size: usize,
    #[serde(default = "defaults::overlap")]
    pub synth_overlap: f64,
    #[serde(default = "defaults::mentions_per_entity")]
    pub synth_mentions_per_entity: usize,
    #[serde(default)]
    pub synth_seed: u64,
    /// Cross-KB experiments refuse any training use of the test KB.
    #[serde(default = "default_true")]
    pub cross_kb: bool,
    /// Schema-aware fine-tuning fraction of target documents; requires
    /// cross_kb = false.
    pub finetune_fraction: Option<f64>,
    /// Number of target documents held out for evaluation when fine-tuning.
    #[serde(default)]
    pub heldout_docs: usize,
}

mod defaults {
    pub fn attributes_min() -> usize {
        3
    }
    pub fn attributes_max() -> usize {
        4
    }
    pub fn schema_size() -> usize {
        6
    }
    pub fn overlap() -> f64 {
        0.3
    }
    pub fn mentions_per_entity() -> usize {
        2
    }
    pub fn max_tokens() -> usize {
        128
    }
    pub fn registry_capacity() -> usize {
        100
    }
    pub fn layers() -> usize {
        2
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn heads() -> usize {
        4
    }
    pub fn max_positions() -> usize {
        256
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SerializationSection {
    pub mode: SerializationMode,
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default)]
    pub oov_drop_prob: f64,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "defaults::registry_capacity")]
    pub registry_capacity: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::max_positions")]
    pub max_positions: usize,
    #[serde(default)]
    pub share_towers: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_candgen_epochs")]
    pub candgen_epochs: usize,
    #[serde(default = "d_candgen_batch")]
    pub candgen_batch: usize,
    #[serde(default = "d_candgen_lr")]
    pub candgen_lr: f64,
    #[serde(default = "d_rerank_epochs")]
    pub rerank_epochs: usize,
    #[serde(default = "d_rerank_batch")]
    pub rerank_batch: usize,
    #[serde(default = "d_rerank_lr")]
    pub rerank_lr: f64,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "d_finetune_lr")]
    pub finetune_lr: f64,
    #[serde(default = "d_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
}

fn d_candgen_epochs() -> usize {
    200
}
fn d_candgen_batch() -> usize {
    256
}
fn d_candgen_lr() -> f64 {
    2e-5
}
fn d_rerank_epochs() -> usize {
    4
}
fn d_rerank_batch() -> usize {
    2
}
fn d_rerank_lr() -> f64 {
    2e-5
}
fn d_k() -> usize {
    32
}
fn d_warmup() -> f64 {
    0.1
}
fn d_finetune_lr() -> f64 {
    2e-6
}
fn d_finetune_epochs() -> usize {
    4
}
fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub serialization: SerializationSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), EvalError> {
        let file_based = self.data.train_kb.is_some();
        let synth = self.data.synth_entities.is_some();
        if file_based == synth {
            return Err(EvalError::Config(
                "data section must set either file paths or synth_entities, not both".into(),
            ));
        }
        if self.data.finetune_fraction.is_some() {
            if self.data.cross_kb {
                return Err(EvalError::Config(
                    "finetune_fraction requires cross_kb = false (schema-aware run)".into(),
                ));
            }
            if self.data.heldout_docs == 0 {
                return Err(EvalError::Config(
                    "fine-tuning requires heldout_docs > 0 for honest evaluation".into(),
                ));
            }
        }
        if self.train.seeds.is_empty() {
            return Err(EvalError::Config("train.seeds must be non-empty".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        format!("{:x}", h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub recall_at_k: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_digest: String,
    pub input_digests: BTreeMap<String, String>,
    pub k: usize,
    pub per_seed: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Absent when fewer than two seeds ran.
    pub std_accuracy: Option<f64>,
    pub mean_recall: f64,
    pub std_recall: Option<f64>,
    pub dropped_nil_count: usize,
    pub runtime_s: f64,
    pub config: ExperimentConfig,
}

/// Mean and sample standard deviation (absent below two values).
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    if xs.is_empty() {
        return (0.0, None);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, Some(var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub recall_at_k: f64,
    pub n: usize,
}

/// Refuses cross-KB evaluation when the test KB participated in training.
pub fn check_provenance(
    test_kb_id: &str,
    training_kb_ids: &[String],
    cross_kb: bool,
) -> Result<(), EvalError> {
    if cross_kb && training_kb_ids.iter().any(|id| id == test_kb_id) {
        return Err(EvalError::Provenance(test_kb_id.to_string()));
    }
    Ok(())
}

/// Two-stage evaluation: retrieve top-k with the bi-encoder, rerank with the
/// cross-encoder. A mention whose gold entity is outside the top-k counts as
/// an error (no injection at evaluation time).
pub fn evaluate(
    bi: &BiEncoderModel,
    cross: &CrossEncoderModel,
    kb: &KnowledgeBase,
    mentions: &[crate::kb::Mention],
    k: usize,
) -> Result<EvalMetrics, EvalError> {
    if mentions.is_empty() {
        return Err(EvalError::Data("no mentions to evaluate".into()));
    }
    let index = build_index(bi, kb, "eval")?;
    let cfg = SerializationConfig::inference(cross.ser_cfg.mode, cross.ser_cfg.max_tokens);
    let mut correct = 0usize;
    let mut recalled = 0usize;
    for m in mentions {
        let list = retrieve_for_mention(bi, &index, m, k)?;
        if !list.contains(&m.gold_entity_id) {
            continue; // counted as both a recall miss and an accuracy error
        }
        recalled += 1;
        let sm = serialize_mention(m, cfg.max_tokens);
        let mut scores = Vec::with_capacity(list.candidates.len());
        for (id, _) in &list.candidates {
            let entity = kb
                .get(id)
                .ok_or_else(|| EvalError::Data(format!("candidate {id} missing from KB")))?;
            let text = serialize_entity(entity, kb.attribute_counts(), &cross.registry, &cfg, None);
            scores.push(cross.score(&sm, &text)?);
        }
        let picked = encoder::pick_best(&scores).expect("non-empty candidates");
        if list.candidates[picked].0 == m.gold_entity_id {
            correct += 1;
        }
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / mentions.len() as f64,
        recall_at_k: recalled as f64 / mentions.len() as f64,
        n: mentions.len(),
    })
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

pub struct ExperimentData {
    pub train_kb: KnowledgeBase,
    pub train_split: DatasetSplit,
    pub test_kb: KnowledgeBase,
    pub test_split: DatasetSplit,
    pub input_digests: BTreeMap<String, String>,
}

fn file_digest(path: &Path) -> Result<String, EvalError> {
    let bytes = std::fs::read(path)
        .map_err(|e| EvalError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData, EvalError> {
    let d = &cfg.data;
    if let Some(n) = d.synth_entities {
        let spec = SyntheticSpec {
            num_entities: n,
            attributes_min: d.synth_attributes_min,
            attributes_max: d.synth_attributes_max,
            schema_size: d.synth_schema_size,
            schema_overlap: d.synth_overlap,
            mentions_per_entity: d.synth_mentions_per_entity,
            seed: d.synth_seed,
        };
        let bench = ingest::generate_synthetic(&spec)?;
        let mut input_digests = BTreeMap::new();
        input_digests.insert(
            "synthetic_spec".to_string(),
            format!("seed={} entities={n}", d.synth_seed),
        );
        return Ok(ExperimentData {
            train_kb: bench.train_kb,
            train_split: bench.train_split,
            test_kb: bench.test_kb,
            test_split: bench.test_split,
            input_digests,
        });
    }
    let need = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf, EvalError> {
        p.clone()
            .ok_or_else(|| EvalError::Config(format!("data.{what} is required for file-based runs")))
    };
    let train_kb_path = need(&d.train_kb, "train_kb")?;
    let train_mentions_path = need(&d.train_mentions, "train_mentions")?;
    let test_kb_path = need(&d.test_kb, "test_kb")?;
    let test_mentions_path = need(&d.test_mentions, "test_mentions")?;
    let kb_id = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "kb".to_string())
    };
    let train_kb = ingest::load_kb(&train_kb_path, &kb_id(&train_kb_path))?;
    let train_split = ingest::load_mentions(&train_mentions_path, &train_kb, "train")?;
    let test_kb = ingest::load_kb(&test_kb_path, &kb_id(&test_kb_path))?;
    let test_split = ingest::load_mentions(&test_mentions_path, &test_kb, "test")?;
    let mut input_digests = BTreeMap::new();
    for (name, path) in [
        ("train_kb", &train_kb_path),
        ("train_mentions", &train_mentions_path),
        ("test_kb", &test_kb_path),
        ("test_mentions", &test_mentions_path),
    ] {
        input_digests.insert(name.to_string(), file_digest(path)?);
    }
    Ok(ExperimentData {
        train_kb,
        train_split,
        test_kb,
        test_split,
        input_digests,
    })
}

/// Builds the training vocabulary from the training corpus only: entity text
/// without separator tokens (those enter via vocabulary augmentation) plus
/// mention windows.
pub fn build_train_vocab(
    kb: &KnowledgeBase,
    split: &DatasetSplit,
    registry: &SeparatorRegistry,
    max_tokens: usize,
) -> Vocab {
    let word_cfg = SerializationConfig::inference(SerializationMode::Concatenation, max_tokens);
    let mut texts: Vec<String> = Vec::new();
    for e in kb.entities() {
        texts.push(serialize_entity(e, kb.attribute_counts(), registry, &word_cfg, None));
    }
    for m in &split.mentions {
        texts.push(serialize_mention(m, max_tokens).text);
    }
    Vocab::build(texts.iter().map(String::as_str))
}

/// Training-time serialization settings (regularizers enabled as configured).
pub fn ser_train_config(cfg: &ExperimentConfig) -> SerializationConfig {
    SerializationConfig {
        mode: cfg.serialization.mode,
        shuffle: cfg.serialization.shuffle,
        oov_drop_prob: cfg.serialization.oov_drop_prob,
        max_tokens: cfg.serialization.max_tokens,
    }
}

/// Fresh bi-encoder for one seed: registry and vocabulary from the training
/// KB, towers initialized and vocabulary-augmented under `seed`.
pub fn init_bi_model(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
) -> Result<BiEncoderModel, EvalError> {
    let ser = &cfg.serialization;
    let enc = &cfg.encoder;
    let registry = SeparatorRegistry::build(&data.train_kb, ser.registry_capacity);
    let vocab = build_train_vocab(&data.train_kb, &data.train_split, &registry, ser.max_tokens);
    let mut spec = EncoderSpec::new(enc.layers, enc.hidden, enc.heads, enc.max_positions, vocab)
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut mention_params = spec.init_params(&mut rng);
    let mut entity_params = spec.init_params(&mut rng);
    augment_vocabulary(
        &mut spec,
        &mut [&mut mention_params, &mut entity_params],
        &registry,
        seed,
    )?;
    Ok(BiEncoderModel {
        spec,
        registry,
        ser_cfg: SerializationConfig::inference(ser.mode, ser.max_tokens),
        mention: mention_params,
        entity: entity_params,
        share_towers: enc.share_towers,
    })
}

/// Fresh cross-encoder sharing the bi-encoder's vocabulary and registry,
/// initialized from a seed offset so the towers and reranker never share
/// initial weights.
pub fn init_cross_model(bi: &BiEncoderModel, seed: u64) -> CrossEncoderModel {
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let params = bi.spec.init_params(&mut rng);
    let w = nn::standard_normal_rows(1, bi.spec.hidden, &mut rng) / (bi.spec.hidden as f64).sqrt();
    CrossEncoderModel {
        spec: bi.spec.clone(),
        registry: bi.registry.clone(),
        ser_cfg: bi.ser_cfg.clone(),
        params,
        w,
    }
}

pub fn candgen_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        stage: Stage::Candgen,
        epochs: t.candgen_epochs,
        batch_size: t.candgen_batch,
        peak_lr: t.candgen_lr,
        warmup_fraction: t.warmup_fraction,
        lr_schedule: LrSchedule::WarmupLinearDecay,
        negatives_per_example: t.candgen_batch.saturating_sub(1),
        k: t.k,
        seeds: vec![seed],
        max_tokens: cfg.serialization.max_tokens,
    }
}

pub fn rerank_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        stage: Stage::Rerank,
        epochs: t.rerank_epochs,
        batch_size: t.rerank_batch,
        peak_lr: t.rerank_lr,
        warmup_fraction: t.warmup_fraction,
        lr_schedule: LrSchedule::WarmupLinearDecay,
        negatives_per_example: 0,
        k: t.k,
        seeds: vec![seed],
        max_tokens: cfg.serialization.max_tokens,
    }
}

pub fn finetune_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        stage: Stage::Finetune,
        epochs: t.finetune_epochs,
        batch_size: t.rerank_batch,
        peak_lr: t.finetune_lr,
        warmup_fraction: 0.0,
        lr_schedule: LrSchedule::Constant,
        negatives_per_example: 0,
        k: t.k,
        seeds: vec![seed],
        max_tokens: cfg.serialization.max_tokens,
    }
}

/// Last `n` documents of the split (first-seen order), used as the held-out
/// evaluation set for fine-tuning comparisons.
pub fn heldout_documents(split: &DatasetSplit, n: usize) -> BTreeSet<String> {
    split.document_ids().into_iter().rev().take(n).collect()
}

/// Trains one full pipeline (candgen then rerank, plus optional fine-tuning)
/// and evaluates on the test split. Artifacts land under `seed_dir` when
/// given.
#[allow(clippy::too_many_arguments)]
fn run_seed(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
    metrics: &mut MetricsLog,
    seed_dir: Option<&Path>,
) -> Result<SeedResult, EvalError> {
    let ser = &cfg.serialization;
    let t = &cfg.train;

    check_provenance(
        &data.test_kb.kb_id,
        &[data.train_kb.kb_id.clone()],
        cfg.data.cross_kb,
    )?;

    let ser_train = ser_train_config(cfg);
    let mut bi = init_bi_model(cfg, data, seed).map_err(|e| e.at("registry"))?;
    let train_data = mix_datasets(vec![(&data.train_split, &data.train_kb)], ser.registry_capacity)
        .map_err(|e| EvalError::from(e).at("ingest"))?;
    let candgen_cfg = candgen_train_config(cfg, seed);
    let candgen_dir = seed_dir.map(|d| d.join("candgen"));
    training::train_candgen(
        &mut bi,
        &train_data,
        None,
        &ser_train,
        &candgen_cfg,
        seed,
        metrics,
        candgen_dir.as_deref(),
    )
    .map_err(|e| EvalError::from(e).at("train-candgen"))?;

    if let Some(dir) = seed_dir {
        let digest = bi.save(&dir.join("candgen").join("final"))?;
        let index = build_index(&bi, &data.test_kb, &digest)?;
        index
            .save(&dir.join("test_index.bin"))
            .map_err(|e| EvalError::from(e).at("index"))?;
    }

    // Reranking over candidates from the fixed candidate generator.
    let candidates = training::precompute_candidates(&bi, &train_data, t.k, true)
        .map_err(|e| EvalError::from(e).at("index"))?;
    let mut cross = init_cross_model(&bi, seed);
    let rerank_cfg = rerank_train_config(cfg, seed);
    let rerank_dir = seed_dir.map(|d| d.join("rerank"));
    training::train_rerank(
        &mut cross,
        &train_data,
        &candidates,
        None,
        &ser_train,
        &rerank_cfg,
        seed,
        metrics,
        rerank_dir.as_deref(),
    )
    .map_err(|e| EvalError::from(e).at("train-rerank"))?;

    // Optional schema-aware fine-tuning on the target KB.
    let mut eval_mentions: Vec<crate::kb::Mention> = data.test_split.mentions.clone();
    if let Some(fraction) = cfg.data.finetune_fraction {
        if cfg.data.heldout_docs >= data.test_split.document_ids().len() {
            return Err(EvalError::Data(format!(
                "heldout_docs {} >= total documents {}",
                cfg.data.heldout_docs,
                data.test_split.document_ids().len()
            )));
        }
        let heldout = heldout_documents(&data.test_split, cfg.data.heldout_docs);
        let finetune_cfg = finetune_train_config(cfg, seed);
        training::finetune(
            &mut cross,
            &bi,
            &data.test_split,
            &data.test_kb,
            &heldout,
            fraction,
            &finetune_cfg,
            seed,
            metrics,
            None,
        )
        .map_err(|e| EvalError::from(e).at("finetune"))?;
        eval_mentions.retain(|m| heldout.contains(&m.document_id));
    } else if cfg.data.heldout_docs > 0 {
        // Baseline for fine-tuning comparisons: same held-out evaluation set.
        let heldout = heldout_documents(&data.test_split, cfg.data.heldout_docs);
        eval_mentions.retain(|m| heldout.contains(&m.document_id));
    }

    if let Some(dir) = seed_dir {
        cross.save(&dir.join("rerank").join("final"))?;
    }

    let metrics_out = evaluate(&bi, &cross, &data.test_kb, &eval_mentions, t.k)
        .map_err(|e| e.at("evaluate"))?;
    Ok(SeedResult {
        seed,
        accuracy: metrics_out.accuracy,
        recall_at_k: metrics_out.recall_at_k,
    })
}

/// Runs the full pipeline for every seed and writes `result.json` and
/// `metrics.jsonl` (plus per-seed artifacts) under `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult, EvalError> {
    cfg.validate()?;
    let started = Instant::now();
    let data = load_data(cfg).map_err(|e| e.at("ingest"))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics = match out_dir {
        Some(dir) => MetricsLog::to_file(&dir.join("metrics.jsonl")),
        None => MetricsLog::in_memory(),
    };
    let mut per_seed = Vec::new();
    for &seed in &cfg.train.seeds {
        let seed_dir = out_dir.map(|d| d.join(format!("seed_{seed}")));
        if let Some(dir) = &seed_dir {
            std::fs::create_dir_all(dir)?;
        }
        per_seed.push(run_seed(cfg, &data, seed, &mut metrics, seed_dir.as_deref())?);
    }
    let accs: Vec<f64> = per_seed.iter().map(|r| r.accuracy).collect();
    let recalls: Vec<f64> = per_seed.iter().map(|r| r.recall_at_k).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let (mean_recall, std_recall) = mean_std(&recalls);
    let result = ExperimentResult {
        config_digest: cfg.digest(),
        input_digests: data.input_digests.clone(),
        k: cfg.train.k,
        per_seed,
        mean_accuracy,
        std_accuracy,
        mean_recall,
        std_recall,
        dropped_nil_count: data.test_split.dropped_nil_count,
        runtime_s: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&result).expect("result serializes");
        std::fs::write(dir.join("result.json"), json)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_SYNTH: &str = r#"
        [data]
        synth_entities = 6
        synth_schema_size = 5
        synth_attributes_min = 3
        synth_attributes_max = 3
        synth_overlap = 0.5
        synth_seed = 3

        [serialization]
        mode = "sep_separation"
        max_tokens = 24

        [encoder]
        layers = 1
        hidden = 8
        heads = 2

        [train]
        candgen_epochs = 1
        candgen_batch = 4
        rerank_epochs = 1
        rerank_batch = 2
        k = 2
        seeds = [0]
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL_SYNTH).unwrap();
        assert_eq!(cfg.train.candgen_lr, 2e-5);
        assert_eq!(cfg.train.finetune_lr, 2e-6);
        assert_eq!(cfg.serialization.registry_capacity, 100);
        assert!(cfg.data.cross_kb);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let bad = MINIMAL_SYNTH.replace("candgen_epochs = 1", "candgen_epochz = 1");
        let err = ExperimentConfig::parse(&bad).unwrap_err();
        assert!(matches!(err, EvalError::Config(_)));
        assert_eq!(err.exit_code(), 2);
        let bad2 = format!("{MINIMAL_SYNTH}\n[extra]\nx = 1\n");
        assert!(matches!(
            ExperimentConfig::parse(&bad2),
            Err(EvalError::Config(_))
        ));
    }

    #[test]
    fn finetune_requires_schema_aware_marking() {
        let bad = MINIMAL_SYNTH.replace("synth_seed = 3", "synth_seed = 3\nfinetune_fraction = 0.5");
        assert!(matches!(
            ExperimentConfig::parse(&bad),
            Err(EvalError::Config(_))
        ));
        let ok = MINIMAL_SYNTH.replace(
            "synth_seed = 3",
            "synth_seed = 3\nfinetune_fraction = 0.5\ncross_kb = false\nheldout_docs = 1",
        );
        assert!(ExperimentConfig::parse(&ok).is_ok());
    }

    #[test]
    fn provenance_guard_blocks_training_kb() {
        let ids = vec!["kb_a".to_string(), "kb_b".to_string()];
        assert!(check_provenance("kb_b", &ids, true).is_err());
        assert!(check_provenance("kb_c", &ids, true).is_ok());
        assert!(check_provenance("kb_b", &ids, false).is_ok());
        assert_eq!(
            check_provenance("kb_b", &ids, true).unwrap_err().exit_code(),
            3
        );
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let (m, s) = mean_std(&[2.0, 4.0, 6.0]);
        assert_eq!(m, 4.0);
        assert!((s.unwrap() - 2.0).abs() < 1e-12);
        let (m1, s1) = mean_std(&[7.5]);
        assert_eq!(m1, 7.5);
        assert!(s1.is_none());
    }

    #[test]
    fn missing_kb_file_aborts_at_ingest_with_path() {
        let cfg_text = r#"
            [data]
            train_kb = "/nonexistent/train_kb.jsonl"
            train_mentions = "/nonexistent/train_mentions.jsonl"
            test_kb = "/nonexistent/test_kb.jsonl"
            test_mentions = "/nonexistent/test_mentions.jsonl"

            [serialization]
            mode = "concatenation"

            [encoder]

            [train]
            seeds = [0]
        "#;
        let cfg = ExperimentConfig::parse(cfg_text).unwrap();
        let err = run_experiment(&cfg, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ingest"), "missing stage name: {msg}");
        let full = format!("{err:?}");
        assert!(
            full.contains("/nonexistent/train_kb.jsonl"),
            "missing path: {full}"
        );
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_digest_is_stable_and_content_sensitive() {
        let a = ExperimentConfig::parse(MINIMAL_SYNTH).unwrap();
        let b = ExperimentConfig::parse(MINIMAL_SYNTH).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig::parse(&MINIMAL_SYNTH.replace("k = 2", "k = 3")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn tiny_experiment_runs_end_to_end_and_is_deterministic() {
        let cfg = ExperimentConfig::parse(MINIMAL_SYNTH).unwrap();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.per_seed.len(), 1);
        assert!(a.std_accuracy.is_none());
        assert_eq!(
            serde_json::to_value(&a.per_seed).unwrap(),
            serde_json::to_value(&b.per_seed).unwrap()
        );
        // Aggregates recompute from the per-seed values.
        let accs: Vec<f64> = a.per_seed.iter().map(|r| r.accuracy).collect();
        assert_eq!(a.mean_accuracy, mean_std(&accs).0);
    }

    #[test]
    fn artifacts_land_in_output_directory() {
        let cfg = ExperimentConfig::parse(MINIMAL_SYNTH).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&cfg, Some(dir.path())).unwrap();
        assert!(dir.path().join("result.json").is_file());
        assert!(dir.path().join("metrics.jsonl").is_file());
        assert!(dir.path().join("seed_0/candgen/final/params.bin").is_file());
        assert!(dir.path().join("seed_0/rerank/final/params.bin").is_file());
        assert!(dir.path().join("seed_0/test_index.bin").is_file());
        let result: ExperimentResult =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap())
                .unwrap();
        assert_eq!(result.per_seed.len(), 1);
    }
}
