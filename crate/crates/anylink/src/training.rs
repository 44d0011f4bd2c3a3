//! Training loops: bi-encoder candidate generation with in-batch negatives,
//! cross-encoder reranking over precomputed candidates, multi-dataset mixing,
//! and fractional document-level fine-tuning.

use crate::encoder::{
    self, cross_input, BiEncoderModel, CrossEncoderModel, EncoderError, EncoderInput,
};
use crate::ingest::DatasetSplit;
use crate::kb::{CandidateList, KnowledgeBase, Mention};
use crate::nn::{self, Adam, EncoderParams, LrSchedule};
use crate::retrieval::{build_index, retrieve_for_mention, IndexError};
use crate::serialize::{
    serialize_entity, serialize_mention, SeparatorRegistry, SerializationConfig,
};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{stage} diverged: loss became non-finite at epoch {epoch}, step {step}")]
    Diverged {
        stage: String,
        epoch: usize,
        step: usize,
    },
    #[error("empty training split: {0}")]
    EmptySplit(String),
    #[error("mention {mention_id} labels unknown entity {entity_id} in KB {kb_id}")]
    MissingEntity {
        mention_id: String,
        entity_id: String,
        kb_id: String,
    },
    #[error("gold entity {0} absent from training candidate list (injection expected)")]
    GoldNotInCandidates(String),
    #[error("fraction {fraction} of {total} documents selects zero documents")]
    ZeroDocuments { fraction: f64, total: usize },
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("candidate lists misaligned with dataset ({lists} lists, {examples} examples)")]
    Misaligned { lists: usize, examples: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Candgen,
    Rerank,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Candgen => "candgen",
            Stage::Rerank => "rerank",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Warmup length as a fraction of the first epoch's steps.
    pub warmup_fraction: f64,
    pub lr_schedule: LrSchedule,
    /// In-batch negatives per example (candidate generation).
    pub negatives_per_example: usize,
    /// Candidates per mention (reranking).
    pub k: usize,
    pub seeds: Vec<u64>,
    pub max_tokens: usize,
}

impl TrainConfig {
    pub fn candgen() -> Self {
        Self {
            stage: Stage::Candgen,
            epochs: 200,
            batch_size: 256,
            peak_lr: 2e-5,
            warmup_fraction: 0.1,
            lr_schedule: LrSchedule::WarmupLinearDecay,
            negatives_per_example: 255,
            k: 32,
            seeds: vec![0, 1, 2, 3, 4],
            max_tokens: 128,
        }
    }

    pub fn rerank() -> Self {
        Self {
            stage: Stage::Rerank,
            epochs: 4,
            batch_size: 2,
            peak_lr: 2e-5,
            warmup_fraction: 0.1,
            lr_schedule: LrSchedule::WarmupLinearDecay,
            negatives_per_example: 0,
            k: 32,
            seeds: vec![0, 1, 2, 3, 4],
            max_tokens: 128,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            epochs: 4,
            batch_size: 2,
            peak_lr: 2e-6,
            warmup_fraction: 0.0,
            lr_schedule: LrSchedule::Constant,
            negatives_per_example: 0,
            k: 32,
            seeds: vec![0, 1, 2, 3, 4],
            max_tokens: 128,
        }
    }
}

/// One metrics-log record per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
    pub lr: f64,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Collects per-epoch records, optionally appending each as a JSONL line.
pub struct MetricsLog {
    path: Option<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            records: Vec::new(),
        }
    }

    pub fn to_file(path: &Path) -> Self {
        Self {
            path: Some(path.to_path_buf()),
            records: Vec::new(),
        }
    }

    pub fn log(&mut self, record: MetricsRecord) -> Result<(), TrainError> {
        if let Some(path) = &self.path {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            let line = serde_json::to_string(&record).expect("metrics record serializes");
            writeln!(f, "{line}")?;
        }
        self.records.push(record);
        Ok(())
    }
}

/// Concatenation of one or more dataset splits, each example keeping a
/// reference to its own KB so serialization uses the right attributes.
#[derive(Debug)]
pub struct MixedDataset<'a> {
    components: Vec<(&'a DatasetSplit, &'a KnowledgeBase)>,
    flat: Vec<(usize, usize)>,
    pub registry: SeparatorRegistry,
}

impl<'a> MixedDataset<'a> {
    /// Uses a caller-provided registry instead of rebuilding one (fine-tuning
    /// on an unseen KB must keep the training registry).
    pub fn with_registry(
        components: Vec<(&'a DatasetSplit, &'a KnowledgeBase)>,
        registry: SeparatorRegistry,
    ) -> Result<Self, TrainError> {
        if components.is_empty() {
            return Err(TrainError::EmptySplit("no dataset components".into()));
        }
        let mut flat = Vec::new();
        for (ci, (split, kb)) in components.iter().enumerate() {
            for (mi, m) in split.mentions.iter().enumerate() {
                if !kb.contains(&m.gold_entity_id) {
                    return Err(TrainError::MissingEntity {
                        mention_id: m.mention_id.clone(),
                        entity_id: m.gold_entity_id.clone(),
                        kb_id: kb.kb_id.clone(),
                    });
                }
                flat.push((ci, mi));
            }
        }
        Ok(Self {
            components,
            flat,
            registry,
        })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn example(&self, i: usize) -> (&'a Mention, &'a KnowledgeBase) {
        let (ci, mi) = self.flat[i];
        let (split, kb) = self.components[ci];
        (&split.mentions[mi], kb)
    }

    pub fn components(&self) -> &[(&'a DatasetSplit, &'a KnowledgeBase)] {
        &self.components
    }
}

/// Concatenates components and rebuilds the separator registry from the
/// pooled attribute frequencies of all component KBs (top-`capacity`).
pub fn mix_datasets<'a>(
    components: Vec<(&'a DatasetSplit, &'a KnowledgeBase)>,
    capacity: usize,
) -> Result<MixedDataset<'a>, TrainError> {
    if components.is_empty() {
        return Err(TrainError::EmptySplit("no dataset components".into()));
    }
    let mut pooled: BTreeMap<String, u64> = BTreeMap::new();
    let mut ids: Vec<&str> = Vec::new();
    for (_, kb) in &components {
        ids.push(&kb.kb_id);
        for (name, count) in kb.attribute_counts() {
            *pooled.entry(name.clone()).or_insert(0) += count;
        }
    }
    let registry = SeparatorRegistry::from_counts(&ids.join("+"), &pooled, capacity);
    MixedDataset::with_registry(components, registry)
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn serialize_train_entity(
    kb: &KnowledgeBase,
    entity_id: &str,
    registry: &SeparatorRegistry,
    cfg: &SerializationConfig,
    rng: &mut ChaCha20Rng,
) -> String {
    let entity = kb.get(entity_id).expect("entity validated at mix time");
    let rng_opt = if cfg.needs_rng() { Some(rng) } else { None };
    serialize_entity(entity, kb.attribute_counts(), registry, cfg, rng_opt)
}

fn check_finite(loss: f64, stage: Stage, epoch: usize, step: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged {
            stage: stage.as_str().to_string(),
            epoch,
            step,
        })
    }
}

/// Recall@k of the bi-encoder over a dataset, retrieving per component KB.
pub fn candgen_recall(
    model: &BiEncoderModel,
    data: &MixedDataset,
    k: usize,
) -> Result<f64, TrainError> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (split, kb) in data.components() {
        let index = build_index(model, kb, "transient")?;
        for m in &split.mentions {
            let list = retrieve_for_mention(model, &index, m, k)?;
            if list.contains(&m.gold_entity_id) {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(TrainError::EmptySplit("no mentions to evaluate".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Trains both towers with a cross-entropy loss over dot products of each
/// mention against its gold entity and the other gold entities in the batch
/// (in-batch negatives). Keeps the best-on-validation parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_candgen(
    model: &mut BiEncoderModel,
    data: &MixedDataset,
    val: Option<&MixedDataset>,
    ser_train: &SerializationConfig,
    cfg: &TrainConfig,
    seed: u64,
    metrics: &mut MetricsLog,
    checkpoint_dir: Option<&Path>,
) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("candgen training split".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = (cfg.warmup_fraction * steps_per_epoch as f64).round() as usize;
    let heads = model.spec.heads;

    let mut opt_mention = Adam::new(&mut model.mention, 0);
    let mut opt_entity = Adam::new(&mut model.entity, 0);
    let mut best: Option<(f64, EncoderParams, EncoderParams)> = None;
    let mut global_step = 0usize;
    let mut last_lr = 0.0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let hidden = model.spec.hidden;
            let mut m_mat = Array2::zeros((b, hidden));
            let mut e_mat = Array2::zeros((b, hidden));
            let mut m_caches = Vec::with_capacity(b);
            let mut e_caches = Vec::with_capacity(b);
            let mut m_inputs = Vec::with_capacity(b);
            let mut e_inputs = Vec::with_capacity(b);
            for (row, &i) in batch.iter().enumerate() {
                let (mention, kb) = data.example(i);
                let sm = serialize_mention(mention, ser_train.max_tokens);
                let ent_text = serialize_train_entity(
                    kb,
                    &mention.gold_entity_id,
                    &model.registry,
                    ser_train,
                    &mut rng,
                );
                let m_input = encoder::mention_input(&model.spec, &sm);
                let e_input = encoder::entity_input(&model.spec, &ent_text);
                let m_cache = encoder::encode(&model.spec, &model.mention, &m_input)?;
                let e_cache = encoder::encode(&model.spec, model.entity_params(), &e_input)?;
                m_mat.row_mut(row).assign(&m_cache.cls());
                e_mat.row_mut(row).assign(&e_cache.cls());
                m_caches.push(m_cache);
                e_caches.push(e_cache);
                m_inputs.push(m_input);
                e_inputs.push(e_input);
            }

            // scores[i][j] = mention_i . entity_j; targets are the diagonal.
            let scores = m_mat.dot(&e_mat.t());
            let mut loss = 0.0;
            let mut d_scores = Array2::zeros((b, b));
            for i in 0..b {
                let row: Vec<f64> = scores.row(i).to_vec();
                let probs = softmax(&row);
                loss += -probs[i].max(f64::MIN_POSITIVE).ln();
                for j in 0..b {
                    let y = if i == j { 1.0 } else { 0.0 };
                    d_scores[[i, j]] = (probs[j] - y) / b as f64;
                }
            }
            loss /= b as f64;
            check_finite(loss, Stage::Candgen, epoch, global_step)?;
            loss_sum += loss * b as f64;

            let d_m = d_scores.dot(&e_mat);
            let d_e = d_scores.t().dot(&m_mat);
            let mut g_mention = model.mention.zeros_like();
            let mut g_entity = model.entity.zeros_like();
            for row in 0..b {
                let dm: Array1<f64> = d_m.row(row).to_owned();
                let de: Array1<f64> = d_e.row(row).to_owned();
                nn::encoder_backward(
                    &model.mention,
                    &mut g_mention,
                    &m_caches[row],
                    heads,
                    &nn::d_cls_only(&m_caches[row], &dm),
                );
                let (e_params, e_grads) = if model.share_towers {
                    (&model.mention, &mut g_mention)
                } else {
                    (&model.entity, &mut g_entity)
                };
                nn::encoder_backward(
                    e_params,
                    e_grads,
                    &e_caches[row],
                    heads,
                    &nn::d_cls_only(&e_caches[row], &de),
                );
            }

            let lr = nn::learning_rate(
                cfg.lr_schedule,
                cfg.peak_lr,
                warmup_steps,
                total_steps,
                global_step,
            );
            last_lr = lr;
            opt_mention.step(&mut model.mention, &g_mention, &mut [], lr);
            if !model.share_towers {
                opt_entity.step(&mut model.entity, &g_entity, &mut [], lr);
            }
            global_step += 1;
        }

        let epoch_loss = loss_sum / n as f64;
        let val_metric = match val {
            Some(v) => Some(candgen_recall(model, v, 1)?),
            None => None,
        };
        if let Some(metric) = val_metric {
            let improved = best.as_ref().map_or(true, |(b, _, _)| metric > *b);
            if improved {
                best = Some((metric, model.mention.clone(), model.entity.clone()));
            }
        }
        if let Some(dir) = checkpoint_dir {
            model.save(&dir.join("latest"))?;
        }
        metrics.log(MetricsRecord {
            stage: Stage::Candgen.as_str().to_string(),
            epoch,
            loss: epoch_loss,
            val_metric,
            lr: last_lr,
            seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        })?;
    }

    if let Some((_, m, e)) = best {
        model.mention = m;
        model.entity = e;
    }
    if let Some(dir) = checkpoint_dir {
        model.save(&dir.join("best"))?;
    }
    Ok(())
}

/// Precomputes top-k candidate lists from a fixed candidate generator, one per
/// dataset example. With `inject_gold`, a missing gold entity replaces the
/// lowest-ranked candidate (training only; evaluation never injects).
pub fn precompute_candidates(
    candgen: &BiEncoderModel,
    data: &MixedDataset,
    k: usize,
    inject_gold: bool,
) -> Result<Vec<CandidateList>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    for (split, kb) in data.components() {
        let index = build_index(candgen, kb, "transient")?;
        for m in &split.mentions {
            let mut list = retrieve_for_mention(candgen, &index, m, k)?;
            if inject_gold && !list.contains(&m.gold_entity_id) {
                let (_, worst_score) = list
                    .candidates
                    .pop()
                    .expect("retrieval over a non-empty KB");
                list.candidates.push((m.gold_entity_id.clone(), worst_score));
            }
            out.push(list);
        }
    }
    Ok(out)
}

/// Loss and gradients of the reranking cross-entropy for one mention and its
/// serialized candidates. Exposed for gradient checking.
pub fn rerank_example_grads(
    model: &CrossEncoderModel,
    inputs: &[EncoderInput],
    gold_idx: usize,
) -> Result<(f64, EncoderParams, Array2<f64>), TrainError> {
    let mut caches = Vec::with_capacity(inputs.len());
    let mut scores = Vec::with_capacity(inputs.len());
    for input in inputs {
        let cache = encoder::encode(&model.spec, &model.params, input)?;
        scores.push(encoder::score_from_cache(&cache, &model.w));
        caches.push(cache);
    }
    let probs = softmax(&scores);
    let loss = -probs[gold_idx].max(f64::MIN_POSITIVE).ln();
    let mut grads = model.params.zeros_like();
    let mut dw = Array2::zeros(model.w.raw_dim());
    for (j, cache) in caches.iter().enumerate() {
        let y = if j == gold_idx { 1.0 } else { 0.0 };
        let ds = probs[j] - y;
        let d_cls: Array1<f64> = model.w.row(0).mapv(|v| v * ds);
        let mut dw_row = dw.row_mut(0);
        dw_row += &cache.cls().mapv(|v| v * ds);
        nn::encoder_backward(
            &model.params,
            &mut grads,
            cache,
            model.spec.heads,
            &nn::d_cls_only(cache, &d_cls),
        );
    }
    Ok((loss, grads, dw))
}

fn gold_position(list: &CandidateList, gold: &str) -> Result<usize, TrainError> {
    list.candidates
        .iter()
        .position(|(id, _)| id == gold)
        .ok_or_else(|| TrainError::GoldNotInCandidates(gold.to_string()))
}

/// Accuracy of the cross-encoder over precomputed candidates under inference
/// serialization. A gold entity absent from its candidate list is an error.
pub fn rerank_accuracy(
    model: &CrossEncoderModel,
    data: &MixedDataset,
    candidates: &[CandidateList],
) -> Result<f64, TrainError> {
    if candidates.len() != data.len() {
        return Err(TrainError::Misaligned {
            lists: candidates.len(),
            examples: data.len(),
        });
    }
    if data.is_empty() {
        return Err(TrainError::EmptySplit("no mentions to evaluate".into()));
    }
    let cfg = SerializationConfig::inference(model.ser_cfg.mode, model.ser_cfg.max_tokens);
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (mention, kb) = data.example(i);
        let list = &candidates[i];
        if !list.contains(&mention.gold_entity_id) {
            continue; // gold never retrieved: counted as an error
        }
        let sm = serialize_mention(mention, cfg.max_tokens);
        let mut scores = Vec::with_capacity(list.candidates.len());
        for (id, _) in &list.candidates {
            let entity = kb.get(id).ok_or_else(|| TrainError::MissingEntity {
                mention_id: mention.mention_id.clone(),
                entity_id: id.clone(),
                kb_id: kb.kb_id.clone(),
            })?;
            let text = serialize_entity(entity, kb.attribute_counts(), &model.registry, &cfg, None);
            scores.push(model.score(&sm, &text)?);
        }
        let picked = encoder::pick_best(&scores).expect("non-empty candidate list");
        if list.candidates[picked].0 == mention.gold_entity_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Shared training loop for reranking and fine-tuning: cross-entropy over the
/// candidate scores with the gold as target.
#[allow(clippy::too_many_arguments)]
fn train_cross(
    model: &mut CrossEncoderModel,
    data: &MixedDataset,
    candidates: &[CandidateList],
    val: Option<(&MixedDataset, &[CandidateList])>,
    ser_train: &SerializationConfig,
    cfg: &TrainConfig,
    stage: Stage,
    seed: u64,
    metrics: &mut MetricsLog,
    checkpoint_dir: Option<&Path>,
) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit(format!(
            "{} training split",
            stage.as_str()
        )));
    }
    if candidates.len() != data.len() {
        return Err(TrainError::Misaligned {
            lists: candidates.len(),
            examples: data.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = (cfg.warmup_fraction * steps_per_epoch as f64).round() as usize;

    let mut opt = Adam::new(&mut model.params, 1);
    let mut best: Option<(f64, EncoderParams, Array2<f64>)> = None;
    let mut global_step = 0usize;
    let mut last_lr = 0.0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let mut g_params = model.params.zeros_like();
            let mut g_w = Array2::zeros(model.w.raw_dim());
            let mut batch_loss = 0.0;
            for &i in batch {
                let (mention, kb) = data.example(i);
                let list = &candidates[i];
                let gold_idx = gold_position(list, &mention.gold_entity_id)?;
                let sm = serialize_mention(mention, ser_train.max_tokens);
                let mut inputs = Vec::with_capacity(list.candidates.len());
                for (id, _) in &list.candidates {
                    let text =
                        serialize_train_entity(kb, id, &model.registry, ser_train, &mut rng);
                    inputs.push(cross_input(&model.spec, &sm, &text));
                }
                let (loss, grads, dw) = rerank_example_grads(model, &inputs, gold_idx)?;
                batch_loss += loss;
                let scale = 1.0 / b as f64;
                let mut gi = 0;
                let mut flat: Vec<Array2<f64>> = Vec::new();
                let mut g2 = grads;
                g2.visit_mut(&mut |a: &mut Array2<f64>| flat.push(a.mapv(|v| v * scale)));
                g_params.visit_mut(&mut |a: &mut Array2<f64>| {
                    *a += &flat[gi];
                    gi += 1;
                });
                g_w += &dw.mapv(|v| v * scale);
            }
            let loss = batch_loss / b as f64;
            check_finite(loss, stage, epoch, global_step)?;
            loss_sum += batch_loss;

            let lr = nn::learning_rate(
                cfg.lr_schedule,
                cfg.peak_lr,
                warmup_steps,
                total_steps,
                global_step,
            );
            last_lr = lr;
            opt.step(&mut model.params, &g_params, &mut [(&mut model.w, &g_w)], lr);
            global_step += 1;
        }

        let epoch_loss = loss_sum / n as f64;
        let val_metric = match val {
            Some((vd, vc)) => Some(rerank_accuracy(model, vd, vc)?),
            None => None,
        };
        if let Some(metric) = val_metric {
            let improved = best.as_ref().map_or(true, |(b, _, _)| metric > *b);
            if improved {
                best = Some((metric, model.params.clone(), model.w.clone()));
            }
        }
        if let Some(dir) = checkpoint_dir {
            model.save(&dir.join("latest"))?;
        }
        metrics.log(MetricsRecord {
            stage: stage.as_str().to_string(),
            epoch,
            loss: epoch_loss,
            val_metric,
            lr: last_lr,
            seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        })?;
    }

    if let Some((_, p, w)) = best {
        model.params = p;
        model.w = w;
    }
    if let Some(dir) = checkpoint_dir {
        model.save(&dir.join("best"))?;
    }
    Ok(())
}

/// Trains the cross-encoder reranker over candidate lists precomputed from a
/// fixed candidate-generation checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train_rerank(
    model: &mut CrossEncoderModel,
    data: &MixedDataset,
    candidates: &[CandidateList],
    val: Option<(&MixedDataset, &[CandidateList])>,
    ser_train: &SerializationConfig,
    cfg: &TrainConfig,
    seed: u64,
    metrics: &mut MetricsLog,
    checkpoint_dir: Option<&Path>,
) -> Result<(), TrainError> {
    train_cross(
        model,
        data,
        candidates,
        val,
        ser_train,
        cfg,
        Stage::Rerank,
        seed,
        metrics,
        checkpoint_dir,
    )
}

/// Samples `round(fraction * n)` documents without replacement, preserving
/// the original document order in the result.
pub fn sample_documents(
    doc_ids: &[String],
    fraction: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<String>, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::BadFraction(fraction));
    }
    let n = (fraction * doc_ids.len() as f64).round() as usize;
    if n == 0 {
        return Err(TrainError::ZeroDocuments {
            fraction,
            total: doc_ids.len(),
        });
    }
    let mut order: Vec<usize> = (0..doc_ids.len()).collect();
    order.shuffle(rng);
    let mut picked: Vec<usize> = order.into_iter().take(n).collect();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| doc_ids[i].clone()).collect())
}

/// Resumes cross-encoder training on a document-level sample of the target
/// split (held-out validation documents excluded), at a constant learning
/// rate. Returns the selected document ids.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &mut CrossEncoderModel,
    candgen: &BiEncoderModel,
    split: &DatasetSplit,
    kb: &KnowledgeBase,
    heldout_docs: &BTreeSet<String>,
    fraction: f64,
    cfg: &TrainConfig,
    seed: u64,
    metrics: &mut MetricsLog,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<String>, TrainError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let eligible: Vec<String> = split
        .document_ids()
        .into_iter()
        .filter(|d| !heldout_docs.contains(d))
        .collect();
    if eligible.is_empty() {
        return Err(TrainError::ZeroDocuments {
            fraction,
            total: 0,
        });
    }
    let selected = sample_documents(&eligible, fraction, &mut rng)?;
    let selected_set: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
    let sub = DatasetSplit {
        name: format!("{}@{}", split.name, fraction),
        kb_id: split.kb_id.clone(),
        mentions: split
            .mentions
            .iter()
            .filter(|m| selected_set.contains(m.document_id.as_str()))
            .cloned()
            .collect(),
        dropped_nil_count: 0,
    };
    let data = MixedDataset::with_registry(vec![(&sub, kb)], model.registry.clone())?;
    let candidates = precompute_candidates(candgen, &data, cfg.k, true)?;
    let ser_train = SerializationConfig::inference(model.ser_cfg.mode, model.ser_cfg.max_tokens);
    train_cross(
        model,
        &data,
        &candidates,
        None,
        &ser_train,
        cfg,
        Stage::Finetune,
        seed,
        metrics,
        checkpoint_dir,
    )?;
    Ok(selected)
}
