//! Encoder models: vocabulary-augmented specs, the bi-encoder towers for
//! candidate generation, the cross-encoder reranker, and self-describing
//! checkpoints.

use crate::nn::{self, EncoderParams, ForwardCache};
use crate::serialize::{SeparatorRegistry, SerializationConfig, SerializedMention, CLS, SEP};
use crate::tokenizer::Vocab;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("hidden size {hidden} not divisible by {heads} heads")]
    BadHeads { hidden: usize, heads: usize },
    #[error("max_positions {0} below the minimum of 256")]
    TooFewPositions(usize),
    #[error("separator token `{0}` already present in vocabulary")]
    TokenCollision(String),
    #[error("indicator span {span:?} out of bounds for {len} tokens")]
    SpanOutOfBounds { span: (usize, usize), len: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture dimensions plus the token inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub pretrained_weights: Option<String>,
    pub vocab: Vocab,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecDescriptor {
    layers: usize,
    hidden: usize,
    heads: usize,
    max_positions: usize,
    pretrained_weights: Option<String>,
    kind: String,
    share_towers: bool,
    serialization: SerializationConfig,
}

impl EncoderSpec {
    pub fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        max_positions: usize,
        vocab: Vocab,
    ) -> Result<Self, EncoderError> {
        if hidden % heads != 0 {
            return Err(EncoderError::BadHeads { hidden, heads });
        }
        if max_positions < 256 {
            return Err(EncoderError::TooFewPositions(max_positions));
        }
        Ok(Self {
            layers,
            hidden,
            heads,
            max_positions,
            pretrained_weights: None,
            vocab,
        })
    }

    pub fn init_params(&self, rng: &mut ChaCha20Rng) -> EncoderParams {
        EncoderParams::new(
            self.vocab.len(),
            self.max_positions,
            self.hidden,
            self.layers,
            rng,
        )
    }
}

/// Extends the vocabulary with the registry's separator tokens and appends
/// i.i.d. standard-normal embedding rows (zero mean, unit variance) to every
/// supplied parameter set. Pre-existing embeddings are untouched.
pub fn augment_vocabulary(
    spec: &mut EncoderSpec,
    params: &mut [&mut EncoderParams],
    registry: &SeparatorRegistry,
    seed: u64,
) -> Result<(), EncoderError> {
    let tokens: Vec<&str> = registry.tokens().collect();
    for t in &tokens {
        if spec.vocab.contains(t) {
            return Err(EncoderError::TokenCollision(t.to_string()));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for t in &tokens {
        spec.vocab
            .append(t)
            .map_err(EncoderError::TokenCollision)?;
    }
    for p in params {
        let new_rows = nn::standard_normal_rows(tokens.len(), p.hidden(), &mut rng);
        let mut grown = Array2::zeros((p.token_emb.nrows() + tokens.len(), p.hidden()));
        grown
            .slice_mut(ndarray::s![..p.token_emb.nrows(), ..])
            .assign(&p.token_emb);
        grown
            .slice_mut(ndarray::s![p.token_emb.nrows().., ..])
            .assign(&new_rows);
        p.token_emb = grown;
    }
    Ok(())
}

/// Tokenized encoder input: [CLS]-prefixed ids with segment ids and an
/// optional mention-indicator span.
pub struct EncoderInput {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub indicator_span: Option<(usize, usize)>,
}

/// Builds `[CLS] c_l m c_r [SEP]` with the indicator span mapped through
/// subword splitting.
pub fn mention_input(spec: &EncoderSpec, sm: &SerializedMention) -> EncoderInput {
    let (ids, word_spans) = spec.vocab.encode_with_word_spans(&sm.text);
    let (w_lo, w_hi) = sm.span;
    let t_lo = word_spans.get(w_lo).map(|s| s.0).unwrap_or(0);
    let t_hi = if w_hi > 0 && w_hi <= word_spans.len() {
        word_spans[w_hi - 1].1
    } else {
        ids.len()
    };
    let cls = spec.vocab.id_of(CLS).expect("vocab missing [CLS]");
    let sep = spec.vocab.id_of(SEP).expect("vocab missing [SEP]");
    let mut token_ids = Vec::with_capacity(ids.len() + 2);
    token_ids.push(cls);
    token_ids.extend(&ids);
    token_ids.push(sep);
    let len = token_ids.len();
    EncoderInput {
        token_ids,
        segment_ids: vec![0; len],
        indicator_span: Some((t_lo + 1, t_hi + 1)),
    }
}

/// Builds `[CLS] e [SEP]` for the entity tower.
pub fn entity_input(spec: &EncoderSpec, serialized_entity: &str) -> EncoderInput {
    let ids = spec.vocab.encode(serialized_entity);
    let cls = spec.vocab.id_of(CLS).expect("vocab missing [CLS]");
    let sep = spec.vocab.id_of(SEP).expect("vocab missing [SEP]");
    let mut token_ids = Vec::with_capacity(ids.len() + 2);
    token_ids.push(cls);
    token_ids.extend(&ids);
    token_ids.push(sep);
    let len = token_ids.len();
    EncoderInput {
        token_ids,
        segment_ids: vec![0; len],
        indicator_span: None,
    }
}

/// Builds `[CLS] c_l m c_r [SEP] e [SEP]` for the cross-encoder, segment A on
/// the mention side and segment B on the candidate side. When the sequence
/// overflows `max_positions` the candidate side is truncated first.
pub fn cross_input(
    spec: &EncoderSpec,
    sm: &SerializedMention,
    serialized_entity: &str,
) -> EncoderInput {
    let mention = mention_input(spec, sm);
    let mut entity_ids = spec.vocab.encode(serialized_entity);
    let sep = spec.vocab.id_of(SEP).expect("vocab missing [SEP]");
    let budget = spec.max_positions.saturating_sub(mention.token_ids.len() + 1);
    if entity_ids.len() > budget {
        entity_ids.truncate(budget);
    }
    let mut token_ids = mention.token_ids;
    let mention_len = token_ids.len();
    token_ids.extend(&entity_ids);
    token_ids.push(sep);
    let mut segment_ids = vec![0; mention_len];
    segment_ids.resize(token_ids.len(), 1);
    EncoderInput {
        token_ids,
        segment_ids,
        indicator_span: mention.indicator_span,
    }
}

pub fn encode(
    spec: &EncoderSpec,
    params: &EncoderParams,
    input: &EncoderInput,
) -> Result<ForwardCache, EncoderError> {
    if let Some(span) = input.indicator_span {
        if span.0 > span.1 || span.1 > input.token_ids.len() {
            return Err(EncoderError::SpanOutOfBounds {
                span,
                len: input.token_ids.len(),
            });
        }
    }
    Ok(nn::encoder_forward(
        params,
        spec.heads,
        &input.token_ids,
        &input.segment_ids,
        input.indicator_span,
    ))
}

/// Dot product of the final [CLS] state with the reranking weight vector.
pub fn score_from_cache(cache: &ForwardCache, w: &Array2<f64>) -> f64 {
    cache.cls().dot(&w.row(0))
}

/// Index of the highest score; ties go to the earlier (better-retrieved)
/// candidate.
pub fn pick_best(scores: &[f64]) -> Option<usize> {
    if scores.is_empty() {
        return None;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Some(best)
}

/// Candidate-generation model: mention tower plus (optionally shared) entity
/// tower.
pub struct BiEncoderModel {
    pub spec: EncoderSpec,
    pub registry: SeparatorRegistry,
    pub ser_cfg: SerializationConfig,
    pub mention: EncoderParams,
    pub entity: EncoderParams,
    pub share_towers: bool,
}

impl BiEncoderModel {
    pub fn entity_params(&self) -> &EncoderParams {
        if self.share_towers {
            &self.mention
        } else {
            &self.entity
        }
    }

    pub fn encode_mention(&self, sm: &SerializedMention) -> Result<Array1<f64>, EncoderError> {
        let input = mention_input(&self.spec, sm);
        Ok(encode(&self.spec, &self.mention, &input)?.cls())
    }

    pub fn encode_entity(&self, serialized: &str) -> Result<Array1<f64>, EncoderError> {
        let input = entity_input(&self.spec, serialized);
        Ok(encode(&self.spec, self.entity_params(), &input)?.cls())
    }
}

/// Reranking model: one cross-encoder plus the scoring weight vector.
pub struct CrossEncoderModel {
    pub spec: EncoderSpec,
    pub registry: SeparatorRegistry,
    pub ser_cfg: SerializationConfig,
    pub params: EncoderParams,
    /// 1 x H scoring vector.
    pub w: Array2<f64>,
}

impl CrossEncoderModel {
    pub fn score(&self, sm: &SerializedMention, serialized_entity: &str) -> Result<f64, EncoderError> {
        let input = cross_input(&self.spec, sm, serialized_entity);
        let cache = encode(&self.spec, &self.params, &input)?;
        Ok(score_from_cache(&cache, &self.w))
    }
}

fn write_tensor(out: &mut Vec<u8>, a: &Array2<f64>) {
    out.extend((a.nrows() as u32).to_le_bytes());
    out.extend((a.ncols() as u32).to_le_bytes());
    for v in a.iter() {
        out.extend(v.to_le_bytes());
    }
}

fn read_tensor(data: &[u8], pos: &mut usize) -> Result<Array2<f64>, EncoderError> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], EncoderError> {
        if *pos + n > data.len() {
            return Err(EncoderError::Checkpoint("truncated parameter blob".into()));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let rows = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
    let raw = take(pos, rows * cols * 8)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))
}

fn params_to_bytes(sets: &mut [&mut EncoderParams], extra: Option<&Array2<f64>>) -> Vec<u8> {
    let mut out = Vec::new();
    for p in sets {
        p.visit_mut(&mut |a: &mut Array2<f64>| write_tensor(&mut out, a));
    }
    if let Some(w) = extra {
        write_tensor(&mut out, w);
    }
    out
}

fn params_from_bytes(
    data: &[u8],
    sets: &mut [&mut EncoderParams],
    extra: Option<&mut Array2<f64>>,
) -> Result<(), EncoderError> {
    let mut pos = 0usize;
    let mut err = None;
    for p in sets {
        p.visit_mut(&mut |a: &mut Array2<f64>| {
            if err.is_some() {
                return;
            }
            match read_tensor(data, &mut pos) {
                Ok(t) if t.raw_dim() == a.raw_dim() => *a = t,
                Ok(t) => {
                    err = Some(EncoderError::Checkpoint(format!(
                        "tensor shape mismatch: blob {:?} vs model {:?}",
                        t.shape(),
                        a.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
    }
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(w) = extra {
        *w = read_tensor(data, &mut pos)?;
    }
    if pos != data.len() {
        return Err(EncoderError::Checkpoint("trailing bytes in blob".into()));
    }
    Ok(())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn save_checkpoint_files(
    dir: &Path,
    descriptor: &SpecDescriptor,
    spec: &EncoderSpec,
    registry: &SeparatorRegistry,
    blob: &[u8],
) -> Result<(), EncoderError> {
    std::fs::create_dir_all(dir)?;
    let spec_json = serde_json::to_string_pretty(descriptor)
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    std::fs::write(dir.join("spec.json"), spec_json)?;
    spec.vocab.save(&dir.join("vocab.txt"))?;
    registry
        .save(&dir.join("registry.tsv"))
        .map_err(EncoderError::Io)?;
    let mut f = std::fs::File::create(dir.join("params.bin"))?;
    f.write_all(blob)?;
    Ok(())
}

fn load_checkpoint_files(dir: &Path) -> Result<(SpecDescriptor, Vocab, SeparatorRegistry, Vec<u8>), EncoderError> {
    let spec_json = std::fs::read_to_string(dir.join("spec.json"))?;
    let descriptor: SpecDescriptor =
        serde_json::from_str(&spec_json).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;
    let registry = SeparatorRegistry::load(&dir.join("registry.tsv"))
        .map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    let mut blob = Vec::new();
    std::fs::File::open(dir.join("params.bin"))?.read_to_end(&mut blob)?;
    Ok((descriptor, vocab, registry, blob))
}

impl BiEncoderModel {
    pub fn save(&mut self, dir: &Path) -> Result<String, EncoderError> {
        let descriptor = SpecDescriptor {
            layers: self.spec.layers,
            hidden: self.spec.hidden,
            heads: self.spec.heads,
            max_positions: self.spec.max_positions,
            pretrained_weights: self.spec.pretrained_weights.clone(),
            kind: "bi_encoder".into(),
            share_towers: self.share_towers,
            serialization: self.ser_cfg.clone(),
        };
        let blob = {
            let Self {
                mention, entity, ..
            } = self;
            params_to_bytes(&mut [mention, entity], None)
        };
        save_checkpoint_files(dir, &descriptor, &self.spec, &self.registry, &blob)?;
        Ok(digest_bytes(&blob))
    }

    pub fn load(dir: &Path) -> Result<(Self, String), EncoderError> {
        let (d, vocab, registry, blob) = load_checkpoint_files(dir)?;
        if d.kind != "bi_encoder" {
            return Err(EncoderError::Checkpoint(format!(
                "expected bi_encoder checkpoint, found {}",
                d.kind
            )));
        }
        let spec = EncoderSpec {
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            max_positions: d.max_positions,
            pretrained_weights: d.pretrained_weights.clone(),
            vocab,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut mention = spec.init_params(&mut rng);
        let mut entity = spec.init_params(&mut rng);
        let digest = digest_bytes(&blob);
        params_from_bytes(&blob, &mut [&mut mention, &mut entity], None)?;
        Ok((
            Self {
                spec,
                registry,
                ser_cfg: d.serialization,
                mention,
                entity,
                share_towers: d.share_towers,
            },
            digest,
        ))
    }
}

impl CrossEncoderModel {
    pub fn save(&mut self, dir: &Path) -> Result<String, EncoderError> {
        let descriptor = SpecDescriptor {
            layers: self.spec.layers,
            hidden: self.spec.hidden,
            heads: self.spec.heads,
            max_positions: self.spec.max_positions,
            pretrained_weights: self.spec.pretrained_weights.clone(),
            kind: "cross_encoder".into(),
            share_towers: false,
            serialization: self.ser_cfg.clone(),
        };
        let blob = {
            let Self { params, w, .. } = self;
            params_to_bytes(&mut [params], Some(w))
        };
        save_checkpoint_files(dir, &descriptor, &self.spec, &self.registry, &blob)?;
        Ok(digest_bytes(&blob))
    }

    pub fn load(dir: &Path) -> Result<(Self, String), EncoderError> {
        let (d, vocab, registry, blob) = load_checkpoint_files(dir)?;
        if d.kind != "cross_encoder" {
            return Err(EncoderError::Checkpoint(format!(
                "expected cross_encoder checkpoint, found {}",
                d.kind
            )));
        }
        let spec = EncoderSpec {
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            max_positions: d.max_positions,
            pretrained_weights: d.pretrained_weights.clone(),
            vocab,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut params = spec.init_params(&mut rng);
        let mut w = Array2::zeros((1, spec.hidden));
        let digest = digest_bytes(&blob);
        params_from_bytes(&blob, &mut [&mut params], Some(&mut w))?;
        Ok((
            Self {
                spec,
                registry,
                ser_cfg: d.serialization,
                params,
                w,
            },
            digest,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::Mention;
    use crate::serialize::{serialize_mention, SerializationMode};

    fn toy_spec() -> EncoderSpec {
        let vocab = Vocab::build(["alpha beta gamma delta epsilon"].into_iter());
        EncoderSpec::new(2, 8, 2, 256, vocab).unwrap()
    }

    fn toy_registry() -> SeparatorRegistry {
        use crate::kb::{AttributeValue, Entity, KnowledgeBase};
        let kb = KnowledgeBase::new(
            "train",
            vec![Entity::new(
                "e",
                vec![
                    AttributeValue::new("name", "x").unwrap(),
                    AttributeValue::new("occupation", "y").unwrap(),
                ],
            )],
        )
        .unwrap();
        SeparatorRegistry::build(&kb, 100)
    }

    #[test]
    fn bad_head_count_rejected() {
        let vocab = Vocab::build(["a"].into_iter());
        assert!(matches!(
            EncoderSpec::new(2, 10, 3, 256, vocab),
            Err(EncoderError::BadHeads { .. })
        ));
    }

    #[test]
    fn augment_grows_vocab_and_embeddings() {
        let mut spec = toy_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut params = spec.init_params(&mut rng);
        let before_vocab = spec.vocab.len();
        let before_emb = params.token_emb.clone();
        augment_vocabulary(&mut spec, &mut [&mut params], &toy_registry(), 9).unwrap();
        assert_eq!(spec.vocab.len(), before_vocab + 2);
        assert_eq!(params.token_emb.nrows(), before_vocab + 2);
        assert_eq!(
            params.token_emb.slice(ndarray::s![..before_vocab, ..]),
            before_emb
        );
    }

    #[test]
    fn augment_empty_registry_is_identity() {
        let mut spec = toy_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut params = spec.init_params(&mut rng);
        let before = params.token_emb.clone();
        let empty = SeparatorRegistry::empty("train", 100);
        augment_vocabulary(&mut spec, &mut [&mut params], &empty, 9).unwrap();
        assert_eq!(params.token_emb, before);
    }

    #[test]
    fn augment_deterministic_under_seed() {
        let run = || {
            let mut spec = toy_spec();
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            let mut params = spec.init_params(&mut rng);
            augment_vocabulary(&mut spec, &mut [&mut params], &toy_registry(), 9).unwrap();
            params.token_emb
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn augment_detects_collision() {
        let mut spec = toy_spec();
        spec.vocab.append("[K_NAME]").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut params = spec.init_params(&mut rng);
        let err = augment_vocabulary(&mut spec, &mut [&mut params], &toy_registry(), 9);
        assert!(matches!(err, Err(EncoderError::TokenCollision(_))));
    }

    fn toy_mention() -> SerializedMention {
        let m = Mention {
            mention_id: "m".into(),
            document_id: "d".into(),
            surface: "beta".into(),
            left_context: "alpha".into(),
            right_context: "gamma delta".into(),
            gold_entity_id: "e".into(),
            kb_id: "kb".into(),
        };
        serialize_mention(&m, 32)
    }

    #[test]
    fn zero_indicator_matches_absent_indicator() {
        let spec = toy_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut params = spec.init_params(&mut rng);
        params.indicator.fill(0.0);
        let input = mention_input(&spec, &toy_mention());
        let with = encode(&spec, &params, &input).unwrap().cls();
        let without = encode(
            &spec,
            &params,
            &EncoderInput {
                indicator_span: None,
                token_ids: input.token_ids.clone(),
                segment_ids: input.segment_ids.clone(),
            },
        )
        .unwrap()
        .cls();
        assert_eq!(with, without);
    }

    #[test]
    fn zero_transform_weights_leave_cls_dependent_only_on_cls_row() {
        let spec = toy_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut params = spec.init_params(&mut rng);
        for l in &mut params.layers {
            for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                t.fill(0.0);
            }
        }
        let a = encode(&spec, &params, &entity_input(&spec, "alpha beta")).unwrap();
        let b = encode(&spec, &params, &entity_input(&spec, "gamma delta")).unwrap();
        assert_eq!(a.cls(), b.cls());
    }

    #[test]
    fn perturbing_span_token_changes_output() {
        let spec = toy_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let params = spec.init_params(&mut rng);
        let m1 = toy_mention();
        let mut m2 = m1.clone();
        m2.text = m1.text.replace("beta", "epsilon");
        let v1 = encode(&spec, &params, &mention_input(&spec, &m1)).unwrap().cls();
        let v2 = encode(&spec, &params, &mention_input(&spec, &m2)).unwrap().cls();
        let diff: f64 = (&v1 - &v2).mapv(f64::abs).sum();
        assert!(diff > 1e-8);
    }

    #[test]
    fn encoding_is_pure() {
        let spec = toy_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let params = spec.init_params(&mut rng);
        let input = entity_input(&spec, "alpha beta gamma");
        let a = encode(&spec, &params, &input).unwrap().cls();
        let b = encode(&spec, &params, &input).unwrap().cls();
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_isolation() {
        let mut spec = toy_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut params = spec.init_params(&mut rng);
        let input_before = entity_input(&spec, "alpha beta gamma");
        let before = encode(&spec, &params, &input_before).unwrap().cls();
        augment_vocabulary(&mut spec, &mut [&mut params], &toy_registry(), 9).unwrap();
        let input_after = entity_input(&spec, "alpha beta gamma");
        let after = encode(&spec, &params, &input_after).unwrap().cls();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_w_scores_zero_and_one_hot_selects_component() {
        let spec = toy_spec();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let params = spec.init_params(&mut rng);
        let input = cross_input(&spec, &toy_mention(), "alpha gamma");
        let cache = encode(&spec, &params, &input).unwrap();
        let zero = Array2::zeros((1, spec.hidden));
        assert_eq!(score_from_cache(&cache, &zero), 0.0);
        let mut onehot = Array2::zeros((1, spec.hidden));
        onehot[[0, 3]] = 1.0;
        assert_eq!(score_from_cache(&cache, &onehot), cache.cls()[3]);
    }

    #[test]
    fn cross_input_segments_split_at_first_sep() {
        let spec = toy_spec();
        let input = cross_input(&spec, &toy_mention(), "epsilon alpha");
        let sep = spec.vocab.id_of(SEP).unwrap();
        let first_sep = input.token_ids.iter().position(|&t| t == sep).unwrap();
        assert!(input.segment_ids[..=first_sep].iter().all(|&s| s == 0));
        assert!(input.segment_ids[first_sep + 1..].iter().all(|&s| s == 1));
    }

    #[test]
    fn cross_input_truncates_candidate_side_first() {
        let vocab = Vocab::build(["alpha beta"].into_iter());
        let spec = EncoderSpec::new(1, 8, 2, 256, vocab).unwrap();
        let long_entity = vec!["alpha"; 400].join(" ");
        let input = cross_input(&spec, &toy_mention(), &long_entity);
        assert_eq!(input.token_ids.len(), spec.max_positions);
    }

    #[test]
    fn pick_best_rules() {
        assert_eq!(pick_best(&[0.1, 0.9, 0.3]), Some(1));
        assert_eq!(pick_best(&[0.5, 0.5, 0.5]), Some(0));
        assert_eq!(pick_best(&[0.2]), Some(0));
        assert_eq!(pick_best(&[]), None);
        // Shifting all scores by a constant leaves the argmax unchanged.
        let base = [0.3, -0.1, 0.25];
        let shifted: Vec<f64> = base.iter().map(|s| s + 10.0).collect();
        assert_eq!(pick_best(&base), pick_best(&shifted));
    }

    #[test]
    fn bi_checkpoint_roundtrip() {
        let mut spec = toy_spec();
        let registry = toy_registry();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut mention = spec.init_params(&mut rng);
        let mut entity = spec.init_params(&mut rng);
        augment_vocabulary(&mut spec, &mut [&mut mention, &mut entity], &registry, 9).unwrap();
        let mut model = BiEncoderModel {
            spec,
            registry,
            ser_cfg: SerializationConfig::inference(SerializationMode::SepSeparation, 32),
            mention,
            entity,
            share_towers: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let digest = model.save(dir.path()).unwrap();
        let (loaded, loaded_digest) = BiEncoderModel::load(dir.path()).unwrap();
        assert_eq!(digest, loaded_digest);
        assert_eq!(loaded.mention, model.mention);
        assert_eq!(loaded.entity, model.entity);
        assert_eq!(loaded.spec.vocab, model.spec.vocab);
        assert_eq!(loaded.registry, model.registry);
    }

    #[test]
    fn cross_checkpoint_roundtrip() {
        let spec = toy_spec();
        let registry = toy_registry();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let params = spec.init_params(&mut rng);
        let w = nn::standard_normal_rows(1, spec.hidden, &mut rng);
        let mut model = CrossEncoderModel {
            spec,
            registry,
            ser_cfg: SerializationConfig::inference(SerializationMode::AttributeSeparation, 32),
            params,
            w,
        };
        let dir = tempfile::tempdir().unwrap();
        let digest = model.save(dir.path()).unwrap();
        let (loaded, loaded_digest) = CrossEncoderModel::load(dir.path()).unwrap();
        assert_eq!(digest, loaded_digest);
        assert_eq!(loaded.params, model.params);
        assert_eq!(loaded.w, model.w);
    }

    #[test]
    fn wrong_kind_checkpoint_rejected() {
        let spec = toy_spec();
        let registry = toy_registry();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let params = spec.init_params(&mut rng);
        let w = nn::standard_normal_rows(1, spec.hidden, &mut rng);
        let mut model = CrossEncoderModel {
            spec,
            registry,
            ser_cfg: SerializationConfig::inference(SerializationMode::SepSeparation, 32),
            params,
            w,
        };
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        assert!(BiEncoderModel::load(dir.path()).is_err());
    }
}
