//! Dense retrieval: exact brute-force dot-product search over a precomputed
//! entity embedding index.

use crate::encoder::{BiEncoderModel, EncoderError};
use crate::kb::{CandidateList, KnowledgeBase, Mention};
use crate::serialize::{serialize_entity, serialize_mention, SerializationConfig};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const INDEX_MAGIC: &[u8; 8] = b"ALIDX001";

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("index was built with checkpoint {index_digest} but checkpoint digest is {expected}")]
    DigestMismatch {
        index_digest: String,
        expected: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexHeader {
    kb_id: String,
    checkpoint_digest: String,
    rows: usize,
    hidden: usize,
}

/// Entity embeddings for one knowledge base, tied to the bi-encoder
/// checkpoint that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityIndex {
    pub kb_id: String,
    pub checkpoint_digest: String,
    /// Entity ids in KB order; row i of `matrix` embeds `entity_ids[i]`.
    pub entity_ids: Vec<String>,
    pub matrix: Array2<f64>,
}

impl EntityIndex {
    pub fn len(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_ids.is_empty()
    }

    /// Exact top-k by dot product; ties resolve to the earlier index row.
    pub fn retrieve(&self, query: &Array1<f64>, k: usize) -> Vec<(String, f64)> {
        let scores = self.matrix.dot(query);
        let mut order: Vec<usize> = (0..self.entity_ids.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
            .into_iter()
            .take(k.min(self.entity_ids.len()))
            .map(|i| (self.entity_ids[i].clone(), scores[i]))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let header = IndexHeader {
            kb_id: self.kb_id.clone(),
            checkpoint_digest: self.checkpoint_digest.clone(),
            rows: self.entity_ids.len(),
            hidden: self.matrix.ncols(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| IndexError::Corrupt(e.to_string()))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(INDEX_MAGIC)?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())?;
        f.write_all(&header_json)?;
        for id in &self.entity_ids {
            f.write_all(&(id.len() as u32).to_le_bytes())?;
            f.write_all(id.as_bytes())?;
        }
        let mut values = Vec::with_capacity(self.matrix.len() * 8);
        for v in self.matrix.iter() {
            values.extend(v.to_le_bytes());
        }
        f.write_all(&values)?;
        Ok(())
    }

    /// Loads an index, refusing one whose recorded checkpoint digest does not
    /// match `expected_digest`.
    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self, IndexError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], IndexError> {
            if pos + n > data.len() {
                return Err(IndexError::Corrupt("unexpected end of file".into()));
            }
            let s = &data[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(8)? != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let header_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let header: IndexHeader = serde_json::from_slice(take(header_len)?)
            .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        if let Some(expected) = expected_digest {
            if header.checkpoint_digest != expected {
                return Err(IndexError::DigestMismatch {
                    index_digest: header.checkpoint_digest,
                    expected: expected.to_string(),
                });
            }
        }
        let mut entity_ids = Vec::with_capacity(header.rows);
        for _ in 0..header.rows {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(len)?)
                .map_err(|e| IndexError::Corrupt(e.to_string()))?;
            entity_ids.push(id.to_string());
        }
        let raw = take(header.rows * header.hidden * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if pos != data.len() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        let matrix = Array2::from_shape_vec((header.rows, header.hidden), values)
            .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        Ok(Self {
            kb_id: header.kb_id,
            checkpoint_digest: header.checkpoint_digest,
            entity_ids,
            matrix,
        })
    }
}

/// Embeds every entity of `kb` with the entity tower under inference
/// serialization (no shuffle, no drop), in KB order.
pub fn build_index(
    model: &BiEncoderModel,
    kb: &KnowledgeBase,
    checkpoint_digest: &str,
) -> Result<EntityIndex, IndexError> {
    let cfg = SerializationConfig::inference(model.ser_cfg.mode, model.ser_cfg.max_tokens);
    let counts = kb.attribute_counts();
    let mut matrix = Array2::zeros((kb.len(), model.spec.hidden));
    let mut entity_ids = Vec::with_capacity(kb.len());
    for (i, entity) in kb.entities().enumerate() {
        let text = serialize_entity(entity, counts, &model.registry, &cfg, None);
        let v = model.encode_entity(&text)?;
        matrix.row_mut(i).assign(&v);
        entity_ids.push(entity.entity_id.clone());
    }
    Ok(EntityIndex {
        kb_id: kb.kb_id.clone(),
        checkpoint_digest: checkpoint_digest.to_string(),
        entity_ids,
        matrix,
    })
}

/// Retrieves top-k candidates for one mention with the mention tower.
pub fn retrieve_for_mention(
    model: &BiEncoderModel,
    index: &EntityIndex,
    mention: &Mention,
    k: usize,
) -> Result<CandidateList, IndexError> {
    let sm = serialize_mention(mention, model.ser_cfg.max_tokens);
    let query = model.encode_mention(&sm)?;
    Ok(CandidateList {
        mention_id: mention.mention_id.clone(),
        candidates: index.retrieve(&query, k),
    })
}

/// Fraction of mentions whose gold entity appears in the top-k candidates.
/// `lists` must be aligned with `mentions`.
pub fn recall_at_k(mentions: &[Mention], lists: &[CandidateList], k: usize) -> f64 {
    assert_eq!(mentions.len(), lists.len(), "misaligned candidate lists");
    if mentions.is_empty() {
        return 0.0;
    }
    let hits = mentions
        .iter()
        .zip(lists)
        .filter(|(m, l)| {
            l.candidates
                .iter()
                .take(k)
                .any(|(id, _)| *id == m.gold_entity_id)
        })
        .count();
    hits as f64 / mentions.len() as f64
}
