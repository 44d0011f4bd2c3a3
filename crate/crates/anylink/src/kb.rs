//! Core domain types: attribute-value entities, knowledge bases, mentions and
//! candidate lists. All types are immutable after construction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One attribute-value pair of an entity. The name is trimmed and non-empty;
/// internal newlines in the value are collapsed to single spaces so a
/// serialized entity is always a single-line token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeValue {
    pub name: String,
    pub value: String,
}

impl AttributeValue {
    pub fn new(name: &str, value: &str) -> Result<Self, KbError> {
        let name = name.trim().to_string();
        if name.is_empty() {
            return Err(KbError::EmptyAttributeName);
        }
        let value = value.replace(['\n', '\r'], " ");
        Ok(Self { name, value })
    }
}

/// An entity: unique id plus an ordered list of attribute-value pairs.
/// Repeated attribute names are legal and kept as separate entries; the load
/// order is preserved (serialization applies its own ordering later).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: String,
    pub attributes: Vec<AttributeValue>,
}

impl Entity {
    pub fn new(entity_id: impl Into<String>, attributes: Vec<AttributeValue>) -> Self {
        Self {
            entity_id: entity_id.into(),
            attributes,
        }
    }
}

/// A knowledge base: entities keyed by id plus the attribute frequency table
/// (the schema with occurrence counts, counting duplicates within an entity).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub kb_id: String,
    entities: IndexMap<String, Entity>,
    attribute_counts: BTreeMap<String, u64>,
}

impl KnowledgeBase {
    pub fn new(kb_id: impl Into<String>, entities: Vec<Entity>) -> Result<Self, KbError> {
        let mut map = IndexMap::with_capacity(entities.len());
        for e in entities {
            if map.contains_key(&e.entity_id) {
                return Err(KbError::DuplicateEntityId(e.entity_id));
            }
            map.insert(e.entity_id.clone(), e);
        }
        let attribute_counts = count_attributes(map.values());
        Ok(Self {
            kb_id: kb_id.into(),
            entities: map,
            attribute_counts,
        })
    }

    pub fn get(&self, entity_id: &str) -> Option<&Entity> {
        self.entities.get(entity_id)
    }

    pub fn contains(&self, entity_id: &str) -> bool {
        self.entities.contains_key(entity_id)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Entities in load order.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn attribute_counts(&self) -> &BTreeMap<String, u64> {
        &self.attribute_counts
    }

    /// Attribute names ordered by descending frequency, ties broken
    /// lexicographically by name.
    pub fn attributes_by_frequency(&self) -> Vec<(&str, u64)> {
        let mut out: Vec<(&str, u64)> = self
            .attribute_counts
            .iter()
            .map(|(k, &v)| (k.as_str(), v))
            .collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        out
    }
}

fn count_attributes<'a>(entities: impl Iterator<Item = &'a Entity>) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for e in entities {
        for av in &e.attributes {
            *counts.entry(av.name.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// A mention in context. `gold_entity_id` must resolve in the named KB;
/// NIL mentions are rejected at ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub mention_id: String,
    pub document_id: String,
    pub surface: String,
    pub left_context: String,
    pub right_context: String,
    pub gold_entity_id: String,
    pub kb_id: String,
}

/// Top-K scored candidates for one mention, descending by score with ties
/// already resolved (no duplicate ids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub mention_id: String,
    pub candidates: Vec<(String, f64)>,
}

impl CandidateList {
    pub fn contains(&self, entity_id: &str) -> bool {
        self.candidates.iter().any(|(id, _)| id == entity_id)
    }

    pub fn rank_of(&self, entity_id: &str) -> Option<usize> {
        self.candidates.iter().position(|(id, _)| id == entity_id)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("attribute name is empty after trimming")]
    EmptyAttributeName,
    #[error("duplicate entity id `{0}`")]
    DuplicateEntityId(String),
}

/// A single invariant violation found by `validate_kb`. Violations are data,
/// not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateEntityId { entity_id: String },
    EmptyAttributeName { entity_id: String },
    CountMismatch { attribute: String, recorded: u64, actual: u64 },
}

/// Re-checks every type invariant by brute force: attribute names non-empty,
/// ids unique (guaranteed by construction but re-checked), and the frequency
/// table consistent with an independent recount.
pub fn validate_kb(kb: &KnowledgeBase) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for e in kb.entities() {
        if !seen.insert(e.entity_id.as_str()) {
            violations.push(Violation::DuplicateEntityId {
                entity_id: e.entity_id.clone(),
            });
        }
        for av in &e.attributes {
            if av.name.trim().is_empty() {
                violations.push(Violation::EmptyAttributeName {
                    entity_id: e.entity_id.clone(),
                });
            }
        }
    }
    let actual = count_attributes(kb.entities());
    for (name, &recorded) in kb.attribute_counts() {
        let actual_count = actual.get(name).copied().unwrap_or(0);
        if actual_count != recorded {
            violations.push(Violation::CountMismatch {
                attribute: name.clone(),
                recorded,
                actual: actual_count,
            });
        }
    }
    for (name, &actual_count) in &actual {
        if !kb.attribute_counts().contains_key(name) {
            violations.push(Violation::CountMismatch {
                attribute: name.clone(),
                recorded: 0,
                actual: actual_count,
            });
        }
    }
    violations
}
