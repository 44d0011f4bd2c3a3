//! Loading KBs and mention datasets from JSONL files, attribute-frequency
//! filtering, and generation of synthetic cross-schema benchmarks.

use crate::kb::{AttributeValue, Entity, KnowledgeBase, Mention};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate entity id `{id}`")]
    DuplicateEntity {
        path: String,
        line: usize,
        id: String,
    },
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
}

/// A named mention split bound to one KB. `dropped_nil_count` records how
/// many mentions were discarded because their gold entity was absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub kb_id: String,
    pub mentions: Vec<Mention>,
    pub dropped_nil_count: usize,
}

impl DatasetSplit {
    /// Distinct document ids in first-seen order.
    pub fn document_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for m in &self.mentions {
            if seen.insert(m.document_id.as_str()) {
                out.push(m.document_id.clone());
            }
        }
        out
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct EntityRecord {
    id: String,
    attributes: Vec<AttributeRecord>,
}

#[derive(Debug, Deserialize, Serialize)]
struct AttributeRecord {
    name: String,
    value: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct MentionRecord {
    mention_id: String,
    document_id: String,
    mention: String,
    left_context: String,
    right_context: String,
    label_entity_id: String,
}

fn open(path: &Path) -> Result<BufReader<File>, IngestError> {
    File::open(path).map(BufReader::new).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads a KB from JSONL (one entity per line, attribute order significant).
pub fn load_kb(path: &Path, kb_id: &str) -> Result<KnowledgeBase, IngestError> {
    let reader = open(path)?;
    let mut entities: Vec<Entity> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| IngestError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EntityRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                path: path.display().to_string(),
                line: lineno,
                message: e.to_string(),
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(IngestError::DuplicateEntity {
                path: path.display().to_string(),
                line: lineno,
                id: record.id,
            });
        }
        let mut attrs = Vec::with_capacity(record.attributes.len());
        for a in record.attributes {
            let av = AttributeValue::new(&a.name, &a.value).map_err(|e| IngestError::Parse {
                path: path.display().to_string(),
                line: lineno,
                message: e.to_string(),
            })?;
            attrs.push(av);
        }
        entities.push(Entity::new(record.id, attrs));
    }
    KnowledgeBase::new(kb_id, entities).map_err(|e| IngestError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

/// Writes a KB back to the JSONL contract, preserving attribute order.
pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    for e in kb.entities() {
        let record = EntityRecord {
            id: e.entity_id.clone(),
            attributes: e
                .attributes
                .iter()
                .map(|av| AttributeRecord {
                    name: av.name.clone(),
                    value: av.value.clone(),
                })
                .collect(),
        };
        writeln!(w, "{}", serde_json::to_string(&record).unwrap()).map_err(|e| {
            IngestError::Io {
                path: path.display().to_string(),
                source: e,
            }
        })?;
    }
    Ok(())
}

/// Keeps only the `n` most frequent attributes (ties lexicographic) and
/// recomputes the frequency table. Entities whose every attribute is filtered
/// keep an empty attribute list.
pub fn filter_top_attributes(kb: &KnowledgeBase, n: usize) -> KnowledgeBase {
    assert!(n >= 1, "top-attribute filter requires n >= 1");
    let keep: BTreeSet<&str> = kb
        .attributes_by_frequency()
        .into_iter()
        .take(n)
        .map(|(name, _)| name)
        .collect();
    let entities: Vec<Entity> = kb
        .entities()
        .map(|e| {
            let attrs = e
                .attributes
                .iter()
                .filter(|av| keep.contains(av.name.as_str()))
                .cloned()
                .collect();
            Entity::new(e.entity_id.clone(), attrs)
        })
        .collect();
    KnowledgeBase::new(kb.kb_id.clone(), entities).expect("filtering preserves id uniqueness")
}

/// Loads mentions from JSONL, dropping (and counting) mentions whose gold
/// entity is absent from the KB.
pub fn load_mentions(
    path: &Path,
    kb: &KnowledgeBase,
    split_name: &str,
) -> Result<DatasetSplit, IngestError> {
    let reader = open(path)?;
    let mut mentions = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| IngestError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MentionRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                path: path.display().to_string(),
                line: lineno,
                message: e.to_string(),
            })?;
        if !kb.contains(&record.label_entity_id) {
            dropped += 1;
            continue;
        }
        mentions.push(Mention {
            mention_id: record.mention_id,
            document_id: record.document_id,
            surface: record.mention,
            left_context: record.left_context,
            right_context: record.right_context,
            gold_entity_id: record.label_entity_id,
            kb_id: kb.kb_id.clone(),
        });
    }
    Ok(DatasetSplit {
        name: split_name.to_string(),
        kb_id: kb.kb_id.clone(),
        mentions,
        dropped_nil_count: dropped,
    })
}

pub fn save_mentions(split: &DatasetSplit, path: &Path) -> Result<(), IngestError> {
    let file = File::create(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    for m in &split.mentions {
        let record = MentionRecord {
            mention_id: m.mention_id.clone(),
            document_id: m.document_id.clone(),
            mention: m.surface.clone(),
            left_context: m.left_context.clone(),
            right_context: m.right_context.clone(),
            label_entity_id: m.gold_entity_id.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&record).unwrap()).map_err(|e| {
            IngestError::Io {
                path: path.display().to_string(),
                source: e,
            }
        })?;
    }
    Ok(())
}

/// Parameters for the synthetic cross-schema benchmark generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_entities: usize,
    pub attributes_min: usize,
    pub attributes_max: usize,
    pub schema_size: usize,
    pub schema_overlap: f64,
    pub mentions_per_entity: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.num_entities == 0 {
            return Err(IngestError::InfeasibleSpec("num_entities must be > 0".into()));
        }
        if self.schema_size == 0 {
            return Err(IngestError::InfeasibleSpec("schema_size must be > 0".into()));
        }
        if self.schema_size < 5 || self.attributes_min < 3 {
            return Err(IngestError::InfeasibleSpec(
                "need schema_size >= 5 and attributes_min >= 3: three key slots, a companion attribute, and at least one noise attribute".into(),
            ));
        }
        if self.attributes_min > self.attributes_max {
            return Err(IngestError::InfeasibleSpec(
                "attributes_min > attributes_max".into(),
            ));
        }
        if self.attributes_max > self.schema_size - 2 {
            return Err(IngestError::InfeasibleSpec(
                "attributes_max exceeds one key slot plus the companion and available noise attributes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.schema_overlap) {
            return Err(IngestError::InfeasibleSpec(
                "schema_overlap outside [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Output of the generator: train/test KBs over partially overlapping schemas
/// plus mention splits for each.
pub struct SyntheticBenchmark {
    pub train_kb: KnowledgeBase,
    pub test_kb: KnowledgeBase,
    pub train_split: DatasetSplit,
    pub test_split: DatasetSplit,
}

// Context fillers and value fillers are disjoint so filler overlap never
// competes with identity-word overlap.
const CONTEXT_FILLERS: &[&str] = &[
    "the", "a", "report", "mentions", "near", "during", "event", "was", "seen",
    "at", "with", "known", "for", "its", "local", "record", "about",
];
const VALUE_FILLERS: &[&str] = &[
    "vtype", "vnote", "vitem", "vdata", "vpart", "vcode", "vmark", "vunit",
    "vkind", "vform", "vrank", "vsort",
];

/// Probability that a noise attribute borrows a confuser identity word instead
/// of being pure filler. High enough that bag-of-words matching over the whole
/// serialization is unreliable, low enough that the linking task stays
/// learnable from a few hundred entities.
const BORROW_PROB: f64 = 0.35;

/// Builds one KB's schema: `shared` names common to both KBs first, then
/// KB-specific names. The first three schema names are the key slots (one of
/// them holds an entity's marked identity word), the fourth is the companion
/// attribute carrying the second identity word, and the rest are noise
/// attributes holding filler or confuser words borrowed from other entities,
/// so attribute identity is informative.
fn schema_names(shared: usize, total: usize, tag: &str) -> Vec<String> {
    let mut names = Vec::with_capacity(total);
    for i in 0..shared {
        if i < 3 {
            names.push(format!("key_{i:02}"));
        } else {
            names.push(format!("com_{i:02}"));
        }
    }
    for i in shared..total {
        names.push(format!("{tag}_{i:02}"));
    }
    names
}

/// Number of key-attribute slots. The first `KEY_SLOTS` schema names are key
/// attributes; each entity stores its marked identity word in exactly one of
/// them. The schema name directly after the key slots is the companion
/// attribute holding the entity's second identity word.
const KEY_SLOTS: usize = 3;

/// Plain words the mention text uses to state which key slot the adjacent
/// identity word belongs to.
const ROLE_MARKERS: [&str; KEY_SLOTS] = ["mk00", "mk01", "mk02"];

/// Identity of one entity: its marked word stored under key slot `slot`, and
/// its companion word stored under the companion attribute.
struct Identity {
    slot: usize,
    marked: String,
    companion: String,
}

/// Shared pool of identity words. Entities are built in groups of six that
/// reuse one word pair under every slot assignment, so the word multiset
/// alone cannot identify an entity within a group; only the pairing of word
/// and key attribute can. Train and test KBs draw overlapping words but
/// disjoint pairs, and every pool word occurs in the training KB (see
/// `ensure_pool_coverage`), so test entities are described entirely by
/// trained tokens in new combinations.
struct WordPool {
    words: Vec<String>,
}

impl WordPool {
    fn new(entities_per_kb: usize) -> Self {
        // Smallest pool whose unordered pairs cover both splits' groups. A
        // deliberately tight pool makes every word recur across many groups,
        // so no single word — and no memorized word-to-entity association —
        // identifies a group; only the combination of two words does.
        let pairs_needed = 2 * entities_per_kb.div_ceil(6);
        let mut size = 6;
        while size * (size - 1) / 2 < pairs_needed {
            size += 1;
        }
        Self {
            words: (0..size).map(|i| format!("kw{i:03}")).collect(),
        }
    }

    /// The j-th word pair of a KB. Unordered pairs are enumerated in a fixed
    /// lexicographic order; the train split (`offset` 0) takes even-indexed
    /// pairs and the test split (`offset` 1) odd-indexed ones, so the two
    /// splits share words but never a pair.
    fn pair(&self, j: usize, offset: usize) -> (&str, &str) {
        let mut q = 2 * j + offset;
        let m = self.words.len();
        for i in 0..m - 1 {
            let fanout = m - 1 - i;
            if q < fanout {
                return (&self.words[i], &self.words[i + 1 + q]);
            }
            q -= fanout;
        }
        unreachable!("pair index out of range for pool size {m}");
    }
}

/// The six variants of a group cover every (key slot, marked word) choice for
/// the group's word pair. All six share the same word multiset; only the
/// marked/companion assignment and the governing key slot differ.
fn identity_for(pool: &WordPool, index: usize, pair_offset: usize) -> Identity {
    let (group, variant) = (index / 6, index % 6);
    let (x, y) = pool.pair(group, pair_offset);
    let (marked, companion) = if variant % 2 == 0 { (x, y) } else { (y, x) };
    Identity {
        slot: variant / 2,
        marked: marked.to_string(),
        companion: companion.to_string(),
    }
}

struct KbBuild {
    kb: KnowledgeBase,
    identities: Vec<Identity>,
}

fn generate_kb(
    spec: &SyntheticSpec,
    kb_id: &str,
    tag: &str,
    schema: &[String],
    pool: &WordPool,
    pair_offset: usize,
    rng: &mut ChaCha20Rng,
) -> Result<KbBuild, IngestError> {
    let n = spec.num_entities;
    let identities: Vec<Identity> = (0..n).map(|i| identity_for(pool, i, pair_offset)).collect();
    // Word pairs are disjoint within a KB, so a borrow that completes another
    // pair would forge a full identity; the guard below rejects those.
    let mut partner: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
    for j in 0..n.div_ceil(6) {
        let (x, y) = pool.pair(j, pair_offset);
        partner.entry(x).or_default().push(y);
        partner.entry(y).or_default().push(x);
    }
    let mut entities = Vec::with_capacity(n);
    for i in 0..n {
        let ident = &identities[i];
        let n_attrs = rng.gen_range(spec.attributes_min..=spec.attributes_max);
        let mut attrs = Vec::with_capacity(n_attrs);
        let vfiller = |rng: &mut ChaCha20Rng| VALUE_FILLERS[rng.gen_range(0..VALUE_FILLERS.len())];
        // Key attribute: the marked word alone, under its slot's schema name,
        // so only the governing attribute distinguishes the slot variants.
        attrs.push(AttributeValue::new(&schema[ident.slot], &ident.marked).unwrap());
        // Companion attribute: the second identity word embedded after a
        // filler, so it never starts an attribute value.
        attrs.push(
            AttributeValue::new(
                &schema[KEY_SLOTS],
                &format!("{} {}", vfiller(rng), ident.companion),
            )
            .unwrap(),
        );
        // Noise attributes: filler, sometimes with one identity word borrowed
        // from some other entity embedded after it — indistinguishable from a
        // companion value except by its attribute.
        let mut value_words: BTreeSet<&str> =
            [ident.marked.as_str(), ident.companion.as_str()].into();
        let mut rest: Vec<&String> = schema.iter().skip(KEY_SLOTS + 1).collect();
        rest.shuffle(rng);
        for name in rest.into_iter().take(n_attrs.saturating_sub(2)) {
            let mut borrowed: Option<&str> = None;
            if n > 1 && rng.gen_bool(BORROW_PROB) {
                for _ in 0..20 {
                    let mut o = rng.gen_range(0..n - 1);
                    if o >= i {
                        o += 1;
                    }
                    let other = &identities[o];
                    let w = if rng.gen_bool(0.5) {
                        other.marked.as_str()
                    } else {
                        other.companion.as_str()
                    };
                    if value_words.contains(w) {
                        continue;
                    }
                    if partner
                        .get(w)
                        .is_some_and(|ps| ps.iter().any(|p| value_words.contains(p)))
                    {
                        continue;
                    }
                    borrowed = Some(w);
                    break;
                }
            }
            let value = match borrowed {
                Some(w) => {
                    value_words.insert(w);
                    format!("{} {}", vfiller(rng), w)
                }
                None => vfiller(rng).to_string(),
            };
            attrs.push(AttributeValue::new(name, &value).unwrap());
        }
        entities.push(Entity::new(format!("{tag}_e{i:04}"), attrs));
    }
    let kb = KnowledgeBase::new(kb_id, entities).unwrap();
    Ok(KbBuild { kb, identities })
}

/// Appends any pool word missing from the KB to a synthetic coverage entity
/// so the training corpus always covers the full identity vocabulary.
fn ensure_pool_coverage(build: &mut KbBuild, pool: &WordPool, schema: &[String], tag: &str) {
    let present: BTreeSet<String> = build
        .kb
        .entities()
        .flat_map(|e| e.attributes.iter())
        .flat_map(|av| av.value.split_whitespace().map(str::to_string))
        .collect();
    let missing: Vec<&String> = pool
        .words
        .iter()
        .filter(|w| !present.contains(w.as_str()))
        .collect();
    if missing.is_empty() {
        return;
    }
    let words: Vec<String> = missing.into_iter().cloned().collect();
    let cover = Entity::new(
        format!("{tag}_vocab"),
        vec![AttributeValue::new(&schema[schema.len() - 1], &words.join(" ")).unwrap()],
    );
    let mut entities: Vec<Entity> = build.kb.entities().cloned().collect();
    entities.push(cover);
    build.kb = KnowledgeBase::new(build.kb.kb_id.clone(), entities).unwrap();
}

fn generate_mentions(
    spec: &SyntheticSpec,
    build: &KbBuild,
    split_name: &str,
    tag: &str,
    rng: &mut ChaCha20Rng,
) -> DatasetSplit {
    const MENTIONS_PER_DOC: usize = 4;
    let n = spec.num_entities;
    let mut mentions = Vec::new();
    let mut order: Vec<usize> = (0..n)
        .flat_map(|i| std::iter::repeat(i).take(spec.mentions_per_entity))
        .collect();
    order.shuffle(rng);
    let entity_ids: Vec<String> = build.kb.entities().map(|e| e.entity_id.clone()).collect();
    let value_sets: Vec<BTreeSet<String>> = build
        .kb
        .entities()
        .map(|e| {
            e.attributes
                .iter()
                .flat_map(|av| av.value.split_whitespace().map(str::to_string))
                .collect()
        })
        .collect();
    for (m_idx, &i) in order.iter().enumerate() {
        let ident = &build.identities[i];
        let filler =
            |rng: &mut ChaCha20Rng| CONTEXT_FILLERS[rng.gen_range(0..CONTEXT_FILLERS.len())];
        // The marked word is the surface, announced by its key slot's role
        // marker directly before it; the companion word sits bare in the
        // right context. An optional bare confuser word (no marker) lands at
        // the window edge.
        let mut left = vec![filler(rng).to_string(), ROLE_MARKERS[ident.slot].to_string()];
        let mut right = vec![ident.companion.clone(), filler(rng).to_string()];
        if n > 1 && rng.gen_bool(0.7) {
            for _ in 0..20 {
                let mut o = rng.gen_range(0..n - 1);
                if o >= i {
                    o += 1;
                }
                let other = &build.identities[o];
                let confuser = if rng.gen_bool(0.5) {
                    &other.marked
                } else {
                    &other.companion
                };
                // Skip words that would let a rival out-score the gold: one
                // holding both identity words plus the confuser (through a
                // borrowed noise value) would win on raw word overlap, and
                // one holding the gold's key assignment plus the confuser
                // would tie under role-aware matching.
                let forges = value_sets.iter().enumerate().any(|(j, set)| {
                    j != i
                        && set.contains(confuser)
                        && !value_sets[i].contains(confuser)
                        && ((set.contains(&ident.marked) && set.contains(&ident.companion))
                            || (build.identities[j].slot == ident.slot
                                && build.identities[j].marked == ident.marked))
                });
                if !forges {
                    let confuser = confuser.clone();
                    if rng.gen_bool(0.5) {
                        left.insert(0, confuser);
                    } else {
                        right.push(confuser);
                    }
                    break;
                }
            }
        }
        mentions.push(Mention {
            mention_id: format!("{tag}_m{m_idx:05}"),
            document_id: format!("{tag}_d{:04}", m_idx / MENTIONS_PER_DOC),
            surface: ident.marked.clone(),
            left_context: left.join(" "),
            right_context: right.join(" "),
            gold_entity_id: entity_ids[i].clone(),
            kb_id: build.kb.kb_id.clone(),
        });
    }
    // Training-only partial mentions: one identity word alone — the marked
    // word with its role marker, or the companion word bare. Their gold is
    // ambiguous on purpose (every entity holding the same word the same way
    // fits equally), and each entity contributes one, so across the split the
    // gradient they induce averages toward matching individual
    // (attribute, word) units rather than memorizing whole word pairs. Their
    // ids start with "{tag}_p" so evaluation-oriented consumers can tell
    // them apart.
    if split_name == "train" {
        let base = mentions.len();
        for (i, ident) in build.identities.iter().enumerate() {
            let filler =
                |rng: &mut ChaCha20Rng| CONTEXT_FILLERS[rng.gen_range(0..CONTEXT_FILLERS.len())];
            let (left, surface) = if rng.gen_bool(0.5) {
                (
                    format!("{} {}", filler(rng), ROLE_MARKERS[ident.slot]),
                    ident.marked.clone(),
                )
            } else {
                (filler(rng).to_string(), ident.companion.clone())
            };
            mentions.push(Mention {
                mention_id: format!("{tag}_p{i:05}"),
                document_id: format!("{tag}_d{:04}", (base + i) / MENTIONS_PER_DOC),
                surface,
                left_context: left,
                right_context: filler(rng).to_string(),
                gold_entity_id: entity_ids[i].clone(),
                kb_id: build.kb.kb_id.clone(),
            });
        }
    }
    DatasetSplit {
        name: split_name.to_string(),
        kb_id: build.kb.kb_id.clone(),
        mentions,
        dropped_nil_count: 0,
    }
}

/// Generates a deterministic train/test benchmark whose schemas share exactly
/// `round(schema_overlap * schema_size)` attribute names.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBenchmark, IngestError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let shared = (spec.schema_overlap * spec.schema_size as f64).round() as usize;
    let train_schema = schema_names(shared, spec.schema_size, "trn");
    let test_schema = schema_names(shared, spec.schema_size, "tst");
    let pool = WordPool::new(spec.num_entities);
    let mut train = generate_kb(spec, "synth_train", "trn", &train_schema, &pool, 0, &mut rng)?;
    let test = generate_kb(spec, "synth_test", "tst", &test_schema, &pool, 1, &mut rng)?;
    let train_split = generate_mentions(spec, &train, "train", "trn", &mut rng);
    let test_split = generate_mentions(spec, &test, "test", "tst", &mut rng);
    ensure_pool_coverage(&mut train, &pool, &train_schema, "trn");
    Ok(SyntheticBenchmark {
        train_kb: train.kb,
        test_kb: test.kb,
        train_split,
        test_split,
    })
}

/// Scores entities by exact token overlap between mention text and attribute
/// values and returns every top-scoring entity id. The synthetic gold always
/// ties for the best overlap but is not necessarily unique: the variants of
/// its word pair share the same words.
pub fn overlap_best_entities(kb: &KnowledgeBase, m: &Mention) -> Vec<String> {
    let context: BTreeSet<&str> = m
        .left_context
        .split_whitespace()
        .chain(m.surface.split_whitespace())
        .chain(m.right_context.split_whitespace())
        .collect();
    let mut scored: Vec<(usize, String)> = kb
        .entities()
        .map(|e| {
            let score = e
                .attributes
                .iter()
                .flat_map(|av| av.value.split_whitespace())
                .collect::<BTreeSet<&str>>()
                .intersection(&context)
                .count();
            (score, e.entity_id.clone())
        })
        .collect();
    let best = scored.iter().map(|(s, _)| *s).max().unwrap_or(0);
    scored.retain(|(s, _)| *s == best);
    scored.into_iter().map(|(_, id)| id).collect()
}

/// Role-aware oracle: pairs each role marker in the mention with the word
/// directly after it, scores entities by matching (key slot, word)
/// assignments (weight 2) plus plain word overlap with the mention (weight
/// 1), and requires a unique winner. The synthetic gold is always the unique
/// best for full mentions, so the benchmark is solvable exactly when the
/// attribute governing each value is taken into account.
pub fn role_best_entity(kb: &KnowledgeBase, m: &Mention) -> Option<String> {
    let stream: Vec<&str> = m
        .left_context
        .split_whitespace()
        .chain(m.surface.split_whitespace())
        .chain(m.right_context.split_whitespace())
        .collect();
    let context: BTreeSet<&str> = stream.iter().copied().collect();
    let mut wanted: BTreeSet<(usize, &str)> = BTreeSet::new();
    for w in stream.windows(2) {
        if let Some(slot) = ROLE_MARKERS.iter().position(|mk| *mk == w[0]) {
            wanted.insert((slot, w[1]));
        }
    }
    // A schema name's numeric suffix is its slot index; suffixes below
    // KEY_SLOTS mark key attributes.
    let key_slot = |name: &str| -> Option<usize> {
        let digits = name.rsplit('_').next()?;
        let slot: usize = digits.parse().ok()?;
        (slot < KEY_SLOTS).then_some(slot)
    };
    let mut best: Option<(usize, String)> = None;
    let mut unique = true;
    for e in kb.entities() {
        let key_matches = e
            .attributes
            .iter()
            .filter(|av| {
                key_slot(&av.name)
                    .is_some_and(|slot| wanted.contains(&(slot, av.value.as_str())))
            })
            .count();
        let overlap = e
            .attributes
            .iter()
            .flat_map(|av| av.value.split_whitespace())
            .collect::<BTreeSet<&str>>()
            .intersection(&context)
            .count();
        let score = 2 * key_matches + overlap;
        match &best {
            Some((b, _)) if *b > score => {}
            Some((b, _)) if *b == score => unique = false,
            _ => {
                best = Some((score, e.entity_id.clone()));
                unique = true;
            }
        }
    }
    match best {
        Some((_, id)) if unique => Some(id),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::validate_kb;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_kb_two_entities() {
        let f = write_lines(&[
            r#"{"id":"e1","attributes":[{"name":"name","value":"X"}]}"#,
            r#"{"id":"e2","attributes":[]}"#,
        ]);
        let kb = load_kb(f.path(), "kb").unwrap();
        assert_eq!(kb.len(), 2);
    }

    #[test]
    fn load_kb_counts_duplicate_attributes() {
        let f = write_lines(&[
            r#"{"id":"e1","attributes":[{"name":"name","value":"X"},{"name":"name","value":"Y"}]}"#,
        ]);
        let kb = load_kb(f.path(), "kb").unwrap();
        assert_eq!(kb.attribute_counts()["name"], 2);
    }

    #[test]
    fn load_kb_missing_id_reports_line() {
        let f = write_lines(&[
            r#"{"id":"e1","attributes":[]}"#,
            r#"{"attributes":[]}"#,
        ]);
        match load_kb(f.path(), "kb") {
            Err(IngestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_kb_duplicate_id_reports_line() {
        let f = write_lines(&[
            r#"{"id":"e1","attributes":[]}"#,
            r#"{"id":"e1","attributes":[]}"#,
        ]);
        match load_kb(f.path(), "kb") {
            Err(IngestError::DuplicateEntity { line, id, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(id, "e1");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn kb_roundtrip_preserves_structure() {
        let spec = SyntheticSpec {
            num_entities: 20,
            attributes_min: 3,
            attributes_max: 5,
            schema_size: 8,
            schema_overlap: 0.5,
            mentions_per_entity: 1,
            seed: 3,
        };
        let bench = generate_synthetic(&spec).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_kb(&bench.train_kb, f.path()).unwrap();
        let reloaded = load_kb(f.path(), bench.train_kb.kb_id.as_str()).unwrap();
        assert_eq!(reloaded, bench.train_kb);
        assert!(validate_kb(&reloaded).is_empty());
    }

    #[test]
    fn filter_top_attributes_keeps_top_n() {
        let f = write_lines(&[
            r#"{"id":"e1","attributes":[{"name":"a","value":"1"},{"name":"b","value":"2"},{"name":"c","value":"3"}]}"#,
            r#"{"id":"e2","attributes":[{"name":"a","value":"1"},{"name":"b","value":"2"}]}"#,
            r#"{"id":"e3","attributes":[{"name":"a","value":"1"},{"name":"b","value":"2"}]}"#,
        ]);
        // counts: a=3, b=3, c=1
        let kb = load_kb(f.path(), "kb").unwrap();
        let filtered = filter_top_attributes(&kb, 2);
        assert_eq!(
            filtered.attribute_counts().keys().collect::<Vec<_>>(),
            vec!["a", "b"]
        );
        assert_eq!(filtered.get("e1").unwrap().attributes.len(), 2);
    }

    #[test]
    fn filter_with_large_n_is_identity() {
        let f = write_lines(&[
            r#"{"id":"e1","attributes":[{"name":"a","value":"1"},{"name":"b","value":"2"}]}"#,
        ]);
        let kb = load_kb(f.path(), "kb").unwrap();
        assert_eq!(filter_top_attributes(&kb, 10), kb);
    }

    #[test]
    fn filter_may_empty_an_entity() {
        let f = write_lines(&[
            r#"{"id":"e1","attributes":[{"name":"a","value":"1"}]}"#,
            r#"{"id":"e2","attributes":[{"name":"b","value":"1"},{"name":"b","value":"2"}]}"#,
        ]);
        let kb = load_kb(f.path(), "kb").unwrap();
        let filtered = filter_top_attributes(&kb, 1);
        assert_eq!(filtered.len(), 2);
        assert!(filtered.get("e1").unwrap().attributes.is_empty());
    }

    #[test]
    fn filter_is_idempotent() {
        let bench = generate_synthetic(&SyntheticSpec {
            num_entities: 30,
            attributes_min: 3,
            attributes_max: 6,
            schema_size: 10,
            schema_overlap: 0.3,
            mentions_per_entity: 1,
            seed: 11,
        })
        .unwrap();
        let once = filter_top_attributes(&bench.train_kb, 4);
        let twice = filter_top_attributes(&once, 4);
        assert_eq!(once, twice);
    }

    #[test]
    fn load_mentions_drops_nil() {
        let kbf = write_lines(&[r#"{"id":"e1","attributes":[]}"#, r#"{"id":"e2","attributes":[]}"#]);
        let kb = load_kb(kbf.path(), "kb").unwrap();
        let mf = write_lines(&[
            r#"{"mention_id":"m1","document_id":"d1","mention":"x","left_context":"","right_context":"","label_entity_id":"e1"}"#,
            r#"{"mention_id":"m2","document_id":"d1","mention":"y","left_context":"l","right_context":"r","label_entity_id":"missing"}"#,
            r#"{"mention_id":"m3","document_id":"d2","mention":"z","left_context":"","right_context":"","label_entity_id":"e2"}"#,
        ]);
        let split = load_mentions(mf.path(), &kb, "train").unwrap();
        assert_eq!(split.mentions.len(), 2);
        assert_eq!(split.dropped_nil_count, 1);
    }

    #[test]
    fn load_mentions_empty_file() {
        let kbf = write_lines(&[r#"{"id":"e1","attributes":[]}"#]);
        let kb = load_kb(kbf.path(), "kb").unwrap();
        let mf = write_lines(&[]);
        let split = load_mentions(mf.path(), &kb, "train").unwrap();
        assert!(split.mentions.is_empty());
    }

    fn base_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_entities: 25,
            attributes_min: 3,
            attributes_max: 5,
            schema_size: 10,
            schema_overlap: 0.3,
            mentions_per_entity: 2,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&base_spec()).unwrap();
        let b = generate_synthetic(&base_spec()).unwrap();
        assert_eq!(a.train_kb, b.train_kb);
        assert_eq!(a.test_kb, b.test_kb);
        assert_eq!(a.train_split.mentions, b.train_split.mentions);
        assert_eq!(a.test_split.mentions, b.test_split.mentions);
    }

    #[test]
    fn synthetic_schema_overlap_exact() {
        for (overlap, expect_shared) in [(0.0, 0usize), (0.3, 3), (1.0, 10)] {
            // Every entity carries the full schema so the realized attribute
            // sets coincide with the designed schemas.
            let spec = SyntheticSpec {
                schema_overlap: overlap,
                attributes_min: 8,
                attributes_max: 8,
                ..base_spec()
            };
            let bench = generate_synthetic(&spec).unwrap();
            let train: BTreeSet<&String> = bench.train_kb.attribute_counts().keys().collect();
            let test: BTreeSet<&String> = bench.test_kb.attribute_counts().keys().collect();
            assert_eq!(train.intersection(&test).count(), expect_shared);
            if overlap == 1.0 {
                assert_eq!(train, test);
            }
        }
    }

    #[test]
    fn synthetic_infeasible_spec_rejected() {
        let spec = SyntheticSpec {
            attributes_max: 20,
            ..base_spec()
        };
        assert!(matches!(
            generate_synthetic(&spec),
            Err(IngestError::InfeasibleSpec(_))
        ));
    }

    #[test]
    fn synthetic_solvable_by_role_oracle_only() {
        let bench = generate_synthetic(&base_spec()).unwrap();
        let mut overlap_ambiguous = 0usize;
        let mut total = 0usize;
        for (split, kb) in [
            (&bench.train_split, &bench.train_kb),
            (&bench.test_split, &bench.test_kb),
        ] {
            for m in &split.mentions {
                // Word overlap always keeps the gold among the leaders…
                let leaders = overlap_best_entities(kb, m);
                assert!(
                    leaders.contains(&m.gold_entity_id),
                    "mention {} lost under word overlap",
                    m.mention_id
                );
                // Partial training mentions are ambiguous by design; the
                // uniqueness guarantee covers full mentions only.
                if m.mention_id.contains("_p") {
                    continue;
                }
                total += 1;
                if leaders.len() > 1 {
                    overlap_ambiguous += 1;
                }
                // …but only role-aware matching pins it down uniquely.
                assert_eq!(
                    role_best_entity(kb, m).as_deref(),
                    Some(m.gold_entity_id.as_str()),
                    "mention {} not solvable by role matching",
                    m.mention_id
                );
            }
        }
        // The benchmark must actually punish role-blind matching.
        assert!(overlap_ambiguous * 2 > total, "too few ambiguous mentions");
    }

    #[test]
    fn synthetic_gold_always_in_kb() {
        let bench = generate_synthetic(&base_spec()).unwrap();
        for m in &bench.train_split.mentions {
            assert!(bench.train_kb.contains(&m.gold_entity_id));
        }
        for m in &bench.test_split.mentions {
            assert!(bench.test_kb.contains(&m.gold_entity_id));
        }
    }
}
