//! Attribute-to-text serialization: the three entity-to-string modes, the
//! attribute-separator registry, mention-in-context rendering, and the two
//! training-time regularizers (attribute-OOV and attribute-shuffle).

use crate::kb::{Entity, KnowledgeBase, Mention};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const SEP: &str = "[SEP]";
pub const CLS: &str = "[CLS]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const RESERVED_TOKENS: &[&str] = &[PAD, UNK, CLS, SEP, MASK];

/// How entity attribute-value pairs are flattened into a string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerializationMode {
    /// Values only, joined by spaces.
    Concatenation,
    /// Every value prefixed by [SEP].
    SepSeparation,
    /// Values prefixed by their attribute's separator token, [SEP] fallback
    /// for attributes absent from the registry.
    AttributeSeparation,
}

impl std::str::FromStr for SerializationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concatenation" => Ok(Self::Concatenation),
            "sep_separation" => Ok(Self::SepSeparation),
            "attribute_separation" => Ok(Self::AttributeSeparation),
            other => Err(format!("unknown serialization mode `{other}`")),
        }
    }
}

/// Maps the most frequent training attributes to reserved separator tokens,
/// in frequency-descending order (ties lexicographic).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparatorRegistry {
    pub source_kb_id: String,
    pub capacity: usize,
    /// attribute name -> separator token, insertion order = frequency rank.
    entries: IndexMap<String, String>,
}

fn separator_token(name: &str) -> String {
    let core: String = name
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_uppercase();
    format!("[K_{core}]")
}

impl SeparatorRegistry {
    pub fn empty(source_kb_id: &str, capacity: usize) -> Self {
        Self {
            source_kb_id: source_kb_id.to_string(),
            capacity,
            entries: IndexMap::new(),
        }
    }

    /// Builds the registry from the `capacity` most frequent attributes.
    pub fn build(train_kb: &KnowledgeBase, capacity: usize) -> Self {
        assert!(capacity >= 1, "registry capacity must be >= 1");
        Self::from_counts(&train_kb.kb_id, train_kb.attribute_counts(), capacity)
    }

    /// Builds from a raw frequency table (used for pooled multi-dataset
    /// registries).
    pub fn from_counts(kb_id: &str, counts: &BTreeMap<String, u64>, capacity: usize) -> Self {
        let mut ordered: Vec<(&String, &u64)> = counts.iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut entries = IndexMap::new();
        let mut used: std::collections::HashSet<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for (name, _) in ordered.into_iter().take(capacity) {
            let base = separator_token(name);
            let mut token = base.clone();
            let mut suffix = 2;
            while used.contains(&token) {
                token = format!("{}_{suffix}]", &base[..base.len() - 1]);
                suffix += 1;
            }
            used.insert(token.clone());
            entries.insert(name.clone(), token);
        }
        Self {
            source_kb_id: kb_id.to_string(),
            capacity,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn separator_for(&self, attribute: &str) -> Option<&str> {
        self.entries.get(attribute).map(String::as_str)
    }

    /// Frequency rank of a registry attribute (0 = most frequent).
    pub fn rank_of(&self, attribute: &str) -> Option<usize> {
        self.entries.get_index_of(attribute)
    }

    /// Separator tokens in rank order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.values().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// One line per entry: rank TAB attribute TAB token.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# kb_id={}\tcapacity={}\n", self.source_kb_id, self.capacity));
        for (rank, (name, token)) in self.entries.iter().enumerate() {
            out.push_str(&format!("{rank}\t{name}\t{token}\n"));
        }
        fs::write(path, out)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| anyhow::anyhow!("empty registry file {}", path.display()))?;
        let header = header.trim_start_matches("# ");
        let mut source_kb_id = String::new();
        let mut capacity = 0usize;
        for field in header.split('\t') {
            if let Some(v) = field.strip_prefix("kb_id=") {
                source_kb_id = v.to_string();
            } else if let Some(v) = field.strip_prefix("capacity=") {
                capacity = v.parse()?;
            }
        }
        let mut entries = IndexMap::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                anyhow::bail!("{}:{}: expected rank\\tname\\ttoken", path.display(), i + 2);
            }
            entries.insert(parts[1].to_string(), parts[2].to_string());
        }
        Ok(Self {
            source_kb_id,
            capacity,
            entries,
        })
    }
}

/// Serialization settings. `shuffle` and `oov_drop_prob` are training-time
/// only; `inference()` forces both off.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SerializationConfig {
    pub mode: SerializationMode,
    pub shuffle: bool,
    pub oov_drop_prob: f64,
    pub max_tokens: usize,
}

impl SerializationConfig {
    pub fn inference(mode: SerializationMode, max_tokens: usize) -> Self {
        Self {
            mode,
            shuffle: false,
            oov_drop_prob: 0.0,
            max_tokens,
        }
    }

    pub fn needs_rng(&self) -> bool {
        self.shuffle || self.oov_drop_prob > 0.0
    }
}

/// One attribute rendered for serialization: the separator token (if the mode
/// uses one) plus the value tokens.
struct Unit<'a> {
    separator: Option<String>,
    value: &'a str,
}

/// Flattens an entity into a token-ready string.
///
/// Attributes are first ordered frequency-descending by the training-KB
/// counts embodied in the registry; attributes unseen in training sort after
/// seen ones, ordered by their own KB's counts (`own_counts`), ties
/// lexicographic. With `cfg.shuffle` the attribute units are then permuted.
/// Truncation to `cfg.max_tokens` drops whole attribute units from the tail
/// first, then partial values, never leaving a dangling separator.
pub fn serialize_entity(
    entity: &Entity,
    own_counts: &BTreeMap<String, u64>,
    registry: &SeparatorRegistry,
    cfg: &SerializationConfig,
    rng: Option<&mut ChaCha20Rng>,
) -> String {
    assert!(
        !cfg.needs_rng() || rng.is_some(),
        "shuffle/oov serialization requires an rng"
    );
    let mut order: Vec<usize> = (0..entity.attributes.len()).collect();
    let key = |i: &usize| {
        let name = entity.attributes[*i].name.as_str();
        match registry.rank_of(name) {
            // Seen attributes first, by training-KB frequency rank.
            Some(rank) => (0u8, rank as i64, 0i64, name.to_string()),
            // Unseen after, by own-KB frequency descending, then name.
            None => {
                let own = own_counts.get(name).copied().unwrap_or(0) as i64;
                (1u8, 0, -own, name.to_string())
            }
        }
    };
    order.sort_by_key(key);

    let mut rng = rng;
    if cfg.shuffle {
        order.shuffle(rng.as_deref_mut().unwrap());
    }

    let mut units: Vec<Unit> = Vec::with_capacity(order.len());
    for i in order {
        let av = &entity.attributes[i];
        let separator = match cfg.mode {
            SerializationMode::Concatenation => None,
            SerializationMode::SepSeparation => Some(SEP.to_string()),
            SerializationMode::AttributeSeparation => {
                let tok = registry
                    .separator_for(&av.name)
                    .unwrap_or(SEP)
                    .to_string();
                let tok = if tok != SEP && cfg.oov_drop_prob > 0.0 {
                    let r = rng.as_deref_mut().unwrap();
                    if r.gen_bool(cfg.oov_drop_prob) {
                        SEP.to_string()
                    } else {
                        tok
                    }
                } else {
                    tok
                };
                Some(tok)
            }
        };
        units.push(Unit {
            separator,
            value: &av.value,
        });
    }

    let mut tokens: Vec<&str> = Vec::new();
    'outer: for unit in &units {
        let value_tokens: Vec<&str> = unit.value.split_whitespace().collect();
        let unit_len = value_tokens.len() + unit.separator.is_some() as usize;
        let remaining = cfg.max_tokens.saturating_sub(tokens.len());
        if unit_len <= remaining {
            if let Some(sep) = &unit.separator {
                tokens.push(sep);
            }
            tokens.extend(value_tokens);
        } else {
            // Partial fit: need room for the separator and at least one
            // value token, otherwise drop the unit entirely.
            let sep_len = unit.separator.is_some() as usize;
            if remaining > sep_len && !value_tokens.is_empty() {
                if let Some(sep) = &unit.separator {
                    tokens.push(sep);
                }
                tokens.extend(&value_tokens[..remaining - sep_len]);
            }
            break 'outer;
        }
    }
    tokens.join(" ")
}

/// A serialized mention: the context window with token indices delimiting the
/// mention span (for the indicator embedding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedMention {
    pub text: String,
    /// Half-open token range of the mention inside `text`.
    pub span: (usize, usize),
    pub mention_truncated: bool,
}

/// Renders "c_l m c_r" within `max_tokens`, keeping the mention whole and
/// filling the remaining budget with the nearest context tokens, taken
/// alternately from the left and right of the mention.
pub fn serialize_mention(m: &Mention, max_tokens: usize) -> SerializedMention {
    let left: Vec<&str> = m.left_context.split_whitespace().collect();
    let right: Vec<&str> = m.right_context.split_whitespace().collect();
    let mention: Vec<&str> = m.surface.split_whitespace().collect();

    if mention.len() >= max_tokens {
        let kept = &mention[..max_tokens];
        return SerializedMention {
            text: kept.join(" "),
            span: (0, kept.len()),
            mention_truncated: mention.len() > max_tokens,
        };
    }

    let mut budget = max_tokens - mention.len();
    let mut n_left = 0usize;
    let mut n_right = 0usize;
    let mut take_left = true;
    while budget > 0 && (n_left < left.len() || n_right < right.len()) {
        if take_left && n_left < left.len() {
            n_left += 1;
            budget -= 1;
        } else if !take_left && n_right < right.len() {
            n_right += 1;
            budget -= 1;
        } else if n_left < left.len() {
            n_left += 1;
            budget -= 1;
        } else {
            n_right += 1;
            budget -= 1;
        }
        take_left = !take_left;
    }

    let kept_left = &left[left.len() - n_left..];
    let kept_right = &right[..n_right];
    let mut tokens: Vec<&str> = Vec::with_capacity(n_left + mention.len() + n_right);
    tokens.extend(kept_left);
    tokens.extend(&mention);
    tokens.extend(kept_right);
    SerializedMention {
        text: tokens.join(" "),
        span: (n_left, n_left + mention.len()),
        mention_truncated: false,
    }
}

/// Parses a serialized entity (sep or attribute mode) back into
/// (separator, value) pairs. Used to check shuffle invariance.
pub fn parse_units(serialized: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for token in serialized.split_whitespace() {
        let is_separator =
            token == SEP || (token.starts_with("[K_") && token.ends_with(']'));
        if is_separator {
            out.push((token.to_string(), String::new()));
        } else if let Some(last) = out.last_mut() {
            if !last.1.is_empty() {
                last.1.push(' ');
            }
            last.1.push_str(token);
        } else {
            out.push((String::new(), token.to_string()));
        }
    }
    out
}
