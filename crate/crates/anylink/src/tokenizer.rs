//! Whitespace + greedy-subword tokenizer over a project vocab file. Reserved
//! tokens and attribute-separator tokens are matched exactly and never split.

use indexmap::IndexMap;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::serialize::{RESERVED_TOKENS, UNK};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// token -> id, insertion order = id order.
    tokens: IndexMap<String, usize>,
}

impl Vocab {
    /// Builds a vocab from whitespace tokens of a corpus: reserved tokens
    /// first, then corpus tokens by descending frequency (ties lexicographic).
    pub fn build<'a>(corpus: impl Iterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        let mut texts: Vec<&str> = Vec::new();
        for text in corpus {
            texts.push(text);
        }
        for text in &texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ordered: Vec<(&str, u64)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Self {
            tokens: IndexMap::new(),
        };
        for t in RESERVED_TOKENS {
            vocab.push(t);
        }
        for (t, _) in ordered {
            vocab.push(t);
        }
        vocab
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut vocab = Self {
            tokens: IndexMap::new(),
        };
        for t in tokens {
            vocab.push(&t);
        }
        vocab
    }

    fn push(&mut self, token: &str) {
        if !self.tokens.contains_key(token) {
            let id = self.tokens.len();
            self.tokens.insert(token.to_string(), id);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.get(token).copied()
    }

    pub fn token_at(&self, id: usize) -> Option<&str> {
        self.tokens.get_index(id).map(|(t, _)| t.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains_key(token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.keys().map(String::as_str)
    }

    /// Appends a token, returning its id. Errors if already present.
    pub fn append(&mut self, token: &str) -> Result<usize, String> {
        if self.tokens.contains_key(token) {
            return Err(format!("token `{token}` already in vocabulary"));
        }
        let id = self.tokens.len();
        self.tokens.insert(token.to_string(), id);
        Ok(id)
    }

    pub fn unk_id(&self) -> usize {
        self.id_of(UNK).expect("vocab built without reserved tokens")
    }

    /// Splits a whitespace word into known pieces by greedy longest-prefix
    /// matching; unmatched leading characters become [UNK].
    fn subword_split(&self, word: &str, out: &mut Vec<usize>) {
        let mut rest = word;
        while !rest.is_empty() {
            let mut matched = None;
            let boundaries: Vec<usize> = rest
                .char_indices()
                .map(|(i, _)| i)
                .skip(1)
                .chain(std::iter::once(rest.len()))
                .collect();
            for &end in boundaries.iter().rev() {
                if let Some(id) = self.id_of(&rest[..end]) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    rest = &rest[end..];
                }
                None => {
                    out.push(self.unk_id());
                    let mut chars = rest.char_indices();
                    chars.next();
                    rest = match chars.next() {
                        Some((i, _)) => &rest[i..],
                        None => "",
                    };
                }
            }
        }
    }

    /// Tokenizes a pre-serialized string into ids. Whole-word matches (which
    /// include reserved and separator tokens) are single tokens.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self.id_of(word) {
                Some(id) => out.push(id),
                None => self.subword_split(word, &mut out),
            }
        }
        out
    }

    /// Like `encode` but also maps whitespace-word spans to token spans,
    /// for carrying a mention span through subword splitting.
    pub fn encode_with_word_spans(&self, text: &str) -> (Vec<usize>, Vec<(usize, usize)>) {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        for word in text.split_whitespace() {
            let start = ids.len();
            match self.id_of(word) {
                Some(id) => ids.push(id),
                None => self.subword_split(word, &mut ids),
            }
            spans.push((start, ids.len()));
        }
        (ids, spans)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for t in self.tokens.keys() {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::from_tokens(
            text.lines().filter(|l| !l.is_empty()).map(str::to_string),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::serialize::{CLS, SEP};

    fn vocab() -> Vocab {
        Vocab::build(["hello world worldly play playing ing", "hello hello"].into_iter())
    }

    #[test]
    fn reserved_tokens_come_first() {
        let v = vocab();
        assert_eq!(v.id_of("[PAD]"), Some(0));
        assert_eq!(v.id_of(UNK), Some(1));
        assert_eq!(v.id_of(CLS), Some(2));
        assert_eq!(v.id_of(SEP), Some(3));
    }

    #[test]
    fn frequency_orders_corpus_tokens() {
        let v = vocab();
        // "hello" appears 3 times, everything else once.
        assert_eq!(v.id_of("hello"), Some(RESERVED_TOKENS.len()));
    }

    #[test]
    fn whole_word_match_is_single_token() {
        let v = vocab();
        assert_eq!(v.encode("hello world"), vec![
            v.id_of("hello").unwrap(),
            v.id_of("world").unwrap()
        ]);
    }

    #[test]
    fn greedy_subword_prefers_longest_prefix() {
        let v = vocab();
        // "worldlying" -> "worldly" + "ing"
        assert_eq!(v.encode("worldlying"), vec![
            v.id_of("worldly").unwrap(),
            v.id_of("ing").unwrap()
        ]);
    }

    #[test]
    fn unknown_chars_become_unk() {
        let v = vocab();
        let ids = v.encode("zzz");
        assert!(ids.iter().all(|&id| id == v.unk_id()));
    }

    #[test]
    fn separator_tokens_never_split() {
        let mut v = vocab();
        v.append("[K_NAME]").unwrap();
        let ids = v.encode("[SEP] hello [K_NAME] world");
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[2], v.id_of("[K_NAME]").unwrap());
    }

    #[test]
    fn word_spans_track_subword_expansion() {
        let v = vocab();
        let (ids, spans) = v.encode_with_word_spans("hello worldlying");
        assert_eq!(ids.len(), 3);
        assert_eq!(spans, vec![(0, 1), (1, 3)]);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = vocab();
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        assert_eq!(Vocab::load(f.path()).unwrap(), v);
    }
}
