//! Pluggable part-of-speech tagging.
//!
//! The shipped tagger is a plain lexicon lookup over a bundled word list;
//! it is approximate by construction and exact numbers are only asserted
//! against fixture lexicons in tests.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosTag {
    Noun,
    Verb,
    Adjective,
    Other,
}

#[derive(Debug, Error)]
#[error("tagger failed on token {token}: {detail}")]
pub struct TaggerError {
    pub token: String,
    pub detail: String,
}

pub trait PosTagger: Send + Sync {
    /// Tag one lowercased token. `None` means unknown.
    fn tag(&self, token: &str) -> Result<Option<PosTag>, TaggerError>;
}

/// Word-list lookup tagger.
pub struct LexiconTagger {
    map: HashMap<String, PosTag>,
}

impl LexiconTagger {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, PosTag)>) -> Self {
        Self {
            map: entries.into_iter().collect(),
        }
    }

    /// Parse `word<TAB>pos` lines; pos is one of noun/verb/adjective.
    pub fn from_tsv(text: &str) -> Result<Self, String> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(word), Some(pos)) = (parts.next(), parts.next()) else {
                return Err(format!("lexicon line {}: expected word<TAB>pos", i + 1));
            };
            let tag = match pos {
                "noun" => PosTag::Noun,
                "verb" => PosTag::Verb,
                "adjective" | "adj" => PosTag::Adjective,
                other => return Err(format!("lexicon line {}: unknown pos {other}", i + 1)),
            };
            map.insert(word.to_lowercase(), tag);
        }
        Ok(Self { map })
    }

    pub fn bundled() -> Self {
        Self::from_tsv(include_str!("../../data/lexicon.tsv")).expect("bundled lexicon parses")
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, token: &str) -> Result<Option<PosTag>, TaggerError> {
        Ok(self.map.get(token).copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_lexicon_loads() {
        let tagger = LexiconTagger::bundled();
        assert_eq!(tagger.tag("dog").unwrap(), Some(PosTag::Noun));
        assert_eq!(tagger.tag("runs").unwrap(), Some(PosTag::Verb));
        assert_eq!(tagger.tag("red").unwrap(), Some(PosTag::Adjective));
        assert_eq!(tagger.tag("zzzunknown").unwrap(), None);
    }

    #[test]
    fn tsv_rejects_bad_pos() {
        assert!(LexiconTagger::from_tsv("word\tadverb").is_err());
    }
}
