//! Tokenization, Porter stemming and stem maps.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod porter;

/// Characters removed by [`tokenize`]. Digits, colons and hyphens are kept
/// so answers like `12:09` or `x-ray` survive intact.
pub const STRIPPED_PUNCTUATION: &[char] = &[
    '.', ',', '!', '?', '\'', '"', '(', ')', '[', ']', '{', '}', ';', '\u{2014}',
];

/// A lowercase, whitespace-free, non-empty word.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(String);

impl Token {
    /// Returns `None` unless `s` already satisfies the token invariants.
    pub fn new(s: impl Into<String>) -> Option<Token> {
        let s = s.into();
        let valid = !s.is_empty()
            && !s.chars().any(char::is_whitespace)
            && s.chars().all(|c| !c.is_uppercase());
        valid.then_some(Token(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Lowercase, strip [`STRIPPED_PUNCTUATION`], split on whitespace.
pub fn tokenize(text: &str) -> Vec<Token> {
    let cleaned: String = text
        .chars()
        .filter(|c| !STRIPPED_PUNCTUATION.contains(c))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned
        .split_whitespace()
        .map(|w| Token(w.to_owned()))
        .collect()
}

/// Stem of a single token under the published Porter algorithm.
pub fn porter_stem(token: &Token) -> String {
    porter::stem(token.as_str())
}

/// Maps a surface word to the key its embedding is shared under.
///
/// This is the slot where a dictionary lemmatizer can be plugged in.
pub trait Stemmer: Send + Sync {
    fn stem(&self, word: &str) -> String;
    fn algorithm(&self) -> StemAlgorithm;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PorterStemmer;

impl Stemmer for PorterStemmer {
    fn stem(&self, word: &str) -> String {
        porter::stem(word)
    }

    fn algorithm(&self) -> StemAlgorithm {
        StemAlgorithm::Porter
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityStemmer;

impl Stemmer for IdentityStemmer {
    fn stem(&self, word: &str) -> String {
        word.to_owned()
    }

    fn algorithm(&self) -> StemAlgorithm {
        StemAlgorithm::Identity
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StemAlgorithm {
    #[default]
    Porter,
    Identity,
}

impl StemAlgorithm {
    pub fn stemmer(self) -> Box<dyn Stemmer> {
        match self {
            StemAlgorithm::Porter => Box::new(PorterStemmer),
            StemAlgorithm::Identity => Box::new(IdentityStemmer),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StemAlgorithm::Porter => "porter",
            StemAlgorithm::Identity => "identity",
        }
    }
}

impl FromStr for StemAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "porter" => Ok(StemAlgorithm::Porter),
            "identity" | "none" => Ok(StemAlgorithm::Identity),
            other => Err(Error::Config(format!(
                "unknown stemming algorithm '{other}' (expected porter or identity)"
            ))),
        }
    }
}

impl fmt::Display for StemAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Surface form to stem, total over the vocabulary it was built from.
///
/// Stems produced by the map resolve to themselves on lookup, so
/// `key(key(w)) == key(w)` for every vocabulary word even though the Porter
/// algorithm itself is not idempotent on every input.
#[derive(Clone, Debug)]
pub struct StemMap {
    algorithm: StemAlgorithm,
    entries: HashMap<String, String>,
    stems: BTreeSet<String>,
}

impl StemMap {
    pub fn algorithm(&self) -> StemAlgorithm {
        self.algorithm
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn distinct_stems(&self) -> usize {
        self.stems.len()
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.entries.get(word).map(String::as_str)
    }

    /// Embedding key for `word`. Words outside the map are stemmed on the fly.
    pub fn key<'a>(&'a self, word: &'a str) -> Cow<'a, str> {
        if let Some(stem) = self.stems.get(word) {
            return Cow::Borrowed(stem.as_str());
        }
        match self.entries.get(word) {
            Some(stem) => Cow::Borrowed(stem.as_str()),
            None => match self.algorithm {
                StemAlgorithm::Identity => Cow::Borrowed(word),
                StemAlgorithm::Porter => Cow::Owned(porter::stem(word)),
            },
        }
    }
}

/// Build a map over a deduplicated vocabulary.
pub fn build_stem_map<S: AsRef<str>>(vocab: &[S], algorithm: &str) -> Result<StemMap> {
    let algorithm: StemAlgorithm = algorithm.parse()?;
    Ok(build_stem_map_with(vocab, algorithm.stemmer().as_ref()))
}

pub fn build_stem_map_with<S: AsRef<str>>(vocab: &[S], stemmer: &dyn Stemmer) -> StemMap {
    let mut entries = HashMap::with_capacity(vocab.len());
    let mut stems = BTreeSet::new();
    for w in vocab {
        let w = w.as_ref();
        let s = stemmer.stem(w);
        stems.insert(s.clone());
        entries.insert(w.to_owned(), s);
    }
    StemMap {
        algorithm: stemmer.algorithm(),
        entries,
        stems,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(Token::as_str).collect()
    }

    #[test]
    fn tokenize_question() {
        let t = tokenize("What color are the barricades ?");
        assert_eq!(words(&t), ["what", "color", "are", "the", "barricades"]);
    }

    #[test]
    fn tokenize_empty_and_blank() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t ? ").is_empty());
    }

    #[test]
    fn tokenize_keeps_time_and_hyphen() {
        assert_eq!(words(&tokenize("12:09")), ["12:09"]);
        assert_eq!(words(&tokenize("An X-ray, (maybe).")), ["an", "x-ray", "maybe"]);
        assert_eq!(words(&tokenize("peregrino's")), ["peregrinos"]);
    }

    #[test]
    fn token_invariants() {
        assert!(Token::new("cat").is_some());
        assert!(Token::new("").is_none());
        assert!(Token::new("a b").is_none());
        assert!(Token::new("Cat").is_none());
    }

    #[test]
    fn stem_map_flower() {
        let m = build_stem_map(&["flower", "flowers"], "porter").unwrap();
        assert_eq!(m.get("flower"), Some("flower"));
        assert_eq!(m.get("flowers"), Some("flower"));
        assert_eq!(m.distinct_stems(), 1);
    }

    #[test]
    fn stem_map_identity() {
        let vocab = ["flower", "flowers", "running", "run"];
        let m = build_stem_map(&vocab, "identity").unwrap();
        assert_eq!(m.distinct_stems(), vocab.len());
        for w in vocab {
            assert_eq!(m.get(w), Some(w));
        }
    }

    #[test]
    fn stem_map_unknown_algorithm() {
        let err = build_stem_map(&["a"], "lancaster").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn stem_map_key_is_idempotent_on_vocab() {
        // "agreed" -> "agre" -> "agr" under raw Porter.
        let m = build_stem_map(&["agreed", "generalizations", "flowers"], "porter").unwrap();
        for w in ["agreed", "generalizations", "flowers"] {
            let k = m.key(w).into_owned();
            assert_eq!(m.key(&k), k);
        }
        assert_eq!(m.key("flowering"), "flower");
    }
}
