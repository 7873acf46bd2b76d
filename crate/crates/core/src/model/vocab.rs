//! Closed word-level vocabulary.
//!
//! Text is split into lines, lines into whitespace-separated words, and every
//! word is one token. Line breaks become the newline token. The arrow and the
//! query marker are ordinary words that every vocabulary contains.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const ARROW: &str = "→";
pub const NEWLINE: &str = "\n";
pub const QUERY_MARKER: &str = "<q>";

/// How the newline token is spelled inside a vocab file.
const NEWLINE_ESCAPE: &str = "\\n";

/// Token ids of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build a vocabulary: the three literals first, then `words` in order of
    /// first appearance.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in [ARROW, NEWLINE, QUERY_MARKER] {
            vocab.push(w);
        }
        for w in words {
            vocab.push(w.as_ref());
        }
        vocab
    }

    /// Vocabulary from an explicit token list; ids are list positions.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocab token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len() as u32);
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Id lookup that reports the word on failure.
    pub fn require(&self, word: &str) -> Result<u32> {
        self.id(word).ok_or_else(|| Error::Oov(vec![word.to_string()]))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        let mut oov = Vec::new();
        let newline = self.require(NEWLINE)?;
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                ids.push(newline);
            }
            for word in line.split_whitespace() {
                match self.id(word) {
                    Some(id) => ids.push(id),
                    None => {
                        if !oov.iter().any(|w| w == word) {
                            oov.push(word.to_string());
                        }
                    }
                }
            }
        }
        if oov.is_empty() {
            Ok(TokenSequence { ids })
        } else {
            Err(Error::Oov(oov))
        }
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String> {
        let mut out = String::new();
        for &id in &seq.ids {
            let tok = self.token(id).ok_or(Error::TokenId {
                id,
                vocab_size: self.len(),
            })?;
            if tok == NEWLINE {
                out.push('\n');
            } else {
                if !(out.is_empty() || out.ends_with('\n')) {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// One token per line; the newline token is written as `\n`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(if t == NEWLINE { NEWLINE_ESCAPE } else { t });
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text
            .lines()
            .map(|l| if l == NEWLINE_ESCAPE { NEWLINE.to_string() } else { l.to_string() })
            .collect();
        Vocab::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["hot", "cold", "big", "small"])
    }

    #[test]
    fn arrow_line_round_trips() {
        let v = vocab();
        let seq = v.tokenize("hot → cold").unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(v.detokenize(&seq).unwrap(), "hot → cold");
        let text = "hot → cold\nbig →";
        assert_eq!(v.detokenize(&v.tokenize(text).unwrap()).unwrap(), text);
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(vocab().tokenize("").unwrap().is_empty());
    }

    #[test]
    fn oov_lists_the_word() {
        match vocab().tokenize("hot → warm") {
            Err(Error::Oov(words)) => assert_eq!(words, vec!["warm".to_string()]),
            other => panic!("expected OOV, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip_keeps_newline_token() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
