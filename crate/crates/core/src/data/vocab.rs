use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{NestError, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const NUM_SPECIAL: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIAL
}

/// Bidirectional token/id map with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary holding the reserved ids followed by `tokens` in order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for tok in SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if vocab.index.contains_key(&tok) {
                return Err(NestError::Input(format!("duplicate vocabulary entry {tok:?}")));
            }
            vocab.index.insert(tok.clone(), vocab.tokens.len());
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    /// Counts tokens and keeps those seen at least `min_count` times, most
    /// frequent first, ties broken lexicographically.
    pub fn build<I, S>(stream: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen = false;
        for tok in stream {
            seen = true;
            *counts.entry(tok.as_ref().to_string()).or_default() += 1;
        }
        if !seen {
            return Err(NestError::Input("cannot build a vocabulary from an empty stream".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_count && !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when it is out of vocabulary.
    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line `i` (zero-based) holds id `i`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIAL || lines[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(NestError::Format(format!(
                "{} must start with {:?}",
                path.display(),
                SPECIAL_TOKENS
            )));
        }
        Vocab::from_tokens(lines[NUM_SPECIAL..].iter().copied())
    }
}
