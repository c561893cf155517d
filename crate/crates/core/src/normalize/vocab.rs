//! Token vocabularies with reserved padding and unknown ids.

use std::collections::{BTreeMap, HashMap};

use super::NormalizedFunction;
use crate::error::{LeoError, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_size: usize,
}

impl Vocabulary {
    /// Keeps the `max_size - 2` most frequent tokens, ties broken
    /// lexicographically, after the reserved PAD and UNK entries.
    pub fn build(corpus: &[NormalizedFunction], max_size: usize) -> Result<Self> {
        if max_size < 2 {
            return Err(LeoError::usage(format!("vocabulary max_size {max_size} < 2")));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for f in corpus {
            for tok in f.statements.iter().flatten() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(max_size)
            .map(str::to_string)
            .collect();
        Ok(Self::from_tokens(tokens, max_size))
    }

    /// Rebuilds a vocabulary from its id-ordered token list (as stored in a
    /// model file).
    pub fn from_tokens(tokens: Vec<String>, max_size: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary {
            tokens,
            index,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Maps tokens to ids; unknown tokens map to UNK, never to PAD.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<u32> {
    tokens
        .iter()
        .map(|t| match vocab.id(t.as_ref()) {
            PAD_ID => UNK_ID,
            id => id,
        })
        .collect()
}
