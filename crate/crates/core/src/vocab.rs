//! Token vocabularies and pretrained embedding files for the neural scorers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const UNK: &str = "<unk>";
/// Separator inserted between user turns in a flattened dialog.
pub const TURN_SEP: &str = "<turn>";

/// Token → row map. Row 0 is always the shared out-of-vocabulary row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds from token sequences; tokens enter in sorted order after
    /// `specials`.
    pub fn build<'a, I, S>(sequences: I, specials: &[&str]) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut seen = std::collections::BTreeSet::new();
        for seq in sequences {
            for t in seq {
                seen.insert(t.as_ref().to_string());
            }
        }
        let mut tokens = vec![UNK.to_string()];
        for s in specials {
            if !tokens.iter().any(|t| t == s) {
                tokens.push(s.to_string());
            }
        }
        for t in seen {
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Restores the lookup map after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t.as_ref())).collect()
    }
}

/// Reads a text embedding file (`token v1 ... vD` per line). Every row must
/// have exactly `dim` values.
pub fn load_pretrained(path: impl AsRef<Path>, dim: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in body.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if values.len() != dim {
            return Err(Error::Schema(format!(
                "{}:{}: embedding has dimension {}, model expects {dim}",
                path.display(),
                i + 1,
                values.len()
            )));
        }
        out.insert(token.to_string(), values);
    }
    Ok(out)
}

/// Overwrites rows of `table` for tokens found in `vectors`; returns how many
/// rows were set.
pub fn apply_pretrained(table: &mut Tensor, vocab: &Vocab, vectors: &BTreeMap<String, Vec<f64>>) -> usize {
    let d = table.cols();
    let mut hits = 0;
    for (i, t) in vocab.tokens.iter().enumerate() {
        if let Some(v) = vectors.get(t) {
            table.data_mut()[i * d..(i + 1) * d].copy_from_slice(v);
            hits += 1;
        }
    }
    hits
}
