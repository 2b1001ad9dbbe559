//! Hand-engineered dialog features: word and character n-grams, response
//! length, politeness strategies and precomputed dependency arcs, assembled
//! into sparse vectors over a fitted [`FeatureSpace`].
//!
//! All features are computed over user turns only. N-grams never span a turn
//! boundary.

mod politeness;
mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Dialog;
use crate::error::{Error, Result};

pub use politeness::{
    parse_lexicon, politeness_flags, politeness_flags_tokens, Lexicons, Pattern, PolitenessProfile,
    Strategy,
};
pub use text::{char_ngrams, response_length, tokenize, word_ngrams};

pub const LEN_KEY: &str = "len";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub word_ngrams: (usize, usize),
    pub char_ngrams: (usize, usize),
    /// Include the nine `pol:` strategy flags.
    pub politeness: bool,
    /// Include `dep:` features when turns carry arcs.
    pub dependencies: bool,
    /// Scale n-gram and dependency counts as `1 + ln(count)`.
    pub log_scale: bool,
    pub min_df: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            word_ngrams: (1, 2),
            char_ngrams: (2, 5),
            politeness: true,
            dependencies: true,
            log_scale: true,
            min_df: 2,
        }
    }
}

impl FeatureConfig {
    /// The content/grammar feature set without politeness flags.
    pub fn baseline() -> Self {
        FeatureConfig {
            politeness: false,
            ..Default::default()
        }
    }
}

/// Raw per-dialog feature values before indexing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawFeatures {
    /// n-gram and dependency counts
    pub counts: BTreeMap<String, usize>,
    pub politeness: PolitenessProfile,
    pub length: f64,
}

pub(crate) fn user_text(dialog: &Dialog) -> String {
    dialog
        .user_turns()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Counts `dep:<label>|<head>|<dep>` and backoff `dep:<label>` keys over the
/// user turns' precomputed arcs. Arcs pointing outside a turn's tokens are
/// skipped with a warning.
pub fn dependency_features(dialog: &Dialog) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for turn in dialog.user_turns() {
        let Some(arcs) = &turn.deps else { continue };
        let tokens = tokenize(&turn.text);
        for arc in arcs {
            let (head, dep) = match (tokens.get(arc.0), tokens.get(arc.1)) {
                (Some(h), Some(d)) => (h, d),
                _ => {
                    log::warn!(
                        "dialog `{}`: arc ({}, {}, {}) outside {} tokens, skipped",
                        dialog.id,
                        arc.0,
                        arc.1,
                        arc.2,
                        tokens.len()
                    );
                    continue;
                }
            };
            *counts.entry(format!("dep:{}|{head}|{dep}", arc.2)).or_default() += 1;
            *counts.entry(format!("dep:{}", arc.2)).or_default() += 1;
        }
    }
    counts
}

pub fn extract(dialog: &Dialog, config: &FeatureConfig, lex: &Lexicons) -> RawFeatures {
    let mut counts = BTreeMap::new();
    let mut turn_tokens = Vec::new();
    for turn in dialog.user_turns() {
        let tokens = tokenize(&turn.text);
        text::add_word_ngrams(&mut counts, &tokens, config.word_ngrams.0..=config.word_ngrams.1);
        text::add_char_ngrams(
            &mut counts,
            &turn.text.to_lowercase(),
            config.char_ngrams.0..=config.char_ngrams.1,
        );
        turn_tokens.push(tokens);
    }
    if config.dependencies {
        for (k, v) in dependency_features(dialog) {
            *counts.entry(k).or_default() += v;
        }
    }
    let politeness = if config.politeness {
        politeness_flags_tokens(&turn_tokens, lex)
    } else {
        PolitenessProfile::default()
    };
    RawFeatures {
        counts,
        politeness,
        length: response_length(&user_text(dialog)),
    }
}

/// Sparse feature vector: `(column, value)` pairs with strictly increasing
/// columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub entries: Vec<(usize, f64)>,
}

impl FeatureVector {
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Vocabulary fitted on training dialogs; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub config: FeatureConfig,
    pub lexicons: Lexicons,
    pub vocab: BTreeMap<String, usize>,
    pub doc_freq: BTreeMap<String, usize>,
    fingerprint: String,
}

impl FeatureSpace {
    /// Keeps every count key seen in at least `min_df` training dialogs, plus
    /// `len` and (when enabled) the nine `pol:` keys. Columns follow sorted
    /// key order.
    pub fn fit(dialogs: &[&Dialog], config: &FeatureConfig, lex: &Lexicons) -> Result<FeatureSpace> {
        if dialogs.is_empty() {
            return Err(Error::InvalidArgument("cannot fit a feature space on no dialogs".into()));
        }
        let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
        for d in dialogs {
            for key in extract(d, config, lex).counts.into_keys() {
                *doc_freq.entry(key).or_default() += 1;
            }
        }
        let mut keys: BTreeSet<String> = doc_freq
            .iter()
            .filter(|&(_, &df)| df >= config.min_df)
            .map(|(k, _)| k.clone())
            .collect();
        keys.insert(LEN_KEY.to_string());
        if config.politeness {
            keys.extend(Strategy::ALL.iter().map(|s| s.feature_key()));
        }
        let vocab: BTreeMap<String, usize> = keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
        doc_freq.retain(|k, _| vocab.contains_key(k));
        let fingerprint = fingerprint_of(&vocab);
        Ok(FeatureSpace {
            config: config.clone(),
            lexicons: lex.clone(),
            vocab,
            doc_freq,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.vocab.get(key).copied()
    }

    pub fn vectorize(&self, dialog: &Dialog) -> FeatureVector {
        let raw = extract(dialog, &self.config, &self.lexicons);
        let mut entries = Vec::new();
        for (key, count) in &raw.counts {
            if let Some(&i) = self.vocab.get(key) {
                let v = if self.config.log_scale {
                    1.0 + (*count as f64).ln()
                } else {
                    *count as f64
                };
                entries.push((i, v));
            }
        }
        if self.config.politeness {
            for s in raw.politeness.active() {
                if let Some(&i) = self.vocab.get(&s.feature_key()) {
                    entries.push((i, 1.0));
                }
            }
        }
        if raw.length != 0.0 {
            entries.push((self.vocab[LEN_KEY], raw.length));
        }
        entries.sort_by_key(|e| e.0);
        FeatureVector { entries }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Loads a saved space and recomputes its fingerprint; rejects vocabularies
    /// whose indices are not dense.
    pub fn load_json(path: impl AsRef<Path>) -> Result<FeatureSpace> {
        let path = path.as_ref();
        let body = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut space: FeatureSpace = serde_json::from_slice(&body)?;
        let mut idx: Vec<usize> = space.vocab.values().copied().collect();
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, &j)| i != j) {
            return Err(Error::Schema("feature space indices are not dense".into()));
        }
        space.fingerprint = fingerprint_of(&space.vocab);
        Ok(space)
    }
}

fn fingerprint_of(vocab: &BTreeMap<String, usize>) -> String {
    let mut h = Sha256::new();
    for (k, i) in vocab {
        h.update(k.as_bytes());
        h.update([0]);
        h.update((*i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}
