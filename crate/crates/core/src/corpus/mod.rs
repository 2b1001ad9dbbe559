//! Dialogs, rater scores, label construction and fold splitting.
//!
//! A corpus is a JSON Lines file with one dialog per line:
//!
//! ```text
//! {"id": "d1", "turns": [{"speaker": "system", "text": "..."},
//!                        {"speaker": "user", "text": "...", "deps": [[1, 0, "nsubj"]]}],
//!  "ratings": {"overall": [3, 3, 4], "topic": [2, 3, 3]}}
//! ```

mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{
    synthesize_corpus, synthesize_detailed, SignalSpec, SyntheticDialog, POLITE_ORDER, POLITE_STRATEGY_RANGES,
};

/// Number of score classes (labels `1..=4`).
pub const NUM_CLASSES: usize = 4;

/// Highest score a rater may assign; 0 marks an unscorable response.
pub const MAX_SCORE: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
}

/// A precomputed dependency arc `(head index, dependent index, relation)`, with
/// indices into the turn's token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepArc(pub usize, pub usize, pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deps: Option<Vec<DepArc>>,
}

impl Turn {
    pub fn system(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::System,
            text: text.into(),
            deps: None,
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::User,
            text: text.into(),
            deps: None,
        }
    }

    pub fn is_user(&self) -> bool {
        self.speaker == Speaker::User
    }
}

/// The rubric dimensions a dialog is scored on, in report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construct {
    Topic,
    Elaboration,
    Structure,
    Task,
    Engagement,
    TurnTaking,
    Repair,
    Appropriateness,
    Overall,
}

impl Construct {
    pub const ALL: [Construct; 9] = [
        Construct::Topic,
        Construct::Elaboration,
        Construct::Structure,
        Construct::Task,
        Construct::Engagement,
        Construct::TurnTaking,
        Construct::Repair,
        Construct::Appropriateness,
        Construct::Overall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Construct::Topic => "topic",
            Construct::Elaboration => "elaboration",
            Construct::Structure => "structure",
            Construct::Task => "task",
            Construct::Engagement => "engagement",
            Construct::TurnTaking => "turn_taking",
            Construct::Repair => "repair",
            Construct::Appropriateness => "appropriateness",
            Construct::Overall => "overall",
        }
    }
}

impl fmt::Display for Construct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Construct {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Construct::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown construct `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
    pub ratings: BTreeMap<Construct, Vec<u8>>,
}

impl Dialog {
    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.is_user())
    }

    pub fn has_alternating_turns(&self) -> bool {
        self.turns.first().map(|t| t.speaker) == Some(Speaker::System)
            && self.turns.windows(2).all(|w| w[0].speaker != w[1].speaker)
    }

    fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Schema(format!("dialog `{}` has no turns", self.id)));
        }
        if !self.turns.iter().any(Turn::is_user) {
            return Err(Error::Schema(format!("dialog `{}` has no user turn", self.id)));
        }
        if self.ratings.is_empty() {
            return Err(Error::Schema(format!("dialog `{}` has no ratings", self.id)));
        }
        for (construct, scores) in &self.ratings {
            if scores.is_empty() {
                return Err(Error::Schema(format!(
                    "dialog `{}`: construct `{construct}` has no scores",
                    self.id
                )));
            }
            if let Some(bad) = scores.iter().find(|&&s| s > MAX_SCORE) {
                return Err(Error::Schema(format!(
                    "dialog `{}`: construct `{construct}` has score {bad} outside 0-{MAX_SCORE}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Reads a JSON Lines corpus. Blank lines are skipped; every malformed line is
/// collected and reported together.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialog>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dialogs = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Dialog>(&line)
            .map_err(|e| e.to_string())
            .and_then(|d| d.validate().map(|_| d).map_err(|e| e.to_string()));
        match parsed {
            Ok(dialog) => {
                if !dialog.has_alternating_turns() {
                    log::warn!(
                        "{}:{}: dialog `{}` does not alternate system/user turns",
                        path.display(),
                        i + 1,
                        dialog.id
                    );
                }
                dialogs.push(dialog);
            }
            Err(msg) => errors.push((i + 1, msg)),
        }
    }
    if errors.is_empty() {
        Ok(dialogs)
    } else {
        Err(Error::Malformed {
            path: path.to_path_buf(),
            errors,
        })
    }
}

pub fn write_corpus(path: impl AsRef<Path>, dialogs: &[Dialog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for d in dialogs {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Lower median: the element at index `(n - 1) / 2` of the sorted scores.
pub fn median_label(scores: &[u8]) -> Result<u8> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("median of empty score list".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable();
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Pairs each dialog with its median label for `construct`, dropping
/// dialogs whose median is 0 (unscorable).
pub fn filter_scorable(dialogs: &[Dialog], construct: Construct) -> Result<Vec<(&Dialog, u8)>> {
    let mut out = Vec::with_capacity(dialogs.len());
    for d in dialogs {
        let scores = d.ratings.get(&construct).ok_or_else(|| {
            Error::Schema(format!("dialog `{}` has no ratings for `{construct}`", d.id))
        })?;
        let label = median_label(scores)?;
        if label > 0 {
            out.push((d, label));
        }
    }
    Ok(out)
}

/// Deterministic assignment of dialog ids to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub seed: u64,
    pub k: usize,
    pub membership: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.membership.get(id).copied()
    }

    /// Ids per fold, each list in lexicographic order.
    pub fn folds(&self) -> Vec<Vec<&str>> {
        let mut folds = vec![Vec::new(); self.k];
        for (id, &f) in &self.membership {
            folds[f].push(id.as_str());
        }
        folds
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["dialog_id", "fold"])?;
        for (id, fold) in &self.membership {
            w.write_record([id.as_str(), &fold.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<fold csv>", e))?;
        Ok(())
    }
}

/// Sorts ids, shuffles them with a seeded ChaCha stream and deals them
/// round-robin into `k` folds.
pub fn kfold<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} dialogs into {k} folds",
            ids.len()
        )));
    }
    let mut sorted: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    let before = sorted.len();
    sorted.dedup();
    if sorted.len() != before {
        return Err(Error::InvalidArgument("duplicate dialog ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let membership = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldAssignment {
        seed,
        k,
        membership,
    })
}

/// Splits a training fold 80/20 into train and dev, with `ceil(0.8 n)` train
/// items. Both halves keep the input order.
pub fn train_dev_split<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "train/dev split needs at least 5 items, got {}",
            items.len()
        )));
    }
    let n_train = (items.len() * 4).div_ceil(5);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_train = vec![false; items.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut dev) = (Vec::with_capacity(n_train), Vec::new());
    for (item, train_side) in items.iter().zip(is_train) {
        if train_side {
            train.push(item.clone());
        } else {
            dev.push(item.clone());
        }
    }
    Ok((train, dev))
}
