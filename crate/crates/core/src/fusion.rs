//! Score-level fusion of per-system posteriors and exhaustive best-subset
//! search.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, qwk};

pub type Posterior = [f64; NUM_CLASSES];

const SUM_TOLERANCE: f64 = 1e-6;
pub const MAX_SUBSET_SYSTEMS: usize = 8;

/// Label `1..=4` of the largest posterior entry; ties go to the lower label.
pub fn argmax_label(p: &Posterior) -> u8 {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best as u8 + 1
}

pub fn one_hot(label: u8) -> Posterior {
    let mut p = [0.0; NUM_CLASSES];
    p[label as usize - 1] = 1.0;
    p
}

fn check_posterior(p: &[f64]) -> std::result::Result<(), String> {
    if p.len() != NUM_CLASSES {
        return Err(format!("posterior has {} entries, expected {NUM_CLASSES}", p.len()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(format!("posterior {p:?} has negative or non-finite entries"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(format!("posterior {p:?} sums to {sum}"));
    }
    Ok(())
}

/// One system's class posteriors keyed by dialog id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub system_id: String,
    pub posteriors: BTreeMap<String, Posterior>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    dialog_id: String,
    posterior: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
}

impl PredictionSet {
    pub fn new(system_id: impl Into<String>, posteriors: BTreeMap<String, Posterior>) -> Result<Self> {
        let system_id = system_id.into();
        for (id, p) in &posteriors {
            check_posterior(p).map_err(|e| Error::Schema(format!("{system_id}/{id}: {e}")))?;
        }
        Ok(PredictionSet {
            system_id,
            posteriors,
        })
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.posteriors.keys().map(String::as_str).collect()
    }

    pub fn labels(&self) -> BTreeMap<&str, u8> {
        self.posteriors
            .iter()
            .map(|(id, p)| (id.as_str(), argmax_label(p)))
            .collect()
    }

    /// Reads `{"dialog_id": ..., "posterior": [p1, p2, p3, p4]}` lines.
    pub fn read_jsonl(path: impl AsRef<Path>, system_id: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut posteriors = BTreeMap::new();
        let mut errors = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = match serde_json::from_str::<PredictionRecord>(&line) {
                Ok(r) => r,
                Err(e) => {
                    errors.push((i + 1, e.to_string()));
                    continue;
                }
            };
            if let Err(e) = check_posterior(&record.posterior) {
                errors.push((i + 1, e));
                continue;
            }
            let p: Posterior = record.posterior.as_slice().try_into().expect("length checked");
            if posteriors.insert(record.dialog_id.clone(), p).is_some() {
                errors.push((i + 1, format!("duplicate dialog id `{}`", record.dialog_id)));
            }
        }
        if !errors.is_empty() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                errors,
            });
        }
        Ok(PredictionSet {
            system_id: system_id.into(),
            posteriors,
        })
    }

    /// Writes one JSON line per dialog in id order, tagging each with its fold
    /// when `folds` is given.
    pub fn write_jsonl(&self, path: impl AsRef<Path>, folds: Option<&BTreeMap<String, usize>>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for (id, p) in &self.posteriors {
            let record = PredictionRecord {
                dialog_id: id.clone(),
                posterior: p.to_vec(),
                fold: folds.and_then(|f| f.get(id).copied()),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Dialog id → fold tags stored alongside the posteriors, if any.
    pub fn read_folds(path: impl AsRef<Path>) -> Result<BTreeMap<String, usize>> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut folds = BTreeMap::new();
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            let r: PredictionRecord = serde_json::from_str(line)?;
            if let Some(f) = r.fold {
                folds.insert(r.dialog_id, f);
            }
        }
        Ok(folds)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Average posteriors; label is the argmax.
    #[default]
    Mean,
    /// Lower median of the systems' hard labels, emitted one-hot.
    Median,
}

fn check_coverage(sets: &[&PredictionSet]) -> Result<()> {
    let first = sets[0].ids();
    for s in &sets[1..] {
        let other = s.ids();
        if other != first {
            let missing: Vec<&str> = first.symmetric_difference(&other).copied().take(10).collect();
            return Err(Error::Coverage(format!(
                "`{}` and `{}` differ on {}",
                sets[0].system_id,
                s.system_id,
                missing.join(", ")
            )));
        }
    }
    Ok(())
}

/// Combines systems over the same dialog ids. The fused id joins member ids
/// with `+`.
pub fn fuse(sets: &[&PredictionSet], mode: FusionMode) -> Result<PredictionSet> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("nothing to fuse".into()));
    }
    check_coverage(sets)?;
    let mut posteriors = BTreeMap::new();
    for id in sets[0].posteriors.keys() {
        let fused = match mode {
            FusionMode::Mean => {
                let mut acc = [0.0; NUM_CLASSES];
                for s in sets {
                    for (a, v) in acc.iter_mut().zip(&s.posteriors[id]) {
                        *a += v;
                    }
                }
                acc.map(|a| a / sets.len() as f64)
            }
            FusionMode::Median => {
                let labels: Vec<u8> = sets.iter().map(|s| argmax_label(&s.posteriors[id])).collect();
                one_hot(crate::corpus::median_label(&labels)?)
            }
        };
        posteriors.insert(id.clone(), fused);
    }
    Ok(PredictionSet {
        system_id: sets.iter().map(|s| s.system_id.as_str()).collect::<Vec<_>>().join("+"),
        posteriors,
    })
}

/// QWK and accuracy of a prediction set against gold labels for its ids.
pub fn evaluate(set: &PredictionSet, gold: &BTreeMap<String, u8>) -> Result<(f64, f64)> {
    let mut pred = Vec::with_capacity(set.posteriors.len());
    let mut truth = Vec::with_capacity(set.posteriors.len());
    for (id, p) in &set.posteriors {
        let g = gold
            .get(id)
            .ok_or_else(|| Error::Coverage(format!("no gold label for `{id}`")))?;
        pred.push(argmax_label(p));
        truth.push(*g);
    }
    Ok((qwk(&pred, &truth, NUM_CLASSES)?, accuracy(&pred, &truth)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    /// Member system ids in lexicographic order.
    pub members: Vec<String>,
    pub qwk: f64,
    pub accuracy: f64,
    /// `(system id, qwk, accuracy)` for every candidate on its own.
    pub individual: Vec<(String, f64, f64)>,
}

/// Exhaustive search over all non-empty subsets for the highest fused QWK.
/// Ties prefer fewer members, then the lexicographically smallest id list.
pub fn best_subset(
    systems: &[PredictionSet],
    gold: &BTreeMap<String, u8>,
    mode: FusionMode,
) -> Result<SubsetResult> {
    if systems.is_empty() {
        return Err(Error::InvalidArgument("best_subset needs at least one system".into()));
    }
    if systems.len() > MAX_SUBSET_SYSTEMS {
        return Err(Error::InvalidArgument(format!(
            "exhaustive search supports at most {MAX_SUBSET_SYSTEMS} systems, got {}",
            systems.len()
        )));
    }
    let mut sorted: Vec<&PredictionSet> = systems.iter().collect();
    sorted.sort_by(|a, b| a.system_id.cmp(&b.system_id));
    if sorted.windows(2).any(|w| w[0].system_id == w[1].system_id) {
        return Err(Error::InvalidArgument("duplicate system ids".into()));
    }
    check_coverage(&sorted)?;

    let individual = sorted
        .iter()
        .map(|s| evaluate(s, gold).map(|(q, a)| (s.system_id.clone(), q, a)))
        .collect::<Result<Vec<_>>>()?;

    let mut best: Option<SubsetResult> = None;
    for mask in 1u32..(1 << sorted.len()) {
        let members: Vec<&PredictionSet> = sorted
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, s)| *s)
            .collect();
        let fused = fuse(&members, mode)?;
        let (q, a) = evaluate(&fused, gold)?;
        let ids: Vec<String> = members.iter().map(|s| s.system_id.clone()).collect();
        let better = match &best {
            None => true,
            Some(b) => {
                q > b.qwk
                    || (q == b.qwk
                        && (ids.len() < b.members.len() || (ids.len() == b.members.len() && ids < b.members)))
            }
        };
        if better {
            best = Some(SubsetResult {
                members: ids,
                qwk: q,
                accuracy: a,
                individual: Vec::new(),
            });
        }
    }
    let mut best = best.expect("at least one subset");
    best.individual = individual;
    Ok(best)
}
