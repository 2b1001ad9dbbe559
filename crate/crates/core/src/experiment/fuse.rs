use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::System;
use super::run::{predictions_dir, read_gold, GoldRow, GOLD_FILE, PREDICTIONS_DIR};
use crate::corpus::Construct;
use crate::error::{Error, Result};
use crate::fusion::{best_subset, evaluate, fuse, FusionMode, PredictionSet};

pub const FUSION_FILE: &str = "fusion.json";

/// Persisted predictions of one construct.
#[derive(Debug, Clone)]
pub struct ConstructPredictions {
    pub construct: Construct,
    pub gold: Vec<GoldRow>,
    /// Built-in systems in column order, then external ones by id.
    pub sets: Vec<PredictionSet>,
}

impl ConstructPredictions {
    pub fn gold_map(&self) -> BTreeMap<String, u8> {
        self.gold.iter().map(|g| (g.dialog_id.clone(), g.label)).collect()
    }

    pub fn fold_map(&self) -> BTreeMap<String, usize> {
        self.gold.iter().map(|g| (g.dialog_id.clone(), g.fold)).collect()
    }
}

fn column_key(id: &str) -> (usize, String) {
    match id.parse::<System>() {
        Ok(s) => (s as usize, String::new()),
        Err(_) => (System::ALL.len(), id.to_string()),
    }
}

/// Loads every construct directory under `predictions/`, in report row
/// order.
pub fn load_predictions(run_dir: &Path) -> Result<Vec<ConstructPredictions>> {
    let root = run_dir.join(PREDICTIONS_DIR);
    if !root.is_dir() {
        return Err(Error::InvalidArgument(format!("no predictions under {}", root.display())));
    }
    let mut out = Vec::new();
    for construct in Construct::ALL {
        let dir = predictions_dir(run_dir, construct);
        if !dir.is_dir() {
            continue;
        }
        let gold = read_gold(&dir.join(GOLD_FILE))?;
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort_by_key(|id| column_key(id));
        let sets = ids
            .iter()
            .map(|id| PredictionSet::read_jsonl(dir.join(format!("{id}.jsonl")), id.clone()))
            .collect::<Result<_>>()?;
        out.push(ConstructPredictions { construct, gold, sets });
    }
    Ok(out)
}

/// Mean of per-fold `(qwk, accuracy)`.
pub fn fold_mean(set: &PredictionSet, gold: &[GoldRow]) -> Result<(f64, f64)> {
    let mut by_fold: BTreeMap<usize, BTreeMap<String, u8>> = BTreeMap::new();
    for g in gold {
        by_fold.entry(g.fold).or_default().insert(g.dialog_id.clone(), g.label);
    }
    let (mut q, mut a) = (0.0, 0.0);
    for labels in by_fold.values() {
        let part = PredictionSet {
            system_id: set.system_id.clone(),
            posteriors: labels
                .keys()
                .map(|id| {
                    set.posteriors
                        .get(id)
                        .map(|p| (id.clone(), *p))
                        .ok_or_else(|| Error::Coverage(format!("`{}` has no prediction for `{id}`", set.system_id)))
                })
                .collect::<Result<_>>()?,
        };
        let (fq, fa) = evaluate(&part, labels)?;
        q += fq;
        a += fa;
    }
    let n = by_fold.len() as f64;
    Ok((q / n, a / n))
}

/// An external prediction source: a JSONL file used for every construct, or
/// a directory holding `<construct>.jsonl` files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct External {
    pub id: String,
    pub path: PathBuf,
}

impl std::str::FromStr for External {
    type Err = Error;

    /// Parses `id=path`.
    fn from_str(s: &str) -> Result<Self> {
        let (id, path) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("external `{s}` is not `id=path`")))?;
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !ok || System::is_builtin(id) || id == "gold" {
            return Err(Error::InvalidArgument(format!("`{id}` cannot name an external system")));
        }
        Ok(External {
            id: id.to_string(),
            path: PathBuf::from(path),
        })
    }
}

fn coverage_error(id: &str, expected: &BTreeSet<&str>, got: &BTreeSet<&str>) -> Error {
    let missing: Vec<&str> = expected.difference(got).copied().take(10).collect();
    let extra: Vec<&str> = got.difference(expected).copied().take(10).collect();
    Error::Coverage(format!("`{id}` misses [{}] and adds [{}]", missing.join(", "), extra.join(", ")))
}

/// Copies external sets into the prediction directories after checking that
/// each covers exactly the construct's gold ids.
pub fn ingest_externals(run_dir: &Path, externals: &[External]) -> Result<()> {
    for ext in externals {
        if !ext.path.exists() {
            return Err(Error::InvalidArgument(format!("`{}` does not exist", ext.path.display())));
        }
        let mut used = 0;
        for construct in Construct::ALL {
            let dir = predictions_dir(run_dir, construct);
            if !dir.is_dir() {
                continue;
            }
            let source = if ext.path.is_dir() {
                ext.path.join(format!("{construct}.jsonl"))
            } else {
                ext.path.clone()
            };
            if !source.is_file() {
                log::warn!("external `{}` has no predictions for {construct}", ext.id);
                continue;
            }
            let set = PredictionSet::read_jsonl(&source, ext.id.clone())?;
            let gold = read_gold(&dir.join(GOLD_FILE))?;
            let expected: BTreeSet<&str> = gold.iter().map(|g| g.dialog_id.as_str()).collect();
            if set.ids() != expected {
                return Err(coverage_error(&ext.id, &expected, &set.ids()));
            }
            let folds: BTreeMap<String, usize> = gold.iter().map(|g| (g.dialog_id.clone(), g.fold)).collect();
            set.write_jsonl(dir.join(format!("{}.jsonl", ext.id)), Some(&folds))?;
            used += 1;
        }
        if used == 0 {
            return Err(Error::InvalidArgument(format!("external `{}` matched no construct", ext.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRecord {
    pub construct: Construct,
    pub mode: FusionMode,
    pub members: Vec<String>,
    /// Over all out-of-fold predictions (the selection data).
    pub pooled_qwk: f64,
    pub pooled_accuracy: f64,
    pub mean_qwk: f64,
    pub mean_accuracy: f64,
    /// `(system, pooled qwk, pooled accuracy)`.
    pub individual: Vec<(String, f64, f64)>,
}

/// Best-subset fusion per construct over all persisted prediction sets;
/// writes `fusion.json`.
pub fn fuse_run(run_dir: &Path, externals: &[External], mode: FusionMode) -> Result<Vec<FusionRecord>> {
    ingest_externals(run_dir, externals)?;
    let mut records = Vec::new();
    for cp in load_predictions(run_dir)? {
        if cp.sets.is_empty() {
            log::warn!("{}: no prediction sets to fuse", cp.construct);
            continue;
        }
        let gold = cp.gold_map();
        let best = best_subset(&cp.sets, &gold, mode)?;
        // same member order as the search, so sums match bit for bit
        let mut members: Vec<&PredictionSet> = cp.sets.iter().filter(|s| best.members.contains(&s.system_id)).collect();
        members.sort_by(|a, b| a.system_id.cmp(&b.system_id));
        let fused = fuse(&members, mode)?;
        let (mean_qwk, mean_accuracy) = fold_mean(&fused, &cp.gold)?;
        records.push(FusionRecord {
            construct: cp.construct,
            mode,
            members: best.members,
            pooled_qwk: best.qwk,
            pooled_accuracy: best.accuracy,
            mean_qwk,
            mean_accuracy,
            individual: best.individual,
        });
    }
    let path = run_dir.join(FUSION_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&records)?).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn read_fusion(run_dir: &Path) -> Result<Option<Vec<FusionRecord>>> {
    let path = run_dir.join(FUSION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let body = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_slice(&body)?))
}
