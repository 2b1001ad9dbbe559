use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, System};
use crate::bilstm::{BiLstmConfig, BiLstmModel};
use crate::corpus::{filter_scorable, kfold, train_dev_split, write_corpus, Construct, Dialog};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureSpace, Lexicons};
use crate::fusion::{Posterior, PredictionSet};
use crate::linear::{grid_search, train, Example};
use crate::memn2n::{MemN2NConfig, MemN2NModel};
use crate::nn::{derive_seed, TrainHistory};

pub const PREDICTIONS_DIR: &str = "predictions";
pub const GOLD_FILE: &str = "gold.csv";
pub const TRAINING_FILE: &str = "training.json";

/// One `(construct, system, fold)` job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub construct: Construct,
    pub system: System,
    pub fold: usize,
    pub seed: u64,
    /// Selected L2 penalty of a linear system.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct CellOutput {
    record: CellRecord,
    posteriors: Vec<(String, Posterior)>,
}

pub fn predictions_dir(run_dir: &Path, construct: Construct) -> PathBuf {
    run_dir.join(PREDICTIONS_DIR).join(construct.as_str())
}

pub fn model_dir(run_dir: &Path, construct: Construct, system: System, fold: usize) -> PathBuf {
    run_dir
        .join("models")
        .join(construct.as_str())
        .join(system.as_str())
        .join(format!("fold{fold}"))
}

/// Gold labels and fold tags of one construct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRow {
    pub dialog_id: String,
    pub fold: usize,
    pub label: u8,
}

pub fn write_gold(path: &Path, rows: &[GoldRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gold(path: &Path) -> Result<Vec<GoldRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

struct Job<'a> {
    construct: Construct,
    system: System,
    fold: usize,
    seed: u64,
    train: Vec<(&'a Dialog, u8)>,
    test: Vec<(&'a Dialog, u8)>,
}

fn run_linear(job: &Job, features: &FeatureConfig, config: &ExperimentConfig, lex: &Lexicons) -> Result<(f64, Vec<(String, Posterior)>)> {
    let dialogs: Vec<&Dialog> = job.train.iter().map(|(d, _)| *d).collect();
    let space = FeatureSpace::fit(&dialogs, features, lex)?;
    let examples: Vec<Example> = job.train.iter().map(|(d, y)| (space.vectorize(d), *y)).collect();
    let (fit, dev) = train_dev_split(&examples, derive_seed(job.seed, &[0]))?;
    let grid = &config.linear.grid;
    let (l2, _) = grid_search(&fit, &dev, space.len(), grid, &config.linear.opt, space.fingerprint())?;
    let model = train(&examples, space.len(), l2, &config.linear.opt, space.fingerprint())?;
    let out = job
        .test
        .iter()
        .map(|(d, _)| Ok((d.id.clone(), model.predict_proba(&space, &space.vectorize(d))?)))
        .collect::<Result<_>>()?;
    Ok((l2, out))
}

fn run_cell(job: &Job, config: &ExperimentConfig, lex: &Lexicons, run_dir: &Path) -> Result<CellOutput> {
    let mut record = CellRecord {
        construct: job.construct,
        system: job.system,
        fold: job.fold,
        seed: job.seed,
        l2: None,
        history: None,
        error: None,
    };
    let posteriors = match job.system {
        System::Svm | System::SvmPp => {
            let features = FeatureConfig {
                politeness: job.system == System::SvmPp,
                ..config.linear.features.clone()
            };
            let (l2, out) = run_linear(job, &features, config, lex)?;
            record.l2 = Some(l2);
            out
        }
        System::Lstm | System::LstmAtt => {
            let cfg = BiLstmConfig {
                attention: job.system == System::LstmAtt,
                seed: job.seed,
                ..config.bilstm.clone()
            };
            let (fit, dev) = train_dev_split(&job.train, derive_seed(job.seed, &[0]))?;
            let (model, history) = BiLstmModel::train(&fit, &dev, &cfg)?;
            record.history = Some(history);
            if config.save_models && job.system == System::LstmAtt {
                model.save(model_dir(run_dir, job.construct, job.system, job.fold))?;
            }
            job.test
                .iter()
                .map(|(d, _)| Ok((d.id.clone(), model.predict_proba(d)?)))
                .collect::<Result<_>>()?
        }
        System::Memn2n => {
            let cfg = MemN2NConfig {
                seed: job.seed,
                ..config.memn2n.clone()
            };
            let (fit, dev) = train_dev_split(&job.train, derive_seed(job.seed, &[0]))?;
            let (model, history) = MemN2NModel::train(&fit, &dev, &cfg)?;
            record.history = Some(history);
            job.test
                .iter()
                .map(|(d, _)| Ok((d.id.clone(), model.predict_proba(d)?)))
                .collect::<Result<_>>()?
        }
    };
    Ok(CellOutput { record, posteriors })
}

/// Runs every `(construct, system, fold)` cell and writes the run directory:
///
/// ```text
/// config.toml  corpus.jsonl  training.json
/// predictions/<construct>/gold.csv
/// predictions/<construct>/<system>.jsonl
/// models/<construct>/lstm_att/fold<k>/
/// ```
///
/// A failing cell is recorded in `training.json`; its system gets no
/// prediction file for that construct and the run continues.
pub fn cv_run(config: &ExperimentConfig) -> Result<Vec<CellRecord>> {
    config.validate()?;
    let dialogs = config.corpus.load()?;
    let lex = config.lexicons()?;
    let run_dir = config.out_dir.as_path();
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let path = run_dir.join("config.toml");
    fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
    write_corpus(run_dir.join("corpus.jsonl"), &dialogs)?;

    let mut jobs = Vec::new();
    let mut folds_of = BTreeMap::new();
    for (ci, &construct) in config.constructs.iter().enumerate() {
        let data = filter_scorable(&dialogs, construct)?;
        let ids: Vec<&str> = data.iter().map(|(d, _)| d.id.as_str()).collect();
        let folds = kfold(&ids, config.k, config.seed)?;
        let dir = predictions_dir(run_dir, construct);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut gold: Vec<GoldRow> = data
            .iter()
            .map(|(d, y)| GoldRow {
                dialog_id: d.id.clone(),
                fold: folds.fold_of(&d.id).expect("assigned"),
                label: *y,
            })
            .collect();
        gold.sort_by(|a, b| a.dialog_id.cmp(&b.dialog_id));
        write_gold(&dir.join(GOLD_FILE), &gold)?;
        for &system in &config.systems {
            for fold in 0..config.k {
                let (test, train): (Vec<_>, Vec<_>) = data.iter().partition(|(d, _)| folds.fold_of(&d.id) == Some(fold));
                jobs.push(Job {
                    construct,
                    system,
                    fold,
                    seed: derive_seed(config.seed, &[ci as u64, system as u64, fold as u64]),
                    train,
                    test,
                });
            }
        }
        folds_of.insert(construct, folds.membership);
    }

    let outputs: Vec<CellOutput> = jobs
        .par_iter()
        .map(|job| {
            run_cell(job, config, &lex, run_dir).unwrap_or_else(|e| {
                log::error!("{}/{} fold {}: {e}", job.construct, job.system, job.fold);
                CellOutput {
                    record: CellRecord {
                        construct: job.construct,
                        system: job.system,
                        fold: job.fold,
                        seed: job.seed,
                        l2: None,
                        history: None,
                        error: Some(e.to_string()),
                    },
                    posteriors: Vec::new(),
                }
            })
        })
        .collect();

    let mut grouped: BTreeMap<(Construct, System), Vec<&CellOutput>> = BTreeMap::new();
    for o in &outputs {
        grouped.entry((o.record.construct, o.record.system)).or_default().push(o);
    }
    for ((construct, system), cells) in grouped {
        if cells.iter().any(|c| c.record.error.is_some()) {
            log::warn!("{construct}/{system}: failed folds, no predictions written");
            continue;
        }
        let posteriors: BTreeMap<String, Posterior> = cells.iter().flat_map(|c| c.posteriors.iter().cloned()).collect();
        let set = PredictionSet::new(system.as_str(), posteriors)?;
        set.write_jsonl(
            predictions_dir(run_dir, construct).join(format!("{system}.jsonl")),
            Some(&folds_of[&construct]),
        )?;
    }
    let records: Vec<CellRecord> = outputs.into_iter().map(|o| o.record).collect();
    let path = run_dir.join(TRAINING_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&records)?).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}
