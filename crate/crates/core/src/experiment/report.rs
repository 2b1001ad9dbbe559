use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::fuse::{fold_mean, load_predictions, read_fusion, FusionRecord};
use crate::agreement::corpus_irr;
use crate::corpus::{Construct, Dialog};
use crate::error::{Error, Result};
use crate::fusion::evaluate;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemScore {
    pub system: String,
    /// Mean over folds.
    pub accuracy: f64,
    pub qwk: f64,
    /// Over all out-of-fold predictions together.
    pub pooled_qwk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub construct: Construct,
    pub dialogs: usize,
    /// Aligned with [`Report::systems`]; `None` where a system has no
    /// predictions for this construct.
    pub scores: Vec<Option<SystemScore>>,
    pub fusion: Option<FusionRecord>,
    /// Conger kappa and Krippendorff alpha of the human ratings.
    pub irr: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub systems: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Recomputes every metric from the persisted predictions, gold files and
/// `fusion.json`. IRR columns come from `ratings` when given.
pub fn build_report(run_dir: &Path, ratings: Option<&[Dialog]>) -> Result<Report> {
    let data = load_predictions(run_dir)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no construct predictions", run_dir.display())));
    }
    let fusion = read_fusion(run_dir)?.unwrap_or_default();
    let mut systems: Vec<String> = Vec::new();
    for cp in &data {
        for s in &cp.sets {
            if !systems.contains(&s.system_id) {
                systems.push(s.system_id.clone());
            }
        }
    }
    systems.sort_by_key(|id| match id.parse::<super::System>() {
        Ok(s) => (s as usize, String::new()),
        Err(_) => (super::System::ALL.len(), id.clone()),
    });
    let mut rows = Vec::new();
    for cp in &data {
        let gold = cp.gold_map();
        let scores = systems
            .iter()
            .map(|id| {
                let Some(set) = cp.sets.iter().find(|s| &s.system_id == id) else {
                    return Ok(None);
                };
                let (qwk, accuracy) = fold_mean(set, &cp.gold)?;
                let (pooled_qwk, _) = evaluate(set, &gold)?;
                Ok(Some(SystemScore {
                    system: id.clone(),
                    accuracy,
                    qwk,
                    pooled_qwk,
                }))
            })
            .collect::<Result<_>>()?;
        let irr = ratings.map(|r| corpus_irr(r, cp.construct)).transpose()?;
        rows.push(ReportRow {
            construct: cp.construct,
            dialogs: cp.gold.len(),
            scores,
            fusion: fusion.iter().find(|f| f.construct == cp.construct).cloned(),
            irr,
        });
    }
    Ok(Report { systems, rows })
}

fn num(v: f64) -> String {
    format!("{v:.3}")
}

impl Report {
    fn has_fusion(&self) -> bool {
        self.rows.iter().any(|r| r.fusion.is_some())
    }

    fn has_irr(&self) -> bool {
        self.rows.iter().any(|r| r.irr.is_some())
    }

    /// Markdown table: mean-of-folds ACC and QWK per system, pooled QWK in
    /// brackets.
    pub fn to_markdown(&self) -> String {
        let mut head = vec!["Construct".to_string(), "N".to_string()];
        let mut next_external = super::System::ALL.len();
        for s in &self.systems {
            let number = match s.parse::<super::System>() {
                Ok(sys) => sys as usize + 1,
                Err(_) => {
                    next_external += 1;
                    next_external
                }
            };
            head.push(format!("{number}. {s} ACC"));
            head.push("QWK [pooled]".into());
        }
        if self.has_fusion() {
            head.extend(["Best system".into(), "Fused ACC".into(), "QWK [pooled]".into()]);
        }
        if self.has_irr() {
            head.extend(["Conger κ".into(), "Krippendorff α".into()]);
        }
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", head.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(head.len()));
        for row in &self.rows {
            let mut cells = vec![row.construct.to_string(), row.dialogs.to_string()];
            for s in &row.scores {
                match s {
                    Some(s) => {
                        cells.push(num(s.accuracy));
                        cells.push(format!("{} [{}]", num(s.qwk), num(s.pooled_qwk)));
                    }
                    None => cells.extend(["-".to_string(), "-".to_string()]),
                }
            }
            if self.has_fusion() {
                match &row.fusion {
                    Some(f) => {
                        cells.push(f.members.join("+"));
                        cells.push(num(f.mean_accuracy));
                        cells.push(format!("{} [{}]", num(f.mean_qwk), num(f.pooled_qwk)));
                    }
                    None => cells.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
                }
            }
            if let Some((k, a)) = row.irr {
                cells.push(num(k));
                cells.push(num(a));
            } else if self.has_irr() {
                cells.extend(["-".to_string(), "-".to_string()]);
            }
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }

    /// Full-precision CSV with one column per metric.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["construct".to_string(), "dialogs".to_string()];
        for s in &self.systems {
            head.extend([format!("{s}_acc"), format!("{s}_qwk"), format!("{s}_qwk_pooled")]);
        }
        if self.has_fusion() {
            head.extend(
                ["best_system", "fused_acc", "fused_qwk", "fused_qwk_pooled"].map(String::from),
            );
        }
        if self.has_irr() {
            head.extend(["conger_kappa", "krippendorff_alpha"].map(String::from));
        }
        w.write_record(&head)?;
        for row in &self.rows {
            let mut cells = vec![row.construct.to_string(), row.dialogs.to_string()];
            for s in &row.scores {
                match s {
                    Some(s) => cells.extend([s.accuracy, s.qwk, s.pooled_qwk].map(|v| v.to_string())),
                    None => cells.extend([String::new(), String::new(), String::new()]),
                }
            }
            if self.has_fusion() {
                match &row.fusion {
                    Some(f) => {
                        cells.push(f.members.join("+"));
                        cells.extend([f.mean_accuracy, f.mean_qwk, f.pooled_qwk].map(|v| v.to_string()));
                    }
                    None => cells.extend(std::iter::repeat(String::new()).take(4)),
                }
            }
            if self.has_irr() {
                match row.irr {
                    Some((k, a)) => cells.extend([k.to_string(), a.to_string()]),
                    None => cells.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&cells)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("<report csv>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
