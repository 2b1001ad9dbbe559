//! Human inter-rater agreement: Conger's multi-rater kappa and Krippendorff's
//! ordinal alpha.

use crate::corpus::{Construct, Dialog, MAX_SCORE};
use crate::error::{Error, Result};

const CATEGORIES: usize = MAX_SCORE as usize + 1;

/// Items x raters score table; `None` marks a missing rating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingMatrix {
    rows: Vec<Vec<Option<u8>>>,
    raters: usize,
}

impl RatingMatrix {
    pub fn new(rows: Vec<Vec<Option<u8>>>) -> Result<Self> {
        let raters = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != raters) {
            return Err(Error::InvalidArgument("ragged rating matrix".into()));
        }
        if raters < 2 {
            return Err(Error::InvalidArgument(format!(
                "agreement needs at least 2 raters, got {raters}"
            )));
        }
        if let Some(bad) = rows.iter().flatten().flatten().find(|&&s| s > MAX_SCORE) {
            return Err(Error::InvalidArgument(format!("score {bad} outside 0-{MAX_SCORE}")));
        }
        Ok(RatingMatrix { rows, raters })
    }

    pub fn complete(rows: Vec<Vec<u8>>) -> Result<Self> {
        Self::new(rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect())
    }

    /// One row per dialog with ratings for `construct`; dialogs with fewer
    /// scores than the widest row get missing entries.
    pub fn from_dialogs(dialogs: &[Dialog], construct: Construct) -> Result<Self> {
        let lists: Vec<&Vec<u8>> = dialogs.iter().filter_map(|d| d.ratings.get(&construct)).collect();
        let width = lists.iter().map(|l| l.len()).max().unwrap_or(0);
        let rows = lists
            .into_iter()
            .map(|l| (0..width).map(|i| l.get(i).copied()).collect())
            .collect();
        Self::new(rows)
    }

    pub fn items(&self) -> usize {
        self.rows.len()
    }

    pub fn raters(&self) -> usize {
        self.raters
    }

    pub fn rows(&self) -> &[Vec<Option<u8>>] {
        &self.rows
    }
}

/// Conger's kappa: mean pairwise observed agreement against chance agreement
/// from each rater's own category proportions. Reduces to Cohen's kappa for
/// two raters. Defined as 1.0 when chance agreement is 1 (every rating in one
/// category).
pub fn conger_kappa(m: &RatingMatrix) -> Result<f64> {
    if m.items() == 0 {
        return Err(Error::InvalidArgument("no items to rate".into()));
    }
    let mut complete: Vec<Vec<usize>> = Vec::with_capacity(m.items());
    for (i, row) in m.rows.iter().enumerate() {
        let row: Option<Vec<usize>> = row.iter().map(|s| s.map(usize::from)).collect();
        complete.push(row.ok_or_else(|| {
            Error::InvalidArgument(format!("missing rating in item {i}; use krippendorff_alpha"))
        })?);
    }
    let (n, r) = (m.items() as f64, m.raters());
    let pairs = (r * (r - 1)) as f64;

    let mut observed = 0.0;
    for row in &complete {
        let mut counts = [0usize; CATEGORIES];
        for &s in row {
            counts[s] += 1;
        }
        observed += counts.iter().map(|&c| (c * c.saturating_sub(1)) as f64).sum::<f64>() / pairs;
    }
    observed /= n;

    // proportions[rater][category]
    let mut proportions = vec![[0.0; CATEGORIES]; r];
    for row in &complete {
        for (rater, &s) in row.iter().enumerate() {
            proportions[rater][s] += 1.0 / n;
        }
    }
    let mut expected = 0.0;
    for k in 0..CATEGORIES {
        let sum: f64 = proportions.iter().map(|p| p[k]).sum();
        let sum_sq: f64 = proportions.iter().map(|p| p[k] * p[k]).sum();
        expected += (sum * sum - sum_sq) / pairs;
    }
    if (1.0 - expected).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Krippendorff's alpha with the ordinal difference function, computed from
/// the coincidence matrix. Items with fewer than two ratings are not
/// pairable and are skipped. A single observed value gives 1.0.
pub fn krippendorff_alpha(m: &RatingMatrix) -> Result<f64> {
    let mut coincidence = [[0.0f64; CATEGORIES]; CATEGORIES];
    for row in &m.rows {
        let values: Vec<usize> = row.iter().flatten().map(|&s| s as usize).collect();
        if values.len() < 2 {
            continue;
        }
        let w = 1.0 / (values.len() - 1) as f64;
        for (i, &a) in values.iter().enumerate() {
            for (j, &b) in values.iter().enumerate() {
                if i != j {
                    coincidence[a][b] += w;
                }
            }
        }
    }
    let marginals: Vec<f64> = coincidence.iter().map(|r| r.iter().sum()).collect();
    let total: f64 = marginals.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument("no item has two or more ratings".into()));
    }
    let delta = ordinal_delta(&marginals);
    let (mut d_obs, mut d_exp) = (0.0, 0.0);
    for c in 0..CATEGORIES {
        for k in 0..CATEGORIES {
            d_obs += coincidence[c][k] * delta[c][k];
            d_exp += marginals[c] * marginals[k] * delta[c][k];
        }
    }
    d_exp /= total - 1.0;
    if d_exp == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - d_obs / d_exp)
}

/// Squared ordinal distance: `(sum_{g=c..=k} n_g - (n_c + n_k) / 2)^2`.
fn ordinal_delta(marginals: &[f64]) -> Vec<Vec<f64>> {
    let k = marginals.len();
    let mut delta = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let (lo, hi) = (a.min(b), a.max(b));
            let span: f64 = marginals[lo..=hi].iter().sum();
            delta[a][b] = (span - (marginals[a] + marginals[b]) / 2.0).powi(2);
        }
    }
    delta
}

/// Conger kappa and Krippendorff alpha for one construct of a corpus.
pub fn corpus_irr(dialogs: &[Dialog], construct: Construct) -> Result<(f64, f64)> {
    let m = RatingMatrix::from_dialogs(dialogs, construct)?;
    // kappa needs complete rows; keep the fully rated ones
    let complete: Vec<Vec<Option<u8>>> = m.rows.iter().filter(|r| r.iter().all(Option::is_some)).cloned().collect();
    let kappa = conger_kappa(&RatingMatrix::new(complete)?)?;
    Ok((kappa, krippendorff_alpha(&m)?))
}
