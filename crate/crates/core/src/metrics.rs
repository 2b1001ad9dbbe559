//! Accuracy and quadratic weighted kappa over integer labels `1..=K`.

use crate::error::{Error, Result};

pub fn accuracy(pred: &[u8], gold: &[u8]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_lengths(pred: &[u8], gold: &[u8]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction/gold length mismatch: {} vs {}",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty label vectors".into()));
    }
    Ok(())
}

/// `k x k` counts with rows indexed by prediction and columns by gold.
pub fn confusion_matrix(pred: &[u8], gold: &[u8], k: usize) -> Result<Vec<Vec<f64>>> {
    check_lengths(pred, gold)?;
    let mut m = vec![vec![0.0; k]; k];
    for (&p, &g) in pred.iter().zip(gold) {
        let (pi, gi) = (label_index(p, k)?, label_index(g, k)?);
        m[pi][gi] += 1.0;
    }
    Ok(m)
}

fn label_index(label: u8, k: usize) -> Result<usize> {
    if label == 0 || label as usize > k {
        return Err(Error::InvalidArgument(format!("label {label} outside 1..={k}")));
    }
    Ok(label as usize - 1)
}

/// Quadratic weighted kappa: `1 - sum(w O) / sum(w E)` with
/// `w_ij = (i - j)^2 / (k - 1)^2` and `E` the outer product of the marginals
/// scaled to `N`. Returns 1.0 when all mass sits on one shared category.
pub fn qwk(pred: &[u8], gold: &[u8], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("qwk needs at least 2 categories, got {k}")));
    }
    let observed = confusion_matrix(pred, gold, k)?;
    let n = pred.len() as f64;
    let row: Vec<f64> = observed.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..k).map(|j| observed.iter().map(|r| r[j]).sum()).collect();
    let denom_scale = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / denom_scale;
            num += w * observed[i][j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            return Ok(1.0);
        }
        return Err(Error::Degenerate("qwk: zero expected disagreement with nonzero observed".into()));
    }
    Ok(1.0 - num / den)
}
