//! Multinomial logistic regression over sparse features: softmax
//! cross-entropy with an L2 penalty on the weights, trained full-batch.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::features::{FeatureSpace, FeatureVector};
use crate::fusion::{argmax_label, Posterior};
use crate::metrics::qwk;

/// A labelled example; labels are `1..=4`.
pub type Example = (FeatureVector, u8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub max_iter: usize,
    /// Stop once the gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            max_iter: 200,
            grad_tol: 1e-6,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub l2_values: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            l2_values: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.l2_values.is_empty() || self.l2_values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "l2 grid must be non-empty and positive: {:?}",
                self.l2_values
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `NUM_CLASSES x n_features`, row-major.
    pub weights: Vec<f64>,
    pub bias: [f64; NUM_CLASSES],
    pub n_features: usize,
    pub l2: f64,
    pub space_fingerprint: String,
    /// Objective value after each accepted step (first entry: initial loss).
    pub loss_history: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(n_features: usize, space_fingerprint: impl Into<String>) -> Self {
        LinearModel {
            weights: vec![0.0; NUM_CLASSES * n_features],
            bias: [0.0; NUM_CLASSES],
            n_features,
            l2: 0.0,
            space_fingerprint: space_fingerprint.into(),
            loss_history: Vec::new(),
        }
    }

    fn logits(&self, x: &FeatureVector) -> [f64; NUM_CLASSES] {
        let mut z = self.bias;
        for &(j, v) in &x.entries {
            if j < self.n_features {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += self.weights[c * self.n_features + j] * v;
                }
            }
        }
        z
    }

    /// Softmax posterior without a feature-space check.
    pub fn posterior(&self, x: &FeatureVector) -> Posterior {
        softmax(self.logits(x))
    }

    pub fn predict_proba(&self, space: &FeatureSpace, x: &FeatureVector) -> Result<Posterior> {
        if space.fingerprint() != self.space_fingerprint || space.len() != self.n_features {
            return Err(Error::SpaceMismatch {
                expected: self.space_fingerprint.clone(),
                actual: space.fingerprint().to_string(),
            });
        }
        Ok(self.posterior(x))
    }

    pub fn predict(&self, x: &FeatureVector) -> u8 {
        argmax_label(&self.posterior(x))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let doc = SavedModel {
            classes: NUM_CLASSES,
            n_features: self.n_features,
            l2: self.l2,
            space_fingerprint: self.space_fingerprint.clone(),
            bias: self.bias.to_vec(),
            weights: B64.encode(f64s_to_le_bytes(&self.weights)),
        };
        fs::write(path, serde_json::to_vec_pretty(&doc)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read(path).map_err(|e| Error::io(path, e))?;
        let doc: SavedModel = serde_json::from_slice(&body)?;
        let bytes = B64
            .decode(doc.weights)
            .map_err(|e| Error::Schema(format!("weights payload: {e}")))?;
        let weights = le_bytes_to_f64s(&bytes)?;
        if doc.classes != NUM_CLASSES || weights.len() != NUM_CLASSES * doc.n_features || doc.bias.len() != NUM_CLASSES {
            return Err(Error::Schema("linear model dimensions do not match payload".into()));
        }
        Ok(LinearModel {
            weights,
            bias: doc.bias.try_into().expect("length checked"),
            n_features: doc.n_features,
            l2: doc.l2,
            space_fingerprint: doc.space_fingerprint,
            loss_history: Vec::new(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    classes: usize,
    n_features: usize,
    l2: f64,
    space_fingerprint: String,
    bias: Vec<f64>,
    /// base64 of row-major little-endian f64
    weights: String,
}

pub(crate) fn f64s_to_le_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn le_bytes_to_f64s(b: &[u8]) -> Result<Vec<f64>> {
    if b.len() % 8 != 0 {
        return Err(Error::Schema(format!("float payload of {} bytes is not a multiple of 8", b.len())));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn softmax(z: [f64; NUM_CLASSES]) -> Posterior {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - max).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Mean cross-entropy plus `l2 / 2 * ||W||^2`, with its gradient laid out as
/// `[weights..., bias...]`.
pub(crate) fn objective(model: &LinearModel, data: &[Example], l2: f64) -> (f64, Vec<f64>) {
    let nf = model.n_features;
    let n = data.len() as f64;
    let mut grad = vec![0.0; NUM_CLASSES * nf + NUM_CLASSES];
    let mut loss = 0.0;
    for (x, y) in data {
        let z = model.logits(x);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let yi = *y as usize - 1;
        loss += lse - z[yi];
        for c in 0..NUM_CLASSES {
            let r = ((z[c] - lse).exp() - if c == yi { 1.0 } else { 0.0 }) / n;
            for &(j, v) in &x.entries {
                grad[c * nf + j] += r * v;
            }
            grad[NUM_CLASSES * nf + c] += r;
        }
    }
    loss /= n;
    let mut reg = 0.0;
    for (g, w) in grad.iter_mut().zip(&model.weights) {
        *g += l2 * w;
        reg += w * w;
    }
    (loss + 0.5 * l2 * reg, grad)
}

fn apply(model: &LinearModel, base_w: &[f64], base_b: &[f64; NUM_CLASSES], dir: &[f64], t: f64) -> LinearModel {
    let nw = base_w.len();
    let mut m = model.clone();
    for (i, w) in m.weights.iter_mut().enumerate() {
        *w = base_w[i] + t * dir[i];
    }
    for c in 0..NUM_CLASSES {
        m.bias[c] = base_b[c] + t * dir[nw + c];
    }
    m
}

const HISTORY: usize = 10;

/// Two-loop L-BFGS direction `-H g`, with the diagonal `h0` (scaled by the
/// latest curvature pair) as the initial inverse Hessian.
fn lbfgs_direction(grad: &[f64], h0: &[f64], pairs: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    let gamma = pairs.last().map_or(1.0, |(s, y, _)| {
        let yhy: f64 = y.iter().zip(h0).map(|(v, h)| v * v * h).sum();
        dot(s, y) / yhy
    });
    q.iter_mut().zip(h0).for_each(|(qi, h)| *qi *= gamma * h);
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Trains from zero weights with L-BFGS and Armijo backtracking. The initial
/// inverse Hessian is diagonal and bounds each coordinate's curvature
/// (`0.5 * mean(x_j^2) + l2` for weights, `0.5` for biases).
pub fn train(
    data: &[Example],
    n_features: usize,
    l2: f64,
    opt: &OptConfig,
    space_fingerprint: &str,
) -> Result<LinearModel> {
    if n_features == 0 {
        return Err(Error::Degenerate("linear model needs at least one feature".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    if let Some((_, y)) = data.iter().find(|(_, y)| *y == 0 || *y as usize > NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {y} outside 1..={NUM_CLASSES}")));
    }
    if let Some((x, _)) = data.iter().find(|(x, _)| x.entries.iter().any(|&(j, v)| j >= n_features || !v.is_finite())) {
        return Err(Error::InvalidArgument(format!("feature vector out of range: {:?}", x.entries.last())));
    }

    let n = data.len() as f64;
    let mut curvature = vec![0.0; n_features];
    for (x, _) in data {
        for &(j, v) in &x.entries {
            curvature[j] += v * v / n;
        }
    }
    let mut h0 = Vec::with_capacity(NUM_CLASSES * n_features + NUM_CLASSES);
    for _ in 0..NUM_CLASSES {
        h0.extend(curvature.iter().map(|c| 1.0 / (0.5 * c + l2 + 1e-12)));
    }
    h0.extend([2.0; NUM_CLASSES]);

    let mut model = LinearModel::zeros(n_features, space_fingerprint);
    model.l2 = l2;
    let (mut loss, mut grad) = objective(&model, data, l2);
    model.loss_history.push(loss);
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(HISTORY);
    for _ in 0..opt.max_iter {
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {loss}")));
        }
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < opt.grad_tol {
            break;
        }
        let mut dir = lbfgs_direction(&grad, &h0, &pairs);
        let mut slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if !(slope < 0.0) {
            pairs.clear();
            dir = lbfgs_direction(&grad, &h0, &pairs);
            slope = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        }
        let (base_w, base_b) = (model.weights.clone(), model.bias);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = apply(&model, &base_w, &base_b, &dir, step);
            let (l, g) = objective(&candidate, data, l2);
            if l.is_finite() && l <= loss + opt.armijo * step * slope {
                accepted = Some((candidate, l, g));
                break;
            }
            step *= 0.5;
        }
        let Some((m, l, g)) = accepted else { break };
        let s: Vec<f64> = dir.iter().map(|d| d * step).collect();
        let y: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if pairs.len() == HISTORY {
                pairs.remove(0);
            }
            pairs.push((s, y, 1.0 / sy));
        }
        let history = std::mem::take(&mut model.loss_history);
        model = m;
        model.loss_history = history;
        model.loss_history.push(l);
        loss = l;
        grad = g;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss}")));
    }
    Ok(model)
}

/// Trains one model per grid value on `train`, scores QWK on `dev`, and
/// returns the best `(l2, model)`; ties keep the smaller `l2`.
pub fn grid_search(
    train_set: &[Example],
    dev: &[Example],
    n_features: usize,
    grid: &GridSpec,
    opt: &OptConfig,
    space_fingerprint: &str,
) -> Result<(f64, LinearModel)> {
    grid.validate()?;
    if dev.is_empty() {
        return Err(Error::InvalidArgument("grid search needs a non-empty dev set".into()));
    }
    let mut values = grid.l2_values.clone();
    values.sort_by(f64::total_cmp);
    let gold: Vec<u8> = dev.iter().map(|(_, y)| *y).collect();
    let mut best: Option<(f64, f64, LinearModel)> = None;
    let mut failures = Vec::new();
    for l2 in values {
        let model = match train(train_set, n_features, l2, opt, space_fingerprint) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("l2={l2}: {e}");
                failures.push(format!("l2={l2}: {e}"));
                continue;
            }
        };
        let pred: Vec<u8> = dev.iter().map(|(x, _)| model.predict(x)).collect();
        let score = qwk(&pred, &gold, NUM_CLASSES)?;
        if best.as_ref().map_or(true, |b| score > b.1) {
            best = Some((l2, score, model));
        }
    }
    best.map(|(l2, _, m)| (l2, m))
        .ok_or_else(|| Error::Divergence(format!("every grid candidate failed: {}", failures.join("; "))))
}
