//! Stacked bidirectional LSTM dialog scorer with word-level context attention.
//!
//! The user turns of a dialog are tokenized and flattened into one sequence
//! (with a separator token between turns), embedded, run through `depth`
//! BiLSTM layers, pooled by attention
//!
//! ```text
//! u_i = tanh(W_d h_i + b_w)
//! α_i = softmax_i(u_i · u_dw)
//! v   = Σ α_i h_i
//! ```
//!
//! and scored by a dense + softmax layer over the four labels.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialog, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::features::tokenize;
use crate::fusion::Posterior;
use crate::metrics::qwk;
use crate::nn::{
    bucket_batches, derive_seed, dropout_mask, normal, xavier_uniform, AdamConfig, AdamState, Axis, Dense,
    EarlyStopping, EpochStats, Gradients, LstmLayer, ParamId, ParamStore, Progress, Tape, Tensor, TrainHistory, Var,
};
use crate::vocab::{apply_pretrained, load_pretrained, Vocab, TURN_SEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiLstmConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Attention pooling; when off, the last forward and first backward
    /// states are concatenated instead.
    pub attention: bool,
    pub recurrent_dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Text embedding file used to initialize the word table.
    pub pretrained: Option<PathBuf>,
}

impl Default for BiLstmConfig {
    fn default() -> Self {
        BiLstmConfig {
            embed_dim: 100,
            hidden: 64,
            depth: 2,
            attention: true,
            recurrent_dropout: 0.3,
            batch_size: 16,
            max_epochs: 10,
            patience: 5,
            adam: AdamConfig::default(),
            seed: 0,
            pretrained: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    /// `input x att` (applied as `h · W_d`).
    pub w_d: ParamId,
    pub b_w: ParamId,
    /// Word-level context vector, `1 x att`.
    pub u_dw: ParamId,
}

impl AttentionParams {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, input: usize, att: usize, rng: &mut R) -> Self {
        AttentionParams {
            w_d: store.add(format!("{name}.w_d"), xavier_uniform(input, att, rng)),
            b_w: store.add(format!("{name}.b_w"), Tensor::zeros(1, att)),
            u_dw: store.add(format!("{name}.u_dw"), xavier_uniform(1, att, rng)),
        }
    }
}

/// Runs each layer forwards and backwards and concatenates the two state
/// sequences, feeding the result to the next layer. `masks[l]` holds the
/// recurrent dropout masks of layer `l` for the two directions.
pub fn stacked_bilstm(tape: &mut Tape, x: Var, layers: &[[LstmLayer; 2]], masks: Option<&[[Tensor; 2]]>) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::InvalidArgument("BiLSTM over an empty sequence".into()));
    }
    let mut h = x;
    for (l, [fwd, bwd]) in layers.iter().enumerate() {
        let m = masks.map(|m| &m[l]);
        let f = fwd.run(tape, h, false, m.map(|m| &m[0]))?;
        let b = bwd.run(tape, h, true, m.map(|m| &m[1]))?;
        h = tape.concat_cols(&[f, b])?;
    }
    Ok(h)
}

/// Attention pooling over the rows of `hs`; returns `(v, α)` with `α` a
/// column (`T x 1`).
pub fn attention(tape: &mut Tape, hs: Var, p: &AttentionParams) -> Result<(Var, Var)> {
    let w = tape.param(p.w_d);
    let b = tape.param(p.b_w);
    let ctx = tape.param(p.u_dw);
    let u = tape.matmul(hs, w)?;
    let u = tape.add_row(u, b)?;
    let u = tape.tanh(u);
    let scores = tape.matmul_t(u, ctx)?;
    let alpha = tape.softmax(scores, Axis::Rows);
    let at = tape.transpose(alpha);
    let v = tape.matmul(at, hs)?;
    Ok((v, alpha))
}

/// User-turn tokens in dialog order with [`TURN_SEP`] between turns.
pub fn dialog_tokens(dialog: &Dialog) -> Vec<String> {
    let mut out = Vec::new();
    for (i, turn) in dialog.user_turns().enumerate() {
        if i > 0 {
            out.push(TURN_SEP.to_string());
        }
        out.extend(tokenize(&turn.text));
    }
    out
}

/// Parameter handles of one model; cheap to clone.
#[derive(Debug, Clone)]
pub struct BiLstmLayout {
    pub embed: ParamId,
    pub layers: Vec<[LstmLayer; 2]>,
    pub attn: Option<AttentionParams>,
    pub dense: Dense,
    pub hidden: usize,
}

pub struct Forward {
    pub logits: Var,
    pub alpha: Option<Var>,
}

impl BiLstmLayout {
    pub fn build<R: rand::Rng>(config: &BiLstmConfig, vocab_len: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let h = config.hidden;
        let embed = store.add("embed", normal(vocab_len, config.embed_dim, 0.1, rng));
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let input = if l == 0 { config.embed_dim } else { 2 * h };
            layers.push([
                LstmLayer::new(store, &format!("lstm{l}.fwd"), input, h, rng),
                LstmLayer::new(store, &format!("lstm{l}.bwd"), input, h, rng),
            ]);
        }
        let attn = config
            .attention
            .then(|| AttentionParams::new(store, "attn", 2 * h, 2 * h, rng));
        let dense = Dense::new(store, "out", 2 * h, NUM_CLASSES, rng);
        BiLstmLayout {
            embed,
            layers,
            attn,
            dense,
            hidden: h,
        }
    }

    /// Logits (`1 x 4`) for a token-index sequence. With `dropout`, fresh
    /// recurrent masks are drawn per layer and direction.
    pub fn forward(&self, tape: &mut Tape, indices: &[usize], dropout: Option<(&mut ChaCha8Rng, f64)>) -> Result<Forward> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("dialog has no user tokens".into()));
        }
        let table = tape.param(self.embed);
        let x = tape.embedding(table, indices)?;
        let masks = match dropout {
            Some((rng, rate)) if rate > 0.0 => Some(
                self.layers
                    .iter()
                    .map(|_| Ok([dropout_mask(1, self.hidden, rate, rng)?, dropout_mask(1, self.hidden, rate, rng)?]))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let hs = stacked_bilstm(tape, x, &self.layers, masks.as_deref())?;
        let (pooled, alpha) = match &self.attn {
            Some(p) => {
                let (v, a) = attention(tape, hs, p)?;
                (v, Some(a))
            }
            None => {
                let t = tape.value(hs).rows();
                let last = tape.slice_rows(hs, t - 1, 1)?;
                let first = tape.slice_rows(hs, 0, 1)?;
                let f = tape.slice_cols(last, 0, self.hidden)?;
                let b = tape.slice_cols(first, self.hidden, self.hidden)?;
                (tape.concat_cols(&[f, b])?, None)
            }
        };
        let logits = self.dense.forward(tape, pooled)?;
        Ok(Forward { logits, alpha })
    }
}

pub(crate) fn softmax_posterior(logits: &Tensor) -> Posterior {
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (o, v) in p.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Argmax label (1-based) of a posterior; ties go to the lower label.
fn label_of(p: &Posterior) -> u8 {
    crate::fusion::argmax_label(p)
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    kind: String,
    config: BiLstmConfig,
    vocab: Vocab,
}

const KIND: &str = "bilstm";

pub struct BiLstmModel {
    pub config: BiLstmConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub layout: BiLstmLayout,
}

impl BiLstmModel {
    /// Fresh parameters for `vocab`, seeded by `config.seed`.
    pub fn new(config: BiLstmConfig, vocab: Vocab) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let layout = BiLstmLayout::build(&config, vocab.len(), &mut params, &mut rng);
        if let Some(path) = &config.pretrained {
            let vectors = load_pretrained(path, config.embed_dim)?;
            let hits = apply_pretrained(params.get_mut(layout.embed), &vocab, &vectors);
            log::info!("initialized {hits}/{} embedding rows from {}", vocab.len(), path.display());
        }
        Ok(BiLstmModel {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn encode(&self, dialog: &Dialog) -> Result<Vec<usize>> {
        let tokens = dialog_tokens(dialog);
        if tokens.iter().all(|t| t == TURN_SEP) {
            return Err(Error::InvalidArgument(format!("dialog `{}` has no user tokens", dialog.id)));
        }
        Ok(self.vocab.encode(&tokens))
    }

    pub fn predict_proba(&self, dialog: &Dialog) -> Result<Posterior> {
        let idx = self.encode(dialog)?;
        let mut tape = Tape::new(&self.params);
        let f = self.layout.forward(&mut tape, &idx, None)?;
        Ok(softmax_posterior(tape.value(f.logits)))
    }

    pub fn predict(&self, dialog: &Dialog) -> Result<u8> {
        Ok(label_of(&self.predict_proba(dialog)?))
    }

    /// Attention weight per input token, in input order (separators
    /// included). Requires an attention model.
    pub fn attention_heatmap(&self, dialog: &Dialog) -> Result<Vec<(String, f64)>> {
        if self.layout.attn.is_none() {
            return Err(Error::InvalidArgument("model was trained without attention".into()));
        }
        let tokens = dialog_tokens(dialog);
        let idx = self.encode(dialog)?;
        let mut tape = Tape::new(&self.params);
        let f = self.layout.forward(&mut tape, &idx, None)?;
        let alpha = tape.value(f.alpha.expect("attention model"));
        Ok(tokens.into_iter().zip(alpha.data().iter().copied()).collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = SnapshotMeta {
            kind: KIND.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        self.params.save_snapshot(dir, &meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (store, meta): (ParamStore, SnapshotMeta) = ParamStore::load_snapshot(dir)?;
        if meta.kind != KIND {
            return Err(Error::Schema(format!("snapshot holds a `{}` model, expected `{KIND}`", meta.kind)));
        }
        let vocab = meta.vocab.reindex();
        let mut fresh = ParamStore::new();
        let layout = BiLstmLayout::build(&meta.config, vocab.len(), &mut fresh, &mut ChaCha8Rng::seed_from_u64(0));
        check_layout(&fresh, &store)?;
        Ok(BiLstmModel {
            config: meta.config,
            vocab,
            params: store,
            layout,
        })
    }

    /// Trains on `train` with early stopping on `dev` QWK and returns the
    /// best-dev parameters.
    pub fn train(train: &[(&Dialog, u8)], dev: &[(&Dialog, u8)], config: &BiLstmConfig) -> Result<(Self, TrainHistory)> {
        if train.is_empty() || dev.is_empty() {
            return Err(Error::InvalidArgument("BiLSTM training needs non-empty train and dev sets".into()));
        }
        let token_seqs: Vec<Vec<String>> = train.iter().map(|(d, _)| dialog_tokens(d)).collect();
        let vocab = Vocab::build(token_seqs.iter().map(Vec::as_slice), &[TURN_SEP]);
        let mut model = BiLstmModel::new(config.clone(), vocab)?;
        let train_x: Vec<(Vec<usize>, usize)> = train
            .iter()
            .map(|(d, y)| Ok((model.encode(d)?, usize::from(*y) - 1)))
            .collect::<Result<_>>()?;
        let dev_x: Vec<Vec<usize>> = dev.iter().map(|(d, _)| model.encode(d)).collect::<Result<_>>()?;
        let dev_gold: Vec<u8> = dev.iter().map(|(_, y)| *y).collect();
        let lengths: Vec<usize> = train_x.iter().map(|(x, _)| x.len()).collect();

        let mut adam = AdamState::new(&model.params, config.adam);
        let mut stopper = EarlyStopping::new(config.patience);
        let mut history = TrainHistory::default();
        let mut best = model.params.clone();
        let layout = model.layout.clone();
        for epoch in 1..=config.max_epochs {
            let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64]));
            let batches = bucket_batches(&lengths, config.batch_size, &mut order_rng);
            let mut epoch_loss = 0.0;
            for (b, batch) in batches.iter().enumerate() {
                let params = &model.params;
                let per: Vec<(f64, Gradients)> = batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, epoch as u64, i as u64]));
                        let mut tape = Tape::new(params);
                        let (x, y) = &train_x[i];
                        let f = layout.forward(&mut tape, x, Some((&mut rng, config.recurrent_dropout)))?;
                        let loss = tape.cross_entropy(f.logits, *y)?;
                        let value = tape.value(loss).item();
                        Ok((value, tape.backward(loss)?))
                    })
                    .collect::<Result<_>>()?;
                let mut grads = Gradients::zeros_like(params);
                let mut batch_loss = 0.0;
                let scale = 1.0 / batch.len() as f64;
                for (l, g) in &per {
                    batch_loss += l * scale;
                    grads.accumulate(g, scale);
                }
                if !batch_loss.is_finite() || !grads.all_finite() {
                    return Err(Error::Divergence(format!("epoch {epoch}, batch {}: loss {batch_loss}", b + 1)));
                }
                epoch_loss += batch_loss * batch.len() as f64;
                adam.step(&mut model.params, &grads)?;
            }
            let preds: Vec<u8> = dev_x
                .par_iter()
                .map(|x| {
                    let mut tape = Tape::new(&model.params);
                    let f = layout.forward(&mut tape, x, None)?;
                    Ok(label_of(&softmax_posterior(tape.value(f.logits))))
                })
                .collect::<Result<_>>()?;
            let dev_qwk = qwk(&preds, &dev_gold, NUM_CLASSES)?;
            let train_loss = epoch_loss / train_x.len() as f64;
            log::debug!("bilstm epoch {epoch}: loss {train_loss:.4}, dev qwk {dev_qwk:.4}");
            history.epochs.push(EpochStats {
                epoch,
                train_loss,
                dev_qwk,
            });
            let progress = stopper.observe(epoch, dev_qwk);
            if progress == Progress::Improved {
                best = model.params.clone();
            }
            if progress == Progress::Stop {
                break;
            }
        }
        let (score, epoch) = stopper.best().unwrap_or((f64::NAN, 0));
        history.best_epoch = epoch;
        history.best_dev_qwk = score;
        model.params = best;
        Ok((model, history))
    }
}

/// Rejects a loaded store whose names or shapes differ from a fresh build.
pub(crate) fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Schema(format!(
            "snapshot has {} tensors, model layout needs {}",
            got.len(),
            expected.len()
        )));
    }
    for id in expected.ids() {
        if expected.name(id) != got.name(id) || expected.get(id).shape() != got.get(id).shape() {
            return Err(Error::Schema(format!(
                "snapshot tensor `{}` {:?} does not match layout `{}` {:?}",
                got.name(id),
                got.get(id).shape(),
                expected.name(id),
                expected.get(id).shape()
            )));
        }
    }
    Ok(())
}
