//! Turn-level end-to-end memory network.
//!
//! Each user turn is scored from a `(current response, response history,
//! prompt history)` tuple. The response is embedded as the query `u_0`;
//! each hop attends over both history banks and adds the two outputs:
//!
//! ```text
//! p_i = softmax_i(u · m_i)      o = Σ p_i c_i
//! u_k = u_{k-1} + o_k(responses) + o_k(prompts)
//! ```
//!
//! An LSTM reads `[u_0, ..., u_K]` and a dense layer on its final state gives
//! the turn posterior. Dialog scores are the lower median of turn labels.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilstm::{check_layout, softmax_posterior};
use crate::corpus::{median_label, Dialog, Speaker, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::features::tokenize;
use crate::fusion::{argmax_label, Posterior};
use crate::metrics::qwk;
use crate::nn::{
    bucket_batches, derive_seed, normal, AdamConfig, AdamState, Axis, Dense, EarlyStopping, EpochStats, Gradients,
    LstmLayer, ParamId, ParamStore, Progress, Tape, Tensor, TrainHistory, Var,
};
use crate::vocab::{apply_pretrained, load_pretrained, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    #[default]
    Bow,
    /// Position-weighted sum.
    Positional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemN2NConfig {
    pub embed_dim: usize,
    pub hops: usize,
    /// Most recent history entries kept per bank.
    pub memory_size: usize,
    pub readout_hidden: usize,
    /// Layer-wise sharing: every hop uses the first hop's tables.
    pub share_hops: bool,
    pub encoding: Encoding,
    /// Applied to every hop output during training.
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Initializes the prompt-memory tables.
    pub pretrained: Option<PathBuf>,
}

impl Default for MemN2NConfig {
    fn default() -> Self {
        MemN2NConfig {
            embed_dim: 50,
            hops: 2,
            memory_size: 10,
            readout_hidden: 50,
            share_hops: false,
            encoding: Encoding::Bow,
            dropout: 0.2,
            batch_size: 32,
            max_epochs: 40,
            patience: 5,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            pretrained: None,
        }
    }
}

impl MemN2NConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.hops) {
            return Err(Error::InvalidArgument(format!("hops must be 1, 2 or 3, got {}", self.hops)));
        }
        if self.embed_dim == 0 || self.readout_hidden == 0 || self.memory_size == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("memn2n sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One training tuple. Histories are oldest-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnSample {
    pub response: Vec<String>,
    pub response_history: Vec<Vec<String>>,
    /// System prompts up to and including the one this turn answers.
    pub prompt_history: Vec<Vec<String>>,
    pub label: u8,
}

fn keep_last<T: Clone>(items: &[T], m: usize) -> Vec<T> {
    items[items.len().saturating_sub(m)..].to_vec()
}

/// One sample per user turn, every one labelled with the dialog label.
pub fn build_turn_samples(dialog: &Dialog, label: u8, memory_size: usize) -> Vec<TurnSample> {
    let mut responses: Vec<Vec<String>> = Vec::new();
    let mut prompts: Vec<Vec<String>> = Vec::new();
    let mut out = Vec::new();
    for turn in &dialog.turns {
        let tokens = tokenize(&turn.text);
        match turn.speaker {
            Speaker::System => prompts.push(tokens),
            Speaker::User => {
                out.push(TurnSample {
                    response: tokens.clone(),
                    response_history: keep_last(&responses, memory_size),
                    prompt_history: keep_last(&prompts, memory_size),
                    label,
                });
                responses.push(tokens);
            }
        }
    }
    out
}

/// Token indices of a sample; `banks[0]` holds responses, `banks[1]` prompts.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub query: Vec<usize>,
    pub banks: [Vec<Vec<usize>>; 2],
}

/// Embeds each slot as the (optionally position-weighted) sum of its token
/// rows; returns `slots x dim`. Empty slots encode to zero.
pub fn encode_slots(tape: &mut Tape, table: Var, slots: &[Vec<usize>], encoding: Encoding) -> Result<Var> {
    let dim = tape.value(table).cols();
    let flat: Vec<usize> = slots.iter().flatten().copied().collect();
    if flat.is_empty() {
        return Ok(tape.constant(Tensor::zeros(slots.len(), dim)));
    }
    let mut x = tape.embedding(table, &flat)?;
    if encoding == Encoding::Positional {
        let mut w = Vec::with_capacity(flat.len() * dim);
        for s in slots {
            let len = s.len() as f64;
            for j in 1..=s.len() {
                let j = j as f64;
                for k in 1..=dim {
                    let k = k as f64;
                    w.push((1.0 - j / len) - (k / dim as f64) * (1.0 - 2.0 * j / len));
                }
            }
        }
        let w = tape.constant(Tensor::from_vec(flat.len(), dim, w)?);
        x = tape.mul(x, w)?;
    }
    let mut seg = Tensor::zeros(slots.len(), flat.len());
    let mut at = 0;
    for (i, s) in slots.iter().enumerate() {
        for _ in s {
            seg.data_mut()[i * flat.len() + at] = 1.0;
            at += 1;
        }
    }
    let seg = tape.constant(seg);
    tape.matmul(seg, x)
}

/// Bag-of-words sum of embedding rows as a `1 x dim` row.
pub fn encode_bow(tape: &mut Tape, table: Var, tokens: &[usize]) -> Result<Var> {
    encode_slots(tape, table, &[tokens.to_vec()], Encoding::Bow)
}

/// One attention round over a non-empty bank with addressing rows `m` and
/// output rows `c`. Returns `(o, p)`, `p` a column.
pub fn hop(tape: &mut Tape, u: Var, m: Var, c: Var) -> Result<(Var, Var)> {
    let scores = tape.matmul_t(m, u)?;
    let p = tape.softmax(scores, Axis::Rows);
    let pt = tape.transpose(p);
    let o = tape.matmul(pt, c)?;
    Ok((o, p))
}

#[derive(Debug, Clone, Copy)]
pub struct HopTables {
    pub a: ParamId,
    pub c: ParamId,
}

#[derive(Debug, Clone)]
pub struct MemN2NLayout {
    pub query: ParamId,
    /// `hops[k][bank]`; shared tables repeat the same ids.
    pub hops: Vec<[HopTables; 2]>,
    pub readout: LstmLayer,
    pub dense: Dense,
    pub encoding: Encoding,
}

pub struct MemForward {
    pub logits: Var,
    /// Attention column per hop and bank; `None` for an empty bank.
    pub attention: Vec<[Option<Var>; 2]>,
}

impl MemN2NLayout {
    pub fn build<R: rand::Rng>(config: &MemN2NConfig, vocab_len: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = config.embed_dim;
        let query = store.add("B", normal(vocab_len, d, 0.1, rng));
        let mut hops: Vec<[HopTables; 2]> = Vec::with_capacity(config.hops);
        for k in 0..config.hops {
            if config.share_hops && k > 0 {
                hops.push(hops[0]);
                continue;
            }
            let mut bank = |name: &str, store: &mut ParamStore| HopTables {
                a: store.add(format!("{name}.A{k}"), normal(vocab_len, d, 0.1, rng)),
                c: store.add(format!("{name}.C{k}"), normal(vocab_len, d, 0.1, rng)),
            };
            let r = bank("responses", store);
            let p = bank("prompts", store);
            hops.push([r, p]);
        }
        let readout = LstmLayer::new(store, "readout", d, config.readout_hidden, rng);
        let dense = Dense::new(store, "out", config.readout_hidden, NUM_CLASSES, rng);
        MemN2NLayout {
            query,
            hops,
            readout,
            dense,
            encoding: config.encoding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &EncodedSample, mut dropout: Option<(&mut ChaCha8Rng, f64)>) -> Result<MemForward> {
        let b = tape.param(self.query);
        let mut u = encode_slots(tape, b, std::slice::from_ref(&x.query), self.encoding)?;
        let mut states = vec![u];
        let mut attention = Vec::with_capacity(self.hops.len());
        for tables in &self.hops {
            let mut next = u;
            let mut att = [None, None];
            for (bank, (t, slots)) in tables.iter().zip(&x.banks).enumerate() {
                if slots.is_empty() {
                    continue;
                }
                let a = tape.param(t.a);
                let c = tape.param(t.c);
                let m = encode_slots(tape, a, slots, self.encoding)?;
                let cv = encode_slots(tape, c, slots, self.encoding)?;
                let (mut o, p) = hop(tape, u, m, cv)?;
                if let Some((rng, rate)) = dropout.as_mut() {
                    o = tape.dropout(o, *rate, *rng, true)?;
                }
                next = tape.add(next, o)?;
                att[bank] = Some(p);
            }
            u = next;
            states.push(u);
            attention.push(att);
        }
        let seq = tape.concat_rows(&states)?;
        let hs = self.readout.run(tape, seq, false, None)?;
        let last = tape.slice_rows(hs, states.len() - 1, 1)?;
        let logits = self.dense.forward(tape, last)?;
        Ok(MemForward { logits, attention })
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    kind: String,
    config: MemN2NConfig,
    vocab: Vocab,
}

const KIND: &str = "memn2n";

pub struct MemN2NModel {
    pub config: MemN2NConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub layout: MemN2NLayout,
}

fn dialog_token_seqs(dialog: &Dialog) -> impl Iterator<Item = Vec<String>> + '_ {
    dialog.turns.iter().map(|t| tokenize(&t.text))
}

impl MemN2NModel {
    pub fn new(config: MemN2NConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let layout = MemN2NLayout::build(&config, vocab.len(), &mut params, &mut rng);
        if let Some(path) = &config.pretrained {
            let vectors = load_pretrained(path, config.embed_dim)?;
            let mut seen = Vec::new();
            for [_, prompts] in &layout.hops {
                for id in [prompts.a, prompts.c] {
                    if !seen.contains(&id) {
                        seen.push(id);
                        let hits = apply_pretrained(params.get_mut(id), &vocab, &vectors);
                        log::info!("initialized {hits}/{} rows of {}", vocab.len(), params.name(id));
                    }
                }
            }
        }
        Ok(MemN2NModel {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn encode(&self, sample: &TurnSample) -> EncodedSample {
        let enc = |slots: &[Vec<String>]| slots.iter().map(|s| self.vocab.encode(s)).collect();
        EncodedSample {
            query: self.vocab.encode(&sample.response),
            banks: [enc(&sample.response_history), enc(&sample.prompt_history)],
        }
    }

    fn samples(&self, dialog: &Dialog) -> Result<Vec<EncodedSample>> {
        let s = build_turn_samples(dialog, 1, self.config.memory_size);
        if s.is_empty() {
            return Err(Error::InvalidArgument(format!("dialog `{}` has no user turns", dialog.id)));
        }
        Ok(s.iter().map(|s| self.encode(s)).collect())
    }

    pub fn sample_posterior(&self, x: &EncodedSample) -> Result<Posterior> {
        let mut tape = Tape::new(&self.params);
        let f = self.layout.forward(&mut tape, x, None)?;
        Ok(softmax_posterior(tape.value(f.logits)))
    }

    /// Posterior of every user turn, in order.
    pub fn turn_posteriors(&self, dialog: &Dialog) -> Result<Vec<Posterior>> {
        self.samples(dialog)?.iter().map(|x| self.sample_posterior(x)).collect()
    }

    pub fn predict_turns(&self, dialog: &Dialog) -> Result<Vec<u8>> {
        Ok(self.turn_posteriors(dialog)?.iter().map(argmax_label).collect())
    }

    /// Lower median of the turn labels.
    pub fn score_dialog(&self, dialog: &Dialog) -> Result<u8> {
        median_label(&self.predict_turns(dialog)?)
    }

    /// Mean posterior of the turns whose label equals the dialog score, so
    /// that the argmax reproduces [`score_dialog`](Self::score_dialog).
    pub fn predict_proba(&self, dialog: &Dialog) -> Result<Posterior> {
        let turns = self.turn_posteriors(dialog)?;
        let labels: Vec<u8> = turns.iter().map(argmax_label).collect();
        let score = median_label(&labels)?;
        let mut p = [0.0; NUM_CLASSES];
        let mut n = 0.0;
        for (t, &l) in turns.iter().zip(&labels) {
            if l == score {
                p.iter_mut().zip(t).for_each(|(a, b)| *a += b);
                n += 1.0;
            }
        }
        p.iter_mut().for_each(|v| *v /= n);
        Ok(p)
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
        meta.config.validate()?;
        let vocab = meta.vocab.reindex();
        let mut fresh = ParamStore::new();
        let layout = MemN2NLayout::build(&meta.config, vocab.len(), &mut fresh, &mut ChaCha8Rng::seed_from_u64(0));
        check_layout(&fresh, &store)?;
        Ok(MemN2NModel {
            config: meta.config,
            vocab,
            params: store,
            layout,
        })
    }

    /// Trains on the turns of `train` with early stopping on dev turn QWK.
    pub fn train(train: &[(&Dialog, u8)], dev: &[(&Dialog, u8)], config: &MemN2NConfig) -> Result<(Self, TrainHistory)> {
        if train.is_empty() || dev.is_empty() {
            return Err(Error::InvalidArgument("memn2n training needs non-empty train and dev sets".into()));
        }
        let seqs: Vec<Vec<String>> = train.iter().flat_map(|(d, _)| dialog_token_seqs(d)).collect();
        let vocab = Vocab::build(seqs.iter().map(Vec::as_slice), &[]);
        let mut model = MemN2NModel::new(config.clone(), vocab)?;
        let turns = |set: &[(&Dialog, u8)]| -> Vec<(EncodedSample, u8)> {
            set.iter()
                .flat_map(|(d, y)| build_turn_samples(d, *y, config.memory_size))
                .map(|s| (model.encode(&s), s.label))
                .collect()
        };
        let train_x = turns(train);
        let dev_x = turns(dev);
        if train_x.is_empty() || dev_x.is_empty() {
            return Err(Error::InvalidArgument("memn2n training set has no user turns".into()));
        }
        let dev_gold: Vec<u8> = dev_x.iter().map(|(_, y)| *y).collect();
        let sizes: Vec<usize> = train_x.iter().map(|(x, _)| x.banks[0].len() + x.banks[1].len()).collect();

        let mut adam = AdamState::new(&model.params, config.adam);
        let mut stopper = EarlyStopping::new(config.patience);
        let mut history = TrainHistory::default();
        let mut best = model.params.clone();
        let layout = model.layout.clone();
        for epoch in 1..=config.max_epochs {
            let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64]));
            let batches = bucket_batches(&sizes, config.batch_size, &mut order_rng);
            let mut epoch_loss = 0.0;
            for (b, batch) in batches.iter().enumerate() {
                let params = &model.params;
                let per: Vec<(f64, Gradients)> = batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, epoch as u64, i as u64]));
                        let mut tape = Tape::new(params);
                        let (x, y) = &train_x[i];
                        let f = layout.forward(&mut tape, x, Some((&mut rng, config.dropout)))?;
                        let loss = tape.cross_entropy(f.logits, usize::from(*y) - 1)?;
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
                .map(|(x, _)| Ok(argmax_label(&model.sample_posterior(x)?)))
                .collect::<Result<_>>()?;
            let dev_qwk = qwk(&preds, &dev_gold, NUM_CLASSES)?;
            let train_loss = epoch_loss / train_x.len() as f64;
            log::debug!("memn2n epoch {epoch}: loss {train_loss:.4}, dev turn qwk {dev_qwk:.4}");
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::nn::grad_check;
    use std::collections::BTreeMap;

    fn dialog(user: &[&str]) -> Dialog {
        let mut turns = Vec::new();
        for (i, u) in user.iter().enumerate() {
            turns.push(Turn::system(format!("prompt {i}")));
            turns.push(Turn::user(*u));
        }
        Dialog {
            id: "d".into(),
            turns,
            ratings: BTreeMap::new(),
        }
    }

    fn tiny_config() -> MemN2NConfig {
        MemN2NConfig {
            embed_dim: 3,
            readout_hidden: 2,
            ..MemN2NConfig::default()
        }
    }

    fn tiny_model(config: MemN2NConfig) -> MemN2NModel {
        let d = dialog(&["a b c", "d e", "a a"]);
        let seqs: Vec<Vec<String>> = dialog_token_seqs(&d).collect();
        MemN2NModel::new(config, Vocab::build(seqs.iter().map(Vec::as_slice), &[])).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn samples_follow_turn_order() {
        let s = build_turn_samples(&dialog(&["one", "two", "three"]), 3, 10);
        assert_eq!(s.len(), 3);
        assert!(s[0].response_history.is_empty());
        assert_eq!(s[0].prompt_history, vec![toks("prompt 0")]);
        assert_eq!(s[2].response_history, vec![toks("one"), toks("two")]);
        assert_eq!(s[2].prompt_history.len(), 3);
        assert_eq!(s[2].response, toks("three"));
        assert!(s.iter().all(|x| x.label == 3));
        for (i, x) in s.iter().enumerate() {
            assert_eq!(x.response_history.len(), i);
        }
    }

    #[test]
    fn histories_are_truncated_to_memory_size() {
        let texts: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let s = build_turn_samples(&dialog(&refs), 2, 10);
        assert_eq!(s.len(), 12);
        assert_eq!(s[11].response_history.len(), 10);
        assert_eq!(s[11].response_history[0], toks("w1"));
        assert_eq!(s[11].prompt_history.len(), 10);
        assert_eq!(s[11].prompt_history[9], toks("prompt 11"));
    }

    #[test]
    fn bow_encoding() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.add("t", normal(5, 4, 1.0, &mut rng));
        let mut tape = Tape::new(&store);
        let t = tape.param(id);
        let empty = encode_bow(&mut tape, t, &[]).unwrap();
        assert_eq!(tape.value(empty).data(), &[0.0; 4]);
        let one = encode_bow(&mut tape, t, &[3]).unwrap();
        assert_eq!(tape.value(one).data(), store.get(id).row_slice(3));
        let a = encode_bow(&mut tape, t, &[1, 4, 2, 4]).unwrap();
        let b = encode_bow(&mut tape, t, &[4, 2, 4, 1]).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let slots = encode_slots(&mut tape, t, &[vec![], vec![0, 1]], Encoding::Positional).unwrap();
        assert_eq!(tape.value(slots).shape(), (2, 4));
        assert!(tape.value(slots).row_slice(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn positional_weights_match_formula() {
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let mut tape = Tape::new(&store);
        let t = tape.param(id);
        let e = encode_slots(&mut tape, t, &[vec![0, 1]], Encoding::Positional).unwrap();
        // J = 2, d = 2: l_kj = (1 - j/2) - (k/2)(1 - j)
        let l = |j: f64, k: f64| (1.0 - j / 2.0) - (k / 2.0) * (1.0 - j);
        let want = [l(1.0, 1.0) + l(2.0, 1.0), l(1.0, 2.0) + l(2.0, 2.0)];
        for (g, w) in tape.value(e).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn hop_cases() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let u = tape.constant(Tensor::row(&[0.3, -0.7]));
        let m = tape.constant(Tensor::row(&[1.0, 2.0]));
        let c = tape.constant(Tensor::row(&[5.0, -1.0]));
        let (o, p) = hop(&mut tape, u, m, c).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0]);
        assert_eq!(tape.value(o).data(), &[5.0, -1.0]);

        let m = tape.constant(Tensor::from_vec(3, 2, [0.4, 0.1].repeat(3)).unwrap());
        let c = tape.constant(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let (_, p) = hop(&mut tape, u, m, c).unwrap();
        assert!(tape.value(p).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let u = tape.constant(Tensor::scalar(1.0));
        let m = tape.constant(Tensor::from_vec(2, 1, vec![1.0, -1.0]).unwrap());
        let c = tape.constant(Tensor::from_vec(2, 1, vec![2.0, 4.0]).unwrap());
        let (o, p) = hop(&mut tape, u, m, c).unwrap();
        let e = std::f64::consts::E;
        let p0 = e / (e + 1.0 / e);
        assert!((tape.value(p).data()[0] - p0).abs() < 1e-15);
        assert!((tape.value(p).data()[0] - 0.8808).abs() < 1e-4);
        assert!((tape.value(o).item() - (2.0 * p0 + 4.0 * (1.0 - p0))).abs() < 1e-14);
        assert!((tape.value(o).item() - 2.2384).abs() < 1e-4);
    }

    #[test]
    fn empty_histories_keep_the_query() {
        let m = tiny_model(tiny_config());
        let x = EncodedSample {
            query: vec![1, 2],
            banks: [vec![], vec![]],
        };
        let mut tape = Tape::new(&m.params);
        let f = m.layout.forward(&mut tape, &x, None).unwrap();
        assert!(f.attention.iter().all(|a| a[0].is_none() && a[1].is_none()));
        let got = softmax_posterior(tape.value(f.logits));

        let mut tape = Tape::new(&m.params);
        let b = tape.param(m.layout.query);
        let u = encode_bow(&mut tape, b, &x.query).unwrap();
        let seq = tape.concat_rows(&[u, u, u]).unwrap();
        let hs = m.layout.readout.run(&mut tape, seq, false, None).unwrap();
        let last = tape.slice_rows(hs, 2, 1).unwrap();
        let logits = m.layout.dense.forward(&mut tape, last).unwrap();
        assert_eq!(got, softmax_posterior(tape.value(logits)));
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_is_normalized_per_bank() {
        let m = tiny_model(tiny_config());
        let s = build_turn_samples(&dialog(&["a b", "c", "d e a"]), 1, 10);
        let x = m.encode(&s[2]);
        let mut tape = Tape::new(&m.params);
        let f = m.layout.forward(&mut tape, &x, None).unwrap();
        for hop in &f.attention {
            for p in hop.iter().map(|p| p.unwrap()) {
                let v = tape.value(p).data();
                assert!(v.iter().all(|x| *x >= 0.0));
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_embeddings_make_the_posterior_input_independent() {
        let mut m = tiny_model(tiny_config());
        let mut tables = vec![m.layout.query];
        for h in &m.layout.hops {
            tables.extend(h.iter().flat_map(|t| [t.a, t.c]));
        }
        for id in tables {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let a = m.turn_posteriors(&dialog(&["a b c", "d"])).unwrap();
        let b = m.turn_posteriors(&dialog(&["e", "zz yy", "a a a"])).unwrap();
        assert!(a.iter().chain(&b).all(|p| *p == a[0]));
    }

    #[test]
    fn shuffling_words_in_a_slot_is_invisible() {
        let m = tiny_model(tiny_config());
        let p = m.turn_posteriors(&dialog(&["a b c", "d e", "a"])).unwrap();
        let q = m.turn_posteriors(&dialog(&["c a b", "e d", "a"])).unwrap();
        for (x, y) in p.iter().zip(&q) {
            for (a, b) in x.iter().zip(y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_loss_gradient_check() {
        for (share_hops, encoding) in [(false, Encoding::Bow), (true, Encoding::Positional)] {
            let mut m = tiny_model(MemN2NConfig {
                share_hops,
                encoding,
                ..tiny_config()
            });
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for id in m.params.ids().collect::<Vec<_>>() {
                let (r, c) = m.params.get(id).shape();
                *m.params.get_mut(id) = normal(r, c, 0.7, &mut rng);
            }
            let layout = m.layout.clone();
            let s = build_turn_samples(&dialog(&["a b", "c d e"]), 2, 10);
            let xs = [m.encode(&s[0]), m.encode(&s[1])];
            let r = grad_check(&mut m.params, 1e-5, None, |t| {
                let mut total = None;
                for (x, y) in xs.iter().zip([1usize, 3]) {
                    let f = layout.forward(t, x, None)?;
                    let l = t.cross_entropy(f.logits, y)?;
                    total = Some(match total {
                        Some(acc) => t.add(acc, l)?,
                        None => l,
                    });
                }
                Ok(total.unwrap())
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn dialog_score_is_lower_median_and_posterior_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..20 {
            let mut m = tiny_model(MemN2NConfig {
                seed,
                ..tiny_config()
            });
            let id = m.layout.dense.w;
            let (r, c) = m.params.get(id).shape();
            *m.params.get_mut(id) = normal(r, c, 3.0, &mut rng);
            let d = dialog(&["a b", "c", "d e", "b b"][..1 + seed as usize % 4]);
            let labels = m.predict_turns(&d).unwrap();
            let mut sorted = labels.clone();
            sorted.sort_unstable();
            let score = m.score_dialog(&d).unwrap();
            assert_eq!(score, sorted[(sorted.len() - 1) / 2]);
            assert_eq!(argmax_label(&m.predict_proba(&d).unwrap()), score);
        }
        let m = tiny_model(tiny_config());
        assert!(m.score_dialog(&Dialog {
            id: "x".into(),
            turns: vec![Turn::system("hi")],
            ratings: BTreeMap::new(),
        })
        .is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MemN2NConfig::default().validate().is_ok());
        for hops in [0, 4] {
            assert!(MemN2NConfig {
                hops,
                ..MemN2NConfig::default()
            }
            .validate()
            .is_err());
        }
        let shared = tiny_model(MemN2NConfig {
            share_hops: true,
            ..tiny_config()
        });
        let untied = tiny_model(tiny_config());
        assert_eq!(shared.layout.hops[0][0].a, shared.layout.hops[1][0].a);
        assert_eq!(untied.params.len(), shared.params.len() + 4);
    }

    #[test]
    fn snapshot_round_trip() {
        let m = tiny_model(tiny_config());
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = MemN2NModel::load(dir.path()).unwrap();
        let d = dialog(&["a c", "e", "q"]);
        assert_eq!(m.turn_posteriors(&d).unwrap(), back.turn_posteriors(&d).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let ds: Vec<Dialog> = (0..12)
            .map(|i| {
                let mut d = dialog(&[if i % 2 == 0 { "yes good" } else { "no bad" }, "ok"]);
                d.id = format!("d{i}");
                d
            })
            .collect();
        let labelled: Vec<(&Dialog, u8)> = ds.iter().enumerate().map(|(i, d)| (d, 1 + 2 * (i % 2) as u8)).collect();
        let config = MemN2NConfig {
            max_epochs: 3,
            batch_size: 4,
            ..tiny_config()
        };
        let (a, ha) = MemN2NModel::train(&labelled[..8], &labelled[8..], &config).unwrap();
        let (b, hb) = MemN2NModel::train(&labelled[..8], &labelled[8..], &config).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params, b.params);
    }
}
