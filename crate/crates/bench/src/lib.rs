//! Shared fixtures for the benchmarks.

use dialogscore::corpus::{filter_scorable, synthesize_corpus, SignalSpec};
use dialogscore::fusion::PredictionSet;
use dialogscore::{Construct, Dialog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn corpus(n: usize) -> Vec<Dialog> {
    synthesize_corpus(7, n, &SignalSpec::default()).expect("n > 0")
}

pub fn labelled(dialogs: &[Dialog], construct: Construct) -> Vec<(&Dialog, u8)> {
    filter_scorable(dialogs, construct).expect("synthetic dialogs are rated")
}

/// `systems` random prediction sets over `n` ids, plus random gold.
pub fn prediction_sets(systems: usize, n: usize) -> (Vec<PredictionSet>, BTreeMap<String, u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gold: BTreeMap<String, u8> = (0..n).map(|i| (format!("d{i}"), rng.gen_range(1..=4))).collect();
    let sets = (0..systems)
        .map(|s| {
            let posteriors = gold
                .keys()
                .map(|id| {
                    let raw: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.01..1.0));
                    let z: f64 = raw.iter().sum();
                    (id.clone(), raw.map(|v| v / z))
                })
                .collect();
            PredictionSet::new(format!("s{s}"), posteriors).expect("valid posteriors")
        })
        .collect();
    (sets, gold)
}
