use criterion::{criterion_group, criterion_main, Criterion};
use dialogscore::features::{FeatureConfig, FeatureSpace, Lexicons};
use dialogscore::linear::{train, Example, OptConfig};
use dialogscore::Construct;
use dialogscore_bench::{corpus, labelled};
use std::hint::black_box;

fn features(c: &mut Criterion) {
    let dialogs = corpus(500);
    let refs: Vec<_> = dialogs.iter().collect();
    let lex = Lexicons::default();
    let cfg = FeatureConfig::default();
    let mut group = c.benchmark_group("features");
    group.sample_size(10);
    group.bench_function("fit_500", |b| b.iter(|| FeatureSpace::fit(black_box(&refs), &cfg, &lex).unwrap()));
    let space = FeatureSpace::fit(&refs, &cfg, &lex).unwrap();
    group.bench_function("vectorize_500", |b| {
        b.iter(|| dialogs.iter().map(|d| space.vectorize(d).entries.len()).sum::<usize>())
    });
    group.finish();
}

fn linear(c: &mut Criterion) {
    let dialogs = corpus(500);
    let data = labelled(&dialogs, Construct::Appropriateness);
    let refs: Vec<_> = data.iter().map(|(d, _)| *d).collect();
    let space = FeatureSpace::fit(&refs, &FeatureConfig::default(), &Lexicons::default()).unwrap();
    let examples: Vec<Example> = data.iter().map(|(d, y)| (space.vectorize(d), *y)).collect();
    let mut group = c.benchmark_group("linear");
    group.sample_size(10);
    for l2 in [0.01, 1.0] {
        group.bench_function(format!("train_500_l2_{l2}"), |b| {
            b.iter(|| train(black_box(&examples), space.len(), l2, &OptConfig::default(), space.fingerprint()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, features, linear);
criterion_main!(benches);
