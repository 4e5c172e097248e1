//! Wall clock of one full optimization step (forward + backward + Adam)
//! for every variant, on identical pre-materialized batches.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ssvae_core::data::{
    build_vocab, make_splits, prepare_rotation, synth_generate, SynthSpec,
};
use ssvae_core::model::{ModelConfig, TokenBatch};
use ssvae_core::objectives::{VariantConfig, VARIANT_NAMES};
use ssvae_core::training::{PreparedData, TrainConfig, Trainer};

const MAX_LEN: usize = 24;
const BATCH: usize = 16;

fn prepared() -> (PreparedData, usize, usize) {
    let spec = SynthSpec::disjoint_dominant(4, 16, 0.9, 8, MAX_LEN, 200, 400, 100, 5).unwrap();
    let (labeled, unlabeled, test) = synth_generate(&spec).unwrap();
    let vocab = build_vocab(&[&labeled, &unlabeled], 1);
    let plan = make_splits(&labeled, &unlabeled, 5).unwrap();
    let data =
        prepare_rotation(&labeled, &unlabeled, &test, &plan, 0, 1.0, &vocab, MAX_LEN).unwrap();
    (data, vocab.size(), spec.classes)
}

fn model_for(vocab: usize, classes: usize, drop_z: bool) -> ModelConfig {
    let mut m = ModelConfig::new(vocab, classes);
    m.embed_dim = 16;
    m.enc_hidden = 16;
    m.z_dim = 4;
    m.dec_hidden = 32;
    m.max_len = MAX_LEN;
    m.drop_z = drop_z;
    m
}

fn batches(data: &PreparedData) -> (TokenBatch, TokenBatch) {
    let rows: Vec<Vec<usize>> =
        data.labeled.iter().take(BATCH).map(|(r, _)| r.clone()).collect();
    let labels: Vec<usize> = data.labeled.iter().take(BATCH).map(|(_, l)| *l).collect();
    let labeled = TokenBatch::from_rows(&rows, Some(labels)).unwrap();
    let rows: Vec<Vec<usize>> = data.unlabeled.iter().take(BATCH).cloned().collect();
    let unlabeled = TokenBatch::from_rows(&rows, None).unwrap();
    (labeled, unlabeled)
}

fn bench_variant_step(c: &mut Criterion) {
    let (data, vocab, classes) = prepared();
    let (labeled, unlabeled) = batches(&data);
    let mut group = c.benchmark_group("variant_step");
    group.sample_size(20);
    for name in VARIANT_NAMES {
        let variant = VariantConfig::from_name(name, 1.0).unwrap();
        let semi = !variant.supervised_only;
        let model = model_for(vocab, classes, variant.drop_z || variant.supervised_only);
        let cfg = TrainConfig::new(variant, model, 5);
        let mut trainer = Trainer::<f64>::new(cfg, data.clone()).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                trainer
                    .step(&labeled, if semi { Some(&unlabeled) } else { None })
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_variant_step);
criterion_main!(benches);
