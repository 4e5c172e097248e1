//! Run-level parallelism: a sweep of independent short training runs mapped
//! over 1 worker vs all cores. Training steps themselves stay sequential;
//! only whole runs parallelize.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ssvae_core::data::{
    build_vocab, make_splits, prepare_rotation, synth_generate, SynthSpec,
};
use ssvae_core::model::ModelConfig;
use ssvae_core::objectives::VariantConfig;
use ssvae_core::parallel::map_indexed;
use ssvae_core::training::{train, PreparedData, TrainConfig};

const MAX_LEN: usize = 12;
const RUNS: usize = 8;

fn prepared() -> (PreparedData, usize, usize) {
    let spec = SynthSpec::disjoint_dominant(2, 4, 0.9, 4, MAX_LEN, 60, 60, 40, 9).unwrap();
    let (labeled, unlabeled, test) = synth_generate(&spec).unwrap();
    let vocab = build_vocab(&[&labeled, &unlabeled], 1);
    let plan = make_splits(&labeled, &unlabeled, 9).unwrap();
    let data =
        prepare_rotation(&labeled, &unlabeled, &test, &plan, 0, 1.0, &vocab, MAX_LEN).unwrap();
    (data, vocab.size(), spec.classes)
}

fn sweep(data: &PreparedData, vocab: usize, classes: usize, workers: usize) -> Vec<f64> {
    map_indexed(RUNS, workers, |i| {
        let mut model = ModelConfig::new(vocab, classes);
        model.embed_dim = 8;
        model.enc_hidden = 8;
        model.z_dim = 2;
        model.dec_hidden = 8;
        model.max_len = MAX_LEN;
        let mut cfg = TrainConfig::new(VariantConfig::ssvae(1.0), model, i as u64);
        cfg.batch_size = 16;
        cfg.max_epochs = 2;
        train::<f64>(cfg, data.clone()).unwrap().test_accuracy
    })
}

fn bench_sweep(c: &mut Criterion) {
    let (data, vocab, classes) = prepared();
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut group = c.benchmark_group("run_sweep");
    group.sample_size(10);
    let mut counts = vec![1];
    if cores > 1 {
        counts.push(cores);
    }
    for workers in counts {
        group.bench_function(BenchmarkId::from_parameter(workers), |b| {
            b.iter(|| sweep(&data, vocab, classes, workers))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
