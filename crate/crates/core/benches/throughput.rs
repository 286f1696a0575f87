use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use consvqa::batching::PairedBatchSampler;
use consvqa::harness::{batch_gradients, predict_split, TrainingData};
use consvqa::losses::LossConfig;
use consvqa::model::{ModelConfig, VqaModel};
use consvqa::synth::{class_weights, generate_dataset, DatasetConfig, Split};
use consvqa::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn fixture() -> (TrainingData, VqaModel<f32>) {
    let ds = generate_dataset(&DatasetConfig::with_scenes(24, 11), Execution::default()).unwrap();
    let data = TrainingData::from_dataset(ds, Execution::default()).unwrap();
    let config = ModelConfig { token_vocab_size: data.vocab().tokens.len(), ..ModelConfig::default() };
    let model = VqaModel::init(config, 0).unwrap();
    (data, model)
}

fn forward_backward(c: &mut Criterion) {
    let (data, model) = fixture();
    let weights = class_weights(&data.train.records);
    let mut sampler = PairedBatchSampler::new(&data.train.records, &data.train.relations, 64, 16, 0).unwrap();
    let batch = sampler.epoch().swap_remove(0);
    let loss = LossConfig::default();
    let mut group = c.benchmark_group("batch_forward_backward");
    group.sample_size(10);
    group.throughput(Throughput::Elements(batch.record_indices.len() as u64));
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&model, &data.train, black_box(&batch), &weights, &loss, 0, 0, exec).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (data, model) = fixture();
    let mut group = c.benchmark_group("eval_split");
    group.sample_size(10);
    group.throughput(Throughput::Elements(data.val.len() as u64));
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_split(&model, black_box(&data.val), exec).unwrap())
        });
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let cfg = DatasetConfig::with_scenes(64, 3);
    let mut group = c.benchmark_group("generate_and_render");
    group.sample_size(10);
    group.throughput(Throughput::Elements(cfg.total_scenes() as u64));
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let ds = generate_dataset(black_box(&cfg), exec).unwrap();
                Split::ALL.map(|s| ds.render_images(s, exec).len())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, evaluation, generation);
criterion_main!(benches);
