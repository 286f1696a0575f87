use std::time::Instant;

use consvqa::batching::PairedBatchSampler;
use consvqa::harness::{
    batch_gradients, predict_split, run_evaluation, run_training, train, Method, RunConfig, TrainingData,
    METRICS_FILE,
};
use consvqa::losses::LossConfig;
use consvqa::model::{load_checkpoint, ModelConfig, VqaModel};
use consvqa::synth::{class_weights, generate_dataset, DatasetConfig, Dataset, Split};
use consvqa::{Error, Execution};

fn small_dataset(scenes: usize, seed: u64) -> Dataset {
    let mut cfg = DatasetConfig::with_scenes(scenes, seed);
    cfg.gen.width = 32;
    cfg.gen.height = 32;
    generate_dataset(&cfg, Execution::default()).unwrap()
}

fn quick_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        batch_size: 16,
        pair_quota: 4,
        max_epochs: 2,
        patience: 2,
        learning_rate: 1e-3,
        seed: 3,
        ..RunConfig::default()
    }
}

fn losses(history: &[consvqa::harness::EpochRecord]) -> Vec<(u64, u64)> {
    history.iter().map(|r| (r.train_loss.to_bits(), r.train_vqa.to_bits())).collect()
}

#[test]
fn zero_lambda_matches_baseline_trajectory() {
    let data = TrainingData::from_dataset(small_dataset(8, 1), Execution::default()).unwrap();
    let base = train(&quick_config(Method::Baseline), &data, ModelConfig::micro(), Execution::default(), |_| {}).unwrap();
    let cfg = RunConfig { lambda: 0.0, ..quick_config(Method::Consistency) };
    let cons = train(&cfg, &data, ModelConfig::micro(), Execution::default(), |_| {}).unwrap();
    assert_eq!(losses(&base.history), losses(&cons.history));
    assert_eq!(base.model.params.flatten(), cons.model.params.flatten());
}

#[test]
fn no_pairs_means_no_consistency_term() {
    let data = TrainingData::from_dataset(small_dataset(8, 2), Execution::default()).unwrap();
    let cfg = RunConfig { pair_quota: 0, ..quick_config(Method::Consistency) };
    let out = train(&cfg, &data, ModelConfig::micro(), Execution::default(), |_| {}).unwrap();
    assert!(out.history.iter().all(|r| r.train_cons == 0.0));
    // gamma above ln 5 keeps the hinge open for an untrained model.
    let open = RunConfig { gamma: 3.0, ..quick_config(Method::Consistency) };
    let paired = train(&open, &data, ModelConfig::micro(), Execution::default(), |_| {}).unwrap();
    assert!(paired.history.iter().any(|r| r.train_cons > 0.0));
}

#[test]
fn history_obeys_loss_and_stopping_rules() {
    let data = TrainingData::from_dataset(small_dataset(8, 9), Execution::default()).unwrap();
    let cfg = RunConfig { max_epochs: 4, patience: 1, lambda: 0.7, ..quick_config(Method::Consistency) };
    let mut seen = Vec::new();
    let out = train(&cfg, &data, ModelConfig::micro(), Execution::default(), |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, out.history);
    for r in &out.history {
        assert!((r.train_loss - (r.train_vqa + 0.7 * r.train_cons)).abs() <= 1e-6, "{r:?}");
    }
    let best = out
        .history
        .iter()
        .filter_map(|r| r.val_accuracy.map(|a| (a, r.epoch)))
        .fold((f64::NEG_INFINITY, 0), |acc, (a, e)| if a > acc.0 { (a, e) } else { acc });
    assert_eq!(out.best_epoch, best.1);
    assert!(out.history.len() == cfg.max_epochs || out.history.len() == out.best_epoch + cfg.patience);
}

#[test]
fn tampered_answer_aborts_with_qa_id() {
    let mut ds = small_dataset(4, 3);
    let rec = &mut ds.splits.get_mut(&Split::Train).unwrap()[2];
    rec.answer = if rec.answer == 0 { 1 } else { 0 };
    let id = rec.qa_id;
    match TrainingData::from_dataset(ds, Execution::default()) {
        Err(Error::Integrity { qa_id, .. }) => assert_eq!(qa_id, id),
        other => panic!("expected integrity error, got {other:?}"),
    }
}

#[test]
fn exploding_updates_abort_with_coordinates() {
    let data = TrainingData::from_dataset(small_dataset(8, 4), Execution::default()).unwrap();
    let cfg = RunConfig { learning_rate: 1e30, ..quick_config(Method::Consistency) };
    match train(&cfg, &data, ModelConfig::micro(), Execution::default(), |_| {}) {
        Err(Error::NonFinite { epoch, batch }) => assert!(epoch >= 1 && (epoch, batch) != (1, 0)),
        other => panic!("expected non-finite error, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn execution_modes_agree_bitwise() {
    let seq = Execution::Sequential;
    let par = Execution::Parallel;
    let cfg = DatasetConfig::with_scenes(12, 5);
    assert_eq!(generate_dataset(&cfg, seq).unwrap(), generate_dataset(&cfg, par).unwrap());

    let data = TrainingData::from_dataset(small_dataset(8, 6), seq).unwrap();
    let config = ModelConfig { image_size: 32, token_vocab_size: data.vocab().tokens.len(), ..ModelConfig::micro() };
    let model = VqaModel::<f32>::init(config, 9).unwrap();
    let weights = class_weights(&data.train.records);
    let mut sampler = PairedBatchSampler::new(&data.train.records, &data.train.relations, 16, 4, 1).unwrap();
    let batch = &sampler.epoch()[0];
    let loss = LossConfig { squint_lambda: 0.5, ..LossConfig::default() };
    let a = batch_gradients(&model, &data.train, batch, &weights, &loss, 2, 0, seq).unwrap();
    let b = batch_gradients(&model, &data.train, batch, &weights, &loss, 2, 0, par).unwrap();
    assert_eq!(a.0, b.0);
    for (x, y) in a.1.iter().zip(&b.1) {
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(predict_split(&model, &data.val, seq).unwrap(), predict_split(&model, &data.val, par).unwrap());
}

#[test]
fn evaluate_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    small_dataset(8, 7).write(&data_dir, Execution::default()).unwrap();
    let cfg = RunConfig {
        data_dir: data_dir.clone(),
        output_dir: dir.path().join("run"),
        ..quick_config(Method::Consistency)
    };
    let start = Instant::now();
    let (outcome, metrics) = run_training(&cfg, ModelConfig::micro(), Execution::default()).unwrap();
    assert!(start.elapsed().as_secs() < 120);

    let ckpt = load_checkpoint(&cfg.output_dir.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.manifest.epoch, outcome.best_epoch);
    assert_eq!(ckpt.model.params.flatten(), outcome.model.params.flatten());

    let eval_dir = dir.path().join("eval");
    let again = run_evaluation(&cfg.output_dir.join("model.ckpt"), &data_dir, Split::Test, &eval_dir, Execution::default())
        .unwrap();
    assert_eq!(again, metrics);
    let a = std::fs::read(cfg.output_dir.join(METRICS_FILE)).unwrap();
    let b = std::fs::read(eval_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluate_rejects_foreign_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    small_dataset(6, 8).write(&d1, Execution::default()).unwrap();
    let mut other = small_dataset(6, 8);
    other.vocab.tokens.push("extra".into());
    other.write(&d2, Execution::default()).unwrap();
    let cfg = RunConfig {
        data_dir: d1,
        output_dir: dir.path().join("run"),
        max_epochs: 1,
        patience: 1,
        ..quick_config(Method::Baseline)
    };
    run_training(&cfg, ModelConfig::micro(), Execution::default()).unwrap();
    let err = run_evaluation(&cfg.output_dir.join("model.ckpt"), &d2, Split::Test, &dir.path().join("e"), Execution::default())
        .unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}
