//! Run directories: what `train` and `evaluate` write and `report` reads.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{SplitData, TrainingData};
use super::train::{predict_split, train, EpochRecord, TrainOutcome};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{MetricsReport, PredictionRow};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use crate::synth::{Dataset, Split};

pub const CONFIG_FILE: &str = "config.txt";
pub const MODEL_CONFIG_FILE: &str = "model_config.txt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Run facts that are not part of the reproducible outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_seconds: f64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| Error::json(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Predictions and metrics for one split, written into `out`.
pub fn write_evaluation(
    ckpt: &Checkpoint,
    data: &SplitData,
    out: &Path,
    exec: Execution,
) -> Result<(Vec<PredictionRow>, MetricsReport)> {
    create_dir(out)?;
    let rows = predict_split(&ckpt.model, data, exec)?;
    let report = MetricsReport::compute(&rows, &data.relations);
    write_jsonl(&out.join(PREDICTIONS_FILE), &rows)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    Ok((rows, report))
}

/// Trains on `cfg.data_dir` and fills `cfg.output_dir` with the config
/// snapshot, per-epoch history, best checkpoint, and test-split
/// predictions and metrics.
pub fn run_training(
    cfg: &RunConfig,
    model_config: ModelConfig,
    exec: Execution,
) -> Result<(TrainOutcome, MetricsReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let data = TrainingData::load(&cfg.data_dir, exec)?;
    run_training_on(cfg, &data, model_config, exec, start)
}

/// As [`run_training`] with the data already in memory.
pub fn run_training_on(
    cfg: &RunConfig,
    data: &TrainingData,
    model_config: ModelConfig,
    exec: Execution,
    start: Instant,
) -> Result<(TrainOutcome, MetricsReport)> {
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_kv())?;
    let history_path = dir.join(HISTORY_FILE);
    let file = fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut history = BufWriter::new(file);
    let mut write_err = None;
    let outcome = train(cfg, data, model_config, exec, |r: &EpochRecord| {
        log::info!(
            "epoch {} loss {:.4} (vqa {:.4}, cons {:.4}, squint {:.4}) val acc {:?} val c1 {:?}",
            r.epoch,
            r.train_loss,
            r.train_vqa,
            r.train_cons,
            r.train_squint,
            r.val_accuracy,
            r.val_c1
        );
        let line = serde_json::to_string(r).expect("history rows serialize");
        if let Err(e) = writeln!(history, "{line}").and_then(|_| history.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&history_path, e));
    }
    let ckpt = Checkpoint::new(
        outcome.model.clone(),
        cfg.digest(),
        data.vocab().digest(),
        outcome.class_weights.clone(),
        outcome.best_epoch,
    );
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    write_text(&dir.join(MODEL_CONFIG_FILE), &ckpt.model.config.to_kv())?;
    let (_, report) = write_evaluation(&ckpt, &data.test, dir, exec)?;
    write_json(
        &dir.join(SUMMARY_FILE),
        &RunSummary {
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok((outcome, report))
}

/// Evaluates a checkpoint on one split of a dataset directory. The dataset's
/// vocabulary must be the one the checkpoint was trained with.
pub fn run_evaluation(
    ckpt_path: &Path,
    data_dir: &Path,
    split: Split,
    out: &Path,
    exec: Execution,
) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let dataset = Dataset::load(data_dir)?;
    let digest = dataset.vocab.digest();
    if digest != ckpt.manifest.vocab_digest {
        return Err(Error::Checkpoint(format!(
            "dataset vocabulary {digest} differs from checkpoint vocabulary {}",
            ckpt.manifest.vocab_digest
        )));
    }
    dataset.verify()?;
    let images = dataset.load_images(data_dir, split, exec)?;
    let data = SplitData::new(split, dataset.records(split).to_vec(), images, &dataset.vocab)?;
    let (_, report) = write_evaluation(&ckpt, &data, out, exec)?;
    Ok(report)
}

/// One completed run as seen by the report.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub metrics: MetricsReport,
}

/// Reads a run directory; `None` (with a warning) when its config or metrics
/// are missing or unreadable.
pub fn read_run(dir: &Path) -> Option<RunRecord> {
    let read = |name: &str| fs::read_to_string(dir.join(name));
    let (config, metrics) = match (read(CONFIG_FILE), read(METRICS_FILE)) {
        (Ok(c), Ok(m)) => (c, m),
        _ => {
            log::warn!("skipping {}: missing {CONFIG_FILE} or {METRICS_FILE}", dir.display());
            return None;
        }
    };
    let config = RunConfig::from_kv(&config);
    let metrics = serde_json::from_str::<MetricsReport>(&metrics);
    match (config, metrics) {
        (Ok(config), Ok(metrics)) => Some(RunRecord { dir: dir.to_path_buf(), config, metrics }),
        _ => {
            log::warn!("skipping {}: unreadable run files", dir.display());
            None
        }
    }
}

pub fn read_predictions(dir: &Path) -> Result<Vec<PredictionRow>> {
    crate::synth::read_jsonl(&dir.join(PREDICTIONS_FILE))
}
