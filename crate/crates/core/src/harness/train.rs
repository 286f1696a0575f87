use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{SplitData, TrainingData};
use super::optim::Adam;
use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::batching::{Batch, PairedBatchSampler};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{total_loss_graph, LossConfig, SampleOutput};
use crate::metrics::{accuracy, argmax, consistency_c1, PredictionRow, TypeFilter};
use crate::model::{ForwardOutput, ModelConfig, VqaModel};
use crate::synth::class_weights;

/// One line of `history.jsonl`. Loss columns are means over the epoch's
/// batches; `train_cons` and `train_squint` are before weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_vqa: f64,
    pub train_cons: f64,
    pub train_squint: f64,
    pub val_accuracy: Option<f64>,
    pub val_c1: Option<f64>,
    pub batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: VqaModel<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub class_weights: Vec<f64>,
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub vqa: f64,
    pub cons: f64,
    pub squint: f64,
}

/// Forward pass retained for the backward sweep.
struct Recorded {
    graph: Graph<f32>,
    bound: Vec<Var>,
    out: ForwardOutput,
}

fn dropout_rng(seed: u64, step: u64, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd509_0a7e);
    rng.set_stream(step);
    rng.set_word_pos((position as u128) << 32);
    rng
}

/// Gradients of the batch objective for every parameter, plus the losses.
///
/// Each sample is recorded on its own graph (in parallel when `exec` allows);
/// a small head graph over the per-sample answer distributions evaluates the
/// objective and hands each sample its output gradient; the per-sample
/// backward sweeps then run independently and are summed in batch order, so
/// the result does not depend on `exec`.
pub fn batch_gradients(
    model: &VqaModel<f32>,
    data: &SplitData,
    batch: &Batch,
    weights: &[f64],
    loss: &LossConfig,
    seed: u64,
    step: u64,
    exec: Execution,
) -> Result<(StepLosses, Vec<Tensor<f32>>)> {
    let n = batch.record_indices.len();
    let recorded: Vec<Result<Recorded>> = exec.map_range(n, |pos| {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph);
        let mut rng = dropout_rng(seed, step, pos);
        let input = data.input(batch.record_indices[pos]);
        let out = model.forward(&mut graph, &bound, input, Mode::Train, &mut rng)?;
        Ok(Recorded { graph, bound, out })
    });
    let recorded = recorded.into_iter().collect::<Result<Vec<_>>>()?;

    let want_maps = loss.squint_lambda != 0.0;
    let mut head = Graph::<f64>::new();
    let mut samples = Vec::with_capacity(n);
    for (r, &i) in recorded.iter().zip(&batch.record_indices) {
        let probs = head.leaf(r.graph.value(r.out.probs)?.cast());
        let maps = if want_maps {
            Some(head.leaf(r.graph.value(r.out.attention.maps)?.cast()))
        } else {
            None
        };
        let answer = data.records[i].answer;
        samples.push(SampleOutput { probs, maps, answer, weight: weights[answer] });
    }
    let vars = total_loss_graph(&mut head, &samples, &batch.pair_positions, loss)?;
    let value = |v| head.value(v).map(|t| t.item());
    let losses = StepLosses {
        total: value(vars.total)?,
        vqa: value(vars.vqa)?,
        cons: value(vars.cons)?,
        squint: value(vars.squint)?,
    };
    let head_grads = head.backward(vars.total)?;
    let mut jobs = Vec::with_capacity(n);
    for (r, s) in recorded.into_iter().zip(&samples) {
        let mut seeds = vec![(r.out.probs, head_grads.wrt(s.probs)?.cast::<f32>())];
        if let Some(m) = s.maps {
            seeds.push((r.out.attention.maps, head_grads.wrt(m)?.cast::<f32>()));
        }
        jobs.push((r, seeds));
    }
    let per_sample = exec.map_owned(jobs, |(r, seeds)| {
        let mut grads = r.graph.backward_seeded(&seeds)?;
        model.params.collect_grads(&mut grads, &r.bound)
    });
    let mut total: Option<Vec<Tensor<f32>>> = None;
    for g in per_sample {
        let g = g?;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let grads = total.ok_or_else(|| Error::Usage("empty batch".into()))?;
    Ok((losses, grads))
}

/// Eval-mode predictions for every record of `data`.
pub fn predict_split(model: &VqaModel<f32>, data: &SplitData, exec: Execution) -> Result<Vec<PredictionRow>> {
    let rows = exec.map_range(data.len(), |i| {
        let (probs, _) = model.predict(data.input(i))?;
        let probs: Vec<f64> = probs.iter().map(|&p| f64::from(p)).collect();
        let r = &data.records[i];
        Ok(PredictionRow {
            qa_id: r.qa_id,
            scene_id: r.scene_id,
            qtype: r.qtype,
            answer: r.answer,
            predicted: argmax(&probs),
            probs,
            related_main: r.related_main,
        })
    });
    rows.into_iter().collect()
}

/// Mini-batch training with early stopping on validation overall accuracy.
/// `on_epoch` sees each history line as it is produced.
pub fn train(
    cfg: &RunConfig,
    data: &TrainingData,
    model_config: ModelConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let loss = cfg.loss_config();
    let image_size = data.dataset.scenes.first().map_or(model_config.image_size, |s| s.width as usize);
    let model_config = ModelConfig {
        image_size,
        channels: data.dataset.channels as usize,
        token_vocab_size: data.vocab().tokens.len(),
        ..model_config
    };
    let mut model = VqaModel::<f32>::init(model_config, cfg.seed)?;
    let weights = class_weights(&data.train.records);
    let mut sampler = PairedBatchSampler::new(
        &data.train.records,
        &data.train.relations,
        cfg.batch_size,
        cfg.pair_quota,
        cfg.seed.wrapping_add(1),
    )?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, VqaModel<f32>)> = None;

    for epoch in 1..=cfg.max_epochs {
        let batches = sampler.epoch();
        let mut sums = [0.0f64; 4];
        for (b, batch) in batches.iter().enumerate() {
            let (l, grads) =
                batch_gradients(&model, &data.train, batch, &weights, &loss, cfg.seed, adam.steps(), exec)?;
            if !l.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite { epoch, batch: b });
            }
            adam.update(&mut model.params, &grads)?;
            for (s, v) in sums.iter_mut().zip([l.total, l.vqa, l.cons, l.squint]) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let rows = predict_split(&model, &data.val, exec)?;
        let val_accuracy = accuracy(&rows, TypeFilter::Overall).percent();
        let record = EpochRecord {
            epoch,
            train_loss: sums[0] / nb,
            train_vqa: sums[1] / nb,
            train_cons: sums[2] / nb,
            train_squint: sums[3] / nb,
            val_accuracy,
            val_c1: consistency_c1(&rows, &data.val.relations).percent(),
            batches: batches.len(),
        };
        on_epoch(&record);
        history.push(record);

        let score = val_accuracy.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        class_weights: weights,
    })
}
