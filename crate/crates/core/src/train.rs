//! Teacher-forced cross-entropy training with Adam and global-norm clipping.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{batchify, sequential_batches, Batch, ParallelCorpus};
use crate::error::{Error, Result};
use crate::graph::{clip_global_norm, Graph};
use crate::model::{EmbeddingPaths, Example, NoRng, Seq2SeqModel};
use crate::nn::Mode;
use crate::tensor::{ParamStore, Tensor};

/// Offset mixed into the run seed for the dropout stream, keeping it
/// independent of the data-order stream.
const DROPOUT_STREAM: u64 = 0x5eed_d20f;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
pub fn adam_step(opt: &mut AdamState, params: &mut ParamStore) {
    opt.t += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = opt.config;
    let c1 = 1.0 - beta1.powi(opt.t as i32);
    let c2 = 1.0 - beta2.powi(opt.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut opt.m).zip(&mut opt.v) {
        for (((x, g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *x -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Seeds the data order and the dropout masks.
    pub seed: u64,
    pub adam: AdamConfig,
    /// Where per-epoch and best checkpoints go; none disables them.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once validation accuracy reaches this value. Off by default.
    pub stop_at_accuracy: Option<f64>,
    /// When false the `seconds` column is written as 0 so logs of identical
    /// runs compare byte for byte.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            clip_norm: 5.0,
            seed: 1,
            adam: AdamConfig::default(),
            checkpoint_dir: None,
            stop_at_accuracy: None,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::config("adam.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
    pub seconds: f64,
}

/// One row per epoch. Row 0 is measured before any update; its training
/// loss is a teacher-forced evaluation of the training set. Later rows hold
/// the token-weighted mean loss of the epoch's batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,valid_loss,valid_acc,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.epoch, r.train_loss, r.valid_loss, r.valid_acc, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn valid_accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.valid_acc).collect()
    }
}

/// First epoch whose validation accuracy reaches `threshold`.
pub fn epochs_to_threshold(log: &TrainLog, threshold: f64) -> Option<usize> {
    log.records
        .iter()
        .find(|r| r.valid_acc >= threshold)
        .map(|r| r.epoch)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    /// Mean cross-entropy per target token.
    pub loss: f64,
    /// Fraction of target tokens whose top-scoring output is gold.
    pub accuracy: f64,
    pub tokens: usize,
}

/// Per-token teacher-forced loss of a batch without dropout.
pub fn sequence_loss(model: &Seq2SeqModel, batch: &Batch) -> Result<Tensor> {
    let mut g = Graph::new(&model.params);
    let examples = Example::from_batch(batch);
    let stats = model.batch_loss(
        &mut g,
        &examples,
        Mode::Eval,
        &mut NoRng,
        EmbeddingPaths::ALL,
    )?;
    let mean = g.scale(stats.loss, 1.0 / stats.tokens as f64);
    Ok(g.value(mean).clone())
}

/// Teacher-forced loss and token accuracy over a whole corpus.
pub fn evaluate(
    model: &Seq2SeqModel,
    corpus: &ParallelCorpus,
    batch_size: usize,
) -> Result<EvalStats> {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut tokens = 0;
    for batch in sequential_batches(corpus, batch_size) {
        let mut g = Graph::new(&model.params);
        let examples = Example::from_batch(&batch);
        let stats = model.batch_loss(
            &mut g,
            &examples,
            Mode::Eval,
            &mut NoRng,
            EmbeddingPaths::ALL,
        )?;
        loss += g.value(stats.loss).item();
        correct += stats.correct;
        tokens += stats.tokens;
    }
    if tokens == 0 {
        return Err(Error::contract("evaluation corpus is empty"));
    }
    Ok(EvalStats {
        loss: loss / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    /// Per-token loss before the update.
    pub loss: f64,
    pub tokens: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward, backward, clip and update on one batch.
pub fn train_step(
    model: &mut Seq2SeqModel,
    opt: &mut AdamState,
    batch: &Batch,
    clip_norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<StepStats>> {
    let examples = Example::from_batch(batch);
    let (loss, tokens, grads) = {
        let mut g = Graph::new(&model.params);
        let stats = model.batch_loss(&mut g, &examples, Mode::Train, rng, EmbeddingPaths::ALL)?;
        let mean = g.scale(stats.loss, 1.0 / stats.tokens as f64);
        let loss = g.value(mean).item();
        if !loss.is_finite() {
            return Ok(None);
        }
        (loss, stats.tokens, g.backward(mean)?)
    };
    model.params.zero_grads();
    grads.accumulate_into(&mut model.params);
    let grad_norm = clip_global_norm(&mut model.params, clip_norm)?;
    adam_step(opt, &mut model.params);
    Ok(Some(StepStats {
        loss,
        tokens,
        grad_norm,
    }))
}

/// Trains `model` in place. Deterministic given `config.seed`.
pub fn train(
    model: &mut Seq2SeqModel,
    train_set: &ParallelCorpus,
    valid_set: &ParallelCorpus,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    if valid_set.is_empty() {
        return Err(Error::contract("validation corpus is empty"));
    }
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
    let mut opt = AdamState::new(&model.params, config.adam);
    let clock = Instant::now();
    let seconds = |c: &Instant| {
        if config.record_timing {
            c.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };

    let mut log = TrainLog::default();
    let before = evaluate(model, train_set, config.batch_size)?;
    let valid = evaluate(model, valid_set, config.batch_size)?;
    log.records.push(EpochRecord {
        epoch: 0,
        train_loss: before.loss,
        valid_loss: valid.loss,
        valid_acc: valid.accuracy,
        seconds: seconds(&clock),
    });
    log::info!(
        "epoch 0 valid_loss {:.4} valid_acc {:.4}",
        valid.loss,
        valid.accuracy
    );
    let mut best = valid.loss;
    if reached(config, valid.accuracy) {
        return Ok(log);
    }

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut tokens = 0;
        for (b, batch) in batchify(train_set, config.batch_size, &mut data_rng)?
            .iter()
            .enumerate()
        {
            let step = train_step(model, &mut opt, batch, config.clip_norm, &mut dropout_rng)?
                .ok_or(Error::NonFiniteLoss { epoch, batch: b })?;
            loss_sum += step.loss * step.tokens as f64;
            tokens += step.tokens;
        }
        let valid = evaluate(model, valid_set, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / tokens as f64,
            valid_loss: valid.loss,
            valid_acc: valid.accuracy,
            seconds: seconds(&clock),
        };
        log::info!(
            "epoch {epoch} train_loss {:.4} valid_loss {:.4} valid_acc {:.4}",
            record.train_loss,
            record.valid_loss,
            record.valid_acc
        );
        log.records.push(record);
        if let Some(dir) = &config.checkpoint_dir {
            checkpoint::save(model, &dir.join(format!("epoch-{epoch}.ckpt")))?;
            if valid.loss < best {
                best = valid.loss;
                checkpoint::save(model, &dir.join("best.ckpt"))?;
            }
        }
        if reached(config, valid.accuracy) {
            break;
        }
    }
    Ok(log)
}

fn reached(config: &TrainConfig, accuracy: f64) -> bool {
    config.stop_at_accuracy.is_some_and(|t| accuracy >= t)
}
