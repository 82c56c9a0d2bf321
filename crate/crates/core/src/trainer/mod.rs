//! Fine-tuning loop, evaluation and checkpointing.

pub mod checkpoint;
pub mod corpus;
pub mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::Serialize;
use serde_json::json;

pub use checkpoint::{BestMetric, Checkpoint, CheckpointMeta};
pub use corpus::{prepare, Corpus, CorpusPaths, Example, PrepareSummary};
pub use optim::Adam;

use crate::config::RunConfig;
use crate::data::{epoch_batches, Split};
use crate::decoder::TokenSequence;
use crate::error::{Error, Result};
use crate::metrics::ScoreReport;
use crate::model::Model;
use crate::nn::ops::Ctx;
use crate::nn::params::name_rng;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const RESULTS_FILE: &str = "results.jsonl";

/// Training state: model, optimizer and progress counters.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
    pub global_step: u64,
    pub best: Option<BestMetric>,
    vocabulary: Vec<String>,
}

/// Optimizes one batch and returns its loss. The loss is checked before the
/// update, so a non-finite value leaves every parameter untouched.
pub fn train_step(
    model: &Model,
    optimizer: &mut Adam,
    images: &candle_core::Tensor,
    sequences: &[TokenSequence],
    ctx: &Ctx,
    step: u64,
    batch_ids: &[String],
) -> Result<f64> {
    let loss = model.loss(images, sequences, ctx)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            batch_ids: batch_ids.to_vec(),
        });
    }
    let grads = loss.backward()?;
    optimizer.step(&grads)?;
    Ok(value)
}

impl Trainer {
    /// Fresh model and optimizer for `cfg` over `corpus`'s vocabulary.
    pub fn new(cfg: &RunConfig, corpus: &Corpus, dtype: DType) -> Result<Self> {
        let t = &cfg.train;
        let model = Model::assemble(
            &cfg.model(),
            t.ablation,
            corpus.vocab.len(),
            cfg.dataset.max_length,
            t.seed,
            dtype,
            None,
        )?;
        let optimizer = Adam::new(model.store().trainable(), t.learning_rate, t.weight_decay, Some(t.grad_clip))?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            optimizer,
            epoch: 0,
            global_step: 0,
            best: None,
            vocabulary: corpus.vocab.content_tokens().to_vec(),
        })
    }

    /// Continues from a checkpoint's parameters, optimizer state and counters.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let optimizer = ckpt.optimizer(&model)?;
        Ok(Self {
            cfg: ckpt.meta.config.clone(),
            model,
            optimizer,
            epoch: ckpt.meta.epoch,
            global_step: ckpt.meta.global_step,
            best: ckpt.meta.best.clone(),
            vocabulary: ckpt.meta.vocabulary.clone(),
        })
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format: checkpoint::FORMAT_VERSION,
            config: self.cfg.clone(),
            vocabulary: self.vocabulary.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            optimizer_step: self.optimizer.step_count(),
            best: self.best.clone(),
        }
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.model, &self.optimizer, &self.meta())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, &self.optimizer, &self.meta())
    }

    /// Dropout context for the next step; depends only on `(seed, step)`.
    fn step_ctx(&self) -> Ctx {
        let rng = name_rng(self.cfg.train.seed, &format!("dropout/{}", self.global_step));
        Ctx::train(rng, self.cfg.train.dropout)
    }

    /// One optimizer step on the given corpus examples.
    pub fn step(&mut self, corpus: &Corpus, indices: &[usize]) -> Result<f64> {
        let (images, tokens) = corpus.batch(indices)?;
        let ids: Vec<String> = indices.iter().map(|&i| corpus.examples[i].id.clone()).collect();
        let ctx = self.step_ctx();
        let loss = train_step(&self.model, &mut self.optimizer, &images, &tokens, &ctx, self.global_step, &ids)?;
        self.global_step += 1;
        Ok(loss)
    }

    /// One pass over the training split in the seeded order for the current
    /// epoch. Returns the mean step loss.
    pub fn train_epoch(&mut self, corpus: &Corpus, log: &mut dyn FnMut(&StepRecord)) -> Result<f64> {
        let train = corpus.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let batches = epoch_batches(train.len(), self.cfg.train.batch_size, self.cfg.train.seed, self.epoch as u64, true)?;
        let mut total = 0.0;
        for batch in &batches {
            let indices: Vec<usize> = batch.iter().map(|&i| train[i]).collect();
            let loss = self.step(corpus, &indices)?;
            total += loss;
            log(&StepRecord {
                epoch: self.epoch + 1,
                step: self.global_step,
                loss,
                lr: self.cfg.train.learning_rate,
            });
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ScoreReport,
    /// `(id, generated text)` in corpus order.
    pub predictions: Vec<(String, String)>,
    pub loss: f64,
}

/// Mean evaluation-mode loss over `indices` (per-sequence average).
pub fn mean_loss(model: &Model, corpus: &Corpus, indices: &[usize], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, tokens) = corpus.batch(chunk)?;
        let loss = model.loss(&images, &tokens, &Ctx::eval())?;
        total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
    }
    Ok(if indices.is_empty() { 0.0 } else { total / indices.len() as f64 })
}

/// Greedy reports for `indices`, decoded with markers stripped.
pub fn generate_texts(model: &Model, corpus: &Corpus, indices: &[usize], batch_size: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, _) = corpus.batch(chunk)?;
        for r in model.generate(&images)? {
            out.push(corpus.vocab.decode(&r.tokens.ids));
        }
    }
    Ok(out)
}

/// Greedy generation and the metric suite over one split.
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split, batch_size: usize) -> Result<Evaluation> {
    let indices = corpus.indices(split);
    if indices.is_empty() {
        return Err(Error::Data(format!("split {split} has no examples")));
    }
    let texts = generate_texts(model, corpus, &indices, batch_size)?;
    let ids: Vec<&str> = indices.iter().map(|&i| corpus.examples[i].id.as_str()).collect();
    let refs: Vec<&str> = indices.iter().map(|&i| corpus.examples[i].reference.as_str()).collect();
    let report = ScoreReport::compute(&ids, &texts.iter().map(String::as_str).collect::<Vec<_>>(), &refs)?;
    let loss = mean_loss(model, corpus, &indices, batch_size)?;
    Ok(Evaluation {
        report,
        predictions: ids.iter().map(|s| s.to_string()).zip(texts).collect(),
        loss,
    })
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub best: Option<BestMetric>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

/// Line-delimited JSON training log.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::Data(format!("train log: {e}")))
    }
}

/// Runs `trainer` until `until_epoch` completed epochs, validating after
/// each epoch and writing the best and last checkpoints into
/// `<run_dir>/checkpoints`.
pub fn fit(trainer: &mut Trainer, corpus: &Corpus, until_epoch: usize, log: &mut TrainLog) -> Result<FitSummary> {
    let cfg = trainer.cfg.clone();
    let dir = cfg.run_dir().join("checkpoints");
    let best_path = dir.join(BEST_CHECKPOINT);
    let last_path = dir.join(LAST_CHECKPOINT);
    let store = trainer.model.store();
    log.write(&json!({
        "event": "start",
        "run_name": cfg.run_name,
        "dataset": cfg.dataset.name,
        "ablation": cfg.train.ablation,
        "learning_rate": cfg.train.learning_rate,
        "weight_decay": cfg.train.weight_decay,
        "dropout": cfg.train.dropout,
        "batch_size": cfg.train.batch_size,
        "epochs": until_epoch,
        "seed": cfg.train.seed,
        "start_epoch": trainer.epoch,
        "vocab_size": corpus.vocab.len(),
        "trainable_parameters": store.trainable_count(),
        "total_parameters": store.count(""),
    }))?;
    let val = corpus.indices(Split::Val);
    let batch = cfg.train.batch_size;
    let mut final_loss = f64::NAN;
    let start = trainer.epoch;
    while trainer.epoch < until_epoch {
        let mut step_err = Ok(());
        let train_loss = trainer.train_epoch(corpus, &mut |r| {
            if step_err.is_ok() {
                step_err = log.write(r);
            }
        })?;
        step_err?;
        final_loss = train_loss;
        let mut record = json!({ "event": "epoch", "epoch": trainer.epoch, "train_loss": train_loss });
        if val.is_empty() {
            trainer.save(&best_path)?;
        } else {
            let eval = evaluate(&trainer.model, corpus, Split::Val, batch)?;
            let candidate = BestMetric {
                epoch: trainer.epoch,
                val_bleu_4: eval.report.bleu[3],
                val_loss: eval.loss,
            };
            let improved = candidate.improves_on(trainer.best.as_ref());
            record["val_loss"] = json!(eval.loss);
            record["val_bleu_4"] = json!(eval.report.bleu[3]);
            record["best"] = json!(improved);
            if improved {
                trainer.best = Some(candidate);
                trainer.save(&best_path)?;
            }
        }
        trainer.save(&last_path)?;
        log.write(&record)?;
    }
    Ok(FitSummary {
        epochs_run: trainer.epoch - start,
        final_loss,
        best: trainer.best.clone(),
        best_path,
        last_path,
    })
}

/// Appends one evaluation record to `<run_dir>/results.jsonl`.
pub fn append_results(run_dir: &Path, label: &str, split: Split, report: &ScoreReport) -> Result<()> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let path = run_dir.join(RESULTS_FILE);
    let mut log = TrainLog::create(&path, true)?;
    log.write(&json!({ "checkpoint": label, "split": split, "scores": report.rows_json() }))
}
