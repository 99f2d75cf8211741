//! Teacher-forced training with Adadelta, bucketed batches and checkpoints.

pub mod batching;
pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use batching::{assemble, make_buckets, Batch, BatchPlan, BucketClasses};
pub use checkpoint::Checkpoint;
pub use loss::{sequence_loss, xent_loss};
pub use optim::{clip_gradients, global_norm, Adadelta, AdadeltaConfig, Grads};

use crate::config::RunConfig;
use crate::corpus::{Sample, Vocabulary};
use crate::decoder::{Decoded, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::feature_extractor::BN_AFTER;
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::numerics::{BnStats, Tape, Tensor};
use crate::params::ParamSet;

/// Optimization and scheduling settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm threshold.
    pub max_norm: f64,
    pub optimizer: AdadeltaConfig,
    pub buckets: BucketClasses,
    pub seed: u64,
    /// Decoding cap used for validation.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            max_norm: 5.0,
            optimizer: AdadeltaConfig::default(),
            buckets: BucketClasses::default(),
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.buckets.validate()?;
        let o = &self.optimizer;
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size and decode.max_len must be positive".into()));
        }
        if !(self.max_norm > 0.0) || !(0.0..1.0).contains(&o.rho) || !(o.eps > 0.0) || !(o.lr >= 0.0) {
            return Err(Error::Config("optimizer constants out of range".into()));
        }
        Ok(())
    }
}

/// Mixes a run seed with a counter into an independent stream seed.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cer: f64,
}

/// Greedy transcriptions of a sample set and their pooled error rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub hypotheses: Vec<String>,
    pub decoded: Vec<Decoded>,
}

/// Transcribes `samples` greedily, spreading the work over `threads`
/// workers. Output order follows `samples`.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], max_len: usize, threads: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty sample set".into()));
    }
    let threads = threads.clamp(1, samples.len());
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Decoded>>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|x| model.transcribe(&x.image, max_len)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut decoded = Vec::with_capacity(samples.len());
    for p in parts {
        decoded.extend(p?);
    }
    let hypotheses: Vec<String> = decoded.iter().map(|d| Vocabulary.decode(&d.tokens)).collect();
    let refs: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let report = EvalReport::new(&refs, &hypotheses)?;
    Ok(Evaluation { report, hypotheses, decoded })
}

/// Model, optimizer and progress counters of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub optimizer: Adadelta<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed updates.
    pub step: u64,
}

impl Trainer {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.train.seed)?;
        let optimizer = Adadelta::new(config.train.optimizer, &model.params);
        Ok(Self { config, model, optimizer, epoch: 0, step: 0 })
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, batch: &Batch<f32>) -> Result<StepStats> {
        let (inputs, labels, steps) = batch.trimmed();
        let tape = Tape::new();
        let bound = self.model.params.bind(&tape, true);
        let images = tape.constant(batch.images.clone());
        let dropout_seed = derive_seed(self.config.train.seed, self.step);
        let logits =
            self.model
                .teacher_forced(&tape, &bound, images, &batch.source_widths, &inputs, steps, Some(dropout_seed))?;
        let loss_var = sequence_loss(logits, &labels)?;
        let loss = loss_var.value().item() as f64;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {} on batch [{}]",
                self.step,
                batch.ids.join(", ")
            )));
        }
        let grads = tape.backward(loss_var)?;
        let mut grads = bound.gradients(&grads);
        let grad_norm = clip_gradients(&mut grads, self.config.train.max_norm)?;
        if !grad_norm.is_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient at step {} on batch [{}]",
                self.step,
                batch.ids.join(", ")
            )));
        }
        self.optimizer.update(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(StepStats { loss, grad_norm })
    }

    /// Batch schedule of the next epoch.
    pub fn epoch_plan(&self, train: &[Sample]) -> Result<Vec<BatchPlan>> {
        let t = &self.config.train;
        make_buckets(train, &t.buckets, t.batch_size, derive_seed(t.seed ^ 0x5EED, self.epoch as u64))
    }

    /// One pass over `train`; returns the mean batch loss.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<f64> {
        let plan = self.epoch_plan(train)?;
        if plan.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let mut total = 0.0;
        for p in &plan {
            let batch = assemble(p, train)?;
            total += self.train_step(&batch)?.loss;
        }
        self.epoch += 1;
        Ok(total / plan.len() as f64)
    }

    pub fn evaluate(&self, samples: &[Sample], threads: usize) -> Result<Evaluation> {
        evaluate(&self.model, samples, self.config.train.max_len, threads)
    }

    /// Snapshot of configuration, parameters, running statistics and
    /// optimizer state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = self.config.to_map();
        header.insert("state.epoch".into(), self.epoch.to_string());
        header.insert("state.step".into(), self.step.to_string());
        header.insert("vocab.size".into(), Vocabulary::SIZE.to_string());
        header.insert("vocab.chars".into(), Vocabulary.charset());
        let mut records: Vec<(String, Tensor<f32>)> =
            self.model.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (layer, s) in BN_AFTER.iter().zip(&self.model.bn) {
            records.push((format!("cnn.bn{layer}.running_mean"), Tensor::from_fn(vec![s.mean.len()], |i| s.mean[i])));
            records.push((format!("cnn.bn{layer}.running_var"), Tensor::from_fn(vec![s.var.len()], |i| s.var[i])));
        }
        for (k, v) in &self.optimizer.sq_grad {
            records.push((format!("opt/{k}/sq_grad"), v.clone()));
        }
        for (k, v) in &self.optimizer.sq_delta {
            records.push((format!("opt/{k}/sq_delta"), v.clone()));
        }
        Checkpoint { header, records }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::from_checkpoint_with(ck, None)
    }

    /// Restores a checkpoint into `config` instead of the configuration in
    /// its header; tensors that do not fit are reported by name.
    pub fn from_checkpoint_with(ck: &Checkpoint, config: Option<RunConfig>) -> Result<Self> {
        let mut header = ck.header.clone();
        let mut take = |k: &str| {
            header.remove(k).ok_or_else(|| Error::Format { what: "checkpoint", detail: format!("header lacks `{k}`") })
        };
        let bad = |k: &str| Error::Format { what: "checkpoint", detail: format!("invalid `{k}`") };
        let epoch = take("state.epoch")?.parse().map_err(|_| bad("state.epoch"))?;
        let step = take("state.step")?.parse().map_err(|_| bad("state.step"))?;
        if take("vocab.size")? != Vocabulary::SIZE.to_string() || take("vocab.chars")? != Vocabulary.charset() {
            return Err(Error::CheckpointMismatch { name: "vocabulary".into(), detail: "differs from the built-in set".into() });
        }
        let config = match config {
            Some(c) => {
                c.validate()?;
                c
            }
            None => RunConfig::from_map(&header)?,
        };

        let mut params = BTreeMap::new();
        let mut bn_records = BTreeMap::new();
        let mut sq_grad = BTreeMap::new();
        let mut sq_delta = BTreeMap::new();
        for (name, t) in &ck.records {
            if let Some(rest) = name.strip_prefix("opt/") {
                if let Some(p) = rest.strip_suffix("/sq_grad") {
                    sq_grad.insert(p.to_string(), t.clone());
                } else if let Some(p) = rest.strip_suffix("/sq_delta") {
                    sq_delta.insert(p.to_string(), t.clone());
                } else {
                    return Err(Error::CheckpointMismatch { name: name.clone(), detail: "unknown optimizer record".into() });
                }
            } else if name.ends_with(".running_mean") || name.ends_with(".running_var") {
                bn_records.insert(name.clone(), t.clone());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        let mut bn = Vec::new();
        for (layer, expected) in BN_AFTER.iter().zip(config.model.cnn.bn_stats::<f32>()) {
            let get = |kind: &str| {
                let name = format!("cnn.bn{layer}.running_{kind}");
                let t = bn_records.get(&name).ok_or_else(|| Error::CheckpointMismatch {
                    name: name.clone(),
                    detail: "missing".into(),
                })?;
                if t.len() != expected.mean.len() {
                    return Err(Error::CheckpointMismatch {
                        name,
                        detail: format!("{} channels, expected {}", t.len(), expected.mean.len()),
                    });
                }
                Ok(t.data().to_vec())
            };
            bn.push(BnStats { mean: get("mean")?, var: get("var")? });
        }
        let model = Model::from_parts(config.model.clone(), ParamSet::from_map(params), bn)?;
        for (what, state) in [("sq_grad", &sq_grad), ("sq_delta", &sq_delta)] {
            for (k, v) in model.params.iter() {
                match state.get(k) {
                    Some(s) if s.shape() == v.shape() => {}
                    _ => {
                        return Err(Error::CheckpointMismatch { name: format!("opt/{k}/{what}"), detail: "missing or misshapen".into() })
                    }
                }
            }
            if state.len() != model.params.len() {
                return Err(Error::CheckpointMismatch { name: format!("opt/*/{what}"), detail: "extra optimizer records".into() });
            }
        }
        let optimizer = Adadelta { config: config.train.optimizer, sq_grad, sq_delta };
        Ok(Self { config, model, optimizer, epoch, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-epoch metrics and the best validation epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best: Option<EpochMetrics>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ck"))
}

pub const BEST_CHECKPOINT: &str = "best.ck";

/// Runs `trainer.config.train.epochs` epochs. With `out_dir`, the initial
/// state and every epoch are checkpointed, and `best.ck` tracks the lowest
/// validation error. `on_epoch` sees each epoch's metrics as they arrive.
pub fn train(
    trainer: &mut Trainer,
    train_set: &[Sample],
    validation: &[Sample],
    out_dir: Option<&Path>,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainReport> {
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Data("training needs nonempty train and validation splits".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        trainer.save(&checkpoint_path(dir, trainer.epoch))?;
    }
    let mut report = TrainReport { metrics: Vec::new(), best: None };
    for _ in 0..trainer.config.train.epochs {
        let train_loss = trainer.run_epoch(train_set)?;
        let val_cer = trainer.evaluate(validation, threads)?.report.cer;
        let m = EpochMetrics { epoch: trainer.epoch, train_loss, val_cer };
        log::info!("epoch {}: train loss {train_loss:.4}, validation CER {val_cer:.4}", m.epoch);
        let improved = report.best.is_none_or(|b| val_cer < b.val_cer);
        if let Some(dir) = out_dir {
            let ck = trainer.to_checkpoint();
            ck.save(&checkpoint_path(dir, m.epoch))?;
            if improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        if improved {
            report.best = Some(m);
        }
        report.metrics.push(m);
        on_epoch(&m)?;
    }
    Ok(report)
}
