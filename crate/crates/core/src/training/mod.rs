//! Masked-token training: schedule-driven masking, condition dropout,
//! smoothed cross-entropy on masked positions, resumable trainer and
//! checkpoints.

mod checkpoint;
mod schedule;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use schedule::{masked_count, sample_training_mask, MaskSchedule};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, AdamWState, Scalar, Tape, Tensor, Var, ADAMW_EPS};
use crate::transformer::{Input, Transformer, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub label_smoothing: f32,
    pub cond_drop_prob: f32,
    pub schedule: MaskSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 1e-5,
            label_smoothing: 0.1,
            cond_drop_prob: 0.1,
            schedule: MaskSchedule::Arccos,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!("cond_drop_prob {} outside [0,1]", self.cond_drop_prob)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0,1)", self.label_smoothing)));
        }
        self.adamw().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: ADAMW_EPS,
        }
    }
}

/// A clean token grid with its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// What one optimisation step saw.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f32,
    /// Label fed to the model per sample; `None` where the condition was
    /// dropped.
    pub labels_used: Vec<Option<usize>>,
    pub masked_positions: usize,
}

/// Mean smoothed cross-entropy over the rows of `logits` flagged in `mask`.
pub fn masked_token_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    label_smoothing: f32,
) -> Result<Var> {
    if targets.len() != mask.len() || tape.shape(logits).first() != Some(&mask.len()) {
        return Err(Error::Dimension {
            op: "masked_token_loss",
            left: tape.shape(logits).to_vec(),
            right: vec![targets.len(), mask.len()],
        });
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let picked: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    let sel = tape.select_rows(logits, &rows)?;
    tape.cross_entropy(sel, &picked, label_smoothing)
}

/// Draws masks and condition drops for `batch`, runs forward/backward with
/// dropout and applies one AdamW step.
pub fn training_step(
    model: &mut Transformer,
    opt: &mut AdamW,
    batch: &[Example],
    config: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Contract("training step on an empty batch".into()));
    }
    let mc = *model.config();
    let n = mc.grid_len();
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * n);
    let mut mask = Vec::with_capacity(batch.len() * n);
    let mut labels_used = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.tokens.len() != n {
            return Err(Error::Dimension {
                op: "training_step",
                left: vec![ex.tokens.len()],
                right: vec![n],
            });
        }
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= mc.codebook_size) {
            return Err(Error::InvalidToken(format!("training grid holds token {t} (K = {})", mc.codebook_size)));
        }
        let (m, _) = sample_training_mask(n, config.schedule, rng)?;
        let dropped = rng.random::<f64>() < config.cond_drop_prob as f64;
        let label = (!dropped).then_some(ex.label);
        let masked: Vec<usize> = ex
            .tokens
            .iter()
            .zip(&m)
            .map(|(&t, &mm)| if mm { mc.mask_id() } else { t })
            .collect();
        inputs.push(masked);
        targets.extend_from_slice(&ex.tokens);
        mask.extend_from_slice(&m);
        labels_used.push(label);
    }
    let batch_inputs: Vec<Input<'_>> = inputs
        .iter()
        .zip(&labels_used)
        .map(|(t, &label)| Input { tokens: t, label })
        .collect();

    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let logits = model.forward_on(&mut tape, &p, &batch_inputs, Some(rng))?;
    let loss = masked_token_loss(&mut tape, logits, &targets, &mask, config.label_smoothing)?;
    tape.backward(loss)?;
    let loss_value = tape.scalar(loss);
    let grads = tape.into_param_grads();

    let params = model.params_mut();
    params.zero_grad();
    params.add_grads(grads);
    opt.step(params)?;
    Ok(StepReport {
        loss: loss_value,
        labels_used,
        masked_positions: mask.iter().filter(|&&m| m).count(),
    })
}

/// SplitMix64 over (seed, stream, index): independent, reproducible RNG
/// seeds for shuffles and steps.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// Owns the model and optimizer. Every step's batch and randomness are a
/// pure function of (seed, global step), so a run restored from a
/// checkpoint continues exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Transformer,
    pub opt: AdamW,
    pub config: TrainConfig,
    pub global_step: u64,
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub coverage_tokens: f64,
}

pub const CURVE_HEADER: &str = "epoch,loss,kl,coverage_tokens";

pub fn curve_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.epoch, r.loss, r.kl, r.coverage_tokens);
    }
    s
}

impl Trainer {
    pub fn new(model: Transformer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(config.adamw(), model.params())?;
        Ok(Trainer {
            model,
            opt,
            config,
            global_step: 0,
        })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.config.batch_size) as u64
    }

    /// Dataset indices of the batch at `step`.
    pub fn batch_indices(&self, dataset_len: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(dataset_len);
        let epoch = step / spe;
        let within = (step % spe) as usize;
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, SHUFFLE_STREAM, epoch)));
        let start = within * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(dataset_len)].to_vec()
    }

    pub fn step(&mut self, data: &[Example]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::Contract("empty dataset".into()));
        }
        let batch: Vec<Example> = self
            .batch_indices(data.len(), self.global_step)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STEP_STREAM, self.global_step));
        let report = training_step(&mut self.model, &mut self.opt, &batch, &self.config, &mut rng)?;
        self.global_step += 1;
        Ok(report)
    }

    /// Completed epochs (partial epochs round down).
    pub fn epoch(&self, dataset_len: usize) -> u64 {
        self.global_step / self.steps_per_epoch(dataset_len).max(1)
    }

    /// Steps until the end of the current epoch; returns the mean loss.
    pub fn run_epoch(&mut self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Contract("empty dataset".into()));
        }
        let spe = self.steps_per_epoch(data.len());
        let end = (self.global_step / spe + 1) * spe;
        let mut total = 0.0;
        let mut count = 0usize;
        while self.global_step < end {
            total += self.step(data)?.loss as f64;
            count += 1;
        }
        Ok(total / count as f64)
    }

    /// Runs epochs up to `config.epochs`, calling `eval` after each one for
    /// the `(kl, coverage_tokens)` columns and `on_epoch` with every record.
    pub fn train<E, C>(&mut self, data: &[Example], mut eval: E, mut on_epoch: C) -> Result<Vec<EpochRecord>>
    where
        E: FnMut(&Transformer, usize) -> Result<(f64, f64)>,
        C: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        let mut records = Vec::new();
        while (self.epoch(data.len()) as usize) < self.config.epochs {
            let loss = self.run_epoch(data)?;
            let epoch = self.epoch(data.len()) as usize;
            let (kl, coverage_tokens) = eval(&self.model, epoch)?;
            let rec = EpochRecord {
                epoch,
                loss,
                kl,
                coverage_tokens,
            };
            on_epoch(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    /// Model tensors, optimizer moments and step counters. `extra` tables
    /// (e.g. the rest of a run config) are kept in the config text.
    pub fn to_checkpoint(&self, extra: &toml::Table) -> Result<Checkpoint> {
        let mut doc = extra.clone();
        doc.insert("transformer".into(), to_table(self.model.config())?);
        doc.insert("train".into(), to_table(&self.config)?);
        let mut state = toml::Table::new();
        state.insert("global_step".into(), toml::Value::Integer(self.global_step as i64));
        state.insert("adam_steps".into(), toml::Value::Integer(self.opt.state.step_count as i64));
        doc.insert("state".into(), toml::Value::Table(state));
        let config = toml::to_string(&doc).map_err(|e| Error::Format(e.to_string()))?;

        let mut tensors = Vec::new();
        for (id, name, t) in self.model.params().iter() {
            tensors.push((format!("model.{name}"), plain(t)));
            let shape = t.shape.clone();
            let m = &self.opt.state.first_moment[id.0];
            let v = &self.opt.state.second_moment[id.0];
            tensors.push((format!("opt.m.{name}"), Tensor::new(shape.clone(), m.clone())?));
            tensors.push((format!("opt.v.{name}"), Tensor::new(shape, v.clone())?));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let doc: toml::Table = ckpt.config.parse().map_err(|e| Error::Format(format!("config text: {e}")))?;
        let model_cfg: TransformerConfig = from_table(&doc, "transformer")?;
        let config: TrainConfig = from_table(&doc, "train")?;
        let state = doc
            .get("state")
            .and_then(|v| v.as_table())
            .ok_or_else(|| Error::Format("checkpoint has no [state] table".into()))?;
        let int = |k: &str| {
            state
                .get(k)
                .and_then(|v| v.as_integer())
                .filter(|&v| v >= 0)
                .ok_or_else(|| Error::Format(format!("[state] lacks `{k}`")))
        };
        let model = Transformer::from_tensors(model_cfg, &ckpt.with_prefix("model."))?;
        let mut trainer = Trainer::new(model, config)?;
        let mut st = AdamWState::zeros_like(trainer.model.params());
        for (id, name, t) in trainer.model.params().iter() {
            for (prefix, dst) in [("opt.m.", &mut st.first_moment[id.0]), ("opt.v.", &mut st.second_moment[id.0])] {
                let key = format!("{prefix}{name}");
                let src = ckpt.get(&key).ok_or_else(|| Error::Format(format!("missing tensor `{key}`")))?;
                if src.shape != t.shape {
                    return Err(Error::Dimension {
                        op: "from_checkpoint",
                        left: src.shape.clone(),
                        right: t.shape.clone(),
                    });
                }
                dst.copy_from_slice(&src.data);
            }
        }
        st.step_count = int("adam_steps")? as u64;
        trainer.opt.state = st;
        trainer.global_step = int("global_step")? as u64;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path, extra: &toml::Table) -> Result<()> {
        self.to_checkpoint(extra)?.save(path)
    }
}

fn plain(t: &Tensor) -> Tensor {
    Tensor::new(t.shape.clone(), t.data.clone()).expect("consistent tensor")
}

fn to_table<S: Serialize>(v: &S) -> Result<toml::Value> {
    toml::Value::try_from(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_table<D: for<'de> Deserialize<'de>>(doc: &toml::Table, key: &str) -> Result<D> {
    let v = doc
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Format(format!("checkpoint config has no [{key}] table")))?;
    v.try_into().map_err(|e: toml::de::Error| Error::Format(format!("[{key}]: {e}")))
}
