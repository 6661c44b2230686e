//! Prefix training on a frozen encoder, multi-task and single-task full
//! fine-tuning, and classifier heads on fixed representations.

use std::path::Path;

use prefixrep_tensor::{adam_step, AdamConfig, AdamState, DType, Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, LayerPrefixSlots, SlotVars, TokenBatch};
use crate::error::{Error, Result};
use crate::head::{argmax_rows, ClassifierHead, HeadVariant};
use crate::prefix::{TaskPrefix, DEFAULT_PREFIX_INIT_STD, DEFAULT_PREFIX_LENGTH};
use crate::reps::FixedReps;
use crate::taskgen::LabeledDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Optimization settings. Exactly one of `epochs` and `max_steps` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Interval in steps between loss-curve records.
    pub eval_every: usize,
}

impl TrainConfig {
    /// Prefix length 5 is set separately; batch 16, 40 epochs, Adam lr 5e-3, weight decay 1e-5.
    pub fn prefix_default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: Some(40),
            max_steps: None,
            learning_rate: 5e-3,
            weight_decay: 1e-5,
            seed: 0,
            precision: Precision::F32,
            eval_every: 10,
        }
    }

    /// Batch 32, 80 epochs, Adam lr 1e-4, weight decay 1e-5.
    pub fn head_default() -> Self {
        TrainConfig { batch_size: 32, epochs: Some(80), learning_rate: 1e-4, ..Self::prefix_default() }
    }

    /// Batch 16, 400000 steps, Adam lr 1e-5, weight decay 1e-5, one task per batch.
    pub fn multitask_default() -> Self {
        TrainConfig { batch_size: 16, epochs: None, max_steps: Some(400_000), learning_rate: 1e-5, ..Self::prefix_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs.is_some() == self.max_steps.is_some() {
            return Err(Error::Config("exactly one of epochs and max_steps must be set".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    /// Total optimizer steps for a dataset of `n` examples.
    pub fn total_steps(&self, n: usize) -> usize {
        match (self.epochs, self.max_steps) {
            (_, Some(s)) => s,
            (Some(e), None) => e * n.div_ceil(self.batch_size),
            (None, None) => 0,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.weight_decay)
    }
}

/// One line of a loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn write_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in curve {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Shuffled mini-batches that reshuffle at every epoch boundary.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut b = Batcher { order: (0..n).collect(), pos: 0, batch_size, rng: ChaCha8Rng::seed_from_u64(seed) };
        b.order.shuffle(&mut b.rng);
        b
    }

    /// Next batch. The last batch of an epoch may be shorter.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Picks one task index uniformly at random for each batch.
pub struct UniformTaskSampler {
    tasks: usize,
    rng: ChaCha8Rng,
}

impl UniformTaskSampler {
    pub fn new(tasks: usize, seed: u64) -> Self {
        UniformTaskSampler { tasks, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_task(&mut self) -> usize {
        self.rng.random_range(0..self.tasks)
    }
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0xd50f_a11e)
}

fn check_loss(loss: f64, context: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { context: context.to_string(), step, loss })
    }
}

fn batch_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

fn check_labels(data: &LabeledDataset, classes: usize) -> Result<()> {
    if data.class_count > classes {
        return Err(Error::Precondition(format!(
            "dataset '{}' has {} classes, head has {classes}",
            data.name, data.class_count
        )));
    }
    Ok(())
}

/// Prefix shape and initialization for [`train_prefix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSpec {
    pub length: usize,
    pub init_std: f64,
    pub init_seed: u64,
    /// Seed of the throwaway classification head trained alongside the prefix.
    pub head_seed: u64,
    /// Learning rate of the throwaway head; `None` uses the prefix learning rate.
    #[serde(default)]
    pub head_learning_rate: Option<f64>,
}

impl Default for PrefixSpec {
    fn default() -> Self {
        PrefixSpec { length: DEFAULT_PREFIX_LENGTH, init_std: DEFAULT_PREFIX_INIT_STD, init_seed: 0, head_seed: 0, head_learning_rate: None }
    }
}

pub struct PrefixTrainOutput<T> {
    pub prefix: TaskPrefix<T>,
    pub head: ClassifierHead<T>,
    pub curve: Vec<LossRecord>,
    pub steps: usize,
}

/// Train one task's prefix and a throwaway `mlp_on_cls` head against a frozen encoder.
///
/// Only this task's prefix is attached. Fails if the encoder is not frozen or
/// if its parameters change.
pub fn train_prefix<T: Scalar>(
    model: &EncoderModel<T>,
    task: &LabeledDataset,
    cfg: &TrainConfig,
    spec: &PrefixSpec,
) -> Result<PrefixTrainOutput<T>> {
    cfg.validate()?;
    if !model.frozen {
        return Err(Error::Precondition("prefix training requires a frozen encoder".into()));
    }
    let before = model.checksum();
    let mut prefix = TaskPrefix::init(&task.name, model, spec.length, spec.init_std, spec.init_seed);
    let mut head = ClassifierHead::init(HeadVariant::MlpOnCls, model.config.d_model, task.class_count.max(2), spec.head_seed);
    check_labels(task, head.classes())?;

    let total = cfg.total_steps(task.len());
    let mut batcher = Batcher::new(task.len(), cfg.batch_size, cfg.seed);
    let mut drop = dropout_rng(cfg.seed);
    let adam = cfg.adam();
    let head_adam = AdamConfig::new(spec.head_learning_rate.unwrap_or(cfg.learning_rate), cfg.weight_decay);
    let mut prefix_state = AdamState::for_params(&prefix.tensors_mut().iter().map(|t| &**t).collect::<Vec<_>>());
    let mut head_state = AdamState::for_params(&head.params_mut().iter().map(|t| &**t).collect::<Vec<_>>());
    let mut curve = Vec::new();
    let mut last_loss = None;

    for step in 1..=total {
        let idx = batcher.next_batch();
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| task.examples[i].as_slice()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| task.labels[i]).collect();
        let batch = TokenBatch::new(&seqs, &model.config)?;

        let mut g = Graph::new();
        let mv = model.register(&mut g, false);
        let sv: Vec<Option<SlotVars>> = prefix.layers.iter().map(|l| l.register(&mut g, true)).collect();
        let sv = if sv.iter().all(Option::is_none) { Vec::new() } else { sv };
        let hv = head.register(&mut g, true);
        let x = model.forward(&mut g, &mv, &batch, &sv, None, Some(&mut drop))?;
        let logits = head.forward(&mut g, &hv, x, None)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let loss_value = g.value(loss).item().as_f64();
        check_loss(loss_value, &task.name, step)?;
        g.backward(loss)?;

        let slot_grads: Vec<Option<&[T]>> =
            sv.iter().flatten().flat_map(|s| [g.grad_data(s.keys), g.grad_data(s.values)]).collect();
        adam_step(&mut prefix.tensors_mut(), &slot_grads, &mut prefix_state, &adam)?;
        let head_grads: Vec<Option<&[T]>> = hv.flat().iter().map(|&v| g.grad_data(v)).collect();
        adam_step(&mut head.params_mut(), &head_grads, &mut head_state, &head_adam)?;

        last_loss = Some(loss_value);
        if step % cfg.eval_every == 0 || step == total {
            curve.push(LossRecord { step, task: None, loss: loss_value, accuracy: batch_accuracy(g.value(logits), &labels) });
        }
    }

    if model.checksum() != before {
        return Err(Error::FrozenBaseMutated(format!("prefix training for '{}'", task.name)));
    }
    prefix.meta.steps = total;
    prefix.meta.final_loss = last_loss;
    prefix.meta.train_config = serde_json::to_value(cfg).expect("config serializes");
    Ok(PrefixTrainOutput { prefix, head, curve, steps: total })
}

pub struct FullTrainOutput<T> {
    pub model: EncoderModel<T>,
    pub heads: Vec<ClassifierHead<T>>,
    pub curve: Vec<LossRecord>,
    pub steps_per_task: Vec<usize>,
}

/// Fine-tune every encoder parameter on several tasks at once. Each batch
/// comes from one task drawn uniformly at random; each task has its own head.
///
/// The returned encoder is marked frozen.
pub fn train_multitask<T: Scalar>(
    model: &EncoderModel<T>,
    tasks: &[&LabeledDataset],
    cfg: &TrainConfig,
    head_variant: HeadVariant,
    head_seed: u64,
) -> Result<FullTrainOutput<T>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Precondition("multi-task training needs at least one task".into()));
    }
    let mut model = model.clone();
    model.frozen = false;
    let d = model.config.d_model;
    let mut heads: Vec<ClassifierHead<T>> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| ClassifierHead::init(head_variant, d, t.class_count.max(2), head_seed.wrapping_add(i as u64)))
        .collect();
    for (t, h) in tasks.iter().zip(&heads) {
        check_labels(t, h.classes())?;
    }
    let total = match (cfg.epochs, cfg.max_steps) {
        (_, Some(s)) => s,
        (Some(e), None) => e * tasks.iter().map(|t| t.len().div_ceil(cfg.batch_size)).sum::<usize>(),
        (None, None) => 0,
    };
    let mut batchers: Vec<Batcher> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| Batcher::new(t.len(), cfg.batch_size, cfg.seed.wrapping_add(1 + i as u64)))
        .collect();
    let mut sampler = UniformTaskSampler::new(tasks.len(), cfg.seed);
    let mut drop = dropout_rng(cfg.seed);
    let adam = cfg.adam();
    let mut enc_state = AdamState::for_params(&model.params_mut().iter().map(|t| &**t).collect::<Vec<_>>());
    let mut head_states: Vec<AdamState<T>> =
        heads.iter_mut().map(|h| AdamState::for_params(&h.params_mut().iter().map(|t| &**t).collect::<Vec<_>>())).collect();
    let mut steps_per_task = vec![0; tasks.len()];
    let mut curve = Vec::new();

    for step in 1..=total {
        let t = sampler.next_task();
        steps_per_task[t] += 1;
        let task = tasks[t];
        let idx = batchers[t].next_batch();
        let seqs: Vec<&[u32]> = idx.iter().map(|&i| task.examples[i].as_slice()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| task.labels[i]).collect();
        let batch = TokenBatch::new(&seqs, &model.config)?;
        let mask = batch.padding_mask::<T>();

        let mut g = Graph::new();
        let mv = model.register(&mut g, true);
        let hv = heads[t].register(&mut g, true);
        let x = model.forward(&mut g, &mv, &batch, &[], None, Some(&mut drop))?;
        let logits = heads[t].forward(&mut g, &hv, x, mask.as_ref())?;
        let loss = g.cross_entropy(logits, &labels)?;
        let loss_value = g.value(loss).item().as_f64();
        check_loss(loss_value, &task.name, step)?;
        g.backward(loss)?;

        let enc_grads: Vec<Option<&[T]>> = mv.flat().iter().map(|&v| g.grad_data(v)).collect();
        adam_step(&mut model.params_mut(), &enc_grads, &mut enc_state, &adam)?;
        let head_grads: Vec<Option<&[T]>> = hv.flat().iter().map(|&v| g.grad_data(v)).collect();
        adam_step(&mut heads[t].params_mut(), &head_grads, &mut head_states[t], &adam)?;

        if step % cfg.eval_every == 0 || step == total {
            curve.push(LossRecord {
                step,
                task: Some(task.name.clone()),
                loss: loss_value,
                accuracy: batch_accuracy(g.value(logits), &labels),
            });
        }
    }
    model.frozen = true;
    Ok(FullTrainOutput { model, heads, curve, steps_per_task })
}

/// Fine-tune the whole encoder together with an `attention_plus_mlp` head on one task.
pub fn finetune<T: Scalar>(
    model: &EncoderModel<T>,
    task: &LabeledDataset,
    cfg: &TrainConfig,
    head_seed: u64,
) -> Result<(EncoderModel<T>, ClassifierHead<T>, Vec<LossRecord>)> {
    let mut out = train_multitask(model, &[task], cfg, HeadVariant::AttentionPlusMlp, head_seed)?;
    Ok((out.model, out.heads.remove(0), out.curve))
}

/// Train a head on precomputed representations. The representations are only read.
pub fn train_target_head<T: Scalar>(
    reps: &FixedReps<T>,
    cfg: &TrainConfig,
    variant: HeadVariant,
    head_seed: u64,
) -> Result<(ClassifierHead<T>, Vec<LossRecord>)> {
    cfg.validate()?;
    if reps.is_empty() {
        return Err(Error::Precondition("no representations to train on".into()));
    }
    let mut head = ClassifierHead::init(variant, reps.d_model, reps.class_count.max(2), head_seed);
    if let Some(&l) = reps.labels.iter().find(|&&l| l >= head.classes()) {
        return Err(Error::Precondition(format!("label {l} exceeds class count {}", head.classes())));
    }
    let total = cfg.total_steps(reps.len());
    let mut batcher = Batcher::new(reps.len(), cfg.batch_size, cfg.seed);
    let adam = cfg.adam();
    let mut state = AdamState::for_params(&head.params_mut().iter().map(|t| &**t).collect::<Vec<_>>());
    let mut curve = Vec::new();
    for step in 1..=total {
        let idx = batcher.next_batch();
        let (x, mask, labels) = reps.batch(&idx);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let hv = head.register(&mut g, true);
        let logits = head.forward(&mut g, &hv, xv, mask.as_ref())?;
        let loss = g.cross_entropy(logits, &labels)?;
        let loss_value = g.value(loss).item().as_f64();
        check_loss(loss_value, &reps.name, step)?;
        g.backward(loss)?;
        let grads: Vec<Option<&[T]>> = hv.flat().iter().map(|&v| g.grad_data(v)).collect();
        adam_step(&mut head.params_mut(), &grads, &mut state, &adam)?;
        if step % cfg.eval_every == 0 || step == total {
            curve.push(LossRecord { step, task: None, loss: loss_value, accuracy: batch_accuracy(g.value(logits), &labels) });
        }
    }
    Ok((head, curve))
}

/// Predicted class per example.
pub fn predict<T: Scalar>(head: &ClassifierHead<T>, reps: &FixedReps<T>, batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(reps.len());
    let idx: Vec<usize> = (0..reps.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, mask, _) = reps.batch(chunk);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let hv = head.register(&mut g, false);
        let logits = head.forward(&mut g, &hv, xv, mask.as_ref())?;
        out.extend(argmax_rows(g.value(logits)));
    }
    Ok(out)
}

/// Fraction of examples whose arg-max prediction equals the label.
pub fn evaluate<T: Scalar>(head: &ClassifierHead<T>, reps: &FixedReps<T>) -> Result<f64> {
    if reps.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(head, reps, 256)?;
    Ok(pred.iter().zip(&reps.labels).filter(|(p, l)| p == l).count() as f64 / reps.len() as f64)
}

/// Accuracy of an encoder plus head evaluated end to end on raw examples.
pub fn evaluate_model<T: Scalar>(
    model: &EncoderModel<T>,
    head: &ClassifierHead<T>,
    slots: &[LayerPrefixSlots<T>],
    data: &LabeledDataset,
) -> Result<f64> {
    let reps = crate::reps::extract_reps(model, slots, None, data, 128)?;
    evaluate(head, &reps)
}
