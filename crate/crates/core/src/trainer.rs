//! Adam and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BatchSource;
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::Model;
use crate::nn::{cross_entropy, one_hot, softmax, Mode};
use crate::tensor::{no_grad, Element, GradientMap, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState<T: Element = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPSILON,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.m.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update. Every parameter must be named and have a
/// gradient in `grads`; nothing is modified otherwise.
pub fn adam_step<T: Element>(
    state: &mut AdamState<T>,
    params: Vec<&mut Tensor<T>>,
    grads: &GradientMap<T>,
) -> Result<()> {
    let mut pairs = Vec::with_capacity(params.len());
    for p in params {
        let name = p
            .name()
            .ok_or_else(|| Error::InvalidArgument("adam needs named parameters".into()))?
            .to_string();
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.numel() != p.numel() {
            return Err(Error::shape("adam gradient", p.shape(), g.shape()));
        }
        pairs.push((p, name, g));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of_f64(state.beta1), T::of_f64(state.beta2));
    let (c1, c2) = (T::of_f64(1.0 - state.beta1), T::of_f64(1.0 - state.beta2));
    let correct1 = T::of_f64(1.0 - state.beta1.powi(t));
    let correct2 = T::of_f64(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of_f64(state.lr), T::of_f64(state.eps));
    for (p, name, g) in pairs {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); p.numel()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); p.numel()]);
        let mut data = p.to_vec();
        for (((w, &gi), mi), vi) in data
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
            let m_hat = *mi / correct1;
            let v_hat = *vi / correct2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
        *p = Tensor::parameter(name, p.shape(), data)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    #[default]
    BestValAcc,
    Last,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint_policy: CheckpointPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            lr: 0.001,
            seed: 42,
            checkpoint_policy: CheckpointPolicy::BestValAcc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions made while stepping.
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            )
            .expect("write to string");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// Train-mode forward, cross-entropy, backward and one Adam update.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    x: &Tensor,
    labels: &[usize],
) -> Result<StepOutcome> {
    let logits = model.forward(x, Mode::Train)?;
    let correct = logits
        .data()
        .chunks(model.spec.num_classes)
        .zip(labels)
        .filter(|(row, &l)| argmax_f32(row) == l)
        .count();
    let probs = softmax(&logits)?;
    let loss = cross_entropy(&probs, &one_hot(labels, model.spec.num_classes)?)?;
    let value = loss.item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    model.zero_grad();
    let grads = loss.backward()?;
    adam_step(adam, model.parameters_mut(), &grads)?;
    Ok(StepOutcome {
        loss: value,
        correct,
    })
}

fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Shuffled batches; a trailing batch of one joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Evaluation {
    pub fn predictions(&self) -> Vec<usize> {
        self.probabilities.iter().map(|r| argmax(r)).collect()
    }
}

/// Infer-mode loss, accuracy and softmax rows over a whole source, in order.
pub fn evaluate_split(
    model: &Model,
    source: &dyn BatchSource,
    batch_size: usize,
) -> Result<Evaluation> {
    if source.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty split".into(),
        ));
    }
    let k = model.spec.num_classes;
    let positions: Vec<usize> = (0..source.len()).collect();
    let mut probabilities = Vec::with_capacity(source.len());
    let mut labels = Vec::with_capacity(source.len());
    let mut loss_sum = 0.0;
    no_grad(|| -> Result<()> {
        for chunk in positions.chunks(batch_size.max(1)) {
            let x = source.batch(chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| source.label(i)).collect();
            let probs = softmax(&model.infer(&x)?)?;
            let loss = cross_entropy(&probs, &one_hot(&batch_labels, k)?)?;
            loss_sum += loss.item()? as f64 * chunk.len() as f64;
            probabilities.extend(
                probs
                    .data()
                    .chunks(k)
                    .map(|r| r.iter().map(|&p| p as f64).collect::<Vec<_>>()),
            );
            labels.extend(batch_labels);
        }
        Ok(())
    })?;
    let correct = probabilities
        .iter()
        .zip(&labels)
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    Ok(Evaluation {
        loss: loss_sum / labels.len() as f64,
        accuracy: correct as f64 / labels.len() as f64,
        probabilities,
        labels,
    })
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: History,
    /// The model chosen by the checkpoint policy.
    pub best: Model,
    pub best_epoch: usize,
    pub steps: u64,
}

/// Runs `cfg.epochs` epochs of minibatch Adam with a validation pass after each.
pub fn fit(
    model: &mut Model,
    train: &dyn BatchSource,
    val: &dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 samples, got {}",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(
            "epochs, batch size and learning rate must be positive".into(),
        ));
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut history = History::default();
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let x = train.batch(batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.label(i)).collect();
            let out = match train_step(model, &mut adam, &x, &labels) {
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b + 1,
                    })
                }
                r => r?,
            };
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
        }
        let eval = evaluate_split(model, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss: eval.loss,
            val_acc: eval.accuracy,
        };
        log::info!(
            "epoch {epoch}/{}: train_loss={:.4} train_acc={:.4} val_loss={:.4} val_acc={:.4}",
            cfg.epochs,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        history.records.push(record);
        // ties go to the later, longer-trained epoch
        let keep = match cfg.checkpoint_policy {
            CheckpointPolicy::Last => true,
            CheckpointPolicy::BestValAcc => best
                .as_ref()
                .is_none_or(|(acc, _, _)| record.val_acc >= *acc),
        };
        if keep {
            best = Some((record.val_acc, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(FitOutcome {
        history,
        best,
        best_epoch,
        steps: adam.t,
    })
}
