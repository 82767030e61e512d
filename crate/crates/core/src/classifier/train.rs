use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{argmax, ClassifierModel, LabeledSetBatch};
use crate::autodiff::{Bindings, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::ode::NeuralDynamics;
use crate::optim::{clip_grad_norm, Adam, StepDecay};
use crate::rng::Rng;
use crate::tensor::DenseArray;

fn default_patience() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub decay: Option<StepDecay>,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Epochs without a validation-accuracy gain before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl ClassifierTrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self { epochs, batch_size, lr, decay: None, clip: None, seed: 0, patience: default_patience() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ClassifierReport {
    pub epochs: Vec<ClassifierEpoch>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in labels.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

/// Mean cross-entropy, accuracy and confusion matrix.
pub fn evaluate(model: &ClassifierModel, data: &LabeledSetBatch) -> Result<Evaluation> {
    let logits = model.logits(&data.sets)?;
    let c = model.spec.classes;
    let mut loss = 0.0;
    let mut predicted = Vec::with_capacity(data.len());
    for (row, &y) in logits.data().chunks(c).zip(&data.labels) {
        loss += cross_entropy(row, y);
        predicted.push(argmax(row));
    }
    let correct = predicted.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        confusion: confusion_matrix(&data.labels, &predicted, c),
    })
}

fn cross_entropy(row: &[f64], y: usize) -> f64 {
    let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    lse - row[y]
}

/// Batch loss, accuracy and parameter gradients.
fn batch_step(model: &ClassifierModel, batch: &LabeledSetBatch) -> Result<(f64, f64, BTreeMap<String, DenseArray>)> {
    let shape = batch.sets.shape();
    let c = model.spec.classes;
    let mut g = Graph::new();
    let x = g.input("x");
    let logits = model.build_logits(&mut g, x, shape);
    let ls = g.log_softmax(logits);
    let onehot = DenseArray::from_fn(&[shape[0], c], |k| if batch.labels[k / c] == k % c { 1.0 } else { 0.0 });
    let oh = g.constant(onehot);
    let picked = g.mul(ls, oh);
    let total = g.sum_all(picked);
    let loss = g.scale(total, -1.0 / shape[0] as f64);
    let b = Bindings::new()
        .bind_store(&model.params)
        .bind_store(model.dynamics.params())
        .bind("x", batch.sets.values());
    let l = g.forward(&b)?.item();
    let correct = g
        .value(logits)
        .data()
        .chunks(c)
        .zip(&batch.labels)
        .filter(|(row, y)| argmax(row) == **y)
        .count();
    let grads = g.backward_from(&[(loss, DenseArray::scalar(1.0))])?;
    Ok((l, correct as f64, g.param_grads(&grads)))
}

/// Class-stratified order: each class is shuffled, then classes are
/// interleaved so every batch sees them in equal measure.
fn stratified_order(labels: &[usize], classes: usize, rng: &mut Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for v in by_class.iter_mut() {
        rng.shuffle(v);
    }
    let longest = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(labels.len());
    for k in 0..longest {
        let mut round: Vec<usize> = by_class.iter().filter_map(|v| v.get(k).copied()).collect();
        rng.shuffle(&mut round);
        order.extend(round);
    }
    order
}

/// Minimizes softmax cross-entropy with Adam; keeps the parameters of the
/// best validation epoch and stops after `patience` epochs without gain.
pub fn train_classifier(
    model: &mut ClassifierModel,
    train: &LabeledSetBatch,
    val: Option<&LabeledSetBatch>,
    cfg: &ClassifierTrainConfig,
    mut on_epoch: impl FnMut(&ClassifierEpoch),
) -> Result<ClassifierReport> {
    if cfg.batch_size == 0 || cfg.epochs == 0 || train.is_empty() {
        return Err(Error::InvalidArgument("epochs, batch_size and the training set must be non-empty".into()));
    }
    let mut rng = Rng::with_stream(cfg.seed, 13);
    let mut adam = Adam::new(cfg.lr);
    let mut report = ClassifierReport::default();
    let mut best: Option<(f64, ParamStore, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.decay.map_or(cfg.lr, |d| d.lr_at(cfg.lr, epoch));
        adam.lr = lr;
        let order = stratified_order(&train.labels, train.classes, &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk)?;
            let (loss, hits, mut grads) = batch_step(model, &batch)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, lr, detail: format!("batch cross-entropy {loss}") });
            }
            if let Some(c) = cfg.clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.step_all(&mut [&mut model.params, model.dynamics.params_mut()], &grads);
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let n = train.len() as f64;
        let ev = val.map(|v| evaluate(model, v)).transpose()?;
        let e = ClassifierEpoch {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_accuracy: correct / n,
            val_loss: ev.as_ref().map(|e| e.loss),
            val_accuracy: ev.as_ref().map(|e| e.accuracy),
        };
        on_epoch(&e);
        let score = e.val_accuracy.unwrap_or(e.train_accuracy);
        report.epochs.push(e);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, model.params.clone(), model.dynamics.params().clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((score, p, d)) = best {
        model.params = p;
        *model.dynamics.params_mut() = d;
        report.best_val_accuracy = val.map(|_| score);
    }
    Ok(report)
}
