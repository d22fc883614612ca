//! Training loop, optimizer, schedule, loss, and evaluation metrics.
//!
//! Defaults mirror the experimental protocol: learning rate 1e-4,
//! categorical cross-entropy, Adam, 400 epochs, batch size 64, and a
//! plateau scheduler that multiplies the learning rate by 0.1 when the
//! validation loss has not improved for 20 consecutive epochs.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Phase;
use crate::models::Model;
use crate::tensor::{Parameter, Tensor};

/// Mean categorical cross-entropy of `logits: [b, c]` against integer
/// labels, computed through a stabilized log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(Error::Shape(format!(
            "cross_entropy expects [batch, classes] logits, got {:?}",
            logits.shape()
        )));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Usage(format!(
            "cross_entropy: {} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Usage(format!(
            "cross_entropy: label {bad} out of range for {c} classes"
        )));
    }
    let src = logits.data();
    let mut softmax = vec![0.0; b * c];
    let mut loss = 0.0;
    for i in 0..b {
        let row = &src[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            softmax[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            softmax[i * c + j] /= denom;
        }
        let lse = mx + denom.ln();
        loss += lse - row[labels[i]];
    }
    drop(src);
    loss /= b as f64;
    let labels_owned = labels.to_vec();
    let parent = logits.clone();
    Ok(Tensor::from_op(vec![1], vec![loss], vec![logits.clone()], move |node| {
        let g = node.grad_ref()[0];
        let mut dl = vec![0.0; b * c];
        for i in 0..b {
            for j in 0..c {
                let onehot = if labels_owned[i] == j { 1.0 } else { 0.0 };
                dl[i * c + j] = g * (softmax[i * c + j] - onehot) / b as f64;
            }
        }
        parent.accumulate_grad(&dl);
    }))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Plateau learning-rate schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.1, patience: 20 }
    }
}

/// Training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler: PlateauConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of the training split held out (seeded, stratified) for the
    /// scheduler monitor when no validation set is supplied.
    pub val_fraction: f64,
    /// Stop once eval-mode training accuracy reaches this level; used by
    /// overfitting smoke runs, off by default.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 400,
            batch_size: 64,
            scheduler: PlateauConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            val_fraction: 0.2,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.scheduler.factor <= 0.0 {
            return Err(Error::Usage("train config: rates must be positive".into()));
        }
        if self.scheduler.patience == 0 {
            return Err(Error::Usage("train config: patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Usage("train config: epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Usage("train config: val fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. State vectors align with the parameter list
/// passed at construction; updates are in-place and deterministic.
pub struct Adam {
    pub lr: f64,
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &[Parameter], lr: f64, cfg: AdamConfig) -> Self {
        Adam {
            lr,
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    /// One update over all parameters; missing gradients are treated as zero.
    pub fn step(&mut self, params: &[Parameter]) {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (idx, p) in params.iter().enumerate() {
            let Some(grad) = p.tensor.grad() else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut data = p.tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
    }

    pub fn zero_grad(&self, params: &[Parameter]) {
        for p in params {
            p.tensor.zero_grad();
        }
    }
}

/// Plateau scheduler state: multiplies the learning rate by `factor` after
/// `patience` consecutive epochs without validation-loss improvement; never
/// raises the rate and fires at most once per patience window.
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    best: f64,
    since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig) -> Self {
        PlateauScheduler { cfg, best: f64::INFINITY, since_improvement: 0 }
    }

    /// Feed one epoch's monitored loss; returns the new learning rate.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_improvement = 0;
            return lr;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.cfg.patience {
            self.since_improvement = 0;
            return lr * self.cfg.factor;
        }
        lr
    }
}

/// One epoch of recorded history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Outcome of a training run. Serialized as JSON; the wall time is kept
/// in memory only so artifacts stay byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_learning_rate: f64,
    pub history: Vec<EpochRecord>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Deterministic, seeded, stratified index split: `(kept, held_out)` with
/// roughly `fraction` of each class held out.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for mut idxs in per_class {
        idxs.shuffle(&mut rng);
        let n_held = ((idxs.len() as f64) * fraction).floor() as usize;
        // Keep at least one sample per class on each side when possible.
        let n_held = n_held.min(idxs.len().saturating_sub(1));
        held.extend_from_slice(&idxs[..n_held]);
        kept.extend_from_slice(&idxs[n_held..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

fn argmax(row: &[f64]) -> usize {
    // Deterministic tie-break: lowest class index wins.
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy of `model` over the listed samples, eval mode.
fn eval_indices(model: &Model, ds: &Dataset, indices: &[usize], batch: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(batch) {
        let x = ds.batch_tensor(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.samples[i].label).collect();
        let logits = model.forward(&x, Phase::Eval)?;
        let loss = cross_entropy(&logits, &labels)?;
        loss_sum += loss.item() * chunk.len() as f64;
        let lv = logits.to_vec();
        let c = logits.shape()[1];
        for (row, &label) in lv.chunks(c).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / indices.len() as f64, correct as f64 / indices.len() as f64))
}

/// Classification accuracy of `model` on a dataset (eval mode, argmax with
/// lowest-index tie-break).
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    let ds = ds.pad_to(ds.max_len.max(model.seq_len))?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let (_, acc) = eval_indices(model, &ds, &indices, 64)?;
    Ok(acc)
}

/// Train `model` on `train`, monitoring `val` (or a held-out slice of the
/// training split) for the plateau scheduler. Mini-batches are shuffled with
/// a seeded generator, so two runs with the same seed produce identical
/// histories.
pub fn fit(
    model: &Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    if train.dims != model.d_in {
        return Err(Error::Data(format!(
            "dataset has {} dimensions but the model expects {}",
            train.dims, model.d_in
        )));
    }
    let start = Instant::now();
    let train = train.pad_to(train.max_len.max(model.seq_len))?;
    let val_owned = val.map(|v| v.pad_to(v.max_len.max(model.seq_len))).transpose()?;

    // Resolve the scheduler monitor: an explicit validation set, or a
    // stratified hold-out of the training split.
    let labels = train.labels();
    let (train_idx, val_view): (Vec<usize>, Option<Vec<usize>>) = match &val_owned {
        Some(_) => ((0..train.len()).collect(), None),
        None if cfg.val_fraction > 0.0 && train.len() > 1 => {
            let (kept, held) = stratified_split(&labels, cfg.val_fraction, cfg.seed ^ 0x5eed);
            if held.is_empty() {
                ((0..train.len()).collect(), None)
            } else {
                (kept, Some(held))
            }
        }
        None => ((0..train.len()).collect(), None),
    };

    let params = model.parameters();
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.adam);
    let mut scheduler = PlateauScheduler::new(cfg.scheduler);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.batch_tensor(chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].label).collect();
            let logits = model.forward(&x, Phase::Train)?;
            let loss = cross_entropy(&logits, &batch_labels)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Divergence { epoch, loss: loss_val });
            }
            loss_sum += loss_val * chunk.len() as f64;
            let lv = logits.to_vec();
            let c = logits.shape()[1];
            for (row, &label) in lv.chunks(c).zip(&batch_labels) {
                if argmax(row) == label {
                    correct += 1;
                }
            }
            adam.zero_grad(&params);
            loss.backward()?;
            adam.step(&params);
            adam.zero_grad(&params);
        }
        let train_loss = loss_sum / order.len() as f64;
        let train_accuracy = correct as f64 / order.len() as f64;

        let (val_loss, val_accuracy) = if let Some(v) = &val_owned {
            let idx: Vec<usize> = (0..v.len()).collect();
            eval_indices(model, v, &idx, cfg.batch_size)?
        } else if let Some(held) = &val_view {
            eval_indices(model, &train, held, cfg.batch_size)?
        } else {
            (train_loss, train_accuracy)
        };
        adam.lr = scheduler.step(val_loss, adam.lr);

        history.push(EpochRecord {
            epoch,
            learning_rate: adam.lr,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
        epochs_run = epoch;

        if let Some(target) = cfg.stop_at_train_accuracy {
            let idx: Vec<usize> = (0..train.len()).collect();
            let (_, acc) = eval_indices(model, &train, &idx, cfg.batch_size)?;
            if acc >= target {
                break;
            }
        }
    }

    let all_idx: Vec<usize> = (0..train.len()).collect();
    let (_, final_train_accuracy) = eval_indices(model, &train, &all_idx, cfg.batch_size)?;
    Ok(RunResult {
        variant: model.variant.to_string(),
        seed: cfg.seed,
        epochs_run,
        final_learning_rate: adam.lr,
        history,
        final_train_accuracy,
        final_test_accuracy: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Mean rank of each method across datasets. `accuracies[m][d]` is the
/// accuracy of method `m` on dataset `d`; higher is better, ties receive
/// the average of the tied ranks.
pub fn rank_average(accuracies: &[Vec<f64>]) -> Result<Vec<f64>> {
    if accuracies.is_empty() {
        return Err(Error::Usage("rank_average: no methods".into()));
    }
    let n_datasets = accuracies[0].len();
    if n_datasets == 0 {
        return Err(Error::Usage("rank_average: no datasets".into()));
    }
    for (m, row) in accuracies.iter().enumerate() {
        if row.len() != n_datasets {
            return Err(Error::Usage(format!(
                "rank_average: method {m} has {} cells, expected {n_datasets} (missing cell?)",
                row.len()
            )));
        }
    }
    let n_methods = accuracies.len();
    let mut rank_sums = vec![0.0; n_methods];
    for d in 0..n_datasets {
        let mut order: Vec<usize> = (0..n_methods).collect();
        order.sort_by(|&a, &b| {
            accuracies[b][d]
                .partial_cmp(&accuracies[a][d])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut i = 0;
        while i < n_methods {
            let mut j = i;
            while j + 1 < n_methods && accuracies[order[j + 1]][d] == accuracies[order[i]][d] {
                j += 1;
            }
            // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
            let avg = (i + 1 + j + 1) as f64 / 2.0;
            for &m in &order[i..=j] {
                rank_sums[m] += avg;
            }
            i = j + 1;
        }
    }
    Ok(rank_sums.into_iter().map(|s| s / n_datasets as f64).collect())
}
