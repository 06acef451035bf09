//! Two-phase training: head only with a frozen extractor, then end-to-end
//! fine-tuning at a lower learning rate. Both phases share the weighted
//! cross-entropy loss, plateau learning-rate decay and early stopping.

mod checkpoint;
mod history;

use std::collections::HashMap;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use history::{EpochRecord, TrainHistory};

use crate::backbones::Extractor;
use crate::data::{class_weights_from_counts, ClinicalVector, FoldAssignment, WeightVector, N_CLASSES, N_CLI};
use crate::error::{Error, Result};
use crate::evaluation::{argmax, balanced_accuracy, confusion_matrix};
use crate::fusion::FusionHead;
use crate::nn::{self, Adam, AdamConfig, Param, Parameterized, Pass};
use crate::preprocess::sample_rng;
use crate::scalar::Scalar;

/// Guard inside the logarithm of the loss.
pub const LOSS_EPS: f64 = 1e-12;

/// `-w_y * ln(p_y + eps)` for one sample.
pub fn weighted_cross_entropy<T: Scalar>(probs: &[T], label: usize, weights: &WeightVector) -> f64 {
    -weights.weights[label] * (probs[label].to_f64_lossy() + LOSS_EPS).ln()
}

/// Sum of per-sample weighted losses and the sum of the applied weights.
/// The batch loss is their ratio.
pub fn batch_loss_terms<T: Scalar>(probs: &Array2<T>, labels: &[usize], weights: &WeightVector) -> (f64, f64) {
    let mut loss = 0.0;
    let mut wsum = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        loss -= weights.weights[y] * (row[y].to_f64_lossy() + LOSS_EPS).ln();
        wsum += weights.weights[y];
    }
    (loss, wsum)
}

/// Weighted-mean loss and its gradient w.r.t. the logits that produced `probs`
/// through a softmax. The `eps` guard is differentiated exactly.
pub fn weighted_loss_and_grad<T: Scalar>(
    probs: &Array2<T>,
    labels: &[usize],
    weights: &WeightVector,
) -> (f64, Array2<T>) {
    let (loss, wsum) = batch_loss_terms(probs, labels, weights);
    let mut grad = Array2::zeros(probs.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        let py = probs[[i, y]].to_f64_lossy();
        let k = weights.weights[y] / wsum * py / (py + LOSS_EPS);
        for j in 0..probs.ncols() {
            let delta = if j == y { 1.0 } else { 0.0 };
            grad[[i, j]] = T::lit(-k * (delta - probs[[i, j]].to_f64_lossy()));
        }
    }
    (loss / wsum, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValBacc,
}

impl Monitor {
    fn better(self, candidate: f64, reference: f64, min_delta: f64) -> bool {
        match self {
            Monitor::ValLoss => candidate < reference - min_delta,
            Monitor::ValBacc => candidate > reference + min_delta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub monitor: Monitor,
    /// Minimum absolute change that counts as an improvement.
    pub min_delta: f64,
    /// Share of each class in the training slice held out for monitoring.
    pub validation_fraction: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 50,
            phase2_epochs: 100,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.1,
            plateau_patience: 10,
            early_stop_patience: 15,
            batch_size: 32,
            seed: 0,
            monitor: Monitor::ValLoss,
            min_delta: 1e-4,
            validation_fraction: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::TrainConfig(m));
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive".into());
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_phase2 > self.lr_phase1 {
            return bad(format!(
                "phase-2 learning rate {} exceeds phase-1 rate {}",
                self.lr_phase2, self.lr_phase1
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor must be in (0, 1), got {}", self.plateau_factor));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.min_delta < 0.0 {
            return bad("min_delta must be non-negative".into());
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// What the patience logic decided after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PatienceStep {
    pub improved: bool,
    pub decay_lr: bool,
    pub stop: bool,
}

/// Plateau and early-stop counters for one phase. The first observation is
/// always an improvement; the plateau counter restarts after each decay.
#[derive(Clone, Debug)]
pub struct PatienceTracker {
    monitor: Monitor,
    min_delta: f64,
    plateau_patience: usize,
    stop_patience: usize,
    best: Option<f64>,
    since_plateau: usize,
    since_best: usize,
}

impl PatienceTracker {
    pub fn new(monitor: Monitor, min_delta: f64, plateau_patience: usize, stop_patience: usize) -> Self {
        PatienceTracker {
            monitor,
            min_delta,
            plateau_patience,
            stop_patience,
            best: None,
            since_plateau: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> PatienceStep {
        let improved = match self.best {
            None => true,
            Some(b) => self.monitor.better(value, b, self.min_delta),
        };
        if improved {
            self.best = Some(value);
            self.since_best = 0;
            self.since_plateau = 0;
            return PatienceStep {
                improved,
                ..Default::default()
            };
        }
        self.since_best += 1;
        self.since_plateau += 1;
        let decay_lr = self.since_plateau >= self.plateau_patience;
        if decay_lr {
            self.since_plateau = 0;
        }
        PatienceStep {
            improved,
            decay_lr,
            stop: self.since_best >= self.stop_patience,
        }
    }
}

/// Network inputs for one training run.
pub trait SampleSource<T: Scalar>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Diagnosis index in `0..6`.
    fn label(&self, i: usize) -> usize;

    fn clinical(&self, i: usize) -> ClinicalVector<T>;

    /// `C x H x W` standardized input. With `augment = Some((seed, epoch))`
    /// the source returns a randomly augmented view, deterministic in
    /// `(seed, i, epoch)`.
    fn input(&self, i: usize, augment: Option<(u64, u64)>) -> Result<Array3<T>>;
}

/// Feature extractor plus fusion head. Without an extractor the flattened
/// input is used directly as the feature vector.
pub struct Model<T> {
    pub backbone: Option<Extractor<T>>,
    pub head: FusionHead<T>,
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(b) = &mut self.backbone {
            b.visit(&nn::join(prefix, "backbone"), f);
        }
        self.head.visit(&nn::join(prefix, "head"), f);
    }
}

impl<T: Scalar> Model<T> {
    pub fn set_backbone_trainable(&mut self, flag: bool) {
        if let Some(b) = &mut self.backbone {
            b.set_trainable(flag);
        }
    }

    pub fn features(&mut self, inputs: Array4<T>, pass: Pass) -> Array2<T> {
        match &mut self.backbone {
            Some(b) => b.features(inputs, pass),
            None => nn::flatten(inputs.into_dyn()),
        }
    }

    fn backward_features(&mut self, grad: Array2<T>) {
        if let Some(b) = &mut self.backbone {
            b.backward(grad);
        }
    }

    fn uses_clinical(&self) -> bool {
        self.head.spec().scenario.uses_clinical()
    }

    /// Class probabilities in inference mode, one row per index.
    pub fn predict<S: SampleSource<T> + ?Sized>(
        &mut self,
        source: &S,
        indices: &[usize],
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(indices.len());
        let mut rng = sample_rng(0, 0, 0);
        for chunk in indices.chunks(batch_size.max(1)) {
            let x = stack_inputs(source, chunk, None)?;
            let f = self.features(x, Pass::Infer);
            let c = self.uses_clinical().then(|| stack_clinical(source, chunk));
            let o = self.head.forward(&f, c.as_ref(), Pass::Infer, &mut rng)?;
            out.extend(o.probs.rows().into_iter().map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()));
        }
        Ok(out)
    }
}

fn stack_inputs<T: Scalar, S: SampleSource<T> + ?Sized>(
    source: &S,
    indices: &[usize],
    key: Option<(u64, u64)>,
) -> Result<Array4<T>> {
    let items = indices
        .iter()
        .map(|&i| source.input(i, key))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(format!("inputs of differing shape: {e}")))
}

fn stack_clinical<T: Scalar, S: SampleSource<T> + ?Sized>(source: &S, indices: &[usize]) -> Array2<T> {
    let mut c = Array2::zeros((indices.len(), N_CLI));
    for (row, &i) in indices.iter().enumerate() {
        for (j, &v) in source.clinical(i).0.iter().enumerate() {
            c[[row, j]] = v;
        }
    }
    c
}

/// Stratified split of `indices` into (fit, validation). Each class with at
/// least two members contributes `max(1, round(fraction * n))` samples to the
/// validation part, never all of them.
pub fn stratified_holdout(labels: &[usize], indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = sample_rng(seed, 0x5eed, 0);
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for c in 0..N_CLASSES {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let take = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        val.extend_from_slice(&members[..take]);
        fit.extend_from_slice(&members[take..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

/// Result of [`train_two_phase`]; the model passed in holds the best weights.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best_phase: u8,
    pub best_epoch: usize,
    pub best_monitor: f64,
    pub weights: WeightVector,
    pub fit_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

struct Split<'a> {
    fit: &'a [usize],
    val: &'a [usize],
    val_labels: Vec<usize>,
}

struct Best<T> {
    value: f64,
    phase: u8,
    epoch: usize,
    state: Vec<(String, ndarray::ArrayD<T>)>,
}

/// Trains `model` on the training slice of `fold_index` and restores the
/// parameters with the best monitored validation value across both phases.
pub fn train_two_phase<T: Scalar, S: SampleSource<T> + ?Sized>(
    model: &mut Model<T>,
    source: &S,
    folds: &FoldAssignment,
    fold_index: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if fold_index >= folds.k {
        return Err(Error::Folds(format!("fold {fold_index} out of range for k = {}", folds.k)));
    }
    if folds.entries.len() != source.len() {
        return Err(Error::Folds(format!(
            "fold assignment covers {} records, data source has {}",
            folds.entries.len(),
            source.len()
        )));
    }
    let labels: Vec<usize> = (0..source.len()).map(|i| source.label(i)).collect();
    let train = folds.train_indices(fold_index);
    let split_seed = config.seed ^ (fold_index as u64).wrapping_mul(0x9E37_79B9);
    let (fit, val) = stratified_holdout(&labels, &train, config.validation_fraction, split_seed);
    if val.is_empty() {
        return Err(Error::TrainConfig("validation split is empty".into()));
    }
    let mut counts = [0usize; N_CLASSES];
    for &i in &fit {
        counts[labels[i]] += 1;
    }
    let w = class_weights_from_counts(&counts)?;
    let mut weights = WeightVector { weights: [0.0; N_CLASSES] };
    weights.weights.copy_from_slice(&w);

    let split = Split {
        fit: &fit,
        val: &val,
        val_labels: val.iter().map(|&i| labels[i]).collect(),
    };
    let mut history = TrainHistory::default();
    let mut best: Option<Best<T>> = None;

    model.set_backbone_trainable(false);
    run_phase(model, source, &split, &weights, config, 1, &mut history, &mut best)?;
    if config.phase2_epochs > 0 {
        model.set_backbone_trainable(true);
        run_phase(model, source, &split, &weights, config, 2, &mut history, &mut best)?;
    }
    let best = best.expect("at least one epoch ran");
    let state: nn::TensorMap<T> = best.state.into_iter().collect();
    nn::load_state(model, "", &state)?;
    model.set_backbone_trainable(false);
    Ok(TrainOutcome {
        history,
        best_phase: best.phase,
        best_epoch: best.epoch,
        best_monitor: best.value,
        weights,
        fit_indices: fit,
        val_indices: val,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_phase<T: Scalar, S: SampleSource<T> + ?Sized>(
    model: &mut Model<T>,
    source: &S,
    split: &Split<'_>,
    weights: &WeightVector,
    config: &TrainConfig,
    phase: u8,
    history: &mut TrainHistory,
    best: &mut Option<Best<T>>,
) -> Result<()> {
    let (max_epochs, lr) = match phase {
        1 => (config.phase1_epochs, config.lr_phase1),
        _ => (config.phase2_epochs, config.lr_phase2),
    };
    if max_epochs == 0 {
        return Ok(());
    }
    let mut adam = Adam::new(config.adam(lr));
    let mut tracker = PatienceTracker::new(
        config.monitor,
        config.min_delta,
        config.plateau_patience,
        config.early_stop_patience,
    );
    let mut rng: ChaCha8Rng = sample_rng(config.seed, 0xface, phase as u64);
    let frozen = phase == 1 || model.backbone.is_none();
    // A frozen extractor without augmentation is a pure function of the input.
    let mut cache: Option<HashMap<usize, usize>> = None;
    let mut cached_features: Option<Array2<T>> = None;
    if frozen && !config.augment {
        let all: Vec<usize> = split.fit.iter().chain(split.val).copied().collect();
        let feats = features_for(model, source, &all, config.batch_size)?;
        cache = Some(all.iter().enumerate().map(|(row, &i)| (i, row)).collect());
        cached_features = Some(feats);
    }
    let epoch_offset = if phase == 1 { 0 } else { config.phase1_epochs as u64 };
    let uses_clinical = model.uses_clinical();

    for epoch in 1..=max_epochs {
        let mut order = split.fit.to_vec();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| source.label(i)).collect();
            let feats = match (&cache, &cached_features) {
                (Some(map), Some(all)) => gather_rows(all, chunk.iter().map(|i| map[i])),
                _ => {
                    let key = config.augment.then_some((config.seed, epoch_offset + epoch as u64));
                    let x = stack_inputs(source, chunk, key)?;
                    model.features(x, if frozen { Pass::Infer } else { Pass::Train })
                }
            };
            let clinical = uses_clinical.then(|| stack_clinical(source, chunk));
            let out = model.head.forward(&feats, clinical.as_ref(), Pass::Train, &mut rng)?;
            let (loss, grad) = weighted_loss_and_grad(&out.probs, &batch_labels, weights);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    phase,
                    epoch,
                    batch: b,
                    detail: format!("loss = {loss}; check input scaling and learning rate"),
                });
            }
            let (ls, ws) = batch_loss_terms(&out.probs, &batch_labels, weights);
            loss_sum += ls;
            weight_sum += ws;
            let g_feat = model.head.backward(&grad);
            if !frozen {
                model.backward_features(g_feat);
            }
            adam.step(model);
        }

        let val_feats = match (&cache, &cached_features) {
            (Some(map), Some(all)) => gather_rows(all, split.val.iter().map(|i| map[i])),
            _ => features_for(model, source, split.val, config.batch_size)?,
        };
        let clinical = uses_clinical.then(|| stack_clinical(source, split.val));
        let out = model.head.forward(&val_feats, clinical.as_ref(), Pass::Infer, &mut rng)?;
        let (vl, vw) = batch_loss_terms(&out.probs, &split.val_labels, weights);
        let val_loss = vl / vw;
        let pred: Vec<usize> = out
            .probs
            .rows()
            .into_iter()
            .map(|r| argmax(&r.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()))
            .collect();
        let val_bacc = balanced_accuracy(&confusion_matrix(&split.val_labels, &pred)?)?;
        let train_loss = loss_sum / weight_sum;
        history.records.push(EpochRecord {
            phase,
            epoch,
            train_loss,
            val_loss,
            val_bacc,
            lr: adam.lr(),
        });
        log::debug!("phase {phase} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} bacc {val_bacc:.4}");

        let monitored = match config.monitor {
            Monitor::ValLoss => val_loss,
            Monitor::ValBacc => val_bacc,
        };
        let is_best = match best {
            None => true,
            Some(b) => match config.monitor {
                Monitor::ValLoss => monitored < b.value,
                Monitor::ValBacc => monitored > b.value,
            },
        };
        if is_best {
            *best = Some(Best {
                value: monitored,
                phase,
                epoch,
                state: nn::snapshot(model, ""),
            });
        }
        let step = tracker.observe(monitored);
        if step.stop {
            break;
        }
        if step.decay_lr {
            adam.set_lr(adam.lr() * config.plateau_factor);
        }
    }
    Ok(())
}

fn gather_rows<T: Scalar>(all: &Array2<T>, rows: impl Iterator<Item = usize>) -> Array2<T> {
    let rows: Vec<usize> = rows.collect();
    all.select(Axis(0), &rows)
}

fn features_for<T: Scalar, S: SampleSource<T> + ?Sized>(
    model: &mut Model<T>,
    source: &S,
    indices: &[usize],
    batch_size: usize,
) -> Result<Array2<T>> {
    let mut parts = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = stack_inputs(source, chunk, None)?;
        parts.push(model.features(x, Pass::Infer));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}
