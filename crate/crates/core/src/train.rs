//! Few-shot episodes, Adam, and the early-stopped training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::adapters::{AdapterKind, AdapterModel};
use crate::error::{invalid, ConfigError, DataError, RunError};
use crate::eval::predict;
use crate::rng::{stream, stream_rng};
use crate::store::{EmbeddingView, SplitKind};
use crate::tensor::{Parameter, Tensor};

/// Quantity watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Monitor {
    /// Accuracy on the held-out validation shots (higher is better).
    ValAccuracy,
    /// Mean training loss of the epoch (lower is better).
    TrainLoss,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Adam first-moment decay, the "momentum" knob.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Images per class in the few-shot episode (including validation shots).
    pub shots: usize,
    /// Shots per class held out for early stopping.
    pub val_shots: usize,
    pub seed: u64,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            batch_size: 256,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            max_epochs: 200,
            shots: 16,
            val_shots: 4,
            seed: 0,
            monitor: Monitor::ValAccuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps must be positive"));
        }
        if self.batch_size == 0 || self.shots == 0 {
            return Err(invalid("batch_size and shots must be positive"));
        }
        if self.val_shots >= self.shots {
            return Err(invalid(format!(
                "val_shots {} must be smaller than shots {}",
                self.val_shots, self.shots
            )));
        }
        if self.val_shots == 0 && self.monitor == Monitor::ValAccuracy {
            return Err(invalid("validation monitoring needs val_shots > 0"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

// ----------------------------------------------------------------------
// episodes

/// Few-shot episode over training-split indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Classes in prompt order; labels are positions in this list.
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Episode {
    pub fn all_indices(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.extend_from_slice(&self.val);
        v
    }
}

/// Draws `shots` training images per class without replacement; the first
/// `val_shots` of each class's draw are held out for validation.
pub fn sample_few_shot<S: EmbeddingView + ?Sized>(
    store: &S,
    classes: &[usize],
    shots: usize,
    val_shots: usize,
    seed: u64,
) -> Result<Episode, RunError> {
    if val_shots >= shots && shots > 0 {
        return Err(invalid("val_shots must be smaller than shots").into());
    }
    let n = store.split_len(SplitKind::Train);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); store.num_classes()];
    for idx in 0..n {
        by_class[store.label(SplitKind::Train, idx)].push(idx);
    }
    let mut rng = stream_rng(seed, stream::SAMPLE);
    let mut episode = Episode {
        classes: classes.to_vec(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for &class in classes {
        let pool = by_class
            .get(class)
            .ok_or_else(|| invalid(format!("class {class} not in store")))?;
        if pool.len() < shots {
            return Err(DataError::InsufficientSamples {
                class,
                name: format!("class {class}"),
                available: pool.len(),
                required: shots,
            }
            .into());
        }
        let mut pool = pool.clone();
        let (chosen, _) = pool.partial_shuffle(&mut rng, shots);
        episode.val.extend_from_slice(&chosen[..val_shots]);
        episode.train.extend_from_slice(&chosen[val_shots..]);
    }
    Ok(episode)
}

// ----------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment estimates, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero; all
/// gradients are cleared afterwards.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState, cfg: &AdamConfig) -> Result<(), RunError> {
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.tensor.grad()).collect();
    for (p, g) in params.iter().zip(&grads) {
        if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(RunError::NonFiniteGradient { param: p.name.clone() });
        }
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.tensor.to_vec();
        let zeros;
        let g = match &g {
            Some(g) => g.as_slice(),
            None => {
                zeros = vec![0.0; data.len()];
                &zeros
            }
        };
        for j in 0..data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            data[j] -= cfg.lr * mh / (libm::sqrt(vh) + cfg.eps);
        }
        p.set_data(data)?;
    }
    Ok(())
}

// ----------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation accuracy in percent.
    pub val_acc: f64,
}

/// Mutable optimizer and early-stopping state of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState,
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// `P x C` prompt matrix for `classes`.
pub fn gather_text<S: EmbeddingView + ?Sized>(store: &S, classes: &[usize]) -> Result<Tensor, RunError> {
    let c = store.emb_dim();
    let mut data = Vec::with_capacity(classes.len() * c);
    for &k in classes {
        data.extend_from_slice(store.text_embedding(k));
    }
    Ok(Tensor::new(data, &[classes.len(), c])?)
}

pub fn gather_images<S: EmbeddingView + ?Sized>(
    store: &S,
    split: SplitKind,
    indices: &[usize],
) -> Result<Tensor, RunError> {
    let c = store.emb_dim();
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend_from_slice(store.image(split, i));
    }
    Ok(Tensor::new(data, &[indices.len(), c])?)
}

fn local_labels<S: EmbeddingView + ?Sized>(
    store: &S,
    classes: &[usize],
    indices: &[usize],
) -> Result<Vec<usize>, RunError> {
    indices
        .iter()
        .map(|&i| {
            let l = store.label(SplitKind::Train, i);
            classes
                .iter()
                .position(|&c| c == l)
                .ok_or_else(|| RunError::Data(DataError::Invalid(format!("image {i} has label {l} outside the episode"))))
        })
        .collect()
}

/// Trains `model` on the episode and leaves it holding the parameters of the
/// best epoch according to `cfg.monitor`.
pub fn train<S: EmbeddingView + ?Sized>(
    model: &mut AdapterModel,
    store: &S,
    episode: &Episode,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, RunError> {
    cfg.validate()?;
    if model.kind() == AdapterKind::IdentityClip || model.parameter_count() == 0 {
        return Ok(TrainOutcome::default());
    }
    if episode.train.is_empty() {
        return Err(DataError::EmptyEpisode.into());
    }
    let text = gather_text(store, &episode.classes)?;
    let val_labels = local_labels(store, &episode.classes, &episode.val)?;
    let adam_cfg = cfg.adam();
    let higher_is_better = cfg.monitor == Monitor::ValAccuracy;

    let mut state = TrainState {
        adam: AdamState::new(model.params()),
        best_metric: if higher_is_better { f64::NEG_INFINITY } else { f64::INFINITY },
        epochs_since_improvement: 0,
    };
    let mut best: Vec<Vec<f64>> = model.params().iter().map(|p| p.tensor.to_vec()).collect();
    let mut outcome = TrainOutcome::default();

    for epoch in 1..=cfg.max_epochs {
        let mut order = episode.train.clone();
        order.shuffle(&mut stream_rng(cfg.seed, stream::SHUFFLE + epoch as u64));

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images = gather_images(store, SplitKind::Train, batch)?;
            let labels = local_labels(store, &episode.classes, batch)?;
            let loss = model.logits(&text, &images)?.cross_entropy(&labels)?;
            loss.backward()?;
            loss_sum += loss.item() * batch.len() as f64;
            adam_step(model.params_mut(), &mut state.adam, &adam_cfg)?;
        }
        let train_loss = loss_sum / order.len() as f64;

        let val_acc = if episode.val.is_empty() {
            0.0
        } else {
            let preds = predict(model, &text, store, SplitKind::Train, &episode.val)?;
            let hits = preds.iter().zip(&val_labels).filter(|(p, l)| p == l).count();
            100.0 * hits as f64 / episode.val.len() as f64
        };

        let metric = if higher_is_better { val_acc } else { train_loss };
        let improved = if higher_is_better {
            metric > state.best_metric
        } else {
            metric < state.best_metric
        };
        if improved {
            state.best_metric = metric;
            state.epochs_since_improvement = 0;
            outcome.best_epoch = Some(epoch);
            best = model.params().iter().map(|p| p.tensor.to_vec()).collect();
        } else {
            state.epochs_since_improvement += 1;
        }
        outcome.history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        if state.epochs_since_improvement >= cfg.patience {
            outcome.stopped_early = true;
            break;
        }
    }

    for (p, data) in model.params_mut().iter_mut().zip(best) {
        p.set_data(data)?;
    }
    Ok(outcome)
}

/// Mean cross-entropy of the model on the given training-split images.
pub fn episode_loss<S: EmbeddingView + ?Sized>(
    model: &AdapterModel,
    store: &S,
    classes: &[usize],
    indices: &[usize],
) -> Result<f64, RunError> {
    let text = gather_text(store, classes)?;
    let images = gather_images(store, SplitKind::Train, indices)?;
    let labels = local_labels(store, classes, indices)?;
    Ok(model.logits(&text, &images)?.cross_entropy(&labels)?.item())
}
