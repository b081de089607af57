//! Base/new class splits, accuracy and harmonic mean, and the experiment
//! drivers: single base-to-new runs, class-share sweeps, noisy-training
//! comparisons and the architecture ablation grid.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::adapters::{AdapterKind, AdapterModel, AttentionVariant, MmaConfig, UpDownVariant};
use crate::error::{invalid, ConfigError, DataError, RunError};
use crate::store::{class_names_match, EmbeddingStore, EmbeddingView, SplitKind};
use crate::tensor::Tensor;
use crate::train::{gather_images, gather_text, sample_few_shot, train, Episode, TrainConfig, TrainOutcome};

/// Images scored per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

/// Argmax over prompt positions for each image; ties go to the lowest index.
pub fn predict<S: EmbeddingView + ?Sized>(
    model: &AdapterModel,
    text: &Tensor,
    store: &S,
    split: SplitKind,
    indices: &[usize],
) -> Result<Vec<usize>, RunError> {
    let p = text.shape()[0];
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let images = gather_images(store, split, chunk)?;
        let logits = model.logits(text, &images)?;
        for row in logits.data().chunks(p) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Prediction {
    /// Row in the evaluated split.
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    /// Percentage of correct predictions.
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }
}

/// Accuracy recomputed from a prediction log.
pub fn accuracy_from_predictions(preds: &[Prediction]) -> f64 {
    let hits = preds.iter().filter(|p| p.label == p.predicted).count();
    100.0 * hits as f64 / preds.len() as f64
}

/// Scores the images of `split` whose label is in `classes`, using the
/// prompts of `classes` only.
pub fn evaluate<S: EmbeddingView + ?Sized>(
    model: &AdapterModel,
    store: &S,
    classes: &[usize],
    split: SplitKind,
) -> Result<Evaluation, RunError> {
    evaluate_subset(model, store, classes, classes, split)
}

/// Like [`evaluate`] but with separate prompt and image class sets.
pub fn evaluate_subset<S: EmbeddingView + ?Sized>(
    model: &AdapterModel,
    store: &S,
    prompt_classes: &[usize],
    image_classes: &[usize],
    split: SplitKind,
) -> Result<Evaluation, RunError> {
    if prompt_classes.is_empty() || image_classes.is_empty() {
        return Err(invalid("evaluation needs a non-empty class set").into());
    }
    let mut wanted = alloc::vec![false; store.num_classes()];
    for &c in image_classes {
        *wanted
            .get_mut(c)
            .ok_or_else(|| invalid(format!("class {c} not in store")))? = true;
    }
    let indices: Vec<usize> = (0..store.split_len(split))
        .filter(|&i| wanted[store.label(split, i)])
        .collect();
    if indices.is_empty() {
        return Err(RunError::UndefinedMetric("no images of the requested classes"));
    }
    let text = gather_text(store, prompt_classes)?;
    let local = predict(model, &text, store, split, &indices)?;
    let predictions: Vec<Prediction> = indices
        .iter()
        .zip(local)
        .map(|(&index, j)| Prediction {
            index,
            label: store.label(split, index),
            predicted: prompt_classes[j],
        })
        .collect();
    let correct = predictions.iter().filter(|p| p.label == p.predicted).count();
    Ok(Evaluation {
        correct,
        total: predictions.len(),
        predictions,
    })
}

// ----------------------------------------------------------------------
// class splits and metrics

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub new: Vec<usize>,
    pub base_share: f64,
}

/// Contiguous split of `ordering` (default: store order) with
/// `ceil(base_share * n)` base classes.
pub fn split_classes(n_classes: usize, base_share: f64, ordering: Option<&[usize]>) -> Result<ClassSplit, ConfigError> {
    if n_classes < 2 {
        return Err(invalid("a base/new split needs at least two classes"));
    }
    if !(base_share > 0.0 && base_share <= 1.0) {
        return Err(invalid(format!("base share must lie in (0, 1], got {base_share}")));
    }
    let order: Vec<usize> = match ordering {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..n_classes).collect::<Vec<_>>() {
                return Err(invalid("class ordering must be a permutation of all classes"));
            }
            o.to_vec()
        }
        None => (0..n_classes).collect(),
    };
    // tolerate representation error, e.g. 0.3 * 10 = 3.0000000000000004
    let raw = base_share * n_classes as f64;
    let n_base = (libm::ceil(raw - 1e-9) as usize).clamp(0, n_classes);
    if n_base == 0 {
        return Err(invalid(format!("base share {base_share} leaves no base classes")));
    }
    Ok(ClassSplit {
        base: order[..n_base].to_vec(),
        new: order[n_base..].to_vec(),
        base_share,
    })
}

/// `2ab / (a + b)`.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64, RunError> {
    if !(a + b > 0.0) {
        return Err(RunError::UndefinedMetric("harmonic mean of two zero accuracies"));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Relative change of new-class over base-class accuracy, in percent.
pub fn diff_pct(base: f64, new: f64) -> Option<f64> {
    (base > 0.0).then(|| (new - base) / base * 100.0)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunMeta {
    pub dataset_id: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub label: String,
    pub adapter: AdapterKind,
    pub base_acc: f64,
    /// Absent when every class is a base class.
    pub new_acc: Option<f64>,
    pub all_acc: f64,
    pub harmonic_mean: Option<f64>,
    pub diff_pct: Option<f64>,
    pub param_count: usize,
    pub base_classes: usize,
    pub new_classes: usize,
    pub meta: RunMeta,
}

impl EvalReport {
    /// Equality of every measured quantity and of the data/seed metadata.
    /// Ignores what identifies the architecture (label, kind, parameter
    /// count and config hash).
    pub fn same_results(&self, other: &EvalReport) -> bool {
        self.base_acc == other.base_acc
            && self.new_acc == other.new_acc
            && self.all_acc == other.all_acc
            && self.harmonic_mean == other.harmonic_mean
            && self.diff_pct == other.diff_pct
            && self.base_classes == other.base_classes
            && self.new_classes == other.new_classes
            && self.meta.dataset_id == other.meta.dataset_id
            && self.meta.seed == other.meta.seed
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ExperimentOptions {
    pub base_share: f64,
    /// Class order used for the split; `None` keeps store order.
    pub ordering: Option<Vec<usize>>,
    /// Score new-class images against every prompt instead of new prompts only.
    pub eval_new_against_all: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            base_share: 0.5,
            ordering: None,
            eval_new_against_all: false,
        }
    }
}

/// Short hex digest identifying a fully resolved run configuration.
pub fn config_hash(kind: AdapterKind, adapter: &MmaConfig, train: &TrainConfig, opts: &ExperimentOptions) -> String {
    let key = format!("{kind:?}|{adapter:?}|{train:?}|{opts:?}");
    let digest = Sha256::digest(key.as_bytes());
    let mut s = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum EvalScope {
    Base,
    New,
    All,
}

impl EvalScope {
    pub fn name(self) -> &'static str {
        match self {
            EvalScope::Base => "base",
            EvalScope::New => "new",
            EvalScope::All => "all",
        }
    }
}

/// Everything a base-to-new run produces.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: EvalReport,
    pub split: ClassSplit,
    pub episode: Episode,
    pub outcome: TrainOutcome,
    pub model: AdapterModel,
    pub predictions: Vec<(EvalScope, Vec<Prediction>)>,
}

/// One adapter to run: a row label, its kind and its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSpec {
    pub label: String,
    pub kind: AdapterKind,
    pub config: MmaConfig,
}

impl AdapterSpec {
    pub fn new(label: impl Into<String>, kind: AdapterKind, config: MmaConfig) -> Self {
        AdapterSpec {
            label: label.into(),
            kind,
            config,
        }
    }
}

/// Test-split evaluations of one model on base, new and all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseNewScores {
    pub base: Evaluation,
    /// Absent when there are no new classes.
    pub new: Option<Evaluation>,
    pub all: Evaluation,
}

impl BaseNewScores {
    pub fn report(&self, label: &str, model: &AdapterModel, split: &ClassSplit, meta: RunMeta) -> EvalReport {
        let base_acc = self.base.accuracy();
        let new_acc = self.new.as_ref().map(Evaluation::accuracy);
        EvalReport {
            label: label.into(),
            adapter: model.kind(),
            base_acc,
            new_acc,
            all_acc: self.all.accuracy(),
            harmonic_mean: new_acc.and_then(|na| harmonic_mean(base_acc, na).ok()),
            diff_pct: new_acc.and_then(|na| diff_pct(base_acc, na)),
            param_count: model.parameter_count(),
            base_classes: split.base.len(),
            new_classes: split.new.len(),
            meta,
        }
    }

    pub fn into_predictions(self) -> Vec<(EvalScope, Vec<Prediction>)> {
        let mut out = alloc::vec![(EvalScope::Base, self.base.predictions)];
        if let Some(e) = self.new {
            out.push((EvalScope::New, e.predictions));
        }
        out.push((EvalScope::All, self.all.predictions));
        out
    }
}

/// Scores `model` on the test split: base images against base prompts, new
/// images against new prompts (or all prompts, per `opts`), and every
/// image against every prompt.
pub fn score_base_new<S: EmbeddingView + ?Sized>(
    model: &AdapterModel,
    store: &S,
    split: &ClassSplit,
    opts: &ExperimentOptions,
) -> Result<BaseNewScores, RunError> {
    let all: Vec<usize> = (0..store.num_classes()).collect();
    let base = evaluate(model, store, &split.base, SplitKind::Test)?;
    let new = if split.new.is_empty() {
        None
    } else if opts.eval_new_against_all {
        Some(evaluate_subset(model, store, &all, &split.new, SplitKind::Test)?)
    } else {
        Some(evaluate(model, store, &split.new, SplitKind::Test)?)
    };
    let all = evaluate(model, store, &all, SplitKind::Test)?;
    Ok(BaseNewScores { base, new, all })
}

/// Split, sample a few-shot episode of base classes from `train_store`,
/// train, then score base, new and all classes on `test_store`'s test split.
pub fn run_base_new_experiment<A, B>(
    train_store: &A,
    test_store: &B,
    adapter: &AdapterSpec,
    train_cfg: &TrainConfig,
    opts: &ExperimentOptions,
) -> Result<Experiment, RunError>
where
    A: EmbeddingView + ?Sized,
    B: EmbeddingView + ?Sized,
{
    train_cfg.validate()?;
    let n = test_store.num_classes();
    if train_store.num_classes() != n || train_store.emb_dim() != test_store.emb_dim() {
        return Err(DataError::Mismatch("training and test stores differ in classes or width".into()).into());
    }
    let split = split_classes(n, opts.base_share, opts.ordering.as_deref())?;
    let episode = sample_few_shot(train_store, &split.base, train_cfg.shots, train_cfg.val_shots, train_cfg.seed)?;
    let mut model = AdapterModel::new(adapter.kind, adapter.config.clone(), train_cfg.seed)?;
    let outcome = train(&mut model, train_store, &episode, train_cfg)?;
    let scores = score_base_new(&model, test_store, &split, opts)?;
    let meta = RunMeta {
        dataset_id: train_store.dataset_id().into(),
        seed: train_cfg.seed,
        config_hash: config_hash(adapter.kind, &adapter.config, train_cfg, opts),
    };
    let report = scores.report(&adapter.label, &model, &split, meta);
    let predictions = scores.into_predictions();
    Ok(Experiment {
        report,
        split,
        episode,
        outcome,
        model,
        predictions,
    })
}

// ----------------------------------------------------------------------
// sweeps and ablations

pub const DEFAULT_SWEEP_SHARES: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepPoint {
    pub share: f64,
    pub report: EvalReport,
}

pub fn check_shares(shares: &[f64]) -> Result<(), ConfigError> {
    match shares.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
        Some(s) => Err(invalid(format!("sweep shares must lie in (0, 1), got {s}"))),
        None if shares.is_empty() => Err(invalid("sweep needs at least one share")),
        None => Ok(()),
    }
}

/// One base-to-new experiment per class share.
pub fn run_class_share_sweep<S: EmbeddingView + ?Sized>(
    store: &S,
    adapter: &AdapterSpec,
    train_cfg: &TrainConfig,
    shares: &[f64],
    opts: &ExperimentOptions,
) -> Result<Vec<SweepPoint>, RunError> {
    check_shares(shares)?;
    shares
        .iter()
        .map(|&share| {
            let o = ExperimentOptions {
                base_share: share,
                ..opts.clone()
            };
            let e = run_base_new_experiment(store, store, adapter, train_cfg, &o)?;
            Ok(SweepPoint { share, report: e.report })
        })
        .collect()
}

/// Reports of one adapter trained on clean and on noisy data, both scored
/// on the clean test split.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoisePair {
    pub label: String,
    pub clean: EvalReport,
    pub noisy: EvalReport,
}

pub fn run_noise_experiment(
    clean: &EmbeddingStore,
    noisy: &EmbeddingStore,
    adapters: &[AdapterSpec],
    train_cfg: &TrainConfig,
    opts: &ExperimentOptions,
) -> Result<Vec<NoisePair>, RunError> {
    if !class_names_match(clean, noisy) {
        return Err(DataError::Mismatch(format!(
            "noisy store {} does not share classes with {}",
            noisy.dataset_id, clean.dataset_id
        ))
        .into());
    }
    adapters
        .iter()
        .map(|a| {
            let c = run_base_new_experiment(clean, clean, a, train_cfg, opts)?;
            let n = run_base_new_experiment(noisy, clean, a, train_cfg, opts)?;
            Ok(NoisePair {
                label: a.label.clone(),
                clean: c.report,
                noisy: n.report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationGrid {
    pub attention: Vec<AttentionVariant>,
    pub updown: Vec<UpDownVariant>,
    pub adapt_text: Vec<bool>,
    /// Prepend the zero-shot and two-branch baselines.
    pub baselines: bool,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            attention: alloc::vec![AttentionVariant::Mha, AttentionVariant::TransformerBlock],
            updown: alloc::vec![UpDownVariant::Linear, UpDownVariant::Mlp],
            adapt_text: alloc::vec![true, false],
            baselines: true,
        }
    }
}

pub const BASELINE_LABEL: &str = "CLIP Baseline";
pub const CLIP_ADAPTER_LABEL: &str = "CLIP-Adapter";

pub fn variant_label(attention: AttentionVariant, updown: UpDownVariant, adapt_text: bool) -> String {
    let a = match attention {
        AttentionVariant::Mha => "MHA",
        AttentionVariant::TransformerBlock => "Transformer",
    };
    let u = match updown {
        UpDownVariant::Linear => "linear",
        UpDownVariant::Mlp => "MLP",
    };
    let t = if adapt_text { "" } else { ", w/o text adaptation" };
    format!("{a} adapter, {u} up-/downsampling{t}")
}

/// Cells of the grid in row order: baselines first, then attention-major,
/// up/down, text adaptation.
pub fn ablation_cells(grid: &AblationGrid, base: &MmaConfig) -> Vec<AdapterSpec> {
    let mut cells = Vec::new();
    if grid.baselines {
        cells.push(AdapterSpec::new(BASELINE_LABEL, AdapterKind::IdentityClip, base.clone()));
        cells.push(AdapterSpec::new(CLIP_ADAPTER_LABEL, AdapterKind::ClipAdapter, base.clone()));
    }
    for &attention in &grid.attention {
        for &updown in &grid.updown {
            for &adapt_text in &grid.adapt_text {
                let config = MmaConfig {
                    attention,
                    updown,
                    adapt_text,
                    ..base.clone()
                };
                cells.push(AdapterSpec::new(
                    variant_label(attention, updown, adapt_text),
                    AdapterKind::Mma,
                    config,
                ));
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationRow {
    pub spec_label: String,
    pub kind: AdapterKind,
    pub attention: AttentionVariant,
    pub updown: UpDownVariant,
    pub adapt_text: bool,
    pub report: EvalReport,
}

pub fn ablation_row(cell: &AdapterSpec, report: EvalReport) -> AblationRow {
    AblationRow {
        spec_label: cell.label.clone(),
        kind: cell.kind,
        attention: cell.config.attention,
        updown: cell.config.updown,
        adapt_text: cell.config.adapt_text,
        report,
    }
}

/// Runs every cell sequentially; rows keep cell order.
pub fn run_ablation_grid<S: EmbeddingView + ?Sized>(
    store: &S,
    grid: &AblationGrid,
    base: &MmaConfig,
    train_cfg: &TrainConfig,
    opts: &ExperimentOptions,
) -> Result<Vec<AblationRow>, RunError> {
    ablation_cells(grid, base)
        .iter()
        .map(|cell| {
            let e = run_base_new_experiment(store, store, cell, train_cfg, opts)?;
            Ok(ablation_row(cell, e.report))
        })
        .collect()
}
