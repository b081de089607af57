use std::cell::RefCell;
use std::collections::BTreeSet;

use mma_core::adapters::{AdapterKind, AdapterModel, MmaConfig};
use mma_core::eval::{predict, run_base_new_experiment, split_classes, AdapterSpec, ExperimentOptions};
use mma_core::store::{generate_synthetic, EmbeddingStore, EmbeddingView, SplitKind, SyntheticSpec};
use mma_core::train::{episode_loss, gather_text, sample_few_shot, train, Monitor, TrainConfig};

fn toy_cfg() -> MmaConfig {
    MmaConfig {
        heads: 2,
        ..MmaConfig::with_emb_dim(16)
    }
}

fn store(n_classes: usize, separation: f64, seed: u64) -> EmbeddingStore {
    generate_synthetic(&SyntheticSpec::new(n_classes, 20, 16, separation, seed)).unwrap()
}

/// Every training image is strictly closer to its own prompt than to any other.
fn nearest_prompt_separable(s: &EmbeddingStore) -> bool {
    (0..s.split_len(SplitKind::Train)).all(|i| {
        let x = s.image(SplitKind::Train, i);
        let y = s.label(SplitKind::Train, i);
        let score = |c: usize| s.text_embedding(c).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        (0..s.num_classes()).all(|c| c == y || score(c) < score(y))
    })
}

#[test]
fn separable_two_class_task_is_fit_within_fifty_epochs() {
    let s = store(2, 3.0, 1);
    assert!(nearest_prompt_separable(&s));
    let cfg = TrainConfig {
        max_epochs: 50,
        patience: 50,
        monitor: Monitor::TrainLoss,
        ..TrainConfig::default()
    };
    let episode = sample_few_shot(&s, &[0, 1], 16, 4, 0).unwrap();
    let mut model = AdapterModel::new(AdapterKind::Mma, toy_cfg(), 0).unwrap();
    let initial = episode_loss(&model, &s, &[0, 1], &episode.train).unwrap();
    let outcome = train(&mut model, &s, &episode, &cfg).unwrap();
    assert!(outcome.history.len() <= 50);
    let final_loss = episode_loss(&model, &s, &[0, 1], &episode.train).unwrap();
    assert!(final_loss < initial, "{final_loss} !< {initial}");

    let text = gather_text(&s, &[0, 1]).unwrap();
    let preds = predict(&model, &text, &s, SplitKind::Train, &episode.train).unwrap();
    let labels: Vec<usize> = episode.train.iter().map(|&i| s.label(SplitKind::Train, i)).collect();
    assert_eq!(preds, labels);
}

#[test]
fn lambda_one_leaves_parameters_in_place() {
    let s = store(6, 2.0, 2);
    let episode = sample_few_shot(&s, &[0, 1, 2], 16, 4, 3).unwrap();
    let mut model = AdapterModel::new(AdapterKind::Mma, toy_cfg().with_lambda(1.0), 3).unwrap();
    let before = model.flat_parameters();
    let cfg = TrainConfig {
        max_epochs: 5,
        ..TrainConfig::default()
    };
    train(&mut model, &s, &episode, &cfg).unwrap();
    assert_eq!(model.flat_parameters(), before);

    let text = gather_text(&s, &[0, 1, 2]).unwrap();
    let images = mma_core::train::gather_images(&s, SplitKind::Train, &episode.train).unwrap();
    model.logits(&text, &images).unwrap().cross_entropy(&[0; 36]).unwrap().backward().unwrap();
    for p in model.params() {
        assert!(p.tensor.grad().unwrap().iter().all(|g| *g == 0.0), "{}", p.name);
    }
}

#[test]
fn training_is_bitwise_reproducible_and_leaves_store_untouched() {
    let s = store(6, 1.5, 4);
    let pristine = s.clone();
    let cfg = TrainConfig {
        max_epochs: 8,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let episode = sample_few_shot(&s, &[0, 1, 2], cfg.shots, cfg.val_shots, cfg.seed).unwrap();
        let mut model = AdapterModel::new(AdapterKind::Mma, toy_cfg(), cfg.seed).unwrap();
        let outcome = train(&mut model, &s, &episode, &cfg).unwrap();
        (model.flat_parameters(), outcome)
    };
    let (pa, oa) = run();
    let (pb, ob) = run();
    assert_eq!(pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(oa, ob);
    assert_eq!(s, pristine);
}

#[test]
fn early_stopping_respects_patience() {
    let s = store(6, 1.0, 5);
    let cfg = TrainConfig {
        patience: 2,
        batch_size: 8,
        max_epochs: 100,
        ..TrainConfig::default()
    };
    let episode = sample_few_shot(&s, &[0, 1, 2], 16, 4, 0).unwrap();
    let mut model = AdapterModel::new(AdapterKind::Mma, toy_cfg(), 0).unwrap();
    let outcome = train(&mut model, &s, &episode, &cfg).unwrap();
    let best = outcome.best_epoch.unwrap();
    let last = outcome.history.last().unwrap().epoch;
    assert!(last - best <= cfg.patience);
    if outcome.stopped_early {
        assert_eq!(last - best, cfg.patience);
    }
    let best_val = outcome.history[best - 1].val_acc;
    assert!(outcome.history.iter().all(|r| r.val_acc <= best_val));
    // the kept parameters are the best epoch's: re-scoring val reproduces it
    let text = gather_text(&s, &[0, 1, 2]).unwrap();
    let preds = predict(&model, &text, &s, SplitKind::Train, &episode.val).unwrap();
    let hits = preds
        .iter()
        .zip(&episode.val)
        .filter(|(p, &i)| **p == s.label(SplitKind::Train, i))
        .count();
    assert_eq!(100.0 * hits as f64 / episode.val.len() as f64, best_val);
}

/// Wraps a store and records which prompts and images are read.
struct Tracking<'a> {
    inner: &'a EmbeddingStore,
    text: RefCell<BTreeSet<usize>>,
    images: RefCell<BTreeSet<(SplitKind, usize)>>,
}

impl EmbeddingView for Tracking<'_> {
    fn dataset_id(&self) -> &str {
        self.inner.dataset_id()
    }
    fn emb_dim(&self) -> usize {
        self.inner.emb_dim()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn text_embedding(&self, class: usize) -> &[f64] {
        self.text.borrow_mut().insert(class);
        self.inner.text_embedding(class)
    }
    fn split_len(&self, split: SplitKind) -> usize {
        self.inner.split_len(split)
    }
    fn label(&self, split: SplitKind, idx: usize) -> usize {
        self.inner.label(split, idx)
    }
    fn image(&self, split: SplitKind, idx: usize) -> &[f64] {
        self.images.borrow_mut().insert((split, idx));
        self.inner.image(split, idx)
    }
}

#[test]
fn training_never_reads_new_classes_or_test_images() {
    let s = store(8, 2.0, 6);
    let tracked = Tracking {
        inner: &s,
        text: RefCell::default(),
        images: RefCell::default(),
    };
    let split = split_classes(8, 0.5, None).unwrap();
    let cfg = TrainConfig {
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let episode = sample_few_shot(&tracked, &split.base, cfg.shots, cfg.val_shots, 0).unwrap();
    let mut model = AdapterModel::new(AdapterKind::Mma, toy_cfg(), 0).unwrap();
    train(&mut model, &tracked, &episode, &cfg).unwrap();

    let text = tracked.text.borrow();
    assert!(text.iter().all(|c| split.base.contains(c)), "{text:?}");
    let episode_rows: BTreeSet<usize> = episode.all_indices().into_iter().collect();
    for &(kind, idx) in tracked.images.borrow().iter() {
        assert_eq!(kind, SplitKind::Train);
        assert!(episode_rows.contains(&idx));
        assert!(split.base.contains(&s.label(SplitKind::Train, idx)));
    }
}

#[test]
fn lambda_one_report_equals_zero_shot_report() {
    let s = store(10, 1.2, 7);
    let cfg = TrainConfig {
        max_epochs: 6,
        ..TrainConfig::default()
    };
    let opts = ExperimentOptions::default();
    let zs = run_base_new_experiment(&s, &s, &AdapterSpec::new("zs", AdapterKind::IdentityClip, toy_cfg()), &cfg, &opts).unwrap();
    let mma = run_base_new_experiment(&s, &s, &AdapterSpec::new("mma", AdapterKind::Mma, toy_cfg().with_lambda(1.0)), &cfg, &opts).unwrap();
    assert!(zs.report.same_results(&mma.report));
    assert_eq!(zs.predictions, mma.predictions);
    assert!(zs.report.base_acc > 20.0 && zs.report.base_acc < 100.0);
}
