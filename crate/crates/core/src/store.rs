//! Frozen embedding datasets: the in-memory store, read-only access used by
//! training and evaluation, synthetic generation and embedding-space noise.
//!
//! Values are held as `f64` but are always exactly representable as `f32`,
//! which is the on-disk precision. Load-after-save is therefore lossless.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::DataError;
use crate::rng::{stream, stream_rng, Rng};

/// Rows whose L2 norm deviates from one by more than this are rejected.
pub const UNIT_NORM_TOL: f64 = 1e-4;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 2] = [SplitKind::Train, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

/// `N x C` image embeddings with one class index per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageSplit {
    pub images: Vec<f64>,
    pub labels: Vec<u32>,
}

impl ImageSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, idx: usize, dim: usize) -> &[f64] {
        &self.images[idx * dim..(idx + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dataset_id: String,
    pub emb_dim: usize,
    pub class_names: Vec<String>,
    pub prompt_template: String,
    /// `P x C`, one prompt embedding per class.
    pub text: Vec<f64>,
    pub train: ImageSplit,
    pub test: ImageSplit,
}

/// Read access to frozen embeddings, as seen by training and evaluation.
pub trait EmbeddingView {
    fn dataset_id(&self) -> &str;
    fn emb_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn text_embedding(&self, class: usize) -> &[f64];
    fn split_len(&self, split: SplitKind) -> usize;
    fn label(&self, split: SplitKind, idx: usize) -> usize;
    fn image(&self, split: SplitKind, idx: usize) -> &[f64];
}

fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

fn normalize_row(row: &mut [f64]) {
    let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
    row.iter_mut().for_each(|v| *v /= norm);
}

fn row_norm(row: &[f64]) -> f64 {
    libm::sqrt(row.iter().map(|v| v * v).sum::<f64>())
}

impl EmbeddingStore {
    /// Builds a store, rounding all embeddings to `f32` precision, and
    /// checks every invariant.
    pub fn new(
        dataset_id: impl Into<String>,
        emb_dim: usize,
        class_names: Vec<String>,
        prompt_template: impl Into<String>,
        mut text: Vec<f64>,
        mut train: ImageSplit,
        mut test: ImageSplit,
    ) -> Result<Self, DataError> {
        quantize(&mut text);
        quantize(&mut train.images);
        quantize(&mut test.images);
        let store = EmbeddingStore {
            dataset_id: dataset_id.into(),
            emb_dim,
            class_names,
            prompt_template: prompt_template.into(),
            text,
            train,
            test,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, kind: SplitKind) -> &ImageSplit {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, kind: SplitKind) -> &mut ImageSplit {
        match kind {
            SplitKind::Train => &mut self.train,
            SplitKind::Test => &mut self.test,
        }
    }

    pub fn text_row(&self, class: usize) -> &[f64] {
        &self.text[class * self.emb_dim..(class + 1) * self.emb_dim]
    }

    /// Checks shape consistency, label range, finiteness and unit norms.
    pub fn validate(&self) -> Result<(), DataError> {
        let c = self.emb_dim;
        if c == 0 {
            return Err(DataError::Invalid("emb_dim must be positive".into()));
        }
        if self.text.len() != self.num_classes() * c {
            return Err(DataError::Invalid(format!(
                "text matrix has {} values, expected {} classes x {c}",
                self.text.len(),
                self.num_classes()
            )));
        }
        check_rows("text", &self.text, c)?;
        for kind in SplitKind::ALL {
            let s = self.split(kind);
            if s.images.len() != s.labels.len() * c {
                return Err(DataError::Invalid(format!(
                    "{} split has {} values for {} labels at width {c}",
                    kind.name(),
                    s.images.len(),
                    s.labels.len()
                )));
            }
            if let Some(l) = s.labels.iter().find(|&&l| l as usize >= self.num_classes()) {
                return Err(DataError::Invalid(format!(
                    "{} split label {l} out of range for {} classes",
                    kind.name(),
                    self.num_classes()
                )));
            }
            check_rows(kind.name(), &s.images, c)?;
        }
        Ok(())
    }
}

/// Finite values and unit norm for every row; the error names the first
/// offending row.
pub fn check_rows(what: &str, values: &[f64], dim: usize) -> Result<(), DataError> {
    for (r, row) in values.chunks(dim).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("{what} row {r} has a non-finite value")));
        }
        let n = row_norm(row);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(DataError::Invalid(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

impl EmbeddingView for EmbeddingStore {
    fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn text_embedding(&self, class: usize) -> &[f64] {
        self.text_row(class)
    }

    fn split_len(&self, split: SplitKind) -> usize {
        self.split(split).len()
    }

    fn label(&self, split: SplitKind, idx: usize) -> usize {
        self.split(split).labels[idx] as usize
    }

    fn image(&self, split: SplitKind, idx: usize) -> &[f64] {
        self.split(split).row(idx, self.emb_dim)
    }
}

// ----------------------------------------------------------------------
// synthetic data

/// Parameters of a synthetic store.
///
/// Class prototypes are uniform on the unit sphere of a random
/// `intrinsic_dim`-dimensional subspace (the whole space when zero). The prompt embedding of a
/// class is its prototype, optionally jittered by `text_noise`. Each image is
/// `normalize(prototype + gap + g / separation)` with `g ~ N(0, I)` and `gap`
/// a random vector of norm `modality_gap` shared by all images. A separation
/// of zero gives pure noise and an infinite one removes the per-image term.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub emb_dim: usize,
    pub separation: f64,
    /// Standard deviation of the per-coordinate jitter added to prompt embeddings.
    pub text_noise: f64,
    /// Norm of the offset shared by every image embedding.
    pub modality_gap: f64,
    /// Dimension of the subspace holding the prototypes; 0 means `emb_dim`.
    pub intrinsic_dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_classes: usize, per_class: usize, emb_dim: usize, separation: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_classes,
            train_per_class: per_class,
            test_per_class: per_class,
            emb_dim,
            separation,
            text_noise: 0.0,
            modality_gap: 0.0,
            intrinsic_dim: 0,
            seed,
        }
    }
}

fn gaussian_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `sum_i z[i] * basis[i]`.
fn span(basis: &[f64], z: &[f64], c: usize) -> Vec<f64> {
    let mut p = alloc::vec![0.0; c];
    for (zi, row) in z.iter().zip(basis.chunks(c)) {
        p.iter_mut().zip(row).for_each(|(v, r)| *v += zi * r);
    }
    p
}

/// `r` orthonormal rows of length `c` by Gram-Schmidt on Gaussian draws.
fn orthonormal_basis(rng: &mut Rng, r: usize, c: usize) -> Vec<f64> {
    let mut rows: Vec<f64> = Vec::with_capacity(r * c);
    while rows.len() < r * c {
        let mut v = gaussian_vec(rng, c);
        for prev in rows.chunks(c) {
            let d: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= d * b);
        }
        let n = libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
        // a draw (numerically) inside the current span is discarded
        if n > 1e-6 {
            rows.extend(v.iter().map(|a| a / n));
        }
    }
    rows
}

fn synth_split(spec: &SyntheticSpec, prototypes: &[f64], gap: &[f64], per_class: usize, rng: &mut Rng) -> ImageSplit {
    let c = spec.emb_dim;
    let mut split = ImageSplit::default();
    for class in 0..spec.n_classes {
        let proto = &prototypes[class * c..(class + 1) * c];
        for _ in 0..per_class {
            let g = gaussian_vec(rng, c);
            let mut row: Vec<f64> = if spec.separation == 0.0 {
                g
            } else {
                let s = 1.0 / spec.separation;
                proto.iter().zip(gap).zip(&g).map(|((p, o), n)| p + o + s * n).collect()
            };
            normalize_row(&mut row);
            split.images.extend_from_slice(&row);
            split.labels.push(class as u32);
        }
    }
    split
}

/// Generates a labeled store; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingStore, DataError> {
    if !(spec.separation >= 0.0) || !(spec.text_noise >= 0.0) || !(spec.modality_gap >= 0.0) {
        return Err(DataError::Invalid("separation, text_noise and modality_gap must be non-negative".into()));
    }
    if spec.n_classes == 0 || spec.emb_dim == 0 {
        return Err(DataError::Invalid("need at least one class and one dimension".into()));
    }
    let c = spec.emb_dim;
    if spec.intrinsic_dim > c {
        return Err(DataError::Invalid(format!(
            "intrinsic_dim {} exceeds emb_dim {c}",
            spec.intrinsic_dim
        )));
    }
    let basis = match spec.intrinsic_dim {
        0 => None,
        r => Some(orthonormal_basis(&mut stream_rng(spec.seed, stream::SYNTH_BASIS), r, c)),
    };
    let mut proto_rng = stream_rng(spec.seed, stream::SYNTH_PROTOTYPES);
    let mut prototypes = Vec::with_capacity(spec.n_classes * c);
    for _ in 0..spec.n_classes {
        let mut p = match &basis {
            None => gaussian_vec(&mut proto_rng, c),
            Some(b) => span(b, &gaussian_vec(&mut proto_rng, spec.intrinsic_dim), c),
        };
        normalize_row(&mut p);
        prototypes.extend_from_slice(&p);
    }

    let mut text = prototypes.clone();
    if spec.text_noise > 0.0 {
        let mut rng = stream_rng(spec.seed, stream::SYNTH_TEXT);
        for row in text.chunks_mut(c) {
            for v in row.iter_mut() {
                *v += spec.text_noise * rng.sample::<f64, _>(StandardNormal);
            }
            normalize_row(row);
        }
    }

    let mut gap = alloc::vec![0.0; c];
    if spec.modality_gap > 0.0 {
        let mut rng = stream_rng(spec.seed, stream::SYNTH_GAP);
        gap = match &basis {
            None => gaussian_vec(&mut rng, c),
            Some(b) => span(b, &gaussian_vec(&mut rng, spec.intrinsic_dim), c),
        };
        normalize_row(&mut gap);
        gap.iter_mut().for_each(|v| *v *= spec.modality_gap);
    }
    let train = synth_split(spec, &prototypes, &gap, spec.train_per_class, &mut stream_rng(spec.seed, stream::SYNTH_TRAIN));
    let test = synth_split(spec, &prototypes, &gap, spec.test_per_class, &mut stream_rng(spec.seed, stream::SYNTH_TEST));
    let class_names = (0..spec.n_classes).map(|i| format!("class_{i:03}")).collect();
    let id = format!(
        "synth-k{}-c{}-r{}-sep{}-tn{}-gap{}-s{}",
        spec.n_classes, c, spec.intrinsic_dim, spec.separation, spec.text_noise, spec.modality_gap, spec.seed
    );
    EmbeddingStore::new(id, c, class_names, DEFAULT_PROMPT_TEMPLATE, text, train, test)
}

// ----------------------------------------------------------------------
// noise

/// `rows + sigma * g` without re-normalization.
pub(crate) fn perturb_rows(rows: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    rows.iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Adds i.i.d. `N(0, sigma^2)` noise to the image embeddings of the chosen
/// splits and re-normalizes each row. Text embeddings are untouched.
/// `sigma == 0` returns an identical copy, including the dataset id.
pub fn add_gaussian_noise(
    store: &EmbeddingStore,
    sigma: f64,
    seed: u64,
    splits: &[SplitKind],
) -> Result<EmbeddingStore, DataError> {
    if !(sigma >= 0.0) {
        return Err(DataError::Invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(store.clone());
    }
    let mut out = store.clone();
    let c = store.emb_dim;
    for (i, &kind) in SplitKind::ALL.iter().enumerate() {
        if !splits.contains(&kind) {
            continue;
        }
        let mut rng = stream_rng(seed, stream::NOISE + 16 * i as u64);
        let mut noisy = perturb_rows(&store.split(kind).images, sigma, &mut rng);
        for row in noisy.chunks_mut(c) {
            normalize_row(row);
        }
        quantize(&mut noisy);
        out.split_mut(kind).images = noisy;
    }
    let names: Vec<&str> = splits.iter().map(|s| s.name()).collect();
    out.dataset_id = format!("{}+gauss{}-{}-s{seed}", store.dataset_id, sigma, names.join("."));
    out.validate()?;
    Ok(out)
}

pub fn class_names_match(a: &EmbeddingStore, b: &EmbeddingStore) -> bool {
    a.class_names == b.class_names && a.emb_dim == b.emb_dim
}

impl core::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitKind::Train),
            "test" => Ok(SplitKind::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}
