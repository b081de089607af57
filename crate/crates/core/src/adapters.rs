//! Adapters over frozen embeddings: zero-shot identity, the two-branch
//! bottleneck baseline and the multi-modal attention adapter with its
//! architecture variants.
//!
//! Every model maps `text [P, C]` and `image [B, C]` to class logits `[B, P]`
//! by cosine similarity scaled by `logit_scale`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{invalid, ConfigError, RunError, TensorError};
use crate::rng::{stream, stream_rng, Rng};
use crate::tensor::{Parameter, Tensor, MASK_NEG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AdapterKind {
    /// Zero-shot classification, no trainable parameters.
    IdentityClip,
    ClipAdapter,
    Mma,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::IdentityClip => "identity_clip",
            AdapterKind::ClipAdapter => "clip_adapter",
            AdapterKind::Mma => "mma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionVariant {
    Mha,
    TransformerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum UpDownVariant {
    Linear,
    Mlp,
}

/// Hyperparameters shared by all adapter kinds.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MmaConfig {
    pub emb_dim: usize,
    /// Attention width is `emb_dim / down_factor`.
    pub down_factor: usize,
    /// Upsampling bottleneck width is `emb_dim / mid_factor`.
    pub mid_factor: usize,
    pub heads: usize,
    /// Weight of the original text embedding in the residual blend.
    pub lambda_text: f64,
    /// Weight of the original image embedding in the residual blend.
    pub lambda_image: f64,
    /// When off, the adapted text output is discarded (text rows still feed attention).
    pub adapt_text: bool,
    pub attention: AttentionVariant,
    pub updown: UpDownVariant,
    pub logit_scale: f64,
    /// Bottleneck reduction of the two-branch baseline.
    pub clip_reduction: usize,
}

impl Default for MmaConfig {
    fn default() -> Self {
        MmaConfig {
            emb_dim: 512,
            down_factor: 4,
            mid_factor: 16,
            heads: 4,
            lambda_text: 0.2,
            lambda_image: 0.2,
            adapt_text: true,
            attention: AttentionVariant::Mha,
            updown: UpDownVariant::Linear,
            logit_scale: 100.0,
            clip_reduction: 4,
        }
    }
}

impl MmaConfig {
    pub fn with_emb_dim(emb_dim: usize) -> Self {
        MmaConfig {
            emb_dim,
            ..Default::default()
        }
    }

    /// Sets both blend ratios.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda_text = lambda;
        self.lambda_image = lambda;
        self
    }

    pub fn hidden_dim(&self) -> usize {
        self.emb_dim / self.down_factor
    }

    pub fn mid_dim(&self) -> usize {
        self.emb_dim / self.mid_factor
    }

    pub fn validate(&self, kind: AdapterKind) -> Result<(), ConfigError> {
        if self.emb_dim == 0 {
            return Err(invalid("emb_dim must be positive"));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(invalid(format!("logit_scale must be positive, got {}", self.logit_scale)));
        }
        check_lambda(self.lambda_text)?;
        check_lambda(self.lambda_image)?;
        match kind {
            AdapterKind::IdentityClip => {}
            AdapterKind::ClipAdapter => {
                if self.clip_reduction == 0 || !self.emb_dim.is_multiple_of(self.clip_reduction) {
                    return Err(invalid(format!(
                        "emb_dim {} not divisible by clip_reduction {}",
                        self.emb_dim, self.clip_reduction
                    )));
                }
            }
            AdapterKind::Mma => {
                for (name, f) in [("down_factor", self.down_factor), ("mid_factor", self.mid_factor)] {
                    if f == 0 || !self.emb_dim.is_multiple_of(f) {
                        return Err(invalid(format!("emb_dim {} not divisible by {name} {f}", self.emb_dim)));
                    }
                }
                if self.heads == 0 || !self.hidden_dim().is_multiple_of(self.heads) {
                    return Err(invalid(format!(
                        "attention width {} not divisible by {} heads",
                        self.hidden_dim(),
                        self.heads
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_lambda(l: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&l) {
        Ok(())
    } else {
        Err(invalid(format!("blend ratio must lie in [0, 1], got {l}")))
    }
}

// ----------------------------------------------------------------------
// parameters and layers

/// Flat, ordered parameter list; layers refer to entries by index.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    fn push(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> usize {
        self.params
            .push(Parameter::new(name, data, shape).expect("parameter data sized from shape"));
        self.params.len() - 1
    }

    fn get(&self, idx: usize) -> &Tensor {
        &self.params[idx].tensor
    }

    pub fn as_slice(&self) -> &[Parameter] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter] {
        &mut self.params
    }
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect()
}

#[derive(Debug, Clone)]
struct Linear {
    weight: usize,
    bias: Option<usize>,
}

impl Linear {
    fn new(ps: &mut ParamSet, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = ps.push(format!("{name}.weight"), glorot(rng, fan_in, fan_out), &[fan_in, fan_out]);
        let bias = bias.then(|| ps.push(format!("{name}.bias"), vec![0.0; fan_out], &[fan_out]));
        Linear { weight, bias }
    }

    /// `x [.., in] -> [.., out]`
    fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = x.matmul(ps.get(self.weight))?;
        match self.bias {
            Some(b) => y.add(ps.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: usize,
    shift: usize,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: ps.push(format!("{name}.weight"), vec![1.0; dim], &[dim]),
            shift: ps.push(format!("{name}.bias"), vec![0.0; dim], &[dim]),
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor, TensorError> {
        x.layer_norm(LAYER_NORM_EPS)?.mul(ps.get(self.gain))?.add(ps.get(self.shift))
    }
}

// ----------------------------------------------------------------------
// attention

/// Additive cross-modal mask over a sequence of `prompts` text rows followed
/// by `images` image rows. Entry `(i, j)` is 0 when exactly one of `i`, `j`
/// is a text position, and [`MASK_NEG`] otherwise (including the diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub prompts: usize,
    pub images: usize,
    /// Row-major `T x T`.
    pub matrix: Vec<f64>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.prompts + self.images
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.matrix[i * self.len() + j] == 0.0
    }

    pub fn to_tensor(&self) -> Tensor {
        let t = self.len();
        Tensor::new(self.matrix.clone(), &[t, t]).expect("square mask")
    }
}

pub fn make_mask(prompts: usize, images: usize) -> AttentionMask {
    let t = prompts + images;
    let mut matrix = vec![MASK_NEG; t * t];
    for i in 0..t {
        for j in 0..t {
            let text_to_image = i < prompts && j >= prompts;
            let image_to_text = i >= prompts && j < prompts;
            if text_to_image || image_to_text {
                matrix[i * t + j] = 0.0;
            }
        }
    }
    AttentionMask {
        prompts,
        images,
        matrix,
    }
}

#[derive(Debug, Clone)]
struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new(ps: &mut ParamSet, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(ps, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(ps, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(ps, rng, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(ps, rng, &format!("{name}.out"), dim, dim, true),
            heads,
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let proj = |l: &Linear| Projection {
            weight: ps.get(l.weight),
            bias: l.bias.map(|b| ps.get(b)),
        };
        masked_mha(x, mask, self.heads, [proj(&self.q), proj(&self.k), proj(&self.v), proj(&self.out)])
    }
}

/// An affine map `x W + b` applied along the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Projection<'a> {
    pub weight: &'a Tensor,
    pub bias: Option<&'a Tensor>,
}

impl Projection<'_> {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let y = x.matmul(self.weight)?;
        match self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

/// Masked multi-head attention over `x [T, B, d]` with projections
/// `[query, key, value, output]`. Returns the output `[T, B, d]` and the
/// post-softmax weights `[B, heads, T, T]`.
pub fn masked_mha(x: &Tensor, mask: &Tensor, heads: usize, proj: [Projection<'_>; 4]) -> Result<(Tensor, Tensor), TensorError> {
    if x.rank() != 3 || heads == 0 || !x.shape()[2].is_multiple_of(heads) {
        return Err(TensorError::ShapeMismatch {
            op: "masked_mha",
            lhs: x.shape().to_vec(),
            rhs: vec![heads],
        });
    }
    let (t, b, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dk = d / heads;
    let split_heads = |y: Tensor| -> Result<Tensor, TensorError> {
        y.reshape(&[t, b, heads, dk])?.permute(&[1, 2, 0, 3])
    };
    let [pq, pk, pv, po] = proj;
    let q = split_heads(pq.apply(x)?)?;
    let k = split_heads(pk.apply(x)?)?;
    let v = split_heads(pv.apply(x)?)?;
    let scores = q
        .matmul(&k.transpose(2, 3)?)?
        .scale(1.0 / libm::sqrt(dk as f64))
        .add(mask)?;
    let weights = scores.softmax(3)?;
    let ctx = weights.matmul(&v)?.permute(&[2, 0, 1, 3])?.reshape(&[t, b, d])?;
    Ok((po.apply(&ctx)?, weights))
}

/// Post-norm encoder block around the masked attention.
#[derive(Debug, Clone)]
struct TransformerBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

const FF_EXPANSION: usize = 4;

impl TransformerBlock {
    fn new(ps: &mut ParamSet, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Self {
        let attn = MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), dim, heads);
        let norm1 = LayerNorm::new(ps, &format!("{name}.norm1"), dim);
        let ff1 = Linear::new(ps, rng, &format!("{name}.ff1"), dim, FF_EXPANSION * dim, true);
        let ff2 = Linear::new(ps, rng, &format!("{name}.ff2"), FF_EXPANSION * dim, dim, true);
        let norm2 = LayerNorm::new(ps, &format!("{name}.norm2"), dim);
        TransformerBlock {
            attn,
            norm1,
            ff1,
            ff2,
            norm2,
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let (a, weights) = self.attn.forward(ps, x, mask)?;
        let y = self.norm1.forward(ps, &x.add(&a)?)?;
        let f = self.ff2.forward(ps, &self.ff1.forward(ps, &y)?.gelu())?;
        Ok((self.norm2.forward(ps, &y.add(&f)?)?, weights))
    }
}

#[derive(Debug, Clone)]
enum AttentionBlock {
    Mha(MultiHeadAttention),
    Transformer(TransformerBlock),
}

#[derive(Debug, Clone)]
struct MmaNet {
    /// One linear layer, or two with GELU between for the MLP variant.
    down: Vec<Linear>,
    block: AttentionBlock,
    up1: Linear,
    up2: Linear,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    fc1: Linear,
    fc2: Linear,
}

impl Bottleneck {
    fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor, TensorError> {
        self.fc2.forward(ps, &self.fc1.forward(ps, x)?.relu())
    }
}

#[derive(Debug, Clone)]
struct ClipAdapterNet {
    text: Bottleneck,
    image: Bottleneck,
}

#[derive(Debug, Clone)]
enum Arch {
    Identity,
    ClipAdapter(ClipAdapterNet),
    Mma(MmaNet),
}

/// A trainable adapter: architecture plus its flat parameter list.
#[derive(Debug, Clone)]
pub struct AdapterModel {
    kind: AdapterKind,
    config: MmaConfig,
    params: ParamSet,
    arch: Arch,
}

impl AdapterModel {
    /// Builds a freshly initialized model. Weights are Glorot-uniform and
    /// biases zero, drawn from the init stream of `seed`.
    pub fn new(kind: AdapterKind, config: MmaConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate(kind)?;
        let mut rng = stream_rng(seed, stream::INIT);
        let mut ps = ParamSet::default();
        let c = config.emb_dim;
        let arch = match kind {
            AdapterKind::IdentityClip => Arch::Identity,
            AdapterKind::ClipAdapter => {
                let h = c / config.clip_reduction;
                let mut branch = |name: &str| Bottleneck {
                    fc1: Linear::new(&mut ps, &mut rng, &format!("clip_adapter.{name}.fc1"), c, h, false),
                    fc2: Linear::new(&mut ps, &mut rng, &format!("clip_adapter.{name}.fc2"), h, c, false),
                };
                let text = branch("text");
                let image = branch("image");
                Arch::ClipAdapter(ClipAdapterNet { text, image })
            }
            AdapterKind::Mma => {
                let (d, m) = (config.hidden_dim(), config.mid_dim());
                let down = match config.updown {
                    UpDownVariant::Linear => vec![Linear::new(&mut ps, &mut rng, "mma.down", c, d, true)],
                    UpDownVariant::Mlp => vec![
                        Linear::new(&mut ps, &mut rng, "mma.down.0", c, d, true),
                        Linear::new(&mut ps, &mut rng, "mma.down.1", d, d, true),
                    ],
                };
                let block = match config.attention {
                    AttentionVariant::Mha => {
                        AttentionBlock::Mha(MultiHeadAttention::new(&mut ps, &mut rng, "mma.attn", d, config.heads))
                    }
                    AttentionVariant::TransformerBlock => AttentionBlock::Transformer(TransformerBlock::new(
                        &mut ps,
                        &mut rng,
                        "mma.block",
                        d,
                        config.heads,
                    )),
                };
                let up1 = Linear::new(&mut ps, &mut rng, "mma.up1", d, m, true);
                let up2 = Linear::new(&mut ps, &mut rng, "mma.up2", m, c, true);
                Arch::Mma(MmaNet { down, block, up1, up2 })
            }
        };
        Ok(AdapterModel {
            kind,
            config,
            params: ps,
            arch,
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn config(&self) -> &MmaConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        self.params.as_slice()
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        self.params.as_mut_slice()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(Parameter::numel).sum()
    }

    /// Concatenation of all parameter values in list order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    pub fn zero_grad(&self) {
        self.params().iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Overwrites parameter values; names and shapes must match this model's list.
    pub fn load_parameters(&mut self, values: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), ConfigError> {
        if values.len() != self.params().len() {
            return Err(invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                values.len(),
                self.params().len()
            )));
        }
        for (p, (name, shape, data)) in self.params_mut().iter_mut().zip(values) {
            if &p.name != name || p.shape() != shape.as_slice() {
                return Err(invalid(format!(
                    "checkpoint entry {name} {shape:?} does not match {} {:?}",
                    p.name,
                    p.shape()
                )));
            }
            p.set_data(data.clone()).map_err(|e| invalid(format!("{e}")))?;
        }
        Ok(())
    }

    /// Class logits `[B, P]`.
    pub fn logits(&self, text: &Tensor, image: &Tensor) -> Result<Tensor, RunError> {
        check_inputs(text, image, self.config.emb_dim)?;
        let cfg = &self.config;
        match &self.arch {
            Arch::Identity => Ok(zero_shot_logits(text, image, cfg.logit_scale)?),
            Arch::ClipAdapter(net) => clip_adapter_logits(&self.params, net, cfg, text, image),
            Arch::Mma(_) => {
                let (at, ai) = self.mma_forward(text, image)?;
                blend_and_logits(
                    text,
                    image,
                    &at,
                    &ai,
                    BlendSettings {
                        lambda_text: cfg.lambda_text,
                        lambda_image: cfg.lambda_image,
                        adapt_text: cfg.adapt_text,
                        logit_scale: cfg.logit_scale,
                    },
                )
            }
        }
    }

    /// Raw adapter outputs `(text [P, B, C], image [B, C])` before blending.
    pub fn mma_forward(&self, text: &Tensor, image: &Tensor) -> Result<(Tensor, Tensor), RunError> {
        let (out, _) = self.mma_pass(text, image)?;
        let p = text.shape()[0];
        let b = image.shape()[0];
        let c = self.config.emb_dim;
        let adapted_text = out.narrow(0, 0, p)?;
        let adapted_image = out.narrow(0, p, 1)?.reshape(&[b, c])?;
        Ok((adapted_text, adapted_image))
    }

    /// Post-softmax attention weights `[B, heads, T, T]` of the adapter.
    pub fn attention_weights(&self, text: &Tensor, image: &Tensor) -> Result<Tensor, RunError> {
        Ok(self.mma_pass(text, image)?.1)
    }

    fn mma_pass(&self, text: &Tensor, image: &Tensor) -> Result<(Tensor, Tensor), RunError> {
        let Arch::Mma(net) = &self.arch else {
            return Err(invalid(format!("{} model has no attention adapter", self.kind.as_str())).into());
        };
        check_inputs(text, image, self.config.emb_dim)?;
        let ps = &self.params;
        let seq = build_input_sequence(text, image)?;
        let mut x = net.down[0].forward(ps, &seq)?;
        for layer in &net.down[1..] {
            x = layer.forward(ps, &x.gelu())?;
        }
        let mask = make_mask(text.shape()[0], 1).to_tensor();
        let (x, weights) = match &net.block {
            AttentionBlock::Mha(m) => m.forward(ps, &x, &mask)?,
            AttentionBlock::Transformer(t) => t.forward(ps, &x, &mask)?,
        };
        let x = net.up1.forward(ps, &x)?.gelu();
        Ok((net.up2.forward(ps, &x)?, weights))
    }
}

fn check_inputs(text: &Tensor, image: &Tensor, c: usize) -> Result<(), TensorError> {
    let ok = text.rank() == 2
        && image.rank() == 2
        && text.shape()[1] == c
        && image.shape()[1] == c
        && text.shape()[0] >= 1
        && image.shape()[0] >= 1;
    if ok {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op: "adapter input",
            lhs: text.shape().to_vec(),
            rhs: image.shape().to_vec(),
        })
    }
}

/// `text [P, C]`, `image [B, C]` -> `[P + 1, B, C]`: the prompts broadcast
/// over the batch followed by one image row per batch element.
pub fn build_input_sequence(text: &Tensor, image: &Tensor) -> Result<Tensor, TensorError> {
    if text.rank() != 2 || image.rank() != 2 || text.shape()[1] != image.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "build_input_sequence",
            lhs: text.shape().to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let (p, c) = (text.shape()[0], text.shape()[1]);
    let b = image.shape()[0];
    let t = text.reshape(&[p, 1, c])?.broadcast_to(&[p, b, c])?;
    let i = image.reshape(&[1, b, c])?;
    Tensor::concat(&[&t, &i], 0)
}

/// Scaled cosine logits `[B, P]` of the frozen embeddings.
pub fn zero_shot_logits(text: &Tensor, image: &Tensor, logit_scale: f64) -> Result<Tensor, TensorError> {
    cosine_logits(&text.l2_normalize(1)?, &image.l2_normalize(1)?, logit_scale)
}

/// `text [P, C]` (shared) or `[P, B, C]` (per image) against `image [B, C]`.
fn cosine_logits(text: &Tensor, image: &Tensor, logit_scale: f64) -> Result<Tensor, TensorError> {
    let image = image.l2_normalize(1)?;
    let b = image.shape()[0];
    let sims = match text.rank() {
        2 => image.matmul(&text.l2_normalize(1)?.transpose(0, 1)?)?,
        3 => {
            let (p, c) = (text.shape()[0], text.shape()[2]);
            let per_image = text.l2_normalize(2)?.permute(&[1, 0, 2])?;
            per_image.matmul(&image.reshape(&[b, c, 1])?)?.reshape(&[b, p])?
        }
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_logits",
                lhs: text.shape().to_vec(),
                rhs: image.shape().to_vec(),
            })
        }
    };
    Ok(sims.scale(logit_scale))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendSettings {
    pub lambda_text: f64,
    pub lambda_image: f64,
    pub adapt_text: bool,
    pub logit_scale: f64,
}

/// Residual blend of normalized originals and normalized adapter outputs,
/// followed by scaled cosine logits `[B, P]`.
pub fn blend_and_logits(
    orig_text: &Tensor,
    orig_image: &Tensor,
    adapted_text: &Tensor,
    adapted_image: &Tensor,
    s: BlendSettings,
) -> Result<Tensor, RunError> {
    check_lambda(s.lambda_text)?;
    check_lambda(s.lambda_image)?;
    let text_n = orig_text.l2_normalize(1)?;
    let image_n = orig_image.l2_normalize(1)?;
    let image_blend = image_n
        .scale(s.lambda_image)
        .add(&adapted_image.l2_normalize(1)?.scale(1.0 - s.lambda_image))?;
    let text_blend = if s.adapt_text {
        let (p, b, c) = (adapted_text.shape()[0], adapted_text.shape()[1], adapted_text.shape()[2]);
        text_n
            .reshape(&[p, 1, c])?
            .broadcast_to(&[p, b, c])?
            .scale(s.lambda_text)
            .add(&adapted_text.l2_normalize(2)?.scale(1.0 - s.lambda_text))?
    } else {
        text_n
    };
    Ok(cosine_logits(&text_blend, &image_blend, s.logit_scale)?)
}

fn clip_adapter_logits(
    ps: &ParamSet,
    net: &ClipAdapterNet,
    cfg: &MmaConfig,
    text: &Tensor,
    image: &Tensor,
) -> Result<Tensor, RunError> {
    // adapted features are blended unnormalized; the cosine normalizes the sum
    let text_n = text.l2_normalize(1)?;
    let image_n = image.l2_normalize(1)?;
    let t = text_n
        .scale(cfg.lambda_text)
        .add(&net.text.forward(ps, &text_n)?.scale(1.0 - cfg.lambda_text))?;
    let i = image_n
        .scale(cfg.lambda_image)
        .add(&net.image.forward(ps, &image_n)?.scale(1.0 - cfg.lambda_image))?;
    Ok(cosine_logits(&t, &i, cfg.logit_scale)?)
}

/// Closed-form parameter count.
///
/// * identity: 0
/// * baseline with `h = C / r`: `2 (C h + h C)` (no biases)
/// * attention adapter with `d = C / down_factor`, `m = C / mid_factor`:
///   downsampler `C d + d` (MLP variant adds `d d + d`), attention
///   `4 (d d + d)` (transformer variant adds `4 d` for two layer norms and
///   `d 4d + 4d + 4d d + d` for the feed-forward), upsampling
///   `d m + m + m C + C`.
pub fn expected_parameter_count(kind: AdapterKind, cfg: &MmaConfig) -> usize {
    let c = cfg.emb_dim;
    match kind {
        AdapterKind::IdentityClip => 0,
        AdapterKind::ClipAdapter => {
            let h = c / cfg.clip_reduction;
            2 * (c * h + h * c)
        }
        AdapterKind::Mma => {
            let (d, m) = (cfg.hidden_dim(), cfg.mid_dim());
            let mut n = c * d + d;
            if cfg.updown == UpDownVariant::Mlp {
                n += d * d + d;
            }
            n += 4 * (d * d + d);
            if cfg.attention == AttentionVariant::TransformerBlock {
                let f = FF_EXPANSION * d;
                n += 4 * d + d * f + f + f * d + d;
            }
            n + d * m + m + m * c + c
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MmaConfig {
        MmaConfig {
            emb_dim: 16,
            heads: 1,
            ..MmaConfig::default()
        }
    }

    fn unit_rows(rows: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, 0);
        let data: Vec<f64> = (0..rows * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(data, &[rows, c]).unwrap().l2_normalize(1).unwrap().detach()
    }

    #[test]
    fn mask_small_cases() {
        let m = make_mask(1, 1);
        assert_eq!(m.matrix, vec![MASK_NEG, 0.0, 0.0, MASK_NEG]);
        let m = make_mask(2, 1);
        let zeros: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| m.allows(i, j))
            .collect();
        assert_eq!(zeros, vec![(0, 2), (1, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn mask_allowed_count_by_enumeration() {
        for p in 1..7 {
            for i in 1..4 {
                let m = make_mask(p, i);
                let t = p + i;
                let mut count = 0;
                for r in 0..t {
                    for c in 0..t {
                        // piecewise definition, case by case
                        let case1 = r < p && (p..t).contains(&c);
                        let case2 = (p..t).contains(&r) && c < p;
                        assert_eq!(m.allows(r, c), case1 || case2);
                        assert_eq!(m.allows(r, c), m.allows(c, r));
                        count += usize::from(case1 || case2);
                    }
                }
                assert_eq!(count, 2 * p * i);
            }
        }
    }

    #[test]
    fn toy_parameter_count() {
        let m = AdapterModel::new(AdapterKind::Mma, toy(), 0).unwrap();
        let sizes: Vec<usize> = m.params().iter().map(|p| p.numel()).collect();
        // D 64+4, q/k/v 3*(16+4), out 16+4, U1 4+1, U2 16+16
        assert_eq!(sizes, vec![64, 4, 16, 4, 16, 4, 16, 4, 16, 4, 4, 1, 16, 16]);
        assert_eq!(m.parameter_count(), 185);
        assert_eq!(expected_parameter_count(AdapterKind::Mma, &toy()), 185);
    }

    #[test]
    fn closed_form_matches_every_architecture() {
        let mut cfgs = Vec::new();
        for attention in [AttentionVariant::Mha, AttentionVariant::TransformerBlock] {
            for updown in [UpDownVariant::Linear, UpDownVariant::Mlp] {
                cfgs.push(MmaConfig {
                    attention,
                    updown,
                    ..MmaConfig::with_emb_dim(64)
                });
            }
        }
        for cfg in cfgs {
            for kind in [AdapterKind::IdentityClip, AdapterKind::ClipAdapter, AdapterKind::Mma] {
                let m = AdapterModel::new(kind, cfg.clone(), 3).unwrap();
                assert_eq!(m.parameter_count(), expected_parameter_count(kind, &cfg));
                assert_eq!(m.parameter_count(), m.flat_parameters().len());
            }
        }
        let names: Vec<String> = AdapterModel::new(AdapterKind::Mma, MmaConfig::with_emb_dim(64), 0)
            .unwrap()
            .params()
            .iter()
            .map(|p| p.name.clone())
            .collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }

    #[test]
    fn identity_has_no_parameters() {
        let m = AdapterModel::new(AdapterKind::IdentityClip, MmaConfig::default(), 0).unwrap();
        assert_eq!(m.parameter_count(), 0);
    }

    #[test]
    fn config_validation() {
        let bad_heads = MmaConfig { heads: 3, ..toy() };
        assert!(AdapterModel::new(AdapterKind::Mma, bad_heads, 0).is_err());
        let bad_div = MmaConfig { emb_dim: 18, ..toy() };
        assert!(AdapterModel::new(AdapterKind::Mma, bad_div, 0).is_err());
        let bad_lambda = toy().with_lambda(1.5);
        assert!(AdapterModel::new(AdapterKind::Mma, bad_lambda, 0).is_err());
    }

    #[test]
    fn input_sequence_layout() {
        let text = unit_rows(3, 4, 1);
        let image = unit_rows(4, 4, 2);
        let seq = build_input_sequence(&text, &image).unwrap();
        assert_eq!(seq.shape(), &[4, 4, 4]);
        for p in 0..3 {
            for b in 0..4 {
                let row = &seq.data()[(p * 4 + b) * 4..(p * 4 + b + 1) * 4];
                assert_eq!(row, &text.data()[p * 4..(p + 1) * 4]);
            }
        }
        let parts = seq.split(0, &[3, 1]).unwrap();
        assert_eq!(parts[0].narrow(1, 0, 1).unwrap().reshape(&[3, 4]).unwrap().data(), text.data());
        assert_eq!(parts[1].reshape(&[4, 4]).unwrap().data(), image.data());
        let small = build_input_sequence(&unit_rows(2, 4, 1), &unit_rows(1, 4, 2)).unwrap();
        assert_eq!(small.shape(), &[3, 1, 4]);
        assert!(build_input_sequence(&unit_rows(2, 4, 1), &unit_rows(1, 5, 2)).is_err());
    }

    #[test]
    fn zero_upsampler_gives_zero_outputs() {
        let mut m = AdapterModel::new(AdapterKind::Mma, toy(), 4).unwrap();
        for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("mma.up2")) {
            let n = p.numel();
            p.set_data(vec![0.0; n]).unwrap();
        }
        let (t, i) = m.mma_forward(&unit_rows(3, 16, 1), &unit_rows(2, 16, 2)).unwrap();
        assert_eq!(t.shape(), &[3, 2, 16]);
        assert_eq!(i.shape(), &[2, 16]);
        assert!(t.data().iter().chain(i.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_one_is_zero_shot_exactly() {
        let text = unit_rows(5, 16, 1);
        let image = unit_rows(7, 16, 2);
        let zs = zero_shot_logits(&text, &image, 100.0).unwrap();
        for kind in [AdapterKind::Mma, AdapterKind::ClipAdapter] {
            let m = AdapterModel::new(kind, toy().with_lambda(1.0), 9).unwrap();
            assert_eq!(m.logits(&text, &image).unwrap().data(), zs.data(), "{kind:?}");
        }
    }

    #[test]
    fn lambda_zero_with_copied_outputs_is_zero_shot() {
        let text = unit_rows(3, 8, 1);
        let image = unit_rows(2, 8, 2);
        let zs = zero_shot_logits(&text, &image, 1.0).unwrap();
        let adapted_text = text.reshape(&[3, 1, 8]).unwrap().broadcast_to(&[3, 2, 8]).unwrap();
        let s = BlendSettings {
            lambda_text: 0.0,
            lambda_image: 0.0,
            adapt_text: true,
            logit_scale: 1.0,
        };
        let l = blend_and_logits(&text, &image, &adapted_text, &image, s).unwrap();
        for (a, b) in l.data().iter().zip(zs.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn blend_hand_example() {
        let text = Tensor::new(vec![1., 0., 0., 1.], &[2, 2]).unwrap();
        let image = Tensor::new(vec![1., 0.], &[1, 2]).unwrap();
        let at = Tensor::new(vec![0.3, 0.7, -0.2, 0.4], &[2, 1, 2]).unwrap();
        let ai = Tensor::new(vec![0.5, 0.5], &[1, 2]).unwrap();
        let s = BlendSettings {
            lambda_text: 1.0,
            lambda_image: 1.0,
            adapt_text: true,
            logit_scale: 1.0,
        };
        let l = blend_and_logits(&text, &image, &at, &ai, s).unwrap();
        assert_eq!(l.data(), &[1.0, 0.0]);
        let bad = BlendSettings { lambda_text: -0.1, ..s };
        assert!(matches!(
            blend_and_logits(&text, &image, &at, &ai, bad),
            Err(RunError::Config(_))
        ));
    }

    #[test]
    fn clip_adapter_zero_output_layers() {
        let text = unit_rows(3, 16, 1);
        let image = unit_rows(2, 16, 2);
        let mut m = AdapterModel::new(AdapterKind::ClipAdapter, toy(), 1).unwrap();
        for p in m.params_mut().iter_mut().filter(|p| p.name.ends_with("fc2.weight")) {
            let n = p.numel();
            p.set_data(vec![0.0; n]).unwrap();
        }
        let zs = zero_shot_logits(&text, &image, 100.0).unwrap();
        let l = m.logits(&text, &image).unwrap();
        for (a, b) in l.data().iter().zip(zs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // with nothing of the original left, the zero adapted vector cannot be normalized
        let mut m0 = AdapterModel::new(AdapterKind::ClipAdapter, toy().with_lambda(0.0), 1).unwrap();
        for p in m0.params_mut().iter_mut().filter(|p| p.name.ends_with("fc2.weight")) {
            let n = p.numel();
            p.set_data(vec![0.0; n]).unwrap();
        }
        assert!(matches!(
            m0.logits(&text, &image),
            Err(RunError::Tensor(TensorError::ZeroNorm { .. }))
        ));
    }

    #[test]
    fn attention_rows_follow_mask() {
        let m = AdapterModel::new(AdapterKind::Mma, MmaConfig { heads: 2, ..toy() }, 5).unwrap();
        let w = m.attention_weights(&unit_rows(1, 16, 1), &unit_rows(3, 16, 2)).unwrap();
        assert_eq!(w.shape(), &[3, 2, 2, 2]);
        for chunk in w.data().chunks(4) {
            assert_eq!(chunk, &[0.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn class_permutation_permutes_logit_columns() {
        let text = unit_rows(4, 16, 1);
        let image = unit_rows(3, 16, 2);
        let m = AdapterModel::new(AdapterKind::Mma, toy(), 6).unwrap();
        let l = m.logits(&text, &image).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| text.data()[p * 16..(p + 1) * 16].to_vec()).collect();
        let lp = m.logits(&Tensor::new(permuted, &[4, 16]).unwrap(), &image).unwrap();
        for b in 0..3 {
            for (j, &p) in perm.iter().enumerate() {
                let a = lp.data()[b * 4 + j];
                let e = l.data()[b * 4 + p];
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }
}
