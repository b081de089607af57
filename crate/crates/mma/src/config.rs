//! Run configuration: command-line overrides, the optional TOML file that
//! may supply the same keys, and the fully resolved result.
//!
//! Precedence is flag, then file, then the library defaults. File keys are
//! the flag names without the leading dashes.

use std::fmt::Display;
use std::path::Path;

use clap::{Args, ValueEnum};
use mma_core::train::Monitor;
use mma_core::{AdapterKind, AttentionVariant, ExperimentOptions, MmaConfig, TrainConfig, UpDownVariant};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Adapter names as spelled on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterChoice {
    /// Zero-shot classification, nothing is trained.
    None,
    ClipAdapter,
    Mma,
}

impl AdapterChoice {
    pub fn kind(self) -> AdapterKind {
        match self {
            AdapterChoice::None => AdapterKind::IdentityClip,
            AdapterChoice::ClipAdapter => AdapterKind::ClipAdapter,
            AdapterChoice::Mma => AdapterKind::Mma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionChoice {
    Mha,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpDownChoice {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonitorChoice {
    ValAccuracy,
    TrainLoss,
}

pub const DEFAULT_ADAPTER: AdapterChoice = AdapterChoice::Mma;

fn with_default(text: &str, value: impl Display) -> String {
    format!("{text} [default: {value}]")
}

fn d_mma() -> MmaConfig {
    MmaConfig::default()
}

fn d_train() -> TrainConfig {
    TrainConfig::default()
}

fn d_opts() -> ExperimentOptions {
    ExperimentOptions::default()
}

/// Every adapter, training and split knob. Unset fields fall through to the
/// config file, then to the defaults shown in `--help`.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Overrides {
    #[arg(long, value_enum, help = with_default("Adapter architecture", "mma"))]
    pub adapter: Option<AdapterChoice>,
    #[arg(long, help = with_default("Residual ratio for both modalities", d_mma().lambda_text))]
    pub lambda: Option<f64>,
    #[arg(long, help = "Residual ratio for text embeddings [default: --lambda]")]
    pub lambda_text: Option<f64>,
    #[arg(long, help = "Residual ratio for image embeddings [default: --lambda]")]
    pub lambda_image: Option<f64>,
    #[arg(long, help = with_default("Attention heads", d_mma().heads))]
    pub heads: Option<usize>,
    #[arg(long, help = with_default("Attention width is emb_dim divided by this", d_mma().down_factor))]
    pub down_factor: Option<usize>,
    #[arg(long, help = with_default("MLP upsampling bottleneck is emb_dim divided by this", d_mma().mid_factor))]
    pub mid_factor: Option<usize>,
    #[arg(long, value_enum, help = with_default("Attention variant", "mha"))]
    pub attention: Option<AttentionChoice>,
    #[arg(long, value_enum, help = with_default("Down- and upsampling variant", "linear"))]
    pub updown: Option<UpDownChoice>,
    #[arg(long, help = "Discard the adapted text embeddings (text still feeds attention) [default: off]")]
    pub no_text_adaptation: bool,
    #[arg(long, help = with_default("Multiplier applied to cosine similarities", d_mma().logit_scale))]
    pub logit_scale: Option<f64>,
    #[arg(long, help = with_default("Bottleneck reduction of the CLIP-Adapter baseline", d_mma().clip_reduction))]
    pub clip_reduction: Option<usize>,
    #[arg(long, help = with_default("Adam learning rate", d_train().lr))]
    pub lr: Option<f64>,
    #[arg(long, help = with_default("Minibatch size", d_train().batch_size))]
    pub batch_size: Option<usize>,
    #[arg(long, help = with_default("Adam first-moment decay", d_train().beta1))]
    pub beta1: Option<f64>,
    #[arg(long, help = with_default("Adam second-moment decay", d_train().beta2))]
    pub beta2: Option<f64>,
    #[arg(long, help = with_default("Adam epsilon", d_train().eps))]
    pub eps: Option<f64>,
    #[arg(long, help = with_default("Epochs without improvement before stopping", d_train().patience))]
    pub patience: Option<usize>,
    #[arg(long, help = with_default("Upper bound on training epochs", d_train().max_epochs))]
    pub max_epochs: Option<usize>,
    #[arg(long, help = with_default("Images per base class in the episode, validation included", d_train().shots))]
    pub shots: Option<usize>,
    #[arg(long, help = with_default("Shots per class held out for early stopping", d_train().val_shots))]
    pub val_shots: Option<usize>,
    #[arg(long, help = with_default("Seed for initialization, sampling, shuffling and noise", d_train().seed))]
    pub seed: Option<u64>,
    #[arg(long, value_enum, help = with_default("Early stopping criterion", "val-accuracy"))]
    pub monitor: Option<MonitorChoice>,
    #[arg(long, help = with_default("Fraction of classes used as base classes", d_opts().base_share))]
    pub base_share: Option<f64>,
    #[arg(long, help = "Score new-class images against all prompts, not only new ones [default: off]")]
    pub eval_new_against_all: bool,
}

impl Overrides {
    /// `self` wins wherever it is set.
    pub fn or(self, file: Overrides) -> Overrides {
        Overrides {
            adapter: self.adapter.or(file.adapter),
            lambda: self.lambda.or(file.lambda),
            lambda_text: self.lambda_text.or(file.lambda_text),
            lambda_image: self.lambda_image.or(file.lambda_image),
            heads: self.heads.or(file.heads),
            down_factor: self.down_factor.or(file.down_factor),
            mid_factor: self.mid_factor.or(file.mid_factor),
            attention: self.attention.or(file.attention),
            updown: self.updown.or(file.updown),
            no_text_adaptation: self.no_text_adaptation || file.no_text_adaptation,
            logit_scale: self.logit_scale.or(file.logit_scale),
            clip_reduction: self.clip_reduction.or(file.clip_reduction),
            lr: self.lr.or(file.lr),
            batch_size: self.batch_size.or(file.batch_size),
            beta1: self.beta1.or(file.beta1),
            beta2: self.beta2.or(file.beta2),
            eps: self.eps.or(file.eps),
            patience: self.patience.or(file.patience),
            max_epochs: self.max_epochs.or(file.max_epochs),
            shots: self.shots.or(file.shots),
            val_shots: self.val_shots.or(file.val_shots),
            seed: self.seed.or(file.seed),
            monitor: self.monitor.or(file.monitor),
            base_share: self.base_share.or(file.base_share),
            eval_new_against_all: self.eval_new_against_all || file.eval_new_against_all,
        }
    }

    /// Applies the overrides to the defaults for a store of width `emb_dim`.
    pub fn resolve(&self, emb_dim: usize) -> ResolvedConfig {
        let m = MmaConfig::with_emb_dim(emb_dim);
        let lambda = self.lambda;
        let adapter = MmaConfig {
            emb_dim,
            down_factor: self.down_factor.unwrap_or(m.down_factor),
            mid_factor: self.mid_factor.unwrap_or(m.mid_factor),
            heads: self.heads.unwrap_or(m.heads),
            lambda_text: self.lambda_text.or(lambda).unwrap_or(m.lambda_text),
            lambda_image: self.lambda_image.or(lambda).unwrap_or(m.lambda_image),
            adapt_text: !self.no_text_adaptation,
            attention: match self.attention {
                Some(AttentionChoice::Transformer) => AttentionVariant::TransformerBlock,
                Some(AttentionChoice::Mha) => AttentionVariant::Mha,
                None => m.attention,
            },
            updown: match self.updown {
                Some(UpDownChoice::Mlp) => UpDownVariant::Mlp,
                Some(UpDownChoice::Linear) => UpDownVariant::Linear,
                None => m.updown,
            },
            logit_scale: self.logit_scale.unwrap_or(m.logit_scale),
            clip_reduction: self.clip_reduction.unwrap_or(m.clip_reduction),
        };
        let t = TrainConfig::default();
        let train = TrainConfig {
            lr: self.lr.unwrap_or(t.lr),
            batch_size: self.batch_size.unwrap_or(t.batch_size),
            beta1: self.beta1.unwrap_or(t.beta1),
            beta2: self.beta2.unwrap_or(t.beta2),
            eps: self.eps.unwrap_or(t.eps),
            patience: self.patience.unwrap_or(t.patience),
            max_epochs: self.max_epochs.unwrap_or(t.max_epochs),
            shots: self.shots.unwrap_or(t.shots),
            val_shots: self.val_shots.unwrap_or(t.val_shots),
            seed: self.seed.unwrap_or(t.seed),
            monitor: match self.monitor {
                Some(MonitorChoice::TrainLoss) => Monitor::TrainLoss,
                Some(MonitorChoice::ValAccuracy) => Monitor::ValAccuracy,
                None => t.monitor,
            },
        };
        let o = ExperimentOptions::default();
        let experiment = ExperimentOptions {
            base_share: self.base_share.unwrap_or(o.base_share),
            ordering: None,
            eval_new_against_all: self.eval_new_against_all,
        };
        ResolvedConfig {
            kind: self.adapter.unwrap_or(DEFAULT_ADAPTER).kind(),
            adapter,
            train,
            experiment,
        }
    }
}

/// Keys a config file may carry besides [`Overrides`].
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct CommandKeys {
    pub shares: Option<Vec<f64>>,
    pub jobs: Option<usize>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileConfig {
    pub overrides: Overrides,
    pub command: CommandKeys,
}

const COMMAND_KEYS: [&str; 3] = ["shares", "jobs", "sigma"];

pub fn parse_config_file(text: &str) -> Result<FileConfig, String> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
    let mut command = toml::Table::new();
    for key in COMMAND_KEYS {
        if let Some(v) = table.remove(key) {
            command.insert(key.into(), v);
        }
    }
    let overrides = Overrides::deserialize(table).map_err(|e| e.message().to_string())?;
    let command = CommandKeys::deserialize(command).map_err(|e| e.message().to_string())?;
    Ok(FileConfig { overrides, command })
}

pub fn load_config_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    parse_config_file(&text).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))
}

/// Everything a run depends on besides the data, as written to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub kind: AdapterKind,
    pub adapter: MmaConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentOptions,
}

impl ResolvedConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.adapter.validate(self.kind).map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let s = self.experiment.base_share;
        if !(s > 0.0 && s <= 1.0) {
            return Err(CliError::Usage(format!("base-share must lie in (0, 1], got {s}")));
        }
        Ok(())
    }
}
