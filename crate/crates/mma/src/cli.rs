//! Command-line front end. Every run writes its outputs to
//! `<out>/<run-id>/`, where the run id is derived from the command, the
//! dataset and the resolved configuration, so repeating an invocation
//! rewrites the same directory with the same bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use mma_core::eval::{
    ablation_cells, ablation_row, check_shares, run_base_new_experiment, run_noise_experiment, score_base_new,
    split_classes, AblationGrid, AblationRow, AdapterSpec, RunMeta, SweepPoint, BASELINE_LABEL, CLIP_ADAPTER_LABEL,
    DEFAULT_SWEEP_SHARES,
};
use mma_core::store::{add_gaussian_noise, generate_synthetic, SyntheticSpec};
use mma_core::train::{sample_few_shot, train};
use mma_core::{AdapterKind, AdapterModel, EmbeddingStore, RunError, SplitKind};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FILE};
use crate::config::{load_config_file, CommandKeys, FileConfig, Overrides, ResolvedConfig};
use crate::error::CliError;
use crate::format::{load_store, save_store, MANIFEST_FILE};
use crate::reports;

pub const DEFAULT_OUT: &str = "runs";
pub const DEFAULT_JOBS: usize = 1;
pub const DEFAULT_SIGMA: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(name = "mma", version, about = "Few-shot multi-modal attention adapters over frozen CLIP embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an adapter on a few-shot episode of base classes and save a checkpoint.
    Train(RunArgs),
    /// Score a saved checkpoint on base, new and all classes.
    Eval(EvalArgs),
    /// Train on base classes, then evaluate base and new classes.
    BaseNew(RunArgs),
    /// Repeat base-new for several base-class shares.
    SweepShare(SweepArgs),
    /// Run the attention by up/down by text-adaptation grid plus baselines.
    Ablate(GridArgs),
    /// Compare training on clean and on noised training embeddings.
    Noise(NoiseArgs),
    /// Write a synthetic embedding store.
    Synth(SynthArgs),
    /// Load a store, check every invariant and print a summary.
    ValidateStore(ValidateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, default_value = DEFAULT_OUT, help = "Parent directory of run outputs")]
    pub out: PathBuf,
    #[arg(long, help = "Run directory name [default: derived from command, data and config]")]
    pub run_id: Option<String>,
    #[arg(long, help = "TOML file supplying any of the flags below; flags win")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, help = "Embedding store directory")]
    pub store: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, help = "Embedding store directory")]
    pub store: PathBuf,
    #[arg(long, help = "Checkpoint directory written by train or base-new")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, help = "Embedding store directory")]
    pub store: PathBuf,
    #[arg(long, value_delimiter = ',', help = "Comma-separated base-class shares [default: 0.3,0.5,0.7,0.9]")]
    pub shares: Option<Vec<f64>>,
    #[arg(long, help = "Worker threads; cells are independent [default: 1]")]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long, help = "Embedding store directory")]
    pub store: PathBuf,
    #[arg(long, help = "Worker threads; cells are independent [default: 1]")]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    #[arg(long, help = "Clean embedding store directory")]
    pub store: PathBuf,
    #[arg(long, help = "Store whose training split is already noised; overrides --sigma")]
    pub noisy_store: Option<PathBuf>,
    #[arg(long, help = "Std of the Gaussian added to training image embeddings [default: 0.02]")]
    pub sigma: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, help = "Store directory to write")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 60)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 512)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 20.0, help = "Inverse scale of per-image noise")]
    pub separation: f64,
    #[arg(long, default_value_t = 0.0, help = "Std of per-coordinate jitter on prompt embeddings")]
    pub text_noise: f64,
    #[arg(long, default_value_t = 1.0, help = "Norm of the offset shared by all image embeddings")]
    pub modality_gap: f64,
    #[arg(long, default_value_t = 8, help = "Dimension of the prototype subspace, 0 for the full width")]
    pub intrinsic_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long, help = "Embedding store directory")]
    pub store: PathBuf,
}

/// `error[usage]: <first line of clap's message>`.
pub fn clap_error_line(err: &clap::Error) -> String {
    let text = err.render().to_string();
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    format!("error[usage]: {}", first.trim_start_matches("error: ").trim())
}

/// Runs `f(i)` for `i in 0..n` on up to `jobs` threads; results keep index order.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(v);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every index ran"))
        .collect()
}

fn open_store(path: &Path) -> Result<EmbeddingStore, CliError> {
    if !path.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Usage(format!("no embedding store at {}", path.display())));
    }
    Ok(load_store(path)?)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Shared setup of every run command: merged overrides, loaded store and
/// resolved configuration.
struct Prepared {
    store: EmbeddingStore,
    config: ResolvedConfig,
    command_keys: CommandKeys,
}

fn prepare(store: &Path, output: &OutputArgs, flags: &Overrides) -> Result<Prepared, CliError> {
    let file = match &output.config {
        Some(p) => load_config_file(p)?,
        None => FileConfig::default(),
    };
    let store = open_store(store)?;
    let config = flags.clone().or(file.overrides).resolve(store.emb_dim);
    config.validate()?;
    Ok(Prepared {
        store,
        config,
        command_keys: file.command,
    })
}

#[derive(Serialize)]
struct RunRecord<'a, E: Serialize> {
    command: &'a str,
    dataset_id: &'a str,
    #[serde(flatten)]
    config: &'a ResolvedConfig,
    #[serde(flatten)]
    extra: E,
}

/// Creates `<out>/<run-id>/` and writes `config.json` into it.
fn open_run<E: Serialize>(
    command: &str,
    output: &OutputArgs,
    dataset_id: &str,
    config: &ResolvedConfig,
    extra: E,
) -> Result<PathBuf, CliError> {
    let record = RunRecord {
        command,
        dataset_id,
        config,
        extra,
    };
    let text = json(&record);
    let run_id = match &output.run_id {
        Some(id) if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." => {
            return Err(CliError::Usage(format!("invalid run id {id:?}")))
        }
        Some(id) => id.clone(),
        None => {
            let digest = hex::encode(&Sha256::digest(text.as_bytes())[..6]);
            format!("{command}-{}-s{}-{digest}", config.kind.as_str(), config.train.seed)
        }
    };
    let dir = output.out.join(run_id);
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    write(&dir, "config.json", text)?;
    Ok(dir)
}

fn label_for(kind: AdapterKind) -> &'static str {
    match kind {
        AdapterKind::IdentityClip => BASELINE_LABEL,
        AdapterKind::ClipAdapter => CLIP_ADAPTER_LABEL,
        AdapterKind::Mma => "MMA",
    }
}

fn spec_of(config: &ResolvedConfig) -> AdapterSpec {
    AdapterSpec::new(label_for(config.kind), config.kind, config.adapter.clone())
}

fn save_model(dir: &Path, model: &AdapterModel) -> Result<(), CliError> {
    Ok(save_checkpoint(model, &dir.join("checkpoint"))?)
}

fn cmd_base_new(args: &RunArgs) -> Result<String, CliError> {
    let p = prepare(&args.store, &args.output, &args.overrides)?;
    let dir = open_run("base-new", &args.output, &p.store.dataset_id, &p.config, ())?;
    let e = run_base_new_experiment(&p.store, &p.store, &spec_of(&p.config), &p.config.train, &p.config.experiment)?;
    write(&dir, "report.json", json(&e.report))?;
    write(&dir, "report.csv", reports::reports_csv([&e.report]))?;
    let table = reports::base_new_table(&[&e.report]);
    write(&dir, "report.txt", &table)?;
    write(&dir, "history.jsonl", reports::history_jsonl(&e.outcome.history))?;
    write(&dir, "predictions.csv", reports::predictions_csv(&e.predictions))?;
    save_model(&dir, &e.model)?;
    Ok(format!("{table}outputs: {}\n", dir.display()))
}

#[derive(Serialize)]
struct EpisodeRecord<'a> {
    classes: &'a [usize],
    train: &'a [usize],
    val: &'a [usize],
    best_epoch: Option<usize>,
    stopped_early: bool,
}

fn cmd_train(args: &RunArgs) -> Result<String, CliError> {
    let p = prepare(&args.store, &args.output, &args.overrides)?;
    let dir = open_run("train", &args.output, &p.store.dataset_id, &p.config, ())?;
    let cfg = &p.config;
    let split = split_classes(p.store.num_classes(), cfg.experiment.base_share, None)?;
    let episode = sample_few_shot(&p.store, &split.base, cfg.train.shots, cfg.train.val_shots, cfg.train.seed)?;
    let mut model = AdapterModel::new(cfg.kind, cfg.adapter.clone(), cfg.train.seed).map_err(RunError::from)?;
    let outcome = train(&mut model, &p.store, &episode, &cfg.train)?;
    write(&dir, "history.jsonl", reports::history_jsonl(&outcome.history))?;
    let record = EpisodeRecord {
        classes: &episode.classes,
        train: &episode.train,
        val: &episode.val,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
    };
    write(&dir, "episode.json", json(&record))?;
    save_model(&dir, &model)?;
    Ok(format!(
        "trained {} for {} epochs (best {:?}), {} parameters\noutputs: {}\n",
        cfg.kind.as_str(),
        outcome.history.len(),
        outcome.best_epoch,
        model.parameter_count(),
        dir.display()
    ))
}

fn cmd_eval(args: &EvalArgs) -> Result<String, CliError> {
    if !args.checkpoint.join(CHECKPOINT_FILE).is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}", args.checkpoint.display())));
    }
    let p = prepare(&args.store, &args.output, &args.overrides)?;
    let model = load_checkpoint(&args.checkpoint)?;
    if model.config().emb_dim != p.store.emb_dim {
        return Err(CliError::Usage(format!(
            "checkpoint width {} does not match store width {}",
            model.config().emb_dim,
            p.store.emb_dim
        )));
    }
    // the architecture comes from the checkpoint, not from the flags
    let config = ResolvedConfig {
        kind: model.kind(),
        adapter: model.config().clone(),
        ..p.config
    };
    #[derive(Serialize)]
    struct Extra<'a> {
        checkpoint: &'a Path,
    }
    let dir = open_run(
        "eval",
        &args.output,
        &p.store.dataset_id,
        &config,
        Extra {
            checkpoint: &args.checkpoint,
        },
    )?;
    let split = split_classes(p.store.num_classes(), config.experiment.base_share, None)?;
    let scores = score_base_new(&model, &p.store, &split, &config.experiment)?;
    let meta = RunMeta {
        dataset_id: p.store.dataset_id.clone(),
        seed: config.train.seed,
        config_hash: mma_core::eval::config_hash(config.kind, &config.adapter, &config.train, &config.experiment),
    };
    let report = scores.report(label_for(config.kind), &model, &split, meta);
    write(&dir, "report.json", json(&report))?;
    write(&dir, "report.csv", reports::reports_csv([&report]))?;
    let table = reports::base_new_table(&[&report]);
    write(&dir, "report.txt", &table)?;
    write(&dir, "predictions.csv", reports::predictions_csv(&scores.into_predictions()))?;
    Ok(format!("{table}outputs: {}\n", dir.display()))
}

fn cmd_sweep(args: &SweepArgs) -> Result<String, CliError> {
    let p = prepare(&args.store, &args.output, &args.overrides)?;
    let shares = args
        .shares
        .clone()
        .or(p.command_keys.shares.clone())
        .unwrap_or_else(|| DEFAULT_SWEEP_SHARES.to_vec());
    check_shares(&shares).map_err(|e| CliError::Usage(e.to_string()))?;
    let jobs = args.jobs.or(p.command_keys.jobs).unwrap_or(DEFAULT_JOBS);
    #[derive(Serialize)]
    struct Extra<'a> {
        shares: &'a [f64],
    }
    let dir = open_run("sweep-share", &args.output, &p.store.dataset_id, &p.config, Extra { shares: &shares })?;
    let spec = spec_of(&p.config);
    let results = parallel_map(shares.len(), jobs, |i| {
        let opts = mma_core::ExperimentOptions {
            base_share: shares[i],
            ..p.config.experiment.clone()
        };
        run_base_new_experiment(&p.store, &p.store, &spec, &p.config.train, &opts).map(|e| SweepPoint {
            share: shares[i],
            report: e.report,
        })
    });
    let points = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write(&dir, "series.csv", reports::sweep_csv(&points))?;
    write(&dir, "report.csv", reports::reports_csv(points.iter().map(|p| &p.report)))?;
    let table = reports::sweep_table(&points);
    write(&dir, "series.txt", &table)?;
    Ok(format!("{table}outputs: {}\n", dir.display()))
}

fn cmd_ablate(args: &GridArgs) -> Result<String, CliError> {
    let p = prepare(&args.store, &args.output, &args.overrides)?;
    let jobs = args.jobs.or(p.command_keys.jobs).unwrap_or(DEFAULT_JOBS);
    let grid = AblationGrid::default();
    let dir = open_run("ablate", &args.output, &p.store.dataset_id, &p.config, &grid)?;
    let cells = ablation_cells(&grid, &p.config.adapter);
    let results = parallel_map(cells.len(), jobs, |i| {
        run_base_new_experiment(&p.store, &p.store, &cells[i], &p.config.train, &p.config.experiment)
            .map(|e| ablation_row(&cells[i], e.report))
    });
    let rows: Vec<AblationRow> = results.into_iter().collect::<Result<_, _>>()?;
    write(&dir, "ablation.csv", reports::reports_csv(rows.iter().map(|r| &r.report)))?;
    write(&dir, "ablation.json", json(&rows))?;
    let grid_table = reports::ablation_table(&rows);
    let text_table = reports::text_adaptation_table(&rows);
    write(&dir, "ablation.txt", &grid_table)?;
    write(&dir, "text_adaptation.txt", &text_table)?;
    Ok(format!("{grid_table}\n{text_table}outputs: {}\n", dir.display()))
}

fn cmd_noise(args: &NoiseArgs) -> Result<String, CliError> {
    let p = prepare(&args.store, &args.output, &args.overrides)?;
    let seed = p.config.train.seed;
    let (noisy, sigma) = match &args.noisy_store {
        Some(path) => (open_store(path)?, None),
        None => {
            let sigma = args.sigma.or(p.command_keys.sigma).unwrap_or(DEFAULT_SIGMA);
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(CliError::Usage(format!("sigma must be non-negative, got {sigma}")));
            }
            let noisy = add_gaussian_noise(&p.store, sigma, seed, &[SplitKind::Train]).map_err(RunError::from)?;
            (noisy, Some(sigma))
        }
    };
    #[derive(Serialize)]
    struct Extra<'a> {
        noisy_dataset_id: &'a str,
        sigma: Option<f64>,
        noise_space: &'static str,
    }
    let extra = Extra {
        noisy_dataset_id: &noisy.dataset_id,
        sigma,
        noise_space: if sigma.is_some() { "embedding" } else { "external" },
    };
    let dir = open_run("noise", &args.output, &p.store.dataset_id, &p.config, extra)?;
    let a = &p.config.adapter;
    let adapters = [
        AdapterSpec::new(BASELINE_LABEL, AdapterKind::IdentityClip, a.clone()),
        AdapterSpec::new(CLIP_ADAPTER_LABEL, AdapterKind::ClipAdapter, a.clone()),
        AdapterSpec::new("MMA", AdapterKind::Mma, a.clone()),
    ];
    let pairs = run_noise_experiment(&p.store, &noisy, &adapters, &p.config.train, &p.config.experiment)?;
    write(&dir, "noise.csv", reports::noise_csv(&pairs))?;
    let table = reports::noise_table(&pairs);
    write(&dir, "noise.txt", &table)?;
    Ok(format!("{table}outputs: {}\n", dir.display()))
}

fn cmd_synth(args: &SynthArgs) -> Result<String, CliError> {
    let spec = SyntheticSpec {
        n_classes: args.classes,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        emb_dim: args.emb_dim,
        separation: args.separation,
        text_noise: args.text_noise,
        modality_gap: args.modality_gap,
        intrinsic_dim: args.intrinsic_dim,
        seed: args.seed,
    };
    let store = generate_synthetic(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    save_store(&store, &args.out)?;
    Ok(format!("wrote {} to {}\n", store.dataset_id, args.out.display()))
}

fn cmd_validate(args: &ValidateArgs) -> Result<String, CliError> {
    let store = open_store(&args.store)?;
    let mut line = format!(
        "ok {} classes={} emb_dim={} train={} test={}",
        store.dataset_id,
        store.num_classes(),
        store.emb_dim,
        store.train.len(),
        store.test.len()
    );
    if !store.test.is_empty() {
        let model = AdapterModel::new(AdapterKind::IdentityClip, mma_core::MmaConfig::with_emb_dim(store.emb_dim), 0)
            .map_err(RunError::from)?;
        let all: Vec<usize> = (0..store.num_classes()).collect();
        let e = mma_core::eval::evaluate(&model, &store, &all, SplitKind::Test)?;
        line.push_str(&format!(" zero_shot_test_acc={}", e.accuracy()));
    }
    line.push('\n');
    Ok(line)
}

/// Executes a parsed command and returns what should go to stdout.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BaseNew(a) => cmd_base_new(a),
        Command::SweepShare(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Noise(a) => cmd_noise(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ValidateStore(a) => cmd_validate(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use mma_core::train::TrainConfig;
    use mma_core::{ExperimentOptions, MmaConfig};

    fn help_of(sub: &str) -> String {
        let mut cmd = Cli::command();
        cmd.build();
        let sub = cmd.find_subcommand_mut(sub).unwrap();
        sub.render_long_help().to_string()
    }

    /// The text following `--flag` up to the next flag.
    fn flag_help(help: &str, flag: &str) -> String {
        let start = help.find(&format!("--{flag} ")).or_else(|| help.find(&format!("--{flag}\n"))).unwrap_or_else(|| panic!("--{flag} missing"));
        let rest = &help[start + flag.len() + 2..];
        let end = rest.find("\n  -").unwrap_or(rest.len());
        rest[..end].split_whitespace().collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn help_defaults_match_library_defaults() {
        let m = MmaConfig::default();
        let t = TrainConfig::default();
        let o = ExperimentOptions::default();
        let help = help_of("base-new");
        let expect = [
            ("adapter", "mma".to_string()),
            ("lambda", m.lambda_text.to_string()),
            ("heads", m.heads.to_string()),
            ("down-factor", m.down_factor.to_string()),
            ("mid-factor", m.mid_factor.to_string()),
            ("attention", "mha".into()),
            ("updown", "linear".into()),
            ("logit-scale", m.logit_scale.to_string()),
            ("clip-reduction", m.clip_reduction.to_string()),
            ("lr", t.lr.to_string()),
            ("batch-size", t.batch_size.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("patience", t.patience.to_string()),
            ("max-epochs", t.max_epochs.to_string()),
            ("shots", t.shots.to_string()),
            ("val-shots", t.val_shots.to_string()),
            ("seed", t.seed.to_string()),
            ("monitor", "val-accuracy".into()),
            ("base-share", o.base_share.to_string()),
        ];
        for (flag, value) in expect {
            let h = flag_help(&help, flag);
            assert!(h.contains(&format!("[default: {value}]")), "--{flag}: {h}");
        }
        assert_eq!(m.lambda_text, m.lambda_image);
        for flag in ["lambda-text", "lambda-image", "no-text-adaptation", "eval-new-against-all", "config", "run-id", "out", "store"] {
            assert!(flag_help(&help, flag).contains("default"), "--{flag} has no default note");
        }
        let sweep = help_of("sweep-share");
        let shares: Vec<String> = DEFAULT_SWEEP_SHARES.iter().map(|s| s.to_string()).collect();
        assert!(flag_help(&sweep, "shares").contains(&format!("[default: {}]", shares.join(","))));
        assert!(flag_help(&sweep, "jobs").contains(&format!("[default: {DEFAULT_JOBS}]")));
        assert!(flag_help(&help_of("noise"), "sigma").contains(&format!("[default: {DEFAULT_SIGMA}]")));
    }

    #[test]
    fn adapter_choice_defaults_to_mma() {
        assert_eq!(crate::config::DEFAULT_ADAPTER.kind(), AdapterKind::Mma);
        assert_eq!(MmaConfig::default().attention, mma_core::AttentionVariant::Mha);
        assert_eq!(MmaConfig::default().updown, mma_core::UpDownVariant::Linear);
        assert_eq!(TrainConfig::default().monitor, mma_core::train::Monitor::ValAccuracy);
    }

    #[test]
    fn parallel_map_keeps_order() {
        for jobs in [1, 3, 16] {
            assert_eq!(parallel_map(7, jobs, |i| i * i), vec![0, 1, 4, 9, 16, 25, 36]);
        }
        assert!(parallel_map(0, 4, |i| i).is_empty());
    }

    #[test]
    fn clap_errors_become_one_line() {
        let err = Cli::try_parse_from(["mma", "base-new", "--store", "x", "--bogus"]).unwrap_err();
        let line = clap_error_line(&err);
        assert!(line.starts_with("error[usage]: "), "{line}");
        assert!(line.contains("--bogus"));
        assert!(!line.contains('\n'));
    }
}
