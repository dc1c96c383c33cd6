//! Command-line surface: dataset generation, training, evaluation,
//! analysis and the external feature-extraction bridge.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis;
use crate::augment::{apply_policy, AugmentPolicy};
use crate::config::ExperimentConfig;
use crate::dataio::manifest::{read_manifest, write_manifest, Manifest, Split};
use crate::dataio::store::{read_feature_stack, write_index, FeatureProvider, IndexEntry, PrecomputedProvider};
use crate::dataio::synth::{SynthSpec, SyntheticDataset};
use crate::dataio::wave::{peak_normalize, read_wav_mono, write_wav_mono};
use crate::error::Error;
use crate::matrix::Matrix;
use crate::model::Model;
use crate::schema::Task;
use crate::trainer::{evaluate_split, train_with_options, TrainOptions};

#[derive(Parser)]
#[command(
    name = "vbchain",
    version,
    about = "Multi-task vocal-burst affect recognition with bi-directional regression chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset with planted structure
    SynthData(SynthArgs),
    /// Train on a dataset directory (manifest.csv + index.jsonl + features)
    Train(TrainArgs),
    /// Evaluate a model artifact on one split of a dataset
    Evaluate(EvaluateArgs),
    /// Dataset and model diagnostics, written under <out>/analysis/
    Analyze(AnalyzeArgs),
    /// Preprocess WAVs and drive an external feature-extraction adapter
    PrepareFeatures(PrepareArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Label and feature noise standard deviation
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Layers per generated feature stack
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Frames per stack
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Embedding width
    #[arg(long, default_value_t = 32)]
    dim: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, records and reports
    #[arg(long)]
    out: PathBuf,
    /// Target task
    #[arg(long, value_parser = ["two", "high", "culture", "type", "country"])]
    task: String,
    /// Experiment configuration JSON; desk-scale defaults otherwise
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable waveform augmentation in the effective configuration
    #[arg(long)]
    no_augment: bool,
    /// Replace the chain heads with independent sigmoid heads (ablation)
    #[arg(long)]
    no_chains: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue a previously checkpointed run in --out
    #[arg(long)]
    resume: bool,
    /// Interrupt cleanly after this epoch (the run stays resumable)
    #[arg(long)]
    stop_after_epoch: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = ["train", "val", "test"])]
    split: String,
    /// Output directory for metrics.json and metrics.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    what: AnalyzeCommand,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Pearson correlation matrix of the training-split emotion labels
    Corr(AnalyzeIo),
    /// Arousal-valence centroids and density per burst type
    Av(AnalyzeIo),
    /// Per-split per-country sample counts
    CountryDist(AnalyzeIo),
    /// Chain-order table from the training split
    ChainOrder(AnalyzeIo),
}

#[derive(Args)]
struct AnalyzeIo {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    /// Manifest CSV naming the samples to process
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding <file_id>.wav inputs (mono PCM, 16 kHz)
    #[arg(long)]
    wav_dir: PathBuf,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Feature source; only `external` is supported
    #[arg(long, value_parser = ["external"])]
    provider: String,
    /// Shell command reading preprocessed WAV paths on stdin and writing
    /// one <file_id>.vbfs per line into its working directory
    #[arg(long)]
    adapter_cmd: String,
    /// Skip the training-split augmentation pass
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Parses and executes; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(message)) => {
            eprintln!("usage error: {message}");
            2
        }
        Err(Failure::Runtime(error)) => {
            eprintln!("error: {error}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::PrepareFeatures(args) => cmd_prepare_features(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<ExperimentConfig>, Failure> {
    match path {
        Some(p) => Ok(Some(ExperimentConfig::from_path(p)?)),
        None => Ok(None),
    }
}

fn cmd_synth_data(args: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        n_samples: args.n as usize,
        seed: args.seed,
        noise_std: args.noise,
        num_layers: args.layers,
        frames: args.frames,
        feature_dim: args.dim,
        ..SynthSpec::default()
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let dataset = SyntheticDataset::new(spec, Default::default())?;
    dataset.write_to_dir(&args.out)?;
    let manifest = dataset.manifest()?;
    let count = |split: Split| manifest.split(split).len();
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        manifest.len(),
        args.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

/// Desk-scale defaults for runs without a config file: batch 64 and stack
/// dimensions inferred from the dataset.
fn desk_config(data: &Path, manifest: &Manifest) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::default();
    config.train.batch_size = 64;
    let provider = PrecomputedProvider::open(data)?;
    if let Some(first) = manifest.samples().first() {
        let stack = provider.stack(&first.file_id)?;
        config.model.num_layers = stack.num_layers();
        config.model.feature_dim = stack.dim();
    }
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let task: Task = args.task.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;

    let mut config = match load_config(&args.config)? {
        Some(config) => config,
        None => {
            let schema = Default::default();
            let manifest = read_manifest(&args.data.join("manifest.csv"), &schema)?;
            desk_config(&args.data, &manifest)?
        }
    };
    config.model.target_task = task;
    if args.no_augment {
        config.data.augment = None;
    }
    if args.no_chains {
        config.model.use_chains = false;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.max_epochs {
        config.train.max_epochs = v;
    }
    if let Some(v) = args.patience {
        config.train.patience = v;
    }
    if args.max_steps.is_some() {
        config.train.max_steps = args.max_steps;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    config.validate()?;

    let manifest = read_manifest(&args.data.join("manifest.csv"), &config.schema)?;
    let provider = PrecomputedProvider::open(&args.data)?;

    // fail early when the configured dimensions do not match the data
    if let Some(first) = manifest.samples().first() {
        let stack = provider.stack(&first.file_id)?;
        if stack.num_layers() != config.model.num_layers
            || stack.dim() != config.model.feature_dim
        {
            return Err(Failure::Runtime(Error::ShapeMismatch(format!(
                "dataset stacks are ({}, *, {}) but the config expects ({}, *, {})",
                stack.num_layers(),
                stack.dim(),
                config.model.num_layers,
                config.model.feature_dim
            ))));
        }
    }

    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    let options = TrainOptions { resume: args.resume, stop_after_epoch: args.stop_after_epoch };
    let outcome = train_with_options(&manifest, &provider, &config, &args.out, &options)?;
    println!(
        "best val {} = {:.4} at epoch {} ({} steps run)",
        task.name(),
        outcome.best_val_metric,
        outcome.state.best_epoch,
        outcome.state.steps_done
    );
    for line in outcome.final_report.summary_lines() {
        println!("{line}");
    }
    println!("artifact: {}", args.out.join("artifact.bin").display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let split: Split = args.split.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let (model, _hash) = Model::load(&args.artifact)?;
    let manifest = read_manifest(&args.data.join("manifest.csv"), model.schema())
        .map_err(|e| Failure::Runtime(Error::SchemaMismatch(e.to_string())))?;
    let provider = PrecomputedProvider::open(&args.data)?;
    let report = evaluate_split(&model, &provider, &manifest, split, model.schema())?;

    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    std::fs::write(args.out.join("metrics.json"), report.to_json_pretty()).map_err(Error::from)?;
    report.write_csv(&args.out.join("metrics.csv"))?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let io = match &args.what {
        AnalyzeCommand::Corr(io)
        | AnalyzeCommand::Av(io)
        | AnalyzeCommand::CountryDist(io)
        | AnalyzeCommand::ChainOrder(io) => io,
    };
    let schema = match load_config(&io.config)? {
        Some(config) => config.schema,
        None => Default::default(),
    };
    let manifest = read_manifest(&io.data.join("manifest.csv"), &schema)?;
    let out = io.out.join("analysis");
    std::fs::create_dir_all(&out).map_err(Error::from)?;

    match args.what {
        AnalyzeCommand::Corr(_) => {
            let rows: Vec<&Vec<f64>> = manifest
                .split(Split::Train)
                .into_iter()
                .filter_map(|s| s.high.as_ref())
                .collect();
            if rows.len() < 3 {
                return Err(Failure::Runtime(Error::MissingLabels {
                    task: "high".into(),
                    message: format!(
                        "correlation needs at least 3 training samples with high labels, got {}",
                        rows.len()
                    ),
                }));
            }
            let data = Matrix::from_vec(
                rows.len(),
                schema.emotions().len(),
                rows.iter().flat_map(|r| r.iter().copied()).collect(),
            )?;
            let matrix = analysis::correlation_matrix(&data, schema.emotions())?;
            analysis::write_correlation_csv(&matrix, schema.emotions(), &out.join("corr.csv"))?;
            println!("wrote {}", out.join("corr.csv").display());
        }
        AnalyzeCommand::Av(_) => {
            let summary = analysis::av_scatter_summary(&manifest, &schema, 10)?;
            summary.write_csv(&out)?;
            for skipped in &summary.skipped_types {
                println!("note: type `{skipped}` has no labeled samples");
            }
            println!("wrote {}", out.join("av_centroids.csv").display());
            println!("wrote {}", out.join("av_density.csv").display());
        }
        AnalyzeCommand::CountryDist(_) => {
            let rows = analysis::country_distribution(&manifest);
            analysis::write_country_distribution_csv(&rows, &out.join("country_distribution.csv"))?;
            println!("wrote {}", out.join("country_distribution.csv").display());
        }
        AnalyzeCommand::ChainOrder(_) => {
            let report = analysis::chain_order_report(&manifest, &schema)?;
            report.write_csv(&out.join("chain_order.csv"))?;
            for row in &report.rows {
                println!("{:>2}  {:<16} {:.4}", row.rank, row.label, row.accumulated_abs_r);
            }
            println!("wrote {}", out.join("chain_order.csv").display());
        }
    }
    Ok(())
}

/// Feature-preparation preprocessing: peak normalization always, waveform
/// augmentation only for training-split samples with a policy configured.
/// Evaluation data cannot be augmented through this path by construction.
pub fn preprocess_waveform(
    wave: &[f32],
    split: Split,
    policy: Option<&AugmentPolicy>,
    sample_index: u64,
) -> crate::error::Result<Vec<f32>> {
    let normalized = peak_normalize(wave)?;
    if normalized.all_zero {
        log::warn!("all-zero waveform left unchanged");
    }
    match (policy, split) {
        (Some(policy), Split::Train) => {
            apply_policy(&normalized.samples, policy, &mut policy.rng_for_sample(sample_index))
        }
        _ => Ok(normalized.samples),
    }
}

fn cmd_prepare_features(args: PrepareArgs) -> Result<(), Failure> {
    let config = load_config(&args.config)?.unwrap_or_default();
    let schema = config.schema.clone();
    let manifest = read_manifest(&args.manifest, &schema)?;

    let policy: Option<AugmentPolicy> = if args.no_augment {
        None
    } else {
        Some(config.data.augment.clone().unwrap_or_default())
    };

    let features_dir = args.out.join("features");
    let processed_dir = args.out.join("processed_wav");
    std::fs::create_dir_all(&features_dir).map_err(Error::from)?;
    std::fs::create_dir_all(&processed_dir).map_err(Error::from)?;

    let mut child = std::process::Command::new("sh")
        .arg("-c")
        .arg(&args.adapter_cmd)
        .current_dir(&features_dir)
        .stdin(std::process::Stdio::piped())
        .spawn()
        .map_err(|e| Error::Adapter(format!("failed to spawn `{}`: {e}", args.adapter_cmd)))?;
    let mut stdin = child.stdin.take().expect("piped stdin");

    for (index, sample) in manifest.samples().iter().enumerate() {
        let wav_path = args.wav_dir.join(format!("{}.wav", sample.file_id));
        let (wave, sample_rate) = read_wav_mono(&wav_path)?;
        if sample_rate != 16_000 {
            return Err(Failure::Runtime(Error::InvalidArgument(format!(
                "{}: expected 16 kHz input, got {sample_rate} Hz",
                wav_path.display()
            ))));
        }
        let processed = preprocess_waveform(&wave, sample.split, policy.as_ref(), index as u64)?;
        let processed_path = processed_dir.join(format!("{}.wav", sample.file_id));
        write_wav_mono(&processed_path, &processed, 16_000)?;
        writeln!(stdin, "{}", processed_path.display())
            .map_err(|e| Error::Adapter(format!("adapter stdin closed early: {e}")))?;
    }
    drop(stdin);
    let status =
        child.wait().map_err(|e| Error::Adapter(format!("adapter did not terminate: {e}")))?;
    if !status.success() {
        return Err(Failure::Runtime(Error::Adapter(format!(
            "adapter exited with {status}"
        ))));
    }

    // collect the adapter's output into an index
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    for sample in manifest.samples() {
        let rel = format!("features/{}.vbfs", sample.file_id);
        let path = args.out.join(&rel);
        if !path.exists() {
            missing.push(sample.file_id.clone());
            continue;
        }
        let stack = read_feature_stack(&path)?;
        entries.push(IndexEntry {
            file_id: sample.file_id.clone(),
            path: rel,
            frames: stack.frames(),
            dim: stack.dim(),
        });
    }
    if !missing.is_empty() {
        return Err(Failure::Runtime(Error::Adapter(format!(
            "adapter produced no output for {} file(s): {}",
            missing.len(),
            missing.join(", ")
        ))));
    }
    write_index(&entries, &args.out.join("index.jsonl"))?;
    write_manifest(&manifest, &schema, &args.out.join("manifest.csv"))?;
    println!("prepared {} feature stacks in {}", entries.len(), args.out.display());
    Ok(())
}

