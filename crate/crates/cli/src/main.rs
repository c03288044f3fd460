//! `clab`: command-line laboratory for posterior collapse in Gaussian VAEs.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, malformed config,
//! missing file), 2 runtime failure (diverged training, internal
//! inconsistency, I/O failure mid-run).

mod config;
mod manifest;

mod spectrum_io;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use manifest::ManifestBuilder;
use std::io::Write;
use std::path::PathBuf;

use clab_core::criterion::{predict_collapse, ControlParameter};
use clab_core::datasets::{
    generate_synthetic, load_data_matrix, load_images, preprocess, save_data_matrix, ImageFormat,
    ImagePreprocessSpec, SyntheticSpec,
};
use clab_core::error::Error as CoreError;
use clab_core::spectrum::spectrum_of;
use clab_core::stability::stability_verdict;
use clab_core::sweep::{estimate_critical_point, fit_kl_branch, records_to_csv, run_sweep, FitFamily, SweepRecord};
use clab_core::vae::train;

#[derive(Parser)]
#[command(name = "clab", version, about = "Numerical laboratory for posterior collapse in Gaussian VAEs")]
struct Cli {
    /// Worker threads for sweeps (default: available parallelism, or
    /// CLAB_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Progress verbosity: 0 quiet, 1 progress lines (or CLAB_VERBOSITY).
    #[arg(long, global = true)]
    verbosity: Option<u8>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian dataset with spectrum exp(−(i−1)·decay).
    GenData(GenDataArgs),
    /// Ingest raw image files into a sample matrix plus its spectrum.
    Ingest(IngestArgs),
    /// Estimate the covariance spectrum of a dataset file.
    Spectrum(SpectrumArgs),
    /// Evaluate the collapse criterion for given σ'² and β.
    Predict(PredictArgs),
    /// Check stability of the collapsed solution (analytic + numeric).
    Stability(StabilityArgs),
    /// Train one VAE from a config file.
    Train(TrainArgs),
    /// Sweep the control parameter over a grid.
    Sweep(SweepArgs),
    /// Fit the sub-critical KL branch of sweep records.
    Fit(FitArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Data dimension N.
    #[arg(long)]
    dim: usize,
    /// Spectrum decay λ: eigenvalues exp(−(i−1)·λ).
    #[arg(long)]
    decay: f64,
    /// Sample count M.
    #[arg(long, default_value_t = 256_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mix the axis-aligned spectrum with a seeded random orthogonal basis.
    #[arg(long, default_value_t = false)]
    rotate: bool,
    /// Output sample-matrix file.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ImageFormatArg {
    Idx,
    Cifar10Binary,
}

#[derive(Args)]
struct IngestArgs {
    /// Raw dataset files, concatenated in order.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, value_enum)]
    format: ImageFormatArg,
    /// Target side length after resize.
    #[arg(long, default_value_t = 8)]
    side: usize,
    /// Keep color channels instead of luma grayscale.
    #[arg(long, default_value_t = false)]
    keep_color: bool,
    /// Skip per-pixel standardization.
    #[arg(long, default_value_t = false)]
    no_standardize: bool,
    /// Output sample-matrix file.
    #[arg(long)]
    output: PathBuf,
    /// Spectrum JSON of the preprocessed data (default: <output>.spectrum.json).
    #[arg(long)]
    spectrum_out: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Input sample-matrix file.
    #[arg(long)]
    data: PathBuf,
    /// Output spectrum JSON (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    spectrum: PathBuf,
    #[arg(long)]
    sigma2: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Which parameter the critical value refers to.
    #[arg(long, value_enum, default_value_t = ControlArg::Sigma2)]
    control: ControlArg,
    /// Output JSON file (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ControlArg {
    Sigma2,
    Beta,
}

impl From<ControlArg> for ControlParameter {
    fn from(arg: ControlArg) -> Self {
        match arg {
            ControlArg::Sigma2 => ControlParameter::DecoderVariance,
            ControlArg::Beta => ControlParameter::Beta,
        }
    }
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    spectrum: PathBuf,
    #[arg(long)]
    sigma2: f64,
    #[arg(long)]
    latent_dim: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config with data path and hyperparameters.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the config's data path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Prefix for outputs: <prefix>.metrics.jsonl and <prefix>.model.bin.
    #[arg(long)]
    output_prefix: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML sweep plan (data path, control, grid, base hyperparameters).
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Prefix for outputs: <prefix>.records.json and <prefix>.records.csv.
    #[arg(long)]
    output_prefix: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Quadratic,
    PowerLaw,
    Exponential,
}

impl From<FamilyArg> for FitFamily {
    fn from(arg: FamilyArg) -> Self {
        match arg {
            FamilyArg::Quadratic => FitFamily::Quadratic,
            FamilyArg::PowerLaw => FitFamily::PowerLaw,
            FamilyArg::Exponential => FitFamily::Exponential,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Sweep records JSON produced by `clab sweep`.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Critical point; estimated from the records when omitted.
    #[arg(long)]
    critical: Option<f64>,
    /// KL threshold for sub-critical point selection and estimation.
    #[arg(long, default_value_t = 0.01)]
    kl_threshold: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let verbosity = cli
        .verbosity
        .or_else(|| std::env::var("CLAB_VERBOSITY").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1);
    let workers = cli
        .workers
        .or_else(|| std::env::var("CLAB_WORKERS").ok().and_then(|v| v.parse().ok()));

    match dispatch(cli.command, workers, verbosity) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// Validation failures exit 1; runtime failures exit 2.
fn exit_code(error: &anyhow::Error) -> i32 {
    if let Some(core) = error.downcast_ref::<CoreError>() {
        return match core {
            CoreError::Dimension(_)
            | CoreError::ShapeMismatch(_)
            | CoreError::InvalidParameter(_)
            | CoreError::InsufficientData(_)
            | CoreError::Format { .. }
            | CoreError::NoBracket(_)
            | CoreError::NotSymmetric { .. } => 1,
            // Missing or unreadable inputs are a user problem, not a crash.
            CoreError::Io(io) => match io.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => 1,
                _ => 2,
            },
            _ => 2,
        };
    }
    if let Some(io) = error.downcast_ref::<std::io::Error>() {
        return match io.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => 1,
            _ => 2,
        };
    }
    if error.to_string().starts_with("validation:") {
        return 1;
    }
    2
}

fn validation(msg: String) -> anyhow::Error {
    anyhow::anyhow!("validation: {msg}")
}

fn dispatch(command: Command, workers: Option<usize>, verbosity: u8) -> anyhow::Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::Spectrum(args) => cmd_spectrum(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Stability(args) => cmd_stability(args),
        Command::Train(args) => cmd_train(args, verbosity),
        Command::Sweep(args) => cmd_sweep(args, workers, verbosity),
        Command::Fit(args) => cmd_fit(args),
    }
}

fn write_json_output(path: &Option<PathBuf>, json: &str, command: &str, config: serde_json::Value) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            std::fs::write(p, json).with_context(|| format!("cannot write {}", p.display()))?;
            let mut m = ManifestBuilder::new(command, config);
            m.output(p);
            m.write()?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        data_dim: args.dim,
        decay: args.decay,
        sample_count: args.samples,
        seed: args.seed,
        rotate: args.rotate,
    };
    spec.validate().map_err(|e| validation(e.to_string()))?;
    let data = generate_synthetic(&spec)?;
    save_data_matrix(&args.output, &data)
        .with_context(|| format!("cannot write {}", args.output.display()))?;
    let mut m = ManifestBuilder::new("gen-data", serde_json::to_value(&spec)?).seed(args.seed);
    m.output(&args.output);
    m.write()?;
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> anyhow::Result<()> {
    let format = match args.format {
        ImageFormatArg::Idx => ImageFormat::Idx,
        ImageFormatArg::Cifar10Binary => ImageFormat::Cifar10Binary,
    };
    let mut merged: Option<clab_core::datasets::ImageTensor> = None;
    for path in &args.input {
        let tensor = load_images(path, format)
            .with_context(|| format!("cannot load {}", path.display()))?;
        merged = Some(match merged {
            None => tensor,
            Some(mut acc) => {
                if (acc.height, acc.width, acc.channels) != (tensor.height, tensor.width, tensor.channels) {
                    bail!(validation(format!(
                        "image shape of {} does not match earlier inputs",
                        path.display()
                    )));
                }
                acc.count += tensor.count;
                acc.data.extend_from_slice(&tensor.data);
                acc
            }
        });
    }
    let images = merged.ok_or_else(|| validation("no input files".into()))?;
    let spec = ImagePreprocessSpec {
        target_side: args.side,
        grayscale: !args.keep_color,
        standardize: !args.no_standardize,
    };
    let (data, info) = preprocess(&images, &spec)?;
    save_data_matrix(&args.output, &data)?;
    let spectrum = spectrum_of(&data)?;
    let spectrum_path = args
        .spectrum_out
        .clone()
        .unwrap_or_else(|| append_ext(&args.output, ".spectrum.json"));
    spectrum_io::save_spectrum(&spectrum_path, &spectrum)?;

    eprintln!(
        "ingested {} images -> {}x{} (clamped pixels: {}), max eigenvalue {:.4}",
        images.count,
        data.samples(),
        data.dim(),
        info.clamped_pixels,
        spectrum.max_eigenvalue()
    );
    let mut m = ManifestBuilder::new(
        "ingest",
        serde_json::json!({
            "inputs": args.input,
            "format": format,
            "preprocess": spec,
            "clamped_pixels": info.clamped_pixels,
        }),
    );
    m.output(&args.output);
    m.output(&spectrum_path);
    m.write()?;
    Ok(())
}

fn append_ext(path: &PathBuf, suffix: &str) -> PathBuf {
    let mut os = path.clone().into_os_string();
    os.push(suffix);
    PathBuf::from(os)
}

fn cmd_spectrum(args: SpectrumArgs) -> anyhow::Result<()> {
    let data = load_data_matrix(&args.data)
        .with_context(|| format!("cannot load {}", args.data.display()))?;
    let spectrum = spectrum_of(&data)?;
    let json = serde_json::to_string_pretty(&spectrum_io::SpectrumFile::from_spectrum(&spectrum))?;
    write_json_output(
        &args.output,
        &json,
        "spectrum",
        serde_json::json!({ "data": args.data }),
    )
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let spectrum = spectrum_io::load_spectrum(&args.spectrum)?;
    let prediction = predict_collapse(&spectrum, args.sigma2, args.beta, args.control.into())?;
    let json = serde_json::to_string_pretty(&prediction)?;
    write_json_output(
        &args.output,
        &json,
        "predict",
        serde_json::json!({
            "spectrum": args.spectrum,
            "sigma2": args.sigma2,
            "beta": args.beta,
        }),
    )
}

fn cmd_stability(args: StabilityArgs) -> anyhow::Result<()> {
    let spectrum = spectrum_io::load_spectrum(&args.spectrum)?;
    let report = stability_verdict(&spectrum, args.sigma2, args.latent_dim)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_json_output(
        &args.output,
        &json,
        "stability",
        serde_json::json!({
            "spectrum": args.spectrum,
            "sigma2": args.sigma2,
            "latent_dim": args.latent_dim,
        }),
    )
}

fn cmd_train(args: TrainArgs, verbosity: u8) -> anyhow::Result<()> {
    let mut config = config::load_train_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.hyper.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.hyper.epochs = epochs;
    }
    if let Some(data) = args.data {
        config.data = data;
    }
    let data = load_data_matrix(&config.data)
        .with_context(|| format!("cannot load {}", config.data.display()))?;

    let metrics_path = append_ext(&args.output_prefix, ".metrics.jsonl");
    let model_path = append_ext(&args.output_prefix, ".model.bin");
    let metrics_file = std::fs::File::create(&metrics_path)
        .with_context(|| format!("cannot create {}", metrics_path.display()))?;
    let mut metrics_writer = std::io::BufWriter::new(metrics_file);

    let mut stream_error: Option<std::io::Error> = None;
    let report = train(&config.hyper, &data, |metrics| {
        if stream_error.is_none() {
            let line = serde_json::to_string(metrics).expect("metrics serialize");
            if let Err(e) = writeln!(metrics_writer, "{line}") {
                stream_error = Some(e);
            }
            if verbosity > 0 {
                eprintln!(
                    "epoch {:4}  elbo {:+.5}  kl {:.6}",
                    metrics.epoch, metrics.elbo, metrics.kl_term
                );
            }
        }
    })?;
    if let Some(e) = stream_error {
        return Err(e).context("failed streaming metrics");
    }
    if let Some(fm) = &report.final_metrics {
        writeln!(metrics_writer, "{}", serde_json::to_string(fm)?)?;
    }
    metrics_writer.flush()?;
    clab_core::checkpoint::save_model(&model_path, &report.model)?;

    let mut m = ManifestBuilder::new("train", serde_json::to_value(&config)?).seed(config.hyper.seed);
    m.output(&metrics_path);
    m.output(&model_path);
    m.write()?;

    if let Some(reason) = &report.divergence {
        bail!("training diverged: {reason}");
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs, workers: Option<usize>, verbosity: u8) -> anyhow::Result<()> {
    let mut config = config::load_sweep_config(&args.plan)?;
    if let Some(seed) = args.seed {
        config.plan.base.seed = seed;
    }
    if let Some(data) = args.data {
        config.data = data;
    }
    let data = load_data_matrix(&config.data)
        .with_context(|| format!("cannot load {}", config.data.display()))?;

    let records = match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("cannot build worker pool")?;
            pool.install(|| run_sweep(&config.plan, &data))?
        }
        None => run_sweep(&config.plan, &data)?,
    };

    if verbosity > 0 {
        for r in &records {
            eprintln!(
                "{} = {:<8} kl {:.6}  elbo {:+.5}  line {:+.5}  predicted_collapsed {}{}",
                r.control,
                r.control_value,
                r.metrics.kl_term,
                r.metrics.elbo,
                r.collapse_line,
                r.predicted_collapsed,
                if r.replicates_failed > 0 {
                    format!("  [{} replicate(s) failed]", r.replicates_failed)
                } else {
                    String::new()
                }
            );
        }
    }

    let json_path = append_ext(&args.output_prefix, ".records.json");
    let csv_path = append_ext(&args.output_prefix, ".records.csv");
    std::fs::write(&json_path, serde_json::to_string_pretty(&records)?)?;
    std::fs::write(&csv_path, records_to_csv(&records))?;

    let mut m = ManifestBuilder::new("sweep", serde_json::to_value(&config)?).seed(config.plan.base.seed);
    m.output(&json_path);
    m.output(&csv_path);
    m.write()?;
    Ok(())
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.records)
        .with_context(|| format!("cannot read {}", args.records.display()))?;
    let records: Vec<SweepRecord> = serde_json::from_str(&text)
        .with_context(|| format!("malformed records JSON in {}", args.records.display()))?;
    let critical = match args.critical {
        Some(c) => c,
        None => estimate_critical_point(&records, args.kl_threshold)?,
    };
    let fit = fit_kl_branch(&records, critical, args.family.into(), args.kl_threshold)?;
    let json = serde_json::to_string_pretty(&fit)?;
    write_json_output(
        &args.output,
        &json,
        "fit",
        serde_json::json!({
            "records": args.records,
            "family": fit.family,
            "critical": critical,
            "kl_threshold": args.kl_threshold,
        }),
    )
}
