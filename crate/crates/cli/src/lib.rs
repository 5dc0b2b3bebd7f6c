//! Command-line driver: pretraining, linear probing, spectrum analysis and
//! self-verification.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use ftrl_core::checkpoint::Checkpoint;
use ftrl_core::data::{load_cifar10, split, synthetic_gratings, Dataset};
use ftrl_core::dft::{
    aggregate_magnitude_by, write_spectrum_csv, DftDims, Formulation, MaskBand, Normalization, SpectrumFraction,
    TargetSpec,
};
use ftrl_core::models::{EncoderConfig, EncoderKind, Model};
use ftrl_core::nn::OptimizerKind;
use ftrl_core::trainer::{linear_probe, pretrain, ProbeConfig, ProbeOutcome, RunMetrics, TargetKind, TrainConfig};
use ftrl_core::verify::{dft_suite, grad_suite, DftSuiteOptions, SuiteReport};
use ftrl_core::Tensor;

pub mod experiment;

/// A failure with a short machine-readable category.
#[derive(Debug, Error)]
#[error("error[{kind}]: {message}")]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }
}

impl From<ftrl_core::Error> for CliError {
    fn from(e: ftrl_core::Error) -> Self {
        use ftrl_core::Error as E;
        let kind = match &e {
            E::InvalidConfig(_) | E::InvalidArgument(_) => "config",
            E::Io { .. } => "io",
            E::Truncated { .. } => "truncated",
            E::Corrupt { .. } => "corrupt",
            E::NonFiniteLoss { .. } => "non-finite",
            E::EmptyDataset | E::LabelOutOfRange { .. } => "data",
            _ => "internal",
        };
        // keep the reason on a single line
        CliError::new(kind, e.to_string().replace('\n', " "))
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "ftrl", version, about = "DFT-target representation learning", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain an encoder on DFT (or pixel) targets.
    Pretrain(PretrainArgs),
    /// Train a linear classifier on a frozen checkpointed encoder.
    Probe(ProbeArgs),
    /// Mean width-DFT magnitude per frequency over a dataset.
    Spectrum(SpectrumArgs),
    /// Run the transform and gradient self-checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn is_on(self) -> bool {
        self == OnOff::On
    }

    fn name(self) -> &'static str {
        if self.is_on() {
            "on"
        } else {
            "off"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Orthonormal,
    Unnormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BandArg {
    Symmetric,
    OneSided,
}

/// Regression target named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetChoice {
    Dft(Formulation),
    Pixels,
}

impl std::fmt::Display for TargetChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetChoice::Dft(form) => write!(f, "{form}"),
            TargetChoice::Pixels => f.write_str("pixels"),
        }
    }
}

fn parse_target(s: &str) -> Result<TargetChoice, String> {
    if s == "pixels" {
        return Ok(TargetChoice::Pixels);
    }
    s.parse::<Formulation>().map(TargetChoice::Dft).map_err(|e| e.to_string())
}

fn parse_fraction(s: &str) -> Result<SpectrumFraction, String> {
    let f: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    SpectrumFraction::from_f64(f).map_err(|e| e.to_string())
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a positive integer")))
        .collect()
}

fn parse_hidden(s: &str) -> Result<[usize; 3], String> {
    let v = parse_list(s)?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected three widths, got {}", v.len()))
}

/// Data source: a CIFAR-10 binary directory or `synthetic:N[:SIDE]`.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// CIFAR-10 binary directory, or `synthetic:N[:SIDE]` for generated gratings.
    #[arg(long)]
    pub data: String,
    /// Fraction of the training pool held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Seed of the train/validation permutation.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Use only the first N samples of the training split.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PretrainArgs {
    /// Key-value file (`key = value` per line) using the long flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// real, imag, real_imag, magnitude, phase, mag_phase or pixels.
    #[arg(long, default_value = "magnitude", value_parser = parse_target)]
    pub target: TargetChoice,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub dft_dims: u8,
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    pub sequential: OnOff,
    /// 1, 0.25 or 0.125 of the width spectrum.
    #[arg(long, default_value = "1", value_parser = parse_fraction)]
    pub spectrum_fraction: SpectrumFraction,
    #[arg(long, value_enum, default_value_t = BandArg::Symmetric)]
    pub band: BandArg,
    #[arg(long, value_enum, default_value_t = NormArg::Orthonormal)]
    pub normalization: NormArg,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// compact or residual.
    #[arg(long, default_value = "residual")]
    pub encoder: EncoderKind,
    /// Comma-separated channel widths; defaults depend on the encoder.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long, default_value = "512,1024,2048", value_parser = parse_hidden)]
    pub decoder_hidden: [usize; 3],
    /// Representation width of the sequential chain.
    #[arg(long)]
    pub chain_width: Option<usize>,
    /// Run the linear probe after pretraining and append its records.
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    pub probe: OnOff,
    #[arg(long, default_value_t = 3)]
    pub probe_epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    /// Metrics CSV; defaults to `probe.csv` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub data: String,
    /// Aggregate only the first N images of the training pool.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Dft,
    Grad,
    All,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
    /// Random tensors per transform dimensionality.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Training pool (split), optional test set.
pub struct DataBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

/// Loads the training pool and test set named by `spec`.
pub fn load_pool(spec: &str) -> CliResult<(Dataset, Option<Dataset>)> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || CliError::new("config", format!("bad synthetic data spec `{spec}` (want synthetic:N[:SIDE])"));
        let n: usize = parts[0].parse().map_err(|_| bad())?;
        let side: usize = match parts.get(1) {
            Some(s) => s.parse().map_err(|_| bad())?,
            None => 32,
        };
        if parts.len() > 2 || n == 0 || side == 0 {
            return Err(bad());
        }
        let pool = synthetic_gratings(n, [3, side, side], 0)?;
        let test = synthetic_gratings((n / 5).max(10), [3, side, side], 1)?;
        return Ok((pool, Some(test)));
    }
    let dir = Path::new(spec);
    if !dir.is_dir() {
        return Err(CliError::new("data", format!("dataset directory `{spec}` not found")));
    }
    let (pool, test) = load_cifar10(dir)?;
    Ok((pool, Some(test)))
}

pub fn load_data(args: &DataArgs) -> CliResult<DataBundle> {
    let (pool, test) = load_pool(&args.data)?;
    let (mut train, val) = split(&pool, args.val_fraction, args.split_seed)?;
    if let Some(n) = args.subset {
        if n == 0 {
            return Err(CliError::new("config", "--subset must be positive"));
        }
        train = train.take(n);
    }
    Ok(DataBundle { train, val, test })
}

impl PretrainArgs {
    pub fn train_config(&self, image_shape: [usize; 3]) -> CliResult<TrainConfig> {
        let target = match self.target {
            TargetChoice::Pixels => TargetKind::Pixels,
            TargetChoice::Dft(f) => {
                let dims = DftDims::from_count(self.dft_dims as usize)?;
                TargetKind::Dft(TargetSpec {
                    dims,
                    formulation: f,
                    fraction: self.spectrum_fraction,
                    normalization: match self.normalization {
                        NormArg::Orthonormal => Normalization::Orthonormal,
                        NormArg::Unnormalized => Normalization::Unnormalized,
                    },
                    band: match self.band {
                        BandArg::Symmetric => MaskBand::Symmetric,
                        BandArg::OneSided => MaskBand::OneSided,
                    },
                })
            }
        };
        let mut encoder = match self.encoder {
            EncoderKind::CompactConv => EncoderConfig::compact(image_shape),
            EncoderKind::ResidualSmall => EncoderConfig {
                image_shape,
                ..EncoderConfig::default()
            },
        };
        if let Some(w) = &self.widths {
            encoder.widths = w.clone();
        }
        if let Some(e) = self.embedding_dim {
            encoder.embedding_dim = e;
        }
        let cfg = TrainConfig {
            target,
            sequential: self.sequential.is_on(),
            epochs: self.epochs,
            batch_size: self.batch,
            optimizer: OptimizerKind::adam(self.lr),
            seed: self.seed,
            probe_epochs: self.probe_epochs,
            encoder,
            decoder_hidden: self.decoder_hidden,
            chain_width: self.chain_width,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved options in config-file syntax.
    pub fn effective_config(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data", self.data.data.clone());
        kv("val-fraction", self.data.val_fraction.to_string());
        kv("split-seed", self.data.split_seed.to_string());
        if let Some(n) = self.data.subset {
            kv("subset", n.to_string());
        }
        kv("target", self.target.to_string());
        kv("dft-dims", self.dft_dims.to_string());
        kv("sequential", self.sequential.name().into());
        kv("spectrum-fraction", self.spectrum_fraction.as_f64().to_string());
        kv(
            "band",
            match self.band {
                BandArg::Symmetric => "symmetric",
                BandArg::OneSided => "one-sided",
            }
            .into(),
        );
        kv(
            "normalization",
            match self.normalization {
                NormArg::Orthonormal => "orthonormal",
                NormArg::Unnormalized => "unnormalized",
            }
            .into(),
        );
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("seed", self.seed.to_string());
        kv("encoder", self.encoder.to_string());
        if let Some(w) = &self.widths {
            kv("widths", join(w));
        }
        if let Some(e) = self.embedding_dim {
            kv("embedding-dim", e.to_string());
        }
        kv("decoder-hidden", join(&self.decoder_hidden));
        if let Some(w) = self.chain_width {
            kv("chain-width", w.to_string());
        }
        kv("probe", self.probe.name().into());
        kv("probe-epochs", self.probe_epochs.to_string());
        kv("out", self.out.display().to_string());
        s
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ftrl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";

fn write_metrics(path: &Path, metrics: &RunMetrics) -> CliResult<()> {
    let mut buf = Vec::new();
    metrics.write_csv(&mut buf).map_err(|e| io_err(path, e))?;
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub struct PretrainOutput {
    pub model: Model,
    pub metrics: RunMetrics,
    pub probe: Option<ProbeOutcome>,
}

pub fn cmd_pretrain(args: &PretrainArgs, log: &mut dyn std::io::Write) -> CliResult<PretrainOutput> {
    let data = load_data(&args.data)?;
    let cfg = args.train_config(data.train.image_shape())?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let echo = args.out.join(EFFECTIVE_CONFIG_FILE);
    fs::write(&echo, args.effective_config()).map_err(|e| io_err(&echo, e))?;
    let (model, mut metrics) = pretrain(&cfg, &data.train)?;
    let ck_path = args.out.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&model).save(&ck_path)?;
    let probe = if args.probe.is_on() {
        let out = linear_probe(&model.encoder, &data.train, &data.val, data.test.as_ref(), &ProbeConfig::from(&cfg))?;
        metrics.extend(out.metrics.clone());
        Some(out)
    } else {
        None
    };
    write_metrics(&args.out.join(METRICS_FILE), &metrics)?;
    let _ = writeln!(log, "target={} {}", cfg.target, metrics.summary());
    let _ = writeln!(log, "wrote {} and {}", ck_path.display(), args.out.join(METRICS_FILE).display());
    Ok(PretrainOutput { model, metrics, probe })
}

pub fn cmd_probe(args: &ProbeArgs, log: &mut dyn std::io::Write) -> CliResult<ProbeOutcome> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let encoder = ck.load_encoder()?;
    let data = load_data(&args.data)?;
    let expected = ck.encoder_config()?.image_shape;
    if data.train.image_shape() != expected {
        return Err(CliError::new(
            "config",
            format!("checkpoint encoder expects {:?} images, data has {:?}", expected, data.train.image_shape()),
        ));
    }
    let cfg = ProbeConfig {
        epochs: args.epochs,
        seed: args.seed,
        ..ProbeConfig::default()
    };
    let out = linear_probe(&encoder, &data.train, &data.val, data.test.as_ref(), &cfg)?;
    let path = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(|p| p.join("probe.csv"))
            .unwrap_or_else(|| PathBuf::from("probe.csv"))
    });
    write_metrics(&path, &out.metrics)?;
    if let Some(r) = out.final_record() {
        let _ = writeln!(
            log,
            "top1_val={:.2} top5_val={:.2} top1_train={:.2} top5_train={:.2}",
            r.acc1_val.unwrap_or(f64::NAN),
            r.acc5_val.unwrap_or(f64::NAN),
            r.acc1_train.unwrap_or(f64::NAN),
            r.acc5_train.unwrap_or(f64::NAN)
        );
    }
    if let Some((t1, t5)) = out.test {
        let _ = writeln!(log, "top1_test={t1:.2} top5_test={t5:.2}");
    }
    Ok(out)
}

/// Aggregated spectrum of (a prefix of) the training pool.
pub fn spectrum_of(data: &str, subset: Option<usize>) -> CliResult<Tensor> {
    let (pool, _) = load_pool(data)?;
    let pool = match subset {
        Some(n) => pool.take(n),
        None => pool,
    };
    Ok(aggregate_magnitude_by(pool.len(), &pool.image_shape(), |i| pool.image(i))?)
}

pub fn cmd_spectrum(args: &SpectrumArgs, log: &mut dyn std::io::Write) -> CliResult<Tensor> {
    let spectrum = spectrum_of(&args.data, args.subset)?;
    let mut buf = Vec::new();
    write_spectrum_csv(&mut buf, &spectrum).map_err(|e| io_err(&args.out, e))?;
    fs::write(&args.out, buf).map_err(|e| io_err(&args.out, e))?;
    let d = spectrum.data();
    let argmin = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(0);
    let _ = writeln!(log, "A[0]={:.6} min at k={argmin} ({:.6})", d[0], d[argmin]);
    Ok(spectrum)
}

pub fn cmd_verify(args: &VerifyArgs, log: &mut dyn std::io::Write) -> CliResult<SuiteReport> {
    let mut report = SuiteReport::default();
    if matches!(args.suite, Suite::Dft | Suite::All) {
        report.extend(dft_suite(&DftSuiteOptions {
            cases_per_dims: args.cases,
            seed: args.seed,
            ..DftSuiteOptions::default()
        }));
    }
    if matches!(args.suite, Suite::Grad | Suite::All) {
        report.extend(grad_suite(args.seed)?);
    }
    let _ = write!(log, "{report}");
    if report.passed() {
        Ok(report)
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::new("verify", format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

/// Splices `--config` file entries in front of the explicit flags so that
/// later (explicit) occurrences win.
pub fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if a == "--config" {
            path = strs.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = path else { return Ok(args) };
    if args.len() < 2 {
        return Ok(args);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let mut file_args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::new(
                "config",
                format!("{}:{}: expected `key = value`", path.display(), n + 1),
            ));
        };
        let k = k.trim();
        if k == "config" {
            continue;
        }
        file_args.push(OsString::from(format!("--{k}")));
        file_args.push(OsString::from(v.trim()));
    }
    let mut out = args[..2].to_vec();
    out.extend(file_args);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

/// Parses and runs one invocation, returning the process exit code.
pub fn run(args: Vec<OsString>, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32 {
    let result = expand_config(args).and_then(|args| match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(&cli, out),
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            Ok(())
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            Err(CliError::new("usage", line))
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            1
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn std::io::Write) -> CliResult<()> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a, out).map(|_| ()),
        Command::Probe(a) => cmd_probe(a, out).map(|_| ()),
        Command::Spectrum(a) => cmd_spectrum(a, out).map(|_| ()),
        Command::Verify(a) => cmd_verify(a, out).map(|_| ()),
    }
}
