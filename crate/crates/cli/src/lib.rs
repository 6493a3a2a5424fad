//! Command-line driver: `features`, `train`, `eval`, `audit`, `quantize`
//! and `reconcile`.
//!
//! Flags take the form `--key value`. `--config FILE` reads `key=value`
//! lines that act as defaults for the subcommand's flags; flags given on
//! the command line win. `TINYASC_THREADS` caps the worker pool.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage error, 3 budget
//! failure (`audit`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tinyasc::audit::{self, Budget, CountingConvention};
use tinyasc::dataset::{self, Example, Split, Vocabulary, TAU_SCENES};
use tinyasc::frontend::{log_mel, FrontendConfig};
use tinyasc::metrics;
use tinyasc::model::{self, Arch, ArchConfig, ModelGraph};
use tinyasc::nn::GeluMode;
use tinyasc::quant;
use tinyasc::train::{self, AdamConfig, TrainingConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

pub const THREADS_ENV: &str = "TINYASC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tinyasc", about = "Low-complexity acoustic scene classification", version)]
struct Cli {
    /// key=value file of flag defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// WAV file to log-Mel spectrogram CSV
    #[command(args_override_self = true)]
    Features(FeaturesArgs),
    /// Train a model and write a checkpoint plus the epoch history CSV
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Parameter and MAC report with a budget verdict
    #[command(args_override_self = true)]
    Audit(AuditArgs),
    /// Post-training INT8 quantization with a float/int8 agreement report
    #[command(args_override_self = true)]
    Quantize(QuantizeArgs),
    /// Sweep counting conventions against the published complexity table
    #[command(args_override_self = true)]
    Reconcile(ReconcileArgs),
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    #[arg(long)]
    wav: PathBuf,
    /// CSV destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GeluArg {
    Tanh,
    Erf,
}

#[derive(Debug, Args)]
struct ArchArgs {
    #[arg(long, default_value = "conv_sep")]
    arch: Arch,
    /// `f1,f2`
    #[arg(long, default_value = "48,48", value_parser = parse_filters)]
    filters: (usize, usize),
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 1)]
    patch: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    bias: bool,
    /// Conv-mixer batch norm after the patch embedding [default: true]
    #[arg(long, action = clap::ArgAction::Set)]
    patch_bn: Option<bool>,
    #[arg(long, value_enum, default_value = "tanh")]
    gelu: GeluArg,
}

impl ArchArgs {
    fn config(&self) -> ArchConfig {
        let mut cfg = ArchConfig::new(self.arch, self.filters.0, self.filters.1, self.kernel, self.patch);
        cfg.use_bias = self.bias;
        if let Some(p) = self.patch_bn {
            cfg.patch_bn = p && self.arch == Arch::ConvMixer;
        }
        cfg.gelu = match self.gelu {
            GeluArg::Tanh => GeluMode::Tanh,
            GeluArg::Erf => GeluMode::Erf,
        };
        cfg
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Tab-separated manifest (filename, scene_label[, source_label])
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory the manifest paths are relative to [default: the manifest's directory]
    #[arg(long)]
    audio_root: Option<PathBuf>,
    /// Use N synthetic examples instead of a manifest
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Seed of the synthetic examples [default: --seed]
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 15)]
    plateau_patience: usize,
    #[arg(long, default_value_t = 30)]
    early_stop_patience: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    restore_best: bool,
    /// Destination of the trained model
    #[arg(long)]
    checkpoint: PathBuf,
    /// Epoch history CSV destination; stdout when absent
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Summary CSV destination
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Confusion matrix CSV destination
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BnMacs {
    Folded,
    Counted,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Batch norm parameters counted per channel (2 or 4)
    #[arg(long, default_value_t = 4, value_parser = parse_bn_params)]
    bn_params: u8,
    #[arg(long, value_enum, default_value = "folded")]
    bn_macs: BnMacs,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    bias_macs: bool,
    #[arg(long, default_value_t = audit::MAX_PARAMS)]
    max_params: u64,
    #[arg(long, default_value_t = audit::MAX_MACS)]
    max_macs: u64,
    /// Per-layer CSV destination
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Calibration data
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination of the quantized model
    #[arg(long)]
    out: PathBuf,
    /// Agreement report destination
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReconcileArgs {
    /// Reconciliation CSV destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_filters(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |p: &str| p.parse::<usize>().map_err(|_| format!("bad filter count {p:?}"));
    match parts.as_slice() {
        [a] => Ok((num(a)?, num(a)?)),
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err("expected f1,f2".into()),
    }
}

fn parse_bn_params(s: &str) -> Result<u8, String> {
    match s.trim() {
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err("expected 2 or 4".into()),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<tinyasc::Error> for Failure {
    fn from(e: tinyasc::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<i32, Failure>;

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
fn read_config_file(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let mut args = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Failure::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)));
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key == "config" {
            return Err(Failure::Usage("config files cannot nest".into()));
        }
        args.push(format!("--{key}"));
        args.push(v.trim().to_string());
    }
    Ok(args)
}

fn config_path(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splices config-file flags in right after the subcommand so that later
/// command-line flags override them.
fn expand_argv(argv: &[String]) -> Result<Vec<String>, Failure> {
    let Some(path) = config_path(argv) else {
        return Ok(argv.to_vec());
    };
    let extra = read_config_file(&path)?;
    let names = ["features", "train", "eval", "audit", "quantize", "reconcile"];
    let Some(pos) = argv.iter().skip(1).position(|a| names.contains(&a.as_str())) else {
        return Ok(argv.to_vec());
    };
    let mut out = argv[..=pos + 1].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 2..]);
    Ok(out)
}

fn thread_cap() -> Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
    }
}

/// Entry point shared by the binary and the tests. `argv[0]` is the
/// program name.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let argv: Vec<String> = argv.iter().map(|s| s.as_ref().to_string()).collect();
    let outcome = expand_argv(&argv).and_then(|full| {
        let cli = match Cli::try_parse_from(&full) {
            Ok(cli) => cli,
            Err(e) => {
                let _ = e.print();
                return Ok(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
            }
        };
        let threads = thread_cap()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        pool.install(|| dispatch(cli.command))
    });
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `tinyasc --help` for usage.");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Features(a) => features(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Audit(a) => audit_cmd(a),
        Command::Quantize(a) => quantize(a),
        Command::Reconcile(a) => reconcile(a),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn vocabulary() -> Vocabulary {
    Vocabulary::new(TAU_SCENES.iter().map(|s| s.to_string()).collect()).expect("scene names are distinct")
}

/// Checks that exactly one data source is given, before any work starts.
fn check_data(d: &DataArgs) -> Result<(), Failure> {
    match (&d.manifest, d.synthetic) {
        (Some(_), Some(_)) => Err(Failure::Usage("--manifest and --synthetic are mutually exclusive".into())),
        (None, None) => Err(Failure::Usage("one of --manifest or --synthetic is required".into())),
        (None, Some(0)) => Err(Failure::Usage("--synthetic needs at least one example".into())),
        _ => Ok(()),
    }
}

fn load_data(d: &DataArgs, seed: u64) -> Result<Vec<Example>, Failure> {
    if let Some(n) = d.synthetic {
        return Ok(dataset::synth_dataset_total(n, d.data_seed.unwrap_or(seed)));
    }
    let manifest_path = d.manifest.as_ref().expect("checked by check_data");
    let manifest = dataset::parse_manifest(manifest_path, Split::Train, &vocabulary())?;
    let root = d
        .audio_root
        .clone()
        .unwrap_or_else(|| manifest_path.parent().map(Path::to_path_buf).unwrap_or_default());
    Ok(dataset::load_examples(&manifest, &root, &FrontendConfig::default())?)
}

fn load_checkpoint(path: &Path) -> Result<ModelGraph, Failure> {
    model::load_model(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn features(a: FeaturesArgs) -> Outcome {
    let w = dataset::read_wav(&a.wav).map_err(|e| Failure::Runtime(format!("{}: {e}", a.wav.display())))?;
    let s = log_mel(&w, &FrontendConfig::default())?;
    emit(a.out.as_deref(), &s.to_csv())?;
    Ok(EXIT_OK)
}

fn train_cmd(a: TrainArgs) -> Outcome {
    check_data(&a.data)?;
    let cfg = TrainingConfig {
        max_epochs: a.epochs,
        early_stop_patience: a.early_stop_patience,
        lr_plateau_patience: a.plateau_patience,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        batch_size: a.batch_size,
        val_fraction: a.val_fraction,
        restore_best: a.restore_best,
        seed: a.seed,
        ..TrainingConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let arch = a.arch.config();
    let mut m: ModelGraph = ModelGraph::build(arch).map_err(|e| Failure::Usage(e.to_string()))?;
    let data = load_data(&a.data, a.seed)?;
    m.init_weights(a.seed);
    let (m, run) = train::train(m, &data, &cfg)?;
    model::save_model(&m, &a.checkpoint)?;
    emit(a.history.as_deref(), &run.to_csv())?;
    let last = run.epochs.last();
    eprintln!(
        "epochs={} stop_reason={} best_epoch={} final_lr={}",
        run.epochs.len(),
        run.stop_reason.as_str(),
        run.best_epoch,
        last.map_or(cfg.adam.lr, |e| e.lr)
    );
    if let Some(d) = &run.diagnostic {
        eprintln!("diagnostic: {d}");
    }
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs) -> Outcome {
    check_data(&a.data)?;
    let m = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, a.seed)?;
    let result = metrics::evaluate(&m, &data)?;
    let names = TAU_SCENES.to_vec();
    print!("{}", result.report(&names));
    if let Some(p) = &a.csv {
        emit(Some(p), &result.to_csv())?;
    }
    if let Some(p) = &a.confusion {
        emit(Some(p), &result.confusion_csv(&names))?;
    }
    Ok(EXIT_OK)
}

fn audit_cmd(a: AuditArgs) -> Outcome {
    let m: ModelGraph = ModelGraph::build(a.arch.config()).map_err(|e| Failure::Usage(e.to_string()))?;
    let conv = CountingConvention {
        bn_params_per_channel: a.bn_params,
        bn_macs: matches!(a.bn_macs, BnMacs::Counted),
        bias_macs: a.bias_macs,
    };
    let budget = Budget {
        max_params: a.max_params,
        max_macs: a.max_macs,
    };
    let report = audit::audit(&m, &conv, &budget)?;
    print!("{}", report.table());
    print!("{}", report.footer());
    if let Some(p) = &a.csv {
        emit(Some(p), &report.to_csv())?;
    }
    Ok(if report.verdict.pass() { EXIT_OK } else { EXIT_BUDGET })
}

fn quantize(a: QuantizeArgs) -> Outcome {
    check_data(&a.data)?;
    let m = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data, a.seed)?;
    let inputs: Vec<_> = data.iter().map(|e| &e.spectrogram).collect();
    let qm = quant::quantize_model(&m, &inputs)?;
    quant::save_quantized(&qm, &a.out)?;
    let report = quant::agreement(&m, &qm, &inputs)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.report {
        emit(Some(p), &report.to_text())?;
    }
    Ok(EXIT_OK)
}

fn reconcile(a: ReconcileArgs) -> Outcome {
    let records = audit::reconcile_published(audit::default_sweep)?;
    let mut summary = String::new();
    for r in &records {
        let _ = writeln!(
            summary,
            "{:<10} {:>2}-{:<2}  params {:>6} vs {:>6} ({:+.2}%)  macs {:>9} vs {:>9} ({:+.2}%)",
            r.row.arch.tag(),
            r.row.filters.0,
            r.row.filters.1,
            r.best_params.params,
            r.row.params,
            r.param_deviation_pct(),
            r.best_macs.macs,
            r.row.macs,
            r.mac_deviation_pct()
        );
    }
    let csv = audit::reconciliation_csv(&records);
    match &a.out {
        Some(p) => {
            print!("{summary}");
            emit(Some(p), &csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn filters_parse() {
        assert_eq!(parse_filters("32,64"), Ok((32, 64)));
        assert_eq!(parse_filters("40"), Ok((40, 40)));
        assert!(parse_filters("a,b").is_err());
        assert!(parse_filters("1,2,3").is_err());
    }

    #[test]
    fn config_flags_go_after_the_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "# defaults\nkernel = 5\nmax_params=1000\n\n").unwrap();
        let argv = args(&format!("tinyasc --config {} audit --kernel 3", cfg.display()));
        let full = expand_argv(&argv).unwrap();
        let tail: Vec<&str> = full[3..].iter().map(String::as_str).collect();
        assert_eq!(tail, ["audit", "--kernel", "5", "--max-params", "1000", "--kernel", "3"]);
    }

    #[test]
    fn malformed_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "kernel 5\n").unwrap();
        assert!(matches!(
            expand_argv(&args(&format!("tinyasc audit --config {}", cfg.display()))),
            Err(Failure::Usage(_))
        ));
    }

    #[test]
    fn data_source_rules() {
        let d = |manifest: Option<&str>, synthetic: Option<usize>| DataArgs {
            manifest: manifest.map(PathBuf::from),
            audio_root: None,
            synthetic,
            data_seed: None,
        };
        assert!(check_data(&d(Some("m.tsv"), None)).is_ok());
        assert!(check_data(&d(None, Some(4))).is_ok());
        assert!(check_data(&d(None, None)).is_err());
        assert!(check_data(&d(Some("m.tsv"), Some(4))).is_err());
        assert!(check_data(&d(None, Some(0))).is_err());
    }
}
