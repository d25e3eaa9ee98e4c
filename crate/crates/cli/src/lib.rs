//! `stonecrack` command line: prepare, train, eval, localize, scan, report
//! and matrix, each writing into its own run directory.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use stonecrack::{Error, Result};

/// Exit code for command lines clap rejects (unknown flag, missing value).
pub const USAGE_EXIT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "stonecrack", version, about = "Crack detection for stone masonry imagery")]
pub struct Cli {
    /// Flat JSON configuration with dotted keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for splits, initialization, shuffling and augmentation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent of the per-run output directories.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset root; defaults to $STONECRACK_DATA.
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Any configuration key, e.g. `--set train.lr_patience=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index the dataset and write the six test-case splits.
    Prepare(PrepareArgs),
    /// Train one backbone on one test case.
    Train(TrainArgs),
    /// Score a trained model on a test split.
    Eval(EvalArgs),
    /// Classify images and write their class activation maps.
    Localize(LocalizeArgs),
    /// Slide a window over full-resolution images and fuse the evidence.
    Scan(ScanArgs),
    /// Aggregate evaluation reports into tables and charts.
    Report(ReportArgs),
    /// Train and evaluate a grid of backbones and test cases.
    Matrix(MatrixArgs),
    #[command(hide = true)]
    Cell(CellArgs),
}

type Layers = Vec<(String, Value)>;

fn put<T: serde::Serialize>(layers: &mut Layers, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        layers.push((key.into(), json!(v)));
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Only this test case (0-5).
    #[arg(long)]
    pub case: Option<u8>,
    /// `error` or `scale` when a seeded draw lacks samples.
    #[arg(long)]
    pub shortfall: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Channel multiplier; below 1 only without pretrained weights.
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Directory of exported pretrained weights; defaults to $STONECRACK_WEIGHTS.
    #[arg(long, value_name = "DIR")]
    pub weights: Option<PathBuf>,
    /// Start from random weights even in the transfer regime.
    #[arg(long)]
    pub no_pretrained: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub shortfall: Option<String>,
    /// Disable flips, jitter and rotation.
    #[arg(long)]
    pub no_augment: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub case: Option<u8>,
    /// Saved split instead of a fresh draw.
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model artifact directory.
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub case: Option<u8>,
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub shortfall: Option<String>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Half-pixel instead of corner-aligned upsampling.
    #[arg(long)]
    pub half_pixel: bool,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    /// Image files or directories of images.
    #[arg(long = "image", value_name = "PATH")]
    pub images: Vec<PathBuf>,
    /// Project the crack class even for patches predicted NoCrack.
    #[arg(long)]
    pub always_crack: bool,
    #[command(flatten)]
    pub overlay: OverlayArgs,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    #[arg(long = "image", value_name = "PATH")]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Windows per forward pass.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `mean` or `max`.
    #[arg(long)]
    pub fusion: Option<String>,
    #[command(flatten)]
    pub overlay: OverlayArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (searched for report.json) or report files.
    #[arg(value_name = "PATH")]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// Comma-separated backbone names; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub backbones: Vec<String>,
    /// Comma-separated test cases; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub cases: Vec<u8>,
    /// Worker processes for CPU runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct CellArgs {
    #[arg(long)]
    pub backbone: String,
    #[arg(long)]
    pub case: u8,
    #[arg(long, value_name = "DIR")]
    pub dir: PathBuf,
}

impl ModelArgs {
    fn layers(&self, l: &mut Layers) {
        put(l, "model.width", &self.width);
        put(l, "model.input_size", &self.input_size);
        put(l, "model.weights_dir", &self.weights);
        if self.no_pretrained {
            l.push(("model.pretrained".into(), json!(false)));
        }
    }
}

impl FitArgs {
    fn layers(&self, l: &mut Layers) -> Result<()> {
        if let Some(r) = &self.regime {
            r.parse::<stonecrack::model::Regime>()?;
        }
        put(l, "regime", &self.regime);
        put(l, "train.epochs", &self.epochs);
        put(l, "train.lr", &self.lr);
        put(l, "train.batch_size", &self.batch_size);
        put(l, "shortfall", &self.shortfall);
        if self.no_augment {
            l.push(("train.augmentation".into(), json!(stonecrack::dataset::AugmentationPolicy::identity())));
        }
        self.model.layers(l);
        Ok(())
    }
}

impl OverlayArgs {
    fn layers(&self, prefix: &str, l: &mut Layers) {
        put(l, &format!("{prefix}.overlay.threshold"), &self.threshold);
        put(l, &format!("{prefix}.overlay.alpha"), &self.alpha);
        if self.half_pixel {
            l.push((format!("{prefix}.align"), json!("half_pixel")));
        }
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare(_) => "prepare",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Localize(_) => "localize",
            Command::Scan(_) => "scan",
            Command::Report(_) => "report",
            Command::Matrix(_) => "matrix",
            Command::Cell(_) => "cell",
        }
    }

    fn layers(&self, l: &mut Layers) -> Result<()> {
        match self {
            Command::Prepare(a) => {
                put(l, "case_id", &a.case);
                put(l, "shortfall", &a.shortfall);
            }
            Command::Train(a) => {
                put(l, "backbone", &a.backbone);
                put(l, "case_id", &a.case);
                put(l, "split", &a.split);
                a.fit.layers(l)?;
            }
            Command::Eval(a) => {
                put(l, "model.path", &a.model);
                put(l, "case_id", &a.case);
                put(l, "split", &a.split);
                put(l, "eval.batch_size", &a.batch_size);
                put(l, "shortfall", &a.shortfall);
            }
            Command::Localize(a) => {
                put(l, "model.path", &a.model);
                if !a.images.is_empty() {
                    l.push(("images".into(), json!(a.images)));
                }
                if a.always_crack {
                    l.push(("cam.target".into(), json!("always_crack")));
                }
                a.overlay.layers("cam", l);
            }
            Command::Scan(a) => {
                put(l, "model.path", &a.model);
                if !a.images.is_empty() {
                    l.push(("images".into(), json!(a.images)));
                }
                put(l, "scan.step", &a.step);
                put(l, "scan.window", &a.window);
                put(l, "scan.batch_size", &a.batch_size);
                put(l, "scan.fusion", &a.fusion);
                a.overlay.layers("scan", l);
            }
            Command::Report(a) => {
                if !a.inputs.is_empty() {
                    l.push(("reports".into(), json!(a.inputs)));
                }
            }
            Command::Matrix(a) => {
                if !a.backbones.is_empty() {
                    l.push(("matrix.backbones".into(), json!(a.backbones)));
                }
                if !a.cases.is_empty() {
                    l.push(("matrix.cases".into(), json!(a.cases)));
                }
                put(l, "matrix.jobs", &a.jobs);
                a.fit.layers(l)?;
            }
            Command::Cell(a) => {
                l.push(("backbone".into(), json!(a.backbone)));
                l.push(("case_id".into(), json!(a.case)));
            }
        }
        Ok(())
    }
}

/// Defaults, then the config file, then global flags, then command flags,
/// then `--set` assignments.
pub fn resolve(cli: &Cli) -> Result<config::RunConfig> {
    let mut layers = match &cli.config {
        Some(path) => config::read_file(path)?,
        None => Vec::new(),
    };
    layers.push(("command".into(), json!(cli.command.name())));
    put(&mut layers, "seed", &cli.seed);
    put(&mut layers, "runs_dir", &cli.out);
    put(&mut layers, "data_root", &cli.data);
    cli.command.layers(&mut layers)?;
    for s in &cli.set {
        layers.push(config::parse_assignment(s)?);
    }
    config::resolve(&layers)
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Prepare(_) => commands::prepare(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::evaluate(&cfg),
        Command::Localize(_) => commands::localize(&cfg),
        Command::Scan(_) => commands::scan(&cfg),
        Command::Report(_) => commands::report(&cfg),
        Command::Matrix(_) => commands::matrix(&cfg),
        Command::Cell(a) => commands::cell(&cfg, &a.dir),
    }
}

/// Single-line `error[<category>]: <message>` for scripts to parse.
pub fn error_line(err: &Error) -> String {
    let mut msg = err.to_string();
    let mut source = std::error::Error::source(err);
    while let Some(s) = source {
        let text = s.to_string();
        if !msg.contains(&text) {
            msg = format!("{msg}: {text}");
        }
        source = s.source();
    }
    format!("error[{}]: {}", err.category().as_str(), msg.replace('\n', " "))
}

pub fn main_with<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid command line");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return USAGE_EXIT;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.category().exit_code()
        }
    }
}
