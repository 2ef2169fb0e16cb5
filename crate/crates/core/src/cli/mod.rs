//! The `sitskit` command line.
//!
//! Every command writes its outputs and a `manifest.txt` into `--out`.
//! `replay` re-runs a manifest with its recorded seed and resolved config.
//! Failures print one line, `error: kind=<kind> msg=<message>`, and exit
//! nonzero.

mod bench;
mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::cli::config::{List, Range2, Resolver};
use crate::cli::manifest::{write_atomic, RunManifest};
use crate::error::Error;
use crate::par;
use crate::tensor_io::{load_tensor, TensorContainer};

pub use bench::{bench_csv, run_bench, BenchRow};

pub const THREADS_ENV: &str = "SITSKIT_THREADS";

#[derive(Parser, Debug, Clone)]
#[command(
    name = "sitskit",
    version,
    about = "Region-prior toolkit for few-shot SITS segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// key=value config file; flags take precedence over it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (created if missing)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Seed for randomized commands; generated and recorded when omitted
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Cloud screening, fused RGB and region map for one cube
    PriorGen(PriorGenArgs),
    /// Mean, median or fused composite of a cube
    Composite(CompositeArgs),
    /// Region-smoothness loss (and optional gradient) for stored logits
    Loss(LossArgs),
    /// Finite-difference check of the loss gradient on random instances
    GradCheck(GradCheckArgs),
    /// mIoU and overall accuracy of a prediction
    Metrics(MetricsArgs),
    /// Few-shot index split
    Split(SplitArgs),
    /// Random crop and temporal dropout of a cube and its labels
    Augment(AugmentArgs),
    /// Synthetic cube, labels and ideal region map
    Synth(SynthArgs),
    /// Train the toy model on a synthetic scene
    DemoTrain(DemoTrainArgs),
    /// Time loss forward+gradient over image sizes and region counts
    Bench(BenchArgs),
    /// Re-run the command recorded in a manifest
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PriorGen(_) => "prior-gen",
            Command::Composite(_) => "composite",
            Command::Loss(_) => "loss",
            Command::GradCheck(_) => "grad-check",
            Command::Metrics(_) => "metrics",
            Command::Split(_) => "split",
            Command::Augment(_) => "augment",
            Command::Synth(_) => "synth",
            Command::DemoTrain(_) => "demo-train",
            Command::Bench(_) => "bench",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct CubeArgs {
    /// STSR cube, f32 or u16 [T,C,H,W] digital numbers
    #[arg(long)]
    pub input: PathBuf,
    /// Band channels: b2=..,b3=..,b4=..,b8=..,b12=.. or "pastis" / "compact"
    #[arg(long)]
    pub band_map: Option<String>,
    /// Divisor from digital numbers to reflectance [default: 10000]
    #[arg(long)]
    pub scale: Option<f32>,
    /// Frames at or above this cloud ratio are not clear [default: 0.8]
    #[arg(long)]
    pub cloud_threshold: Option<f64>,
    /// Percentile stretch before fusion: off, minmax, percentile[:lo:hi]
    #[arg(long)]
    pub stretch: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct PriorGenArgs {
    #[command(flatten)]
    pub cube: CubeArgs,
    /// u8 [Q,H,W] mask stack (e.g. from the SAM exporter)
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Region source without masks: fallback or superpixels [default: fallback]
    #[arg(long)]
    pub source: Option<String>,
    /// Fallback cell size in pixels [default: 8]
    #[arg(long)]
    pub grid: Option<usize>,
    /// Superpixel site count [default: 64]
    #[arg(long)]
    pub sites: Option<usize>,
    /// Identifier used in output file names [default: 0]
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct CompositeArgs {
    #[command(flatten)]
    pub cube: CubeArgs,
    /// fused, mean or median [default: fused]
    #[arg(long)]
    pub method: Option<String>,
    /// Frames for mean/median: clear or all [default: clear]
    #[arg(long)]
    pub frames: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct LossArgs {
    /// STSR f32 [B,K,H,W]
    #[arg(long)]
    pub logits: PathBuf,
    /// STSR i32 [B,H,W] or [H,W] (broadcast)
    #[arg(long)]
    pub regions: PathBuf,
    /// STSR i32 [B,H,W] or [H,W] class labels for the cross-entropy term
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Region term weight [default: 50]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Label excluded from the cross-entropy term
    #[arg(long)]
    pub ignore_class: Option<i32>,
    /// unbiased or population [default: unbiased]
    #[arg(long)]
    pub variance: Option<String>,
    /// Leave region 0 out of the loss
    #[arg(long)]
    pub exclude_background: bool,
    /// Also write grad.stsr, the gradient of the total loss
    #[arg(long)]
    pub grad: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GradCheckArgs {
    /// Number of random instances [default: 20]
    #[arg(long)]
    pub instances: Option<usize>,
    /// Largest accepted relative error [default: 1e-4]
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct MetricsArgs {
    /// STSR i32 predicted classes
    #[arg(long)]
    pub pred: PathBuf,
    /// STSR i32 reference classes, same shape
    #[arg(long)]
    pub truth: PathBuf,
    /// Class count [default: largest label + 1]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Label excluded from evaluation
    #[arg(long)]
    pub ignore_class: Option<i32>,
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Fraction of the population to select [default: 0.05]
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Population size (ignored with --labels)
    #[arg(long)]
    pub population: Option<usize>,
    /// STSR i32 labels; every element is one population item
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Sample each class separately (needs --labels)
    #[arg(long)]
    pub stratified: bool,
}

#[derive(Args, Debug, Clone)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub cube: CubeArgs,
    /// STSR i32 [H,W] labels cropped with the cube
    #[arg(long)]
    pub labels: PathBuf,
    /// Crop extent [default: 64]
    #[arg(long)]
    pub crop: Option<usize>,
    /// Temporal dropout rate range lo,hi [default: 0.1,0.3]
    #[arg(long)]
    pub tdrop: Option<Range2>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SceneArgs {
    /// [default: 12]
    #[arg(long)]
    pub frames: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub channels: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub height: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub width: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Gaussian noise sigma [default: 0.05]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Per-frame cloud probability [default: 0.5]
    #[arg(long)]
    pub cloud_prob: Option<f64>,
    /// Disable cloud blobs
    #[arg(long)]
    pub no_clouds: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Multiplier from reflectance to stored digital numbers [default: 10000]
    #[arg(long)]
    pub scale: Option<f32>,
}

#[derive(Args, Debug, Clone)]
pub struct DemoTrainArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Labelled pixel fraction [default: 0.01]
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Region term weight [default: region count Q]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Train once per lambda in {0, Q/5, Q, 5Q}
    #[arg(long)]
    pub sweep: bool,
    /// [default: 3000]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 2.0]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Region prior: ideal, fallback or superpixels [default: ideal]
    #[arg(long)]
    pub prior: Option<String>,
    /// Superpixel site count for --prior superpixels [default: 64]
    #[arg(long)]
    pub sites: Option<usize>,
    /// Sample labelled pixels per class
    #[arg(long)]
    pub stratified: bool,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Image extents [default: 64,128,256]
    #[arg(long)]
    pub sizes: Option<List<usize>>,
    /// Superpixel site counts [default: 30,100,300]
    #[arg(long)]
    pub regions: Option<List<usize>>,
    /// Timed runs per configuration [default: 5]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// manifest.txt of the run to repeat
    pub manifest: PathBuf,
    /// Compare every output byte-wise with the original run's
    #[arg(long)]
    pub check: bool,
}

/// State shared by one command invocation.
pub struct Run {
    pub cfg: Resolver,
    out: PathBuf,
    base: Option<PathBuf>,
    seed_flag: Option<u64>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    volatile: Vec<String>,
    report: Vec<(String, String)>,
}

impl Run {
    /// Resolves `p` against the original working directory during replay.
    pub fn path(&self, p: &Path) -> PathBuf {
        match &self.base {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn load(&mut self, p: &Path, flag: &str) -> anyhow::Result<TensorContainer> {
        let t = load_tensor(self.path(p)).with_context(|| format!("--{flag} {}", p.display()))?;
        self.inputs.push(p.to_path_buf());
        Ok(t)
    }

    /// Seed from `--seed`, the config file, or freshly generated; recorded either way.
    pub fn seed(&mut self) -> anyhow::Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        let s = match self.seed_flag {
            Some(s) => s,
            None => match self.cfg.get_opt::<u64>("seed", None)? {
                Some(s) => s,
                None => rand::random(),
            },
        };
        self.seed = Some(s);
        Ok(s)
    }

    /// Writes an STSR file and reads it back to validate it.
    pub fn tensor(&mut self, name: &str, t: &TensorContainer) -> anyhow::Result<()> {
        let path = self.out.join(name);
        let bytes = t.to_bytes();
        write_atomic(&path, &bytes)?;
        let back = load_tensor(&path)?;
        if back != *t {
            return Err(Error::Corrupt(format!("{} did not read back identically", path.display())).into());
        }
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> anyhow::Result<()> {
        let path = self.out.join(name);
        write_atomic(&path, body.as_bytes())?;
        let back = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if back != body.as_bytes() {
            return Err(Error::Corrupt(format!("{} did not read back identically", path.display())).into());
        }
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Like [`Run::text`] for content that differs between runs, such as timings.
    pub fn volatile_text(&mut self, name: &str, body: &str) -> anyhow::Result<()> {
        self.text(name, body)?;
        self.volatile.push(name.to_string());
        Ok(())
    }

    /// Adds a `key=value` line to the summary printed on success.
    pub fn say(&mut self, key: &str, value: impl std::fmt::Display) {
        self.report.push((key.to_string(), value.to_string()));
    }
}

/// Thread cap from `SITSKIT_THREADS`, if set.
pub fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")).into()),
        },
    }
}

/// Parses and runs one command line (without the program name); returns the
/// summary lines.
pub fn run<I, T>(args: I) -> anyhow::Result<Vec<(String, String)>>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(std::iter::once(OsString::from("sitskit")).chain(args.iter().cloned()))?;
    let recorded: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    if let Command::Replay(r) = &cli.command {
        return replay(r, cli.out.as_deref());
    }
    let cfg = match &cli.config {
        Some(p) => Resolver::load(p)?,
        None => Resolver::default(),
    };
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    execute(cli, cfg, recorded, None, cwd)
}

fn execute(
    cli: Cli,
    cfg: Resolver,
    recorded: Vec<String>,
    base: Option<PathBuf>,
    cwd: PathBuf,
) -> anyhow::Result<Vec<(String, String)>> {
    let Some(out) = cli.out.clone() else {
        bail!(Error::Config(format!("{} needs --out", cli.command.name())));
    };
    let out = match &base {
        Some(b) if out.is_relative() => b.join(out),
        _ => out,
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut run = Run {
        cfg,
        out: out.clone(),
        base,
        seed_flag: cli.seed,
        seed: None,
        inputs: Vec::new(),
        outputs: Vec::new(),
        volatile: Vec::new(),
        report: Vec::new(),
    };
    let start = Instant::now();
    commands::dispatch(&cli.command, &mut run)?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: run.seed,
        threads: par::current_threads(),
        wall_time_s: start.elapsed().as_secs_f64(),
        cwd,
        args: recorded,
        config: run.cfg.resolved().clone(),
        inputs: run.inputs.clone(),
        outputs: run.outputs.clone(),
        volatile: run.volatile.clone(),
    };
    manifest.write(&out)?;
    let mut report = run.report;
    if let Some(s) = run.seed {
        report.insert(0, ("seed".into(), s.to_string()));
    }
    report.push(("out".into(), out.display().to_string()));
    Ok(report)
}

fn replay(r: &ReplayArgs, out_override: Option<&Path>) -> anyhow::Result<Vec<(String, String)>> {
    let m = RunManifest::load(&r.manifest)?;
    let mut cli = Cli::try_parse_from(std::iter::once("sitskit".to_string()).chain(m.args.iter().cloned()))
        .with_context(|| format!("arguments recorded in {}", r.manifest.display()))?;
    if matches!(cli.command, Command::Replay(_)) {
        bail!(Error::Validation("a replay manifest cannot itself be replayed".into()));
    }
    let original_out = cli
        .out
        .clone()
        .map(|o| if o.is_relative() { m.cwd.join(o) } else { o })
        .ok_or_else(|| Error::Format(format!("{}: recorded arguments lack --out", r.manifest.display())))?;
    if let Some(o) = out_override {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        cli.out = Some(if o.is_relative() { cwd.join(o) } else { o.to_path_buf() });
    }
    if r.check && cli.out.as_deref().map(|o| m.cwd.join(o)) == Some(original_out.clone()) {
        bail!(Error::Config(
            "replay --check needs --out pointing at a fresh directory".into()
        ));
    }
    cli.seed = m.seed.or(cli.seed);
    cli.config = None;
    let cfg = Resolver::from_pairs(m.config.clone(), &r.manifest.display().to_string());
    let mut report = execute(cli, cfg, m.args.clone(), Some(m.cwd.clone()), m.cwd.clone())?;
    if r.check {
        let new_out = PathBuf::from(&report.last().expect("out is always reported").1);
        let compared: Vec<&String> = m.outputs.iter().filter(|o| !m.volatile.contains(o)).collect();
        for name in &compared {
            let a = std::fs::read(original_out.join(name)).map_err(|e| Error::io(original_out.join(name), e))?;
            let b = std::fs::read(new_out.join(name)).map_err(|e| Error::io(new_out.join(name), e))?;
            if a != b {
                bail!(Error::Validation(format!("replayed {name} differs from the original")));
            }
        }
        report.push(("checked".into(), compared.len().to_string()));
    }
    Ok(report)
}

/// Category for the single-line error report.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return "usage";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

pub fn error_line(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    format!("error: kind={} msg={msg}", error_kind(err))
}

/// Process entry point used by the binary.
pub fn main() -> ExitCode {
    match threads_from_env() {
        Ok(Some(n)) => {
            par::init_threads(n);
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("{}", error_line(&e));
            return ExitCode::from(2);
        }
    }
    match run(std::env::args_os().skip(1)) {
        Ok(report) => {
            for (k, v) in report {
                println!("{k}={v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(c) = e.downcast_ref::<clap::Error>() {
                if matches!(
                    c.kind(),
                    clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
                ) {
                    print!("{c}");
                    return ExitCode::SUCCESS;
                }
            }
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
