//! The `gcm` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage or I/O errors, 2 when matching
//! itself fails (for example on blank images). `GCM_LOG` selects the
//! verbosity: `quiet`, `info` (default) or `debug`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::distill::distillation_loss;
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, SyntheticMode};
use crate::feature_io::{load_image, read_pyramid, save_image};
use crate::geometry::write_homography;
use crate::matcher::RatioScope;
use crate::pipeline::{self, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

impl LogLevel {
    pub fn from_env() -> Self {
        match std::env::var("GCM_LOG").as_deref() {
            Err(_) | Ok("") | Ok("info") => LogLevel::Info,
            Ok("quiet") => LogLevel::Quiet,
            Ok("debug") => LogLevel::Debug,
            Ok(other) => {
                eprintln!("warning: unknown GCM_LOG value {other:?}, using info");
                LogLevel::Info
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gcm", version, about = "Dense two-stage image matching and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match an image pair and write the correspondences.
    Match(MatchArgs),
    /// Run the matcher over a dataset directory and write a report.
    Eval(EvalArgs),
    /// Generate synthetic warped pairs from a base image.
    Synth(SynthArgs),
    /// Write a procedural grayscale texture, usable as a synthetic base image.
    Texture(TextureArgs),
    /// Distillation loss between the level-0 maps of two feature pyramids.
    DistillAudit(DistillArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Patch,
    Global,
}

/// Matching parameters shared by `match` and `eval`. Flags override values
/// from `--config`, which override the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// File of `key=value` lines (ratio, levels, ransac_thresh, seed,
    /// ransac_iters, ransac_confidence, patch_radius, ratio_scope,
    /// coarse_cells).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ratio-test threshold in (0, 1] [default: 0.6].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Pyramid depth k [default: 4].
    #[arg(long)]
    pub levels: Option<usize>,
    /// RANSAC inlier threshold in pixels [default: 3.0].
    #[arg(long)]
    pub ransac_thresh: Option<f64>,
    /// RANSAC seed [default: 7].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum RANSAC iterations [default: 2000].
    #[arg(long)]
    pub ransac_iters: Option<usize>,
    /// RANSAC confidence for the adaptive iteration bound [default: 0.995].
    #[arg(long)]
    pub ransac_confidence: Option<f64>,
    /// Patch radius of the built-in descriptor [default: 2].
    #[arg(long)]
    pub patch_radius: Option<usize>,
    /// Candidate set of the ratio test [default: patch].
    #[arg(long, value_enum)]
    pub ratio_scope: Option<ScopeArg>,
    /// Stage-1 RANSAC threshold in deepest-level cells [default: 1.0].
    #[arg(long)]
    pub coarse_cells: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub image_a: PathBuf,
    #[arg(long)]
    pub image_b: PathBuf,
    /// Feature pyramid of A (GCMF); requires --pyr-b.
    #[arg(long, requires = "pyr_b")]
    pub pyr_a: Option<PathBuf>,
    /// Feature pyramid of B (GCMF); requires --pyr-a.
    #[arg(long, requires = "pyr_a")]
    pub pyr_b: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pixel thresholds; 1, 3 and 5 are always included.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub thresholds: Vec<f64>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Illumination,
    #[value(name = "small_vp", alias = "small-vp")]
    SmallVp,
    #[value(name = "large_vp", alias = "large-vp")]
    LargeVp,
}

impl From<ModeArg> for SyntheticMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Illumination => SyntheticMode::Illumination,
            ModeArg::SmallVp => SyntheticMode::SmallViewpoint,
            ModeArg::LargeVp => SyntheticMode::LargeViewpoint,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, value_enum, default_value = "small_vp")]
    pub mode: ModeArg,
    /// Pair i uses seed + i.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory; must not exist.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TextureArgs {
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
}

fn parse_value<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{}: bad value {value:?} for {key}", path.display())))
}

/// Reads a `key=value` config file into `args`, keeping flags already set.
fn merge_config_file(args: &mut PipelineArgs, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "ratio" => args.ratio = args.ratio.or(Some(parse_value(path, key, value)?)),
            "levels" => args.levels = args.levels.or(Some(parse_value(path, key, value)?)),
            "ransac_thresh" => args.ransac_thresh = args.ransac_thresh.or(Some(parse_value(path, key, value)?)),
            "seed" => args.seed = args.seed.or(Some(parse_value(path, key, value)?)),
            "ransac_iters" => args.ransac_iters = args.ransac_iters.or(Some(parse_value(path, key, value)?)),
            "ransac_confidence" => {
                args.ransac_confidence = args.ransac_confidence.or(Some(parse_value(path, key, value)?))
            }
            "patch_radius" => args.patch_radius = args.patch_radius.or(Some(parse_value(path, key, value)?)),
            "coarse_cells" => args.coarse_cells = args.coarse_cells.or(Some(parse_value(path, key, value)?)),
            "ratio_scope" => {
                let scope = ScopeArg::from_str(value, true)
                    .map_err(|_| Error::InvalidConfig(format!("{}: bad ratio_scope {value:?}", path.display())))?;
                args.ratio_scope = args.ratio_scope.or(Some(scope));
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "{}:{}: unknown key {key:?}",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(())
}

impl PipelineArgs {
    pub fn to_config(&self) -> Result<PipelineConfig> {
        let mut args = self.clone();
        if let Some(path) = &self.config {
            merge_config_file(&mut args, path)?;
        }
        let mut cfg = PipelineConfig::default();
        if let Some(r) = args.ratio {
            cfg.fhr.final_ratio.threshold = r;
        }
        if let Some(scope) = args.ratio_scope {
            cfg.fhr.final_ratio.scope = match scope {
                ScopeArg::Patch => RatioScope::Patch,
                ScopeArg::Global => RatioScope::Global,
            };
        }
        if let Some(k) = args.levels {
            cfg.descriptor.pyramid_depth = k;
        }
        if let Some(r) = args.patch_radius {
            cfg.descriptor.patch_radius = r;
        }
        if let Some(t) = args.ransac_thresh {
            cfg.ransac.inlier_threshold = t;
        }
        if let Some(s) = args.seed {
            cfg.ransac.rng_seed = s;
        }
        if let Some(n) = args.ransac_iters {
            cfg.ransac.max_iterations = n;
        }
        if let Some(c) = args.ransac_confidence {
            cfg.ransac.confidence = c;
        }
        if let Some(c) = args.coarse_cells {
            cfg.coarse_threshold_cells = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cmd_match(args: &MatchArgs, log: LogLevel) -> Result<()> {
    let mut cfg = args.pipeline.to_config()?;
    cfg.trace = log >= LogLevel::Debug;
    let img_a = load_image(&args.image_a)?;
    let img_b = load_image(&args.image_b)?;
    let out = match (&args.pyr_a, &args.pyr_b) {
        (Some(pa), Some(pb)) => {
            cfg.feature_source = pipeline::FeatureSource::PyramidFiles;
            let pyr_a = read_pyramid(pa)?;
            let pyr_b = read_pyramid(pb)?;
            pipeline::match_pyramids(&pyr_a, &pyr_b, &img_a, &img_b, None, &cfg)?
        }
        _ => pipeline::match_images(&img_a, &img_b, &cfg)?,
    };
    pipeline::save_matches(&args.out, &out.pairs)?;
    if log >= LogLevel::Info {
        println!("{}", out.diagnostics);
    }
    if let Some(trace) = &out.trace {
        eprintln!("# ancestry_violations={}", trace.ancestry_violations());
        trace
            .write_text(std::io::stderr().lock())
            .map_err(|e| Error::io("<stderr>", e))?;
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, log: LogLevel) -> Result<()> {
    let cfg = args.pipeline.to_config()?;
    let opts = EvalOptions {
        thresholds: args.thresholds.clone(),
        jobs: args.jobs,
    };
    let report = eval::run_benchmark(&args.dataset, &cfg, &opts)?;
    if log >= LogLevel::Debug {
        for p in &report.pairs {
            eprintln!("{}: matches={} mma={:?} error={:?}", p.name, p.matches, p.mma, p.error);
        }
    }
    let text = report.to_text();
    match &args.out {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => print!("{text}"),
    }
    if log >= LogLevel::Info {
        let line: Vec<String> = report
            .thresholds
            .iter()
            .zip(&report.mma)
            .map(|(t, v)| format!("mma@{t}px={v:.4}"))
            .collect();
        let summary = format!("{} pairs={}", line.join(" "), report.pairs.len());
        // Keep stdout a clean report when it carries one.
        if args.out.is_some() {
            println!("{summary}");
        } else {
            eprintln!("{summary}");
        }
    }
    Ok(())
}

/// Writes `count` synthetic pairs, their ground truth and `manifest.txt`.
pub fn write_synthetic_dataset(base: &crate::Image, mode: SyntheticMode, count: usize, seed: u64, out: &Path) -> Result<()> {
    if out.exists() {
        return Err(Error::io(
            out,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory already exists"),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ext = if base.channels() == 1 { "pgm" } else { "ppm" };
    let mut manifest = String::new();
    for i in 0..count {
        let pair = eval::synthetic_pair(base, mode, seed.wrapping_add(i as u64))?;
        let (a, b, h) = (
            format!("pair_{i:03}_a.{ext}"),
            format!("pair_{i:03}_b.{ext}"),
            format!("pair_{i:03}.H"),
        );
        save_image(out.join(&a), &pair.img_a)?;
        save_image(out.join(&b), &pair.img_b)?;
        write_homography(out.join(&h), &pair.gt)?;
        manifest.push_str(&format!("{a} {b} {h}\n"));
    }
    let path = out.join(eval::MANIFEST_NAME);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let base = load_image(&args.base)?;
    write_synthetic_dataset(&base, args.mode.into(), args.count, args.seed, &args.out)
}

fn cmd_distill(args: &DistillArgs) -> Result<()> {
    let teacher = read_pyramid(&args.teacher)?;
    let student = read_pyramid(&args.student)?;
    let loss = distillation_loss(teacher.level(0), student.level(0))?;
    println!("loss={loss:.6}");
    Ok(())
}

pub fn exit_code(err: &Error) -> u8 {
    if err.is_matching_failure() {
        2
    } else {
        1
    }
}

pub fn run(cli: &Cli, log: LogLevel) -> Result<()> {
    match &cli.command {
        Command::Match(a) => cmd_match(a, log),
        Command::Eval(a) => cmd_eval(a, log),
        Command::Synth(a) => cmd_synth(a),
        Command::Texture(a) => save_image(&a.out, &eval::procedural_texture(a.height, a.width, a.seed)),
        Command::DistillAudit(a) => cmd_distill(a),
    }
}

/// Parses `argv`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli, LogLevel::from_env()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
