//! Command-line front end. Exit codes: 0 success, 2 usage, 3 I/O or
//! format, 4 numerical, 5 gradient check failure.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::Error;
use crate::eval::detection::{read_detections, read_ground_truth, ApResult};
use crate::eval::{map_evaluate, psnr, ssim, SizeFilter};
use crate::gradsuite::{run_suite, SuiteOptions};
use crate::model::{ModelConfig, ModelWeights};
use crate::sim::{simulate_clip, SimParams};
use crate::train::{restore_clip, train, write_loss_csv, ClipPair, TrainConfig};
use crate::video::{read_clip, write_clip, ClipManifest, VideoClip};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Written next to every command's outputs.
pub const RUN_MANIFEST: &str = "run-manifest.json";

#[derive(Parser, Debug)]
#[command(name = "mamat", version, about = "Turbulence simulation, restoration training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Apply synthetic turbulence to a clean clip.
    Simulate(SimulateArgs),
    /// Train a restoration model on distorted/clean clip pairs.
    Train(TrainArgs),
    /// Restore every frame of a clip with trained weights.
    Restore(RestoreArgs),
    /// PSNR/SSIM between two clips and optionally detection AP.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op and the network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    /// Directory of clean frames.
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tilt amplitude in pixels.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    /// Spatial correlation length of the tilt field.
    #[arg(long = "sigma-s", default_value_t = 8.0)]
    pub sigma_s: f64,
    /// Frame-to-frame tilt correlation.
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
    /// Gaussian blur sigma; 0 disables blur.
    #[arg(long = "sigma-b", default_value_t = 1.0)]
    pub sigma_b: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// `distorted/` and `clean/` clip directories, or subdirectories that
    /// each contain such a pair.
    #[arg(long)]
    pub data: PathBuf,
    /// Weights file; `loss.csv` and the run manifest go beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub crop: usize,
    /// Base channel width.
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Frames per window (odd).
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct RestoreArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Reference clip directory.
    #[arg(long = "ref", requires = "test")]
    pub reference: Option<PathBuf>,
    /// Clip directory to score against the reference.
    #[arg(long, requires = "reference")]
    pub test: Option<PathBuf>,
    /// Detections CSV: image_id,class_id,x_min,y_min,x_max,y_max,score.
    #[arg(long, requires = "gts")]
    pub dets: Option<PathBuf>,
    /// Ground truth CSV: image_id,class_id,x_min,y_min,x_max,y_max.
    #[arg(long, requires = "dets")]
    pub gts: Option<PathBuf>,
    /// Restrict AP to ground truth smaller than 32×32.
    #[arg(long, requires = "dets")]
    pub small: bool,
    /// Report directory (default: `eval/` inside --test, else the
    /// directory holding --dets).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigName {
    Tiny,
    Default,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    /// Model configuration for the whole-network checks.
    #[arg(long, value_enum, default_value_t = ConfigName::Tiny)]
    pub config: ConfigName,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Only run checks whose name contains this.
    #[arg(long)]
    pub filter: Option<String>,
    /// Optional directory for a CSV report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a subcommand with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::Domain { .. } => EXIT_NUMERIC,
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_IO,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a Command,
    seed: Option<u64>,
    version: &'static str,
}

fn write_run_manifest(dir: &Path, command: &Command, seed: Option<u64>) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let m = RunManifest {
        command,
        seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    let text = serde_json::to_string_pretty(&m).map_err(Error::from)?;
    fs::write(dir.join(RUN_MANIFEST), text).map_err(Error::from)?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let params = SimParams {
        alpha: a.alpha,
        sigma_s: a.sigma_s,
        rho: a.rho,
        sigma_b: a.sigma_b,
        seed: a.seed,
    };
    params.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let clean = read_clip(&a.clean)?;
    let distorted = simulate_clip(&clean, &params)?;
    let manifest = ClipManifest {
        sim: Some(params),
        seed: Some(a.seed),
        ..ClipManifest::describe(&distorted)
    };
    write_clip(&a.out, &distorted, &manifest)?;
    log::info!("wrote {} frames to {}", distorted.len(), a.out.display());
    Ok(())
}

fn read_pair(dir: &Path) -> crate::Result<ClipPair> {
    ClipPair::new(read_clip(&dir.join("distorted"))?, read_clip(&dir.join("clean"))?)
}

/// Clip pairs under `dir`: the directory itself if it holds `distorted/`
/// and `clean/`, otherwise each such subdirectory in name order.
pub fn load_pairs(dir: &Path) -> crate::Result<Vec<ClipPair>> {
    let is_pair = |d: &Path| d.join("distorted").is_dir() && d.join("clean").is_dir();
    if is_pair(dir) {
        return Ok(vec![read_pair(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_pair(p))
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Image {
            path: dir.display().to_string(),
            reason: "no distorted/ and clean/ clip pair found".into(),
        });
    }
    subdirs.iter().map(|d| read_pair(d)).collect()
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = TrainConfig {
        lr: a.lr,
        steps: a.steps,
        crop: a.crop,
        window: a.window,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let data = load_pairs(&a.data)?;
    let channels = data[0].clean.channels();
    if data.iter().any(|p| p.clean.channels() != channels) {
        return Err(CliError::usage("all clips must have the same channel count"));
    }
    let model = ModelConfig {
        in_channels: channels,
        window_frames: a.window,
        base_width: a.width,
        seed: a.seed,
        ..ModelConfig::default()
    };
    model.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let mut weights = ModelWeights::<f32>::init(&model)?;
    let report = train(&mut weights, &data, &cfg, |step, loss| {
        if step % 50 == 0 {
            log::info!("step {step} loss {loss:.6}");
        }
    })?;
    let dir = parent_dir(&a.out);
    fs::create_dir_all(&dir).map_err(Error::from)?;
    let mut sink = BufWriter::new(fs::File::create(&a.out).map_err(Error::from)?);
    weights.save(&mut sink)?;
    sink.flush().map_err(Error::from)?;
    write_loss_csv(&dir.join("loss.csv"), &report.losses)?;
    Ok(())
}

pub fn cmd_restore(a: &RestoreArgs) -> CliResult<()> {
    let file = fs::File::open(&a.weights).map_err(Error::from)?;
    let weights = ModelWeights::<f32>::load(&mut BufReader::new(file), None)?;
    let clip = read_clip(&a.input)?;
    if clip.channels() != weights.config.in_channels {
        return Err(CliError {
            code: EXIT_IO,
            message: format!(
                "clip has {} channels but the weights expect {}",
                clip.channels(),
                weights.config.in_channels
            ),
        });
    }
    let restored = restore_clip(&weights, &clip)?;
    write_clip(&a.out, &restored, &ClipManifest::describe(&restored))?;
    Ok(())
}

/// Per-frame PSNR and SSIM of `test` against `reference`.
pub fn frame_metrics(reference: &VideoClip, test: &VideoClip) -> CliResult<Vec<(f64, f64)>> {
    if reference.len() != test.len() {
        return Err(CliError::usage(format!(
            "clips differ in length: {} vs {} frames",
            reference.len(),
            test.len()
        )));
    }
    reference
        .frames
        .iter()
        .zip(&test.frames)
        .map(|(r, t)| {
            let both = psnr(r, t).and_then(|p| Ok((p, ssim(r, t)?)));
            both.map_err(|e| CliError::usage(e.to_string()))
        })
        .collect()
}

fn ap_rows(r: &ApResult) -> Vec<(String, String)> {
    let tag = match r.filter {
        SizeFilter::All => "ap",
        SizeFilter::Small => "ap_small",
    };
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
    let mut rows = vec![(tag.to_string(), fmt(r.mean))];
    for (t, v) in r.thresholds.iter().zip(&r.per_threshold) {
        rows.push((format!("{tag}@{t:.2}"), fmt(Some(*v))));
    }
    for (class, aps) in &r.per_class {
        let mean = aps.iter().sum::<f64>() / aps.len() as f64;
        rows.push((format!("{tag}_class{class}"), fmt(Some(mean))));
    }
    rows
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let err = |e: csv::Error| CliError::from(Error::Csv(format!("{}: {e}", path.display())));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

/// Returns the directory the reports were written to.
pub fn cmd_eval(a: &EvalArgs) -> CliResult<PathBuf> {
    if a.reference.is_none() && a.dets.is_none() {
        return Err(CliError::usage("eval needs --ref/--test, --dets/--gts, or both"));
    }
    let out = match (&a.out, &a.test, &a.dets) {
        (Some(o), ..) => o.clone(),
        (None, Some(t), _) => t.join("eval"),
        (None, None, Some(d)) => parent_dir(d),
        _ => unreachable!("checked above"),
    };
    fs::create_dir_all(&out).map_err(Error::from)?;
    let mut summary: Vec<(String, String)> = Vec::new();
    if let (Some(r), Some(t)) = (&a.reference, &a.test) {
        let per = frame_metrics(&read_clip(r)?, &read_clip(t)?)?;
        let n = per.len() as f64;
        let (mp, ms) = (per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<f64>() / n);
        let mut rows: Vec<Vec<String>> = per
            .iter()
            .enumerate()
            .map(|(i, (p, s))| vec![i.to_string(), format!("{p:.6}"), format!("{s:.6}")])
            .collect();
        rows.push(vec!["mean".into(), format!("{mp:.6}"), format!("{ms:.6}")]);
        write_csv(&out.join("frames.csv"), &["frame", "psnr", "ssim"], &rows)?;
        summary.push(("psnr".into(), format!("{mp:.6}")));
        summary.push(("ssim".into(), format!("{ms:.6}")));
    }
    if let (Some(d), Some(g)) = (&a.dets, &a.gts) {
        let dets = read_detections(d)?;
        let gts = read_ground_truth(g)?;
        summary.extend(ap_rows(&map_evaluate(&dets, &gts, SizeFilter::All)?));
        if a.small {
            summary.extend(ap_rows(&map_evaluate(&dets, &gts, SizeFilter::Small)?));
        }
    }
    for (k, v) in &summary {
        println!("{k:<16} {v}");
    }
    let rows: Vec<Vec<String>> = summary.into_iter().map(|(k, v)| vec![k, v]).collect();
    write_csv(&out.join("metrics.csv"), &["metric", "value"], &rows)?;
    Ok(out)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if !(a.eps > 0.0) {
        return Err(CliError::usage("--eps must be positive"));
    }
    let mut opts = SuiteOptions::default();
    opts.check.eps = a.eps;
    opts.model = match a.config {
        ConfigName::Tiny => ModelConfig::tiny(),
        ConfigName::Default => ModelConfig::default(),
    };
    let mut failing = Vec::new();
    let mut rows = Vec::new();
    for e in run_suite(&opts, a.filter.as_deref()) {
        let (err, status) = match &e.report {
            Ok(r) => (format!("{:.3e}", r.max_rel_err), if r.passed { "ok" } else { "FAIL" }),
            Err(err) => (format!("error: {err}"), "FAIL"),
        };
        println!("{:<22} {:<12} {:>7.1}s  {status}", e.name, err, e.seconds);
        if !e.passed() {
            failing.push(e.name);
        }
        rows.push(vec![e.name.to_string(), err, status.to_string()]);
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(Error::from)?;
        write_csv(&dir.join("gradcheck.csv"), &["op", "max_rel_err", "status"], &rows)?;
    }
    if failing.is_empty() {
        println!("all {} checks passed", rows.len());
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_GRADCHECK,
            message: format!("{} of {} checks failed: {}", failing.len(), rows.len(), failing.join(", ")),
        })
    }
}

/// Runs a parsed command and writes its run manifest.
pub fn execute(command: &Command) -> CliResult<()> {
    let (dir, seed) = match command {
        Command::Simulate(a) => {
            cmd_simulate(a)?;
            (Some(a.out.clone()), Some(a.seed))
        }
        Command::Train(a) => {
            cmd_train(a)?;
            (Some(parent_dir(&a.out)), Some(a.seed))
        }
        Command::Restore(a) => {
            cmd_restore(a)?;
            (Some(a.out.clone()), None)
        }
        Command::Eval(a) => (Some(cmd_eval(a)?), None),
        Command::Gradcheck(a) => {
            cmd_gradcheck(a)?;
            (a.out.clone(), None)
        }
    };
    if let Some(dir) = dir {
        write_run_manifest(&dir, command, seed)?;
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
