//! The `smokegs` command line: train, render, eval, synth and inspect.
//!
//! Exit codes are 0 on success, 1 for usage and configuration errors, 2 for
//! data and I/O errors and 3 for numeric faults.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{
    generate_synthetic, load_dataset, read_image, write_image, write_synthetic, LoadOptions, SyntheticSpec,
};
use crate::error::{DataError, Error, Result};
use crate::image::ImageBuffer;
use crate::loss::{psnr, ssim_value, LossConfig};
use crate::medium::DEFAULT_FUSION_WEIGHT;
use crate::raster::RenderConfig;
use crate::scene::GaussianScene;
use crate::trainer::{self, render_view, with_workers, RenderOptions};

pub const WORKERS_ENV: &str = "SMOKEGS_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "smokegs",
    version,
    about = "Gaussian splatting with a view-dependent smoke medium branch"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a scene from a dataset directory.
    Train(TrainArgs),
    /// Render every pose of a manifest from a checkpoint.
    Render(RenderArgs),
    /// Compare two directories of images by frame id.
    Eval(EvalArgs),
    /// Write a synthetic smoky scene.
    Synth(SynthArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding manifest.json.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// toy, small or paper.
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline `key=value` override; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Kernel threads (falls back to SMOKEGS_WORKERS).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Continue from a checkpoint written with optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding manifest.json.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "renders")]
    pub out: PathBuf,
    /// Render only these frame ids; repeatable.
    #[arg(long = "frame")]
    pub frames: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub downscale: usize,
    #[arg(long, default_value_t = DEFAULT_FUSION_WEIGHT)]
    pub fusion_weight: f64,
    /// Render the Gaussian branch alone.
    #[arg(long)]
    pub no_medium: bool,
    /// Also write medium/<id>_{rgb,bs,attn}.png.
    #[arg(long)]
    pub dump_medium: bool,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted `<frame_id>.png` images.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference `<frame_id>.png` images.
    #[arg(long)]
    pub target: PathBuf,
    /// CSV with columns frame_id, psnr_db, ssim.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// JSON scene spec; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Global haze blend in [0, 1].
    #[arg(long)]
    pub haze: Option<f64>,
    /// Peak amplitude of the directional tint.
    #[arg(long)]
    pub tint: Option<f64>,
    #[arg(long)]
    pub gaussians: Option<usize>,
    #[arg(long)]
    pub cameras: Option<usize>,
    /// Square image size in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Reports go to `out`, errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Render(a) => cmd_render(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn resolve_workers(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{WORKERS_ENV}={v} is not a worker count"))),
        Err(_) => Ok(0),
    }
}

/// Preset, then config file, then `--seed`/`--workers`, then `--set`.
pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), preset) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| crate::error::ConfigError::Parse(e.to_string()))?;
            match (preset, table.get("preset")) {
                (Some(p), Some(file_preset)) if file_preset.as_str() != Some(p.as_str()) => {
                    return Err(Error::InvalidArgument(format!(
                        "--preset {p} conflicts with preset {file_preset} in {}",
                        path.display()
                    )))
                }
                (Some(p), None) => TrainConfig::from_toml_str(&format!("preset = {p:?}\n{text}"))?,
                _ => TrainConfig::from_toml_str(&text)?,
            }
        }
        (None, Some(p)) => TrainConfig::preset(p)?,
        (None, None) => TrainConfig::default(),
    };
    let mut inline = Vec::new();
    if let Some(s) = args.seed {
        inline.push(format!("seed={s}"));
    }
    let workers = resolve_workers(args.workers)?;
    if args.workers.is_some() || workers != 0 {
        inline.push(format!("workers={workers}"));
    }
    inline.extend(args.overrides.iter().cloned());
    cfg.apply_overrides(&inline)?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    if args.dry_run {
        return emit(out, cfg.to_toml_string());
    }
    let dataset = load_dataset(
        &args.dataset,
        &LoadOptions {
            downscale: cfg.downscale,
            holdout_every: cfg.holdout_every,
            srgb: false,
        },
    )?;
    let result = trainer::train(&dataset, &cfg, Some(&args.out), args.resume.as_deref())?;
    if let Some(last) = result.history.last() {
        emit(
            out,
            format!(
                "final training step {}: loss {:.5}, PSNR {:.3} dB",
                last.step, last.loss, last.psnr
            ),
        )?;
    }
    match result.final_holdout() {
        Some((p, s)) => emit(out, format!("holdout PSNR {p:.3} dB, SSIM {s:.4}")),
        None => emit(out, "no holdout views"),
    }
}

fn cmd_render(args: &RenderArgs, out: &mut dyn Write) -> Result<()> {
    let workers = resolve_workers(args.workers)?;
    let scene = checkpoint::load(&args.checkpoint)?.scene;
    let dataset = load_dataset(
        &args.dataset,
        &LoadOptions {
            downscale: args.downscale,
            holdout_every: 0,
            srgb: false,
        },
    )?;
    let known: Vec<&str> = dataset.frames.iter().map(|f| f.id.as_str()).collect();
    let missing: Vec<&String> = args.frames.iter().filter(|id| !known.contains(&id.as_str())).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!("unknown frame ids {missing:?}")));
    }
    let opts = RenderOptions {
        render: RenderConfig::default(),
        fusion_weight: args.fusion_weight,
        medium: !args.no_medium,
    };
    let needs_medium = opts.medium || args.dump_medium;
    let frames: Vec<_> = dataset
        .frames
        .iter()
        .filter(|f| args.frames.is_empty() || args.frames.contains(&f.id))
        .collect();
    let report = with_workers(workers, || -> Result<Vec<String>> {
        let mut report = Vec::new();
        for f in frames {
            let full = render_view(
                &scene,
                &f.camera,
                &RenderOptions {
                    medium: needs_medium,
                    ..opts.clone()
                },
            )?;
            let img = if opts.medium {
                full.export()
            } else {
                full.base.clamped()
            };
            write_image(&img, &args.out.join(format!("{}.png", f.id)))?;
            if args.dump_medium {
                let med = full.medium.as_ref().expect("medium rendered");
                for (name, field) in [("rgb", &med.rgb), ("bs", &med.backscatter), ("attn", &med.attenuation)] {
                    write_image(field, &args.out.join("medium").join(format!("{}_{name}.png", f.id)))?;
                }
            }
            report.push(match &f.image {
                Some(target) => format!("{}: PSNR {:.3} dB vs its {:?} image", f.id, psnr(&img, target)?, f.role),
                None => format!("{}: rendered, no reference image", f.id),
            });
        }
        Ok(report)
    })??;
    for line in report {
        emit(out, line)?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut found = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                found.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(found)
}

/// Per-frame `(frame_id, psnr_db, ssim)` of two image directories, matched by
/// file stem.
pub fn evaluate_dirs(pred: &Path, target: &Path) -> Result<Vec<(String, f64, f64)>> {
    let p = png_stems(pred)?;
    let t = png_stems(target)?;
    let missing_pred: Vec<String> = t.keys().filter(|k| !p.contains_key(*k)).cloned().collect();
    let missing_target: Vec<String> = p.keys().filter(|k| !t.contains_key(*k)).cloned().collect();
    if !missing_pred.is_empty() || !missing_target.is_empty() {
        return Err(DataError::FrameIdMismatch {
            missing_pred,
            missing_target,
        }
        .into());
    }
    let loss = LossConfig::default();
    p.iter()
        .map(|(id, path)| {
            let a: ImageBuffer = read_image(path)?;
            let b = read_image(&t[id])?;
            Ok((id.clone(), psnr(&a, &b)?, ssim_value(&a, &b, &loss)?))
        })
        .collect()
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let rows = with_workers(resolve_workers(args.workers)?, || {
        evaluate_dirs(&args.pred, &args.target)
    })??;
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .png images in {}",
            args.pred.display()
        )));
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let mut csv = String::from("frame_id,psnr_db,ssim\n");
    for (id, p, s) in &rows {
        emit(out, format!("{id}: PSNR {p:.4} dB, SSIM {s:.5}"))?;
        csv.push_str(&format!("{id},{p:.17e},{s:.17e}\n"));
    }
    csv.push_str(&format!("mean,{mean_psnr:.17e},{mean_ssim:.17e}\n"));
    emit(out, format!("mean: PSNR {mean_psnr:.4} dB, SSIM {mean_ssim:.5}"))?;
    if let Some(path) = &args.csv {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("spec {}: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(h) = args.haze {
        spec.haze = h;
    }
    if let Some(t) = args.tint {
        spec.tint_amplitude = t;
    }
    if let Some(g) = args.gaussians {
        spec.gaussians = g;
    }
    if let Some(c) = args.cameras {
        spec.cameras = c;
    }
    if let Some(s) = args.size {
        spec.width = s;
        spec.height = s;
    }
    let synth = generate_synthetic(&spec, args.seed)?;
    write_synthetic(&synth, &args.out)?;
    let holdout = (0..spec.cameras).filter(|&i| spec.is_holdout(i)).count();
    emit(
        out,
        format!(
            "wrote {} views ({holdout} holdout), {} Gaussians to {}",
            spec.cameras,
            spec.gaussians,
            args.out.display()
        ),
    )
}

/// `(min, mean, max)` of a flattened tensor; zeros when empty.
fn stats(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0, 0.0)
    } else {
        (lo, sum / n as f64, hi)
    }
}

pub fn describe(scene: &GaussianScene) -> Vec<String> {
    let mut lines = vec![
        format!("M = {}", scene.len()),
        format!("K = {}", crate::sh::COLOR_COEFFS),
        format!("active SH degree = {}", scene.active_sh_degree),
    ];
    let groups: [(&str, Vec<f64>); 6] = [
        ("positions", scene.positions.iter().flatten().copied().collect()),
        ("rotations", scene.rotations.iter().flatten().copied().collect()),
        ("log_scales", scene.log_scales.iter().flatten().copied().collect()),
        ("opacity_logits", scene.opacity_logits.clone()),
        ("sh_dc", scene.sh_coeffs.iter().flat_map(|c| c[0]).collect()),
        (
            "sh_rest",
            scene
                .sh_coeffs
                .iter()
                .flat_map(|c| c[1..].iter().flatten().copied())
                .collect(),
        ),
    ];
    for (name, values) in groups {
        let (lo, mean, hi) = stats(values.into_iter());
        lines.push(format!("{name}: min {lo:.6} mean {mean:.6} max {hi:.6}"));
    }
    let [w1, b1, w2, b2] = scene.medium.norms();
    lines.push(format!("medium |w1| {w1:.6} |b1| {b1:.6} |w2| {w2:.6} |b2| {b2:.6}"));
    lines
}

fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    for line in describe(&ck.scene) {
        emit(out, line)?;
    }
    match &ck.training {
        Some(t) => emit(out, format!("training step {} (optimizer state included)", t.step)),
        None => emit(out, "no optimizer state"),
    }
}
