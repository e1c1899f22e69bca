//! Per-scene optimization: one view per step, both branches trained jointly.
//!
//! Output directory layout:
//!
//! ```text
//! out/
//!   config.toml            every effective setting
//!   metrics.csv            step,loss,l1,ssim,psnr_db
//!   holdout.csv            step,frame_id,psnr_db,ssim (frame_id "mean" for the average)
//!   checkpoints/step_N.smgs
//!   renders/<frame_id>.png
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::checkpoint::{self, Checkpoint, TrainingState};
use crate::config::TrainConfig;
use crate::data::{write_image, Dataset, Frame};
use crate::error::{DataError, Error, Result};
use crate::image::ImageBuffer;
use crate::loss::{combined_loss, psnr, ssim_value};
use crate::medium::{encode_directions, fuse, medium_backward, medium_forward, DirectionFeatures, MediumOutputs};
use crate::optim::{adam_step, sh_warmup, OptimState};
use crate::raster::{rasterize, rasterize_backward, RenderConfig};
use crate::scene::{init_scene_with, GaussianScene};

pub const MAX_CONSECUTIVE_FAULTS: usize = 3;
const EPOCH_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// A camera with its target image and cached ray encoding.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub id: String,
    pub camera: Camera,
    pub target: ImageBuffer,
    features: DirectionFeatures,
}

impl TrainView {
    pub fn new(id: impl Into<String>, camera: Camera, target: ImageBuffer) -> Result<Self> {
        if (target.width, target.height) != (camera.width, camera.height) {
            return Err(Error::ShapeMismatch(format!(
                "target {}x{} for a {}x{} camera",
                target.width, target.height, camera.width, camera.height
            )));
        }
        let features = encode_directions(&camera.ray_direction_field())?;
        Ok(Self {
            id: id.into(),
            camera,
            target,
            features,
        })
    }

    fn from_frame(f: &Frame) -> Result<Self> {
        let img = f
            .image
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("frame {} has no image", f.id)))?;
        Self::new(f.id.clone(), f.camera.clone(), img)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the step.
    pub step: u64,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// Settings that shape a forward render.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub render: RenderConfig,
    pub fusion_weight: f64,
    pub medium: bool,
}

impl RenderOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            render: cfg.render.clone(),
            fusion_weight: cfg.fusion_weight,
            medium: cfg.medium_enabled,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ViewRender {
    /// Gaussian branch alone.
    pub base: ImageBuffer,
    pub medium: Option<MediumOutputs>,
    /// Fused output before the export clamp.
    pub output: ImageBuffer,
}

impl ViewRender {
    pub fn export(&self) -> ImageBuffer {
        self.output.clamped()
    }
}

pub fn render_view(scene: &GaussianScene, cam: &Camera, opts: &RenderOptions) -> Result<ViewRender> {
    let base = rasterize(scene, cam, &opts.render)?.image;
    if !opts.medium {
        return Ok(ViewRender {
            output: base.clone(),
            base,
            medium: None,
        });
    }
    let feats = encode_directions(&cam.ray_direction_field())?;
    let med = medium_forward(&scene.medium, &feats, cam.width, cam.height)?.outputs;
    let output = fuse(&base, &med, opts.fusion_weight)?;
    Ok(ViewRender {
        base,
        medium: Some(med),
        output,
    })
}

/// Export-clamped renders of every camera.
pub fn render_views(scene: &GaussianScene, cams: &[Camera], opts: &RenderOptions) -> Result<Vec<ImageBuffer>> {
    cams.iter().map(|c| Ok(render_view(scene, c, opts)?.export())).collect()
}

/// One optimization step on one view. Metrics describe the render before the
/// update. On error the scene and optimizer are left as they were.
pub fn train_step(
    scene: &mut GaussianScene,
    view: &TrainView,
    cfg: &TrainConfig,
    optim: &mut OptimState,
) -> Result<StepMetrics> {
    let base = rasterize(scene, &view.camera, &cfg.render)?;
    let med = if cfg.medium_enabled {
        Some(medium_forward(
            &scene.medium,
            &view.features,
            view.camera.width,
            view.camera.height,
        )?)
    } else {
        None
    };
    let fused = match &med {
        Some(m) => fuse(&base.image, &m.outputs, cfg.fusion_weight)?,
        None => base.image.clone(),
    };
    let loss = combined_loss(&fused, &view.target, &cfg.loss)?;
    if !loss.total.is_finite() {
        return Err(Error::numeric("loss", 0));
    }
    let mut grads = rasterize_backward(scene, &base, &loss.grad)?;
    if let Some(m) = &med {
        grads.medium = medium_backward(&scene.medium, m, &view.features, &loss.grad, cfg.fusion_weight, false)?.weights;
    }
    let (scene_before, optim_before) = (scene.clone(), optim.clone());
    adam_step(optim, scene, &grads)?;
    let bad = scene
        .tensors()
        .iter()
        .find_map(|(_, t)| t.iter().position(|v| !v.is_finite()));
    if let Some(i) = bad {
        *scene = scene_before;
        *optim = optim_before;
        return Err(Error::numeric("updated parameter", i));
    }
    Ok(StepMetrics {
        step: optim.step,
        loss: loss.total,
        l1: loss.l1,
        ssim: loss.ssim,
        psnr: psnr(&fused, &view.target)?,
    })
}

/// View index used at 0-based step `step`: a fresh seeded permutation of the
/// training views every epoch.
pub fn view_for_step(seed: u64, step: u64, n_views: usize) -> usize {
    let n = n_views as u64;
    let epoch = step / n;
    let mut order: Vec<usize> = (0..n_views).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(EPOCH_SALT));
    order.shuffle(&mut rng);
    order[(step % n) as usize]
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub frame_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Metrics of export-clamped renders against each view's target.
pub fn evaluate(
    scene: &GaussianScene,
    views: &[TrainView],
    opts: &RenderOptions,
    loss: &crate::loss::LossConfig,
) -> Result<Vec<(String, f64, f64)>> {
    views
        .iter()
        .map(|v| {
            let img = render_view(scene, &v.camera, opts)?.export();
            Ok((v.id.clone(), psnr(&img, &v.target)?, ssim_value(&img, &v.target, loss)?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub scene: GaussianScene,
    pub optim: OptimState,
    pub history: Vec<StepMetrics>,
    pub holdout: Vec<EvalRecord>,
}

impl TrainResult {
    /// Mean holdout `(psnr, ssim)` of the last evaluation.
    pub fn final_holdout(&self) -> Option<(f64, f64)> {
        let last = self.holdout.last()?.step;
        self.holdout
            .iter()
            .find(|r| r.step == last && r.frame_id == "mean")
            .map(|r| (r.psnr, r.ssim))
    }
}

/// Runs `f` on a pool of `workers` threads, or on the global pool for `0`.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub scene: GaussianScene,
    pub optim: OptimState,
    /// Steps completed.
    pub step: u64,
    pub train_views: Vec<TrainView>,
    pub holdout_views: Vec<TrainView>,
    consecutive_faults: usize,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        scene: GaussianScene,
        train_views: Vec<TrainView>,
        holdout_views: Vec<TrainView>,
    ) -> Result<Self> {
        config.validate()?;
        if train_views.is_empty() {
            return Err(DataError::EmptyDataset.into());
        }
        scene.check_shapes()?;
        let optim = OptimState::new(&scene, config.optim.clone())?;
        Ok(Self {
            config,
            scene,
            optim,
            step: 0,
            train_views,
            holdout_views,
            consecutive_faults: 0,
        })
    }

    /// Fresh scene initialized inside the dataset bounds.
    pub fn from_dataset(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        let train: Vec<_> = dataset
            .train_frames()
            .map(TrainView::from_frame)
            .collect::<Result<_>>()?;
        let holdout: Vec<_> = dataset
            .holdout_frames()
            .map(TrainView::from_frame)
            .collect::<Result<_>>()?;
        if train.is_empty() {
            return Err(DataError::EmptyDataset.into());
        }
        let bounds = config.bounds_box().unwrap_or_else(|| dataset.scene_bounds());
        let scene = init_scene_with(config.gaussians, &bounds, config.seed, &config.init)?;
        Self::new(config, scene, train, holdout)
    }

    /// Continues from a checkpoint carrying optimizer state.
    pub fn resume(&mut self, ck: Checkpoint) -> Result<()> {
        let state = ck
            .training
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no optimizer state to resume from".into()))?;
        if ck.scene.len() != self.scene.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} Gaussians, config asks for {}",
                ck.scene.len(),
                self.scene.len()
            )));
        }
        if state.step > self.config.steps {
            return Err(Error::InvalidArgument(format!(
                "checkpoint is at step {}, past the configured {} steps",
                state.step, self.config.steps
            )));
        }
        self.step = state.step;
        self.optim = state.into_optim(self.config.optim.clone())?;
        self.scene = ck.scene;
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions::from_config(&self.config)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            scene: self.scene.clone(),
            training: Some(TrainingState::from_optim(self.step, &self.optim)),
        }
    }

    /// Advances one step. A numeric fault consumes the step without an update;
    /// the run aborts after three in a row.
    pub fn step(&mut self) -> Result<Option<StepMetrics>> {
        let s = self.step;
        self.scene.raise_sh_degree(sh_warmup(s, self.config.sh_warmup_interval));
        let vi = view_for_step(self.config.seed, s, self.train_views.len());
        let result = train_step(&mut self.scene, &self.train_views[vi], &self.config, &mut self.optim);
        self.step += 1;
        match result {
            Ok(mut m) => {
                self.consecutive_faults = 0;
                m.step = self.step;
                Ok(Some(m))
            }
            Err(e @ Error::NumericFault { .. }) => {
                self.consecutive_faults += 1;
                log::warn!("step {}: {e}; update skipped", self.step);
                if self.consecutive_faults >= MAX_CONSECUTIVE_FAULTS {
                    return Err(Error::TrainingAborted(self.consecutive_faults));
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    pub fn evaluate_holdout(&self) -> Result<Vec<EvalRecord>> {
        if self.holdout_views.is_empty() {
            return Ok(Vec::new());
        }
        let rows = evaluate(
            &self.scene,
            &self.holdout_views,
            &self.render_options(),
            &self.config.loss,
        )?;
        let n = rows.len() as f64;
        let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;
        let mut out: Vec<_> = rows
            .into_iter()
            .map(|(id, p, s)| EvalRecord {
                step: self.step,
                frame_id: id,
                psnr: p,
                ssim: s,
            })
            .collect();
        out.push(EvalRecord {
            step: self.step,
            frame_id: "mean".into(),
            psnr: mean_psnr,
            ssim: mean_ssim,
        });
        Ok(out)
    }

    /// Trains to `config.steps`, writing logs and checkpoints under `out` when
    /// given.
    pub fn run(mut self, out: Option<&Path>) -> Result<TrainResult> {
        let cfg = self.config.clone();
        let writer = out.map(|dir| RunWriter::create(dir, &cfg, self.step > 0)).transpose()?;
        let mut history = Vec::new();
        let mut holdout = Vec::new();
        let due = |s: u64, every: u64| every > 0 && s % every == 0;

        if self.step == 0 && cfg.eval_interval > 0 {
            let rows = self.evaluate_holdout()?;
            if let Some(w) = &writer {
                w.append_holdout(&rows)?;
            }
            holdout.extend(rows);
        }
        while self.step < cfg.steps {
            let metrics = self.step()?;
            let s = self.step;
            if let Some(m) = metrics {
                if due(s, cfg.log_interval) || s == cfg.steps {
                    if let Some(w) = &writer {
                        w.append_metrics(&m)?;
                    }
                    log::info!(
                        "step {s}: loss {:.5} l1 {:.5} ssim {:.4} psnr {:.2} dB",
                        m.loss,
                        m.l1,
                        m.ssim,
                        m.psnr
                    );
                }
                history.push(m);
            }
            if due(s, cfg.eval_interval) || s == cfg.steps {
                let rows = self.evaluate_holdout()?;
                if let Some(w) = &writer {
                    w.append_holdout(&rows)?;
                }
                holdout.extend(rows);
            }
            if due(s, cfg.checkpoint_interval) || s == cfg.steps {
                if let Some(w) = &writer {
                    checkpoint::save(&w.checkpoint_path(s), &self.checkpoint())?;
                }
            }
        }
        Ok(TrainResult {
            scene: self.scene,
            optim: self.optim,
            history,
            holdout,
        })
    }
}

struct RunWriter {
    dir: PathBuf,
}

impl RunWriter {
    fn create(dir: &Path, cfg: &TrainConfig, resuming: bool) -> Result<Self> {
        for sub in ["", "checkpoints", "renders"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let w = Self { dir: dir.to_path_buf() };
        w.write("config.toml", &cfg.to_toml_string(), false)?;
        if !resuming || !dir.join("metrics.csv").exists() {
            w.write("metrics.csv", "step,loss,l1,ssim,psnr_db\n", false)?;
            w.write("holdout.csv", "step,frame_id,psnr_db,ssim\n", false)?;
        }
        Ok(w)
    }

    fn write(&self, name: &str, text: &str, append: bool) -> Result<()> {
        use std::io::Write;
        let p = self.dir.join(name);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&p, e))
    }

    fn append_metrics(&self, m: &StepMetrics) -> Result<()> {
        self.write(
            "metrics.csv",
            &format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                m.step, m.loss, m.l1, m.ssim, m.psnr
            ),
            true,
        )
    }

    fn append_holdout(&self, rows: &[EvalRecord]) -> Result<()> {
        let mut s = String::new();
        for r in rows {
            let _ = writeln!(s, "{},{},{:.17e},{:.17e}", r.step, r.frame_id, r.psnr, r.ssim);
        }
        self.write("holdout.csv", &s, true)
    }

    fn checkpoint_path(&self, step: u64) -> PathBuf {
        checkpoint_path(&self.dir, step)
    }
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step}.smgs"))
}

/// Writes export renders of every frame (render-only poses included) to
/// `out/renders/<id>.png`.
pub fn write_renders(scene: &GaussianScene, frames: &[Frame], opts: &RenderOptions, out: &Path) -> Result<()> {
    for f in frames {
        let img = render_view(scene, &f.camera, opts)?.export();
        write_image(&img, &out.join("renders").join(format!("{}.png", f.id)))?;
    }
    Ok(())
}

/// Loads, trains and writes the full output tree.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainResult> {
    let cfg = config.clone();
    with_workers(cfg.workers, || {
        let mut trainer = Trainer::from_dataset(cfg.clone(), dataset)?;
        if let Some(p) = resume {
            trainer.resume(checkpoint::load(p)?)?;
        }
        let opts = trainer.render_options();
        let result = trainer.run(out)?;
        if let Some(dir) = out {
            write_renders(&result.scene, &dataset.frames, &opts, dir)?;
        }
        Ok(result)
    })?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{init_scene, Aabb};

    fn toy() -> (GaussianScene, TrainView, TrainConfig) {
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 18.0, 18.0, 16, 16).unwrap();
        let mut target_scene = init_scene(3, &Aabb::new([-0.5; 3], [0.5; 3]), 5).unwrap();
        for (j, c) in [[0.9, 0.2, 0.1], [0.1, 0.8, 0.3], [0.2, 0.3, 0.9]].iter().enumerate() {
            target_scene.sh_coeffs[j][0] = c.map(|v| (v - 0.5) / crate::sh::C0);
            target_scene.opacity_logits[j] = 2.0;
            target_scene.log_scales[j] = [(0.25f64).ln(); 3];
        }
        let target = rasterize(&target_scene, &cam, &RenderConfig::default()).unwrap().image;
        let mut cfg = TrainConfig::preset("toy").unwrap();
        cfg.apply_overrides(&["steps=200", "gaussians=3", "medium_enabled=false"])
            .unwrap();
        let mut scene = target_scene.clone();
        for j in 0..3 {
            scene.opacity_logits[j] = -1.0;
            scene.log_scales[j] = [(0.15f64).ln(); 3];
            scene.positions[j][0] += 0.03;
            for c in 0..3 {
                scene.sh_coeffs[j][0][c] *= 0.7;
            }
        }
        (scene, TrainView::new("v", cam, target).unwrap(), cfg)
    }

    #[test]
    fn fixed_point_has_zero_loss_and_no_update() {
        let (_, view, cfg) = toy();
        let mut scene = init_scene(3, &Aabb::new([-0.5; 3], [0.5; 3]), 5).unwrap();
        let opts = RenderOptions::from_config(&cfg);
        let own = render_view(&scene, &view.camera, &opts).unwrap().output;
        let view = TrainView::new("v", view.camera.clone(), own).unwrap();
        let before = scene.clone();
        let mut optim = OptimState::new(&scene, cfg.optim.clone()).unwrap();
        let m = train_step(&mut scene, &view, &cfg, &mut optim).unwrap();
        assert!(m.loss.abs() < 1e-9);
        let moved: f64 = scene
            .tensors()
            .iter()
            .zip(before.tensors().iter())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt();
        assert!(moved < 1e-6, "update norm {moved}");
    }

    #[test]
    fn toy_run_halves_the_loss() {
        let (scene, view, cfg) = toy();
        let trainer = Trainer::new(cfg, scene, vec![view], vec![]).unwrap();
        let res = trainer.run(None).unwrap();
        let first = res.history.first().unwrap().loss;
        let last = res.history.last().unwrap().loss;
        assert_eq!(res.history.len(), 200);
        assert!(last < 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn epoch_permutations_cover_every_view() {
        let mut seen: Vec<usize> = (0..7).map(|s| view_for_step(3, 7 + s, 7)).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(view_for_step(3, 9, 7), view_for_step(3, 9, 7));
    }
}
