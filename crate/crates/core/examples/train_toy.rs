//! Fits a handful of Gaussians to a single rendered target and prints the
//! loss curve.

use smoke_gs::camera::Camera;
use smoke_gs::config::TrainConfig;
use smoke_gs::raster::{rasterize, RenderConfig};
use smoke_gs::scene::{init_scene, Aabb};
use smoke_gs::trainer::{TrainView, Trainer};

fn main() -> smoke_gs::error::Result<()> {
    let bounds = Aabb::new([-0.6; 3], [0.6; 3]);
    let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 40.0, 40.0, 32, 32)?;
    let mut truth = init_scene(12, &bounds, 7)?;
    for (j, sh) in truth.sh_coeffs.iter_mut().enumerate() {
        sh[0] = [(j % 3) as f64 * 0.4 + 0.1, 0.3, 0.8 - (j % 4) as f64 * 0.2].map(|c| (c - 0.5) / smoke_gs::sh::C0);
        truth.opacity_logits[j] = 1.5;
    }
    let target = rasterize(&truth, &cam, &RenderConfig::default())?.image;

    let mut cfg = TrainConfig::preset("toy")?;
    cfg.apply_overrides(&["steps=600", "gaussians=12", "medium_enabled=false", "log_interval=100"])?;
    let start = init_scene(12, &bounds, 8)?;
    let trainer = Trainer::new(cfg, start, vec![TrainView::new("target", cam, target)?], Vec::new())?;
    let result = trainer.run(None)?;
    for m in result.history.iter().filter(|m| m.step == 1 || m.step % 100 == 0) {
        println!("step {:>4}: loss {:.5}  PSNR {:.2} dB", m.step, m.loss, m.psnr);
    }
    Ok(())
}
