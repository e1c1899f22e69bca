//! Compares analytic rasterizer gradients with central differences on a tiny
//! scene.

use smoke_gs::camera::Camera;
use smoke_gs::image::ImageBuffer;
use smoke_gs::raster::{rasterize, rasterize_backward, RenderConfig};
use smoke_gs::scene::{init_scene_with, Aabb, GaussianScene, InitOptions};

fn weighted_sum(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig, w: &ImageBuffer) -> f64 {
    let img = rasterize(scene, cam, cfg).unwrap().image;
    img.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

fn main() -> smoke_gs::error::Result<()> {
    let opts = InitOptions {
        opacity: 0.6,
        scale_fraction: 0.8,
        ..InitOptions::default()
    };
    let mut scene = init_scene_with(3, &Aabb::new([-0.4; 3], [0.4; 3]), 4, &opts)?;
    scene.raise_sh_degree(3);
    for (j, sh) in scene.sh_coeffs.iter_mut().enumerate() {
        for (k, c) in sh.iter_mut().enumerate() {
            *c = [0.1, -0.2, 0.15].map(|v| v * ((j + k) % 5) as f64 / 4.0);
        }
    }
    let cam = Camera::look_at([0.3, 0.4, 2.5], [0.0; 3], [0.0, 1.0, 0.0], 9.0, 9.0, 8, 8)?;
    let cfg = RenderConfig {
        termination_threshold: 0.0,
        ..RenderConfig::default()
    };
    let mut w = ImageBuffer::new(8, 8);
    for (i, v) in w.data.iter_mut().enumerate() {
        *v = ((i * 37 % 11) as f64 - 5.0) / 5.0;
    }
    let out = rasterize(&scene, &cam, &cfg)?;
    let grads = rasterize_backward(&scene, &out, &w)?;

    let analytic = grads.tensors();
    let names = ["positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs"];
    for (t, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let n = scene.tensors()[t].1.len();
        for i in 0..n {
            let x = scene.tensors()[t].1[i];
            let h = 1e-5 * x.abs().max(1.0);
            let probe = |d: f64| {
                let mut s = scene.clone();
                s.tensors_mut()[t].1[i] = x + d;
                weighted_sum(&s, &cam, &cfg, &w)
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let a = analytic[t][i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        println!("{name:>15}: worst relative error {worst:.2e} over {n} entries");
    }
    Ok(())
}
