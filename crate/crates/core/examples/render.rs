//! Renders a random scene from a few viewpoints and writes PNGs.
//!
//! ```text
//! cargo run --release --example render -- [out_dir]
//! ```

use std::path::PathBuf;

use smoke_gs::camera::Camera;
use smoke_gs::data::write_image;
use smoke_gs::raster::{rasterize, RenderConfig};
use smoke_gs::scene::{init_scene_with, Aabb, InitOptions};

fn main() -> smoke_gs::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("smoke_gs_render"));
    let opts = InitOptions {
        opacity: 0.8,
        scale_fraction: 0.6,
        ..InitOptions::default()
    };
    let mut scene = init_scene_with(300, &Aabb::new([-1.0; 3], [1.0; 3]), 3, &opts)?;
    for (j, sh) in scene.sh_coeffs.iter_mut().enumerate() {
        let hue = j as f64 / 300.0;
        sh[0] = [hue, 1.0 - hue, 0.5].map(|c| (c - 0.5) / smoke_gs::sh::C0);
    }
    let cfg = RenderConfig::default();
    for (i, eye) in [[0.0, 0.5, 4.0], [3.0, 1.0, 2.5], [-3.0, -1.0, 2.5]]
        .into_iter()
        .enumerate()
    {
        let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 140.0, 140.0, 160, 120)?;
        let r = rasterize(&scene, &cam, &cfg)?;
        let path = out.join(format!("view_{i}.png"));
        write_image(&r.image.clamped(), &path)?;
        println!(
            "{}: {} visible, {} culled, {:.1} contributors per pixel",
            path.display(),
            r.stats.visible,
            r.stats.culled,
            r.stats.mean_contributors
        );
    }
    Ok(())
}
