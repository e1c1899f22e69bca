//! Tile-based differentiable rasterization of a [`GaussianScene`].
//!
//! Gaussians are projected, sorted front to back by render-frame depth (ties
//! broken by scene index) and binned into square tiles by the bounding circle
//! of their support ellipse. Each pixel composites
//! `C = sum_i c_i a_i T_i`, `T_i = prod_{k<i} (1 - a_k)`, with
//! `a_i = min(clamp, opacity_i * exp(-m²/2))` inside the support
//! (`m <= support_sigma`, `m` the Mahalanobis distance of the pixel center)
//! and zero outside it.
//!
//! The backward pass walks each pixel's list in reverse, recovering `T_i`
//! from the final transmittance.

mod project;

pub use project::{covariance_3d, project_gaussians, quat_to_matrix, ProjectedGaussian, Projection, ScreenGrad};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scene::{GaussianScene, GradientSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub alpha_clamp: f64,
    /// Compositing stops once transmittance drops below this; `0` disables it.
    pub termination_threshold: f64,
    /// Added to the diagonal of every screen covariance, in pixels².
    pub cov_floor: f64,
    pub tile_size: usize,
    pub near: f64,
    /// Support radius in standard deviations.
    pub support_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            alpha_clamp: 0.99,
            termination_threshold: 1e-4,
            cov_floor: 0.3,
            tile_size: 16,
            near: 0.01,
            support_sigma: 3.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_clamp > 0.0
            && self.alpha_clamp < 1.0
            && self.termination_threshold >= 0.0
            && self.termination_threshold < 1.0
            && self.cov_floor > 0.0
            && self.tile_size > 0
            && self.near > 0.0
            && self.support_sigma > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid render config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub mean_contributors: f64,
}

/// Forward result plus the state the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutputs {
    /// Base rendering, unclamped, black background.
    pub image: ImageBuffer,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// Gaussians that contributed to each pixel.
    pub contributors: Vec<u32>,
    pub stats: RenderStats,
    /// Projected Gaussians in compositing order.
    pub projected: Vec<ProjectedGaussian>,
    /// Per tile, indices into `projected`, front to back.
    tiles: Vec<Vec<u32>>,
    /// Per pixel, one past the last tile-list entry the forward pass visited.
    last_entry: Vec<u32>,
    tiles_x: usize,
    camera: Camera,
    config: RenderConfig,
    fingerprint: u32,
}

/// One step of a pixel's compositing sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub gaussian: usize,
    pub alpha: f64,
    /// Transmittance in front of this Gaussian.
    pub transmittance: f64,
    /// Squared Mahalanobis distance of the pixel center.
    pub mahalanobis_sq: f64,
    /// `opacity * exp(-m²/2)` before the clamp.
    pub raw_alpha: f64,
}

fn scene_fingerprint(scene: &GaussianScene) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (_, t) in scene.tensors().iter().take(5) {
        for v in t.iter() {
            h.update(&v.to_le_bytes());
        }
    }
    h.update(&(scene.active_sh_degree as u32).to_le_bytes());
    h.finalize()
}

/// Alpha of a projected Gaussian at a pixel center, `None` outside its support.
#[inline]
fn evaluate(p: &ProjectedGaussian, px: f64, py: f64, cfg: &RenderConfig) -> Option<(f64, f64, f64, f64, f64)> {
    let dx = px - p.mean[0];
    let dy = py - p.mean[1];
    let m2 = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    if m2 > cfg.support_sigma * cfg.support_sigma {
        return None;
    }
    let g = (-0.5 * m2).exp();
    let raw = p.opacity * g;
    Some((raw.min(cfg.alpha_clamp), raw, g, dx, dy))
}

fn tile_bins(projected: &[ProjectedGaussian], cam: &Camera, tile: usize) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = cam.width.div_ceil(tile);
    let tiles_y = cam.height.div_ceil(tile);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let (w, h) = (cam.width as f64, cam.height as f64);
    for (k, p) in projected.iter().enumerate() {
        let r = p.radius * (1.0 + 1e-9) + 1e-9;
        // Pixel i is covered when |i + 0.5 - mean| <= r.
        let x0 = (p.mean[0] - r - 0.5).ceil().max(0.0);
        let x1 = (p.mean[0] + r - 0.5).floor().min(w - 1.0);
        let y0 = (p.mean[1] - r - 0.5).ceil().max(0.0);
        let y1 = (p.mean[1] + r - 0.5).floor().min(h - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / tile, x1 as usize / tile);
        let (ty0, ty1) = (y0 as usize / tile, y1 as usize / tile);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    (tiles_x, tiles)
}

fn tile_pixels(tile_idx: usize, tiles_x: usize, cam: &Camera, size: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile_idx % tiles_x, tile_idx / tiles_x);
    let x_end = ((tx + 1) * size).min(cam.width);
    let y_end = ((ty + 1) * size).min(cam.height);
    (ty * size..y_end).flat_map(move |y| (tx * size..x_end).map(move |x| (x, y)))
}

struct TileResult {
    pixels: Vec<(usize, [f64; 3], f64, u32, u32)>,
}

/// Forward rendering of the Gaussian branch.
pub fn rasterize(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> Result<RenderOutputs> {
    cfg.validate()?;
    cam.validate()?;
    let Projection { mut gaussians, culled } = project_gaussians(scene, cam, cfg)?;
    gaussians.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let (tiles_x, tiles) = tile_bins(&gaussians, cam, cfg.tile_size);

    let results: Vec<TileResult> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut pixels = Vec::with_capacity(cfg.tile_size * cfg.tile_size);
            for (x, y) in tile_pixels(t, tiles_x, cam, cfg.tile_size) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut trans = 1.0;
                let mut color = [0.0; 3];
                let mut n = 0u32;
                let mut last = 0u32;
                for (k, &gi) in list.iter().enumerate() {
                    let p = &gaussians[gi as usize];
                    let Some((alpha, ..)) = evaluate(p, px, py, cfg) else {
                        continue;
                    };
                    let w = alpha * trans;
                    for c in 0..3 {
                        color[c] += p.color[c] * w;
                    }
                    trans *= 1.0 - alpha;
                    n += 1;
                    last = k as u32 + 1;
                    if trans < cfg.termination_threshold {
                        break;
                    }
                }
                pixels.push((y * cam.width + x, color, trans, n, last));
            }
            TileResult { pixels }
        })
        .collect();

    let npix = cam.width * cam.height;
    let mut image = ImageBuffer::new(cam.width, cam.height);
    let mut transmittance = vec![1.0; npix];
    let mut contributors = vec![0u32; npix];
    let mut last_entry = vec![0u32; npix];
    for tile in results {
        for (i, color, t, n, last) in tile.pixels {
            if !(color.iter().all(|v| v.is_finite()) && t.is_finite()) {
                return Err(Error::NumericFault {
                    what: format!("pixel ({}, {})", i % cam.width, i / cam.width),
                    index: i,
                });
            }
            image.data[3 * i..3 * i + 3].copy_from_slice(&color);
            transmittance[i] = t;
            contributors[i] = n;
            last_entry[i] = last;
        }
    }
    let stats = RenderStats {
        visible: gaussians.len(),
        culled,
        mean_contributors: contributors.iter().map(|&c| c as f64).sum::<f64>() / npix as f64,
    };
    Ok(RenderOutputs {
        image,
        transmittance,
        contributors,
        stats,
        projected: gaussians,
        tiles,
        last_entry,
        tiles_x,
        camera: cam.clone(),
        config: cfg.clone(),
        fingerprint: scene_fingerprint(scene),
    })
}

impl RenderOutputs {
    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn config(&self) -> &RenderConfig {
        &self.config
    }

    fn tile_of(&self, x: usize, y: usize) -> usize {
        (y / self.config.tile_size) * self.tiles_x + x / self.config.tile_size
    }

    /// Number of Gaussians binned to the tile containing pixel `(x, y)`.
    pub fn tile_list_len(&self, x: usize, y: usize) -> usize {
        self.tiles[self.tile_of(x, y)].len()
    }

    /// Compositing sequence of one pixel, as the forward pass visited it.
    pub fn pixel_trace(&self, x: usize, y: usize) -> Vec<TraceEntry> {
        let list = &self.tiles[self.tile_of(x, y)];
        let last = self.last_entry[y * self.camera.width + x] as usize;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut trans = 1.0;
        let mut out = Vec::new();
        for &gi in &list[..last] {
            let p = &self.projected[gi as usize];
            let Some((alpha, raw, _, dx, dy)) = evaluate(p, px, py, &self.config) else {
                continue;
            };
            let m2 = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
            out.push(TraceEntry {
                gaussian: p.index,
                alpha,
                transmittance: trans,
                mahalanobis_sq: m2,
                raw_alpha: raw,
            });
            trans *= 1.0 - alpha;
        }
        out
    }
}

/// Gradients of a loss with respect to every Gaussian parameter, given
/// `dL / d image` for the image produced by `outputs`. The medium weights of
/// the returned set are zero.
pub fn rasterize_backward(
    scene: &GaussianScene,
    outputs: &RenderOutputs,
    dl_dimage: &ImageBuffer,
) -> Result<GradientSet> {
    if scene_fingerprint(scene) != outputs.fingerprint {
        return Err(Error::StaleState(
            "scene parameters changed since the forward pass".into(),
        ));
    }
    dl_dimage.check_same_shape(&outputs.image, "rasterizer backward")?;
    if !dl_dimage.is_finite() {
        return Err(Error::numeric("image cotangent", 0));
    }
    let cam = &outputs.camera;
    let cfg = &outputs.config;
    let projected = &outputs.projected;

    let per_tile: Vec<Vec<ScreenGrad>> = outputs
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut local = vec![ScreenGrad::default(); list.len()];
            for (x, y) in tile_pixels(t, outputs.tiles_x, cam, cfg.tile_size) {
                let i = y * cam.width + x;
                let g = [
                    dl_dimage.data[3 * i],
                    dl_dimage.data[3 * i + 1],
                    dl_dimage.data[3 * i + 2],
                ];
                if g == [0.0; 3] {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut trans = outputs.transmittance[i];
                let mut behind = [0.0; 3];
                for k in (0..outputs.last_entry[i] as usize).rev() {
                    let p = &projected[list[k] as usize];
                    let Some((alpha, raw, gauss, dx, dy)) = evaluate(p, px, py, cfg) else {
                        continue;
                    };
                    let one_minus = 1.0 - alpha;
                    let t_front = trans / one_minus;
                    let w = alpha * t_front;
                    let acc = &mut local[k];
                    let mut d_alpha = 0.0;
                    for c in 0..3 {
                        acc.color[c] += w * g[c];
                        d_alpha += g[c] * (p.color[c] * t_front - behind[c] / one_minus);
                        behind[c] += p.color[c] * w;
                    }
                    trans = t_front;
                    if raw > cfg.alpha_clamp {
                        continue;
                    }
                    acc.opacity += d_alpha * gauss;
                    // d alpha / d m² = -opacity * G / 2
                    let d_m2 = -0.5 * d_alpha * p.opacity * gauss;
                    acc.conic[0] += d_m2 * dx * dx;
                    acc.conic[1] += d_m2 * 2.0 * dx * dy;
                    acc.conic[2] += d_m2 * dy * dy;
                    acc.mean[0] += d_m2 * -2.0 * (p.conic[0] * dx + p.conic[1] * dy);
                    acc.mean[1] += d_m2 * -2.0 * (p.conic[1] * dx + p.conic[2] * dy);
                }
            }
            local
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); projected.len()];
    for (list, local) in outputs.tiles.iter().zip(&per_tile) {
        for (&gi, g) in list.iter().zip(local) {
            screen[gi as usize].add(g);
        }
    }

    let view = cam.view_matrix()?;
    let param_grads: Vec<_> = projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(p, g)| project::backward_one(p, g, scene, cam, &view))
        .collect();
    let mut grads = GradientSet::zeroed_like(scene);
    for (p, pg) in projected.iter().zip(&param_grads) {
        project::scatter(&mut grads, p.index, pg);
    }
    if let Some(i) = grads.first_non_finite() {
        return Err(Error::numeric("rasterizer gradient", i));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{init_scene, Aabb};
    use nalgebra::Matrix4;

    fn axis_camera(size: usize, f: f64) -> Camera {
        // Render frame looks down +z; pose with y,z flipped so the view matrix is identity.
        let pose = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0));
        Camera::new(f, f, size as f64 / 2.0, size as f64 / 2.0, size, size, pose).unwrap()
    }

    fn single(pos: [f64; 3], log_scale: f64, logit: f64) -> GaussianScene {
        let mut s = init_scene(1, &Aabb::unit_cube(), 0).unwrap();
        s.positions[0] = pos;
        s.log_scales[0] = [log_scale; 3];
        s.opacity_logits[0] = logit;
        s
    }

    #[test]
    fn gaussian_at_camera_center_is_culled() {
        let cam = axis_camera(8, 8.0);
        let s = single([0.0, 0.0, 0.0], -2.0, 0.0);
        let out = rasterize(&s, &cam, &RenderConfig::default()).unwrap();
        assert_eq!(out.stats.culled, 1);
        assert_eq!(out.stats.visible, 0);
        assert!(out.image.data.iter().all(|&v| v == 0.0));
        assert!(out.transmittance.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        let cam = axis_camera(32, 20.0);
        let sigma = 0.3f64;
        let z = 4.0;
        let s = single([0.0, 0.0, z], sigma.ln(), 0.0);
        let cfg = RenderConfig::default();
        let proj = project_gaussians(&s, &cam, &cfg).unwrap();
        let p = &proj.gaussians[0];
        let expected = (20.0 * sigma / z).powi(2) + cfg.cov_floor;
        assert!((p.cov[0] - expected).abs() < 1e-12);
        assert!((p.cov[2] - expected).abs() < 1e-12);
        assert!(p.cov[1].abs() < 1e-12);
        assert!((p.mean[0] - 16.0).abs() < 1e-12 && (p.mean[1] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn identity_rotation_unit_scale_covariance() {
        assert_eq!(
            covariance_3d([1.0, 0.0, 0.0, 0.0], [1.0; 3]),
            nalgebra::Matrix3::identity()
        );
    }

    #[test]
    fn opaque_gaussian_shows_its_color() {
        let cam = axis_camera(16, 16.0);
        // Center the Gaussian on pixel (8, 8)'s center so its weight there is 1.
        let mut s = single([0.5 / 16.0 * 4.0, 0.5 / 16.0 * 4.0, 4.0], -1.0, 30.0);
        s.sh_coeffs[0][0] = [0.7, -0.4, 0.1];
        let out = rasterize(&s, &cam, &RenderConfig::default()).unwrap();
        let p = &out.projected[0];
        assert!((p.mean[0] - 8.5).abs() < 1e-12);
        let px = out.image.get(8, 8);
        for c in 0..3 {
            assert!((px[c] - 0.99 * p.color[c]).abs() < 1e-9);
        }
        assert!((out.transmittance[8 * 16 + 8] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn backward_zero_cotangent_and_stale_state() {
        let cam = axis_camera(8, 8.0);
        let s = single([0.1, 0.0, 3.0], -1.5, 0.5);
        let out = rasterize(&s, &cam, &RenderConfig::default()).unwrap();
        let g = rasterize_backward(&s, &out, &ImageBuffer::new(8, 8)).unwrap();
        assert_eq!(g.l2_norm(), 0.0);
        let mut moved = s.clone();
        moved.positions[0][0] += 0.01;
        assert!(matches!(
            rasterize_backward(&moved, &out, &ImageBuffer::new(8, 8)),
            Err(Error::StaleState(_))
        ));
    }

    #[test]
    fn contributor_count_bounded_by_tile_list() {
        let cam = axis_camera(40, 30.0);
        let mut s = init_scene(30, &Aabb::new([-1.0, -1.0, 2.0], [1.0, 1.0, 4.0]), 4).unwrap();
        for l in &mut s.opacity_logits {
            *l = 1.0;
        }
        let out = rasterize(&s, &cam, &RenderConfig::default()).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                assert!(out.contributors[y * 40 + x] as usize <= out.tile_list_len(x, y));
                let trace = out.pixel_trace(x, y);
                assert_eq!(trace.len(), out.contributors[y * 40 + x] as usize);
                for w in trace.windows(2) {
                    assert!(w[1].transmittance <= w[0].transmittance);
                }
            }
        }
        assert!(out.stats.mean_contributors > 0.0);
    }
}
