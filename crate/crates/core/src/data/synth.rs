//! Synthetic smoke scenes with known degradation.
//!
//! A random ground-truth scene is rendered from a ring of cameras and each
//! clean image is degraded as `(1 - haze) * clean + haze * airlight + tint(d)`,
//! where `d` is the pixel's world ray and `tint` a zero-mean SH field.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pose_rows, write_image, FrameRecord, Manifest, Split, MANIFEST_FILE};
use crate::camera::Camera;
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::raster::{rasterize, RenderConfig};
use crate::scene::{init_scene, logit, normalize_quat, Aabb, GaussianScene};
use crate::sh::{eval_sh_basis, num_coeffs, C0, COLOR_OFFSET, MAX_DEGREE};

const PALETTE_SALT: u64 = 0x7061_6c65_7474_6521;
const TINT_SALT: u64 = 0x7469_6e74_2d66_6c64;
const NORMALIZATION_SAMPLES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub gaussians: usize,
    pub bounds: Aabb,
    pub palette_seed: u64,
    pub palette_size: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_degrees: f64,
    pub cameras: usize,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub look_at: [f64; 3],
    /// Every n-th camera is a holdout view; `0` holds out none.
    pub holdout_every: usize,
    /// Largest absolute tint value over all directions and channels.
    pub tint_amplitude: f64,
    pub tint_degree: usize,
    /// Global blend toward the airlight.
    pub haze: f64,
    pub airlight: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            gaussians: 500,
            bounds: Aabb::new([-0.8; 3], [0.8; 3]),
            palette_seed: 11,
            palette_size: 6,
            width: 128,
            height: 128,
            fov_degrees: 50.0,
            cameras: 24,
            ring_radius: 3.0,
            ring_height: 1.0,
            look_at: [0.0; 3],
            holdout_every: 6,
            tint_amplitude: 0.15,
            tint_degree: 2,
            haze: 0.2,
            airlight: [0.6, 0.62, 0.65],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.cameras < 2 {
            return bad(format!("need at least 2 cameras, got {}", self.cameras));
        }
        if !(0.0..=1.0).contains(&self.haze) {
            return bad(format!("haze {} outside [0, 1]", self.haze));
        }
        if !(self.tint_amplitude >= 0.0 && self.tint_amplitude.is_finite()) {
            return bad(format!("tint amplitude {} must be >= 0", self.tint_amplitude));
        }
        if !(1..=MAX_DEGREE).contains(&self.tint_degree) {
            return bad(format!("tint degree {} outside 1..=4", self.tint_degree));
        }
        if self.gaussians == 0 || self.palette_size == 0 || self.width == 0 || self.height == 0 {
            return bad("gaussians, palette size and image size must be positive".into());
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return bad(format!("field of view {} outside (0, 180)", self.fov_degrees));
        }
        if self.ring_radius <= 0.0 {
            return bad("ring radius must be positive".into());
        }
        self.bounds.validate()
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_degrees.to_radians()).tan()
    }

    pub fn ring_cameras(&self) -> Result<Vec<Camera>> {
        let f = self.focal();
        (0..self.cameras)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / self.cameras as f64;
                let eye = [
                    self.look_at[0] + self.ring_radius * a.cos(),
                    self.look_at[1] + self.ring_height,
                    self.look_at[2] + self.ring_radius * a.sin(),
                ];
                Camera::look_at(eye, self.look_at, [0.0, 1.0, 0.0], f, f, self.width, self.height)
            })
            .collect()
    }

    pub fn is_holdout(&self, i: usize) -> bool {
        self.holdout_every > 0 && (i + 1) % self.holdout_every == 0
    }
}

/// Everything needed to recompute the degradation exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeTruth {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub haze: f64,
    pub airlight: [f64; 3],
    pub tint_degree: usize,
    /// SH coefficients of the tint per channel, `(tint_degree + 1)^2` rows;
    /// the degree-0 row is zero.
    pub tint_coeffs: Vec<[f64; 3]>,
}

impl SmokeTruth {
    pub fn tint(&self, dir: [f64; 3]) -> Result<[f64; 3]> {
        let basis = eval_sh_basis(self.tint_degree, dir)?;
        let mut out = [0.0; 3];
        for (b, c) in basis.iter().zip(&self.tint_coeffs) {
            for k in 0..3 {
                out[k] += b * c[k];
            }
        }
        Ok(out)
    }

    /// `haze * airlight + tint`, the additive part of the degradation, at
    /// every pixel of `cam`.
    pub fn additive_field(&self, cam: &Camera) -> Result<ImageBuffer> {
        let rays = cam.ray_direction_field();
        let mut out = ImageBuffer::new(cam.width, cam.height);
        for (i, d) in rays.iter().enumerate() {
            let t = self.tint(*d)?;
            for k in 0..3 {
                out.data[3 * i + k] = self.haze * self.airlight[k] + t[k];
            }
        }
        Ok(out)
    }

    pub fn degrade(&self, clean: &ImageBuffer, cam: &Camera) -> Result<ImageBuffer> {
        let add = self.additive_field(cam)?;
        clean.check_same_shape(&add, "degrade")?;
        let data = clean
            .data
            .iter()
            .zip(&add.data)
            .map(|(c, a)| (1.0 - self.haze) * c + a)
            .collect();
        ImageBuffer::from_data(clean.width, clean.height, data)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticOutput {
    pub scene: GaussianScene,
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
    pub clean: Vec<ImageBuffer>,
    pub hazy: Vec<ImageBuffer>,
    pub truth: SmokeTruth,
}

/// Points spread evenly over the unit sphere.
fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            [r * a.cos(), r * a.sin(), z]
        })
        .collect()
}

fn tint_field(spec: &SyntheticSpec, seed: u64) -> Result<Vec<[f64; 3]>> {
    let n = num_coeffs(spec.tint_degree);
    let mut coeffs = vec![[0.0; 3]; n];
    if spec.tint_amplitude == 0.0 {
        return Ok(coeffs);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TINT_SALT);
    for c in coeffs.iter_mut().skip(1) {
        *c = [0; 3].map(|_| rng.random_range(-1.0..1.0));
    }
    let mut peak: f64 = 0.0;
    for d in fibonacci_sphere(NORMALIZATION_SAMPLES) {
        let basis = eval_sh_basis(spec.tint_degree, d)?;
        for k in 0..3 {
            let v: f64 = basis.iter().zip(&coeffs).map(|(b, c)| b * c[k]).sum();
            peak = peak.max(v.abs());
        }
    }
    let s = spec.tint_amplitude / peak;
    for c in &mut coeffs {
        *c = c.map(|v| v * s);
    }
    Ok(coeffs)
}

fn ground_truth_scene(spec: &SyntheticSpec, seed: u64) -> Result<GaussianScene> {
    let mut scene = init_scene(spec.gaussians, &spec.bounds, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut palette_rng = ChaCha8Rng::seed_from_u64(spec.palette_seed ^ PALETTE_SALT);
    let palette: Vec<[f64; 3]> = (0..spec.palette_size)
        .map(|_| [0; 3].map(|_| palette_rng.random_range(0.1..0.9)))
        .collect();
    let ext = spec.bounds.extent();
    let center = [0, 1, 2].map(|i| spec.bounds.min[i] + 0.5 * ext[i]);
    let half = (ext[0] + ext[1] + ext[2]) / 6.0;
    for j in 0..spec.gaussians {
        // Uniform in the ellipsoid inscribed in the bounds.
        let p = loop {
            let u = [0; 3].map(|_| rng.random_range(-1.0..1.0));
            if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break u;
            }
        };
        scene.positions[j] = [0, 1, 2].map(|i| center[i] + 0.5 * ext[i] * p[i]);
        scene.rotations[j] = normalize_quat([0; 4].map(|_| rng.random_range(-1.0..1.0)));
        scene.log_scales[j] = [0; 3].map(|_| (half * rng.random_range(0.05..0.15)).ln());
        scene.opacity_logits[j] = logit(rng.random_range(0.6..0.95));
        let base = palette[rng.random_range(0..palette.len())];
        scene.sh_coeffs[j][0] = base.map(|c| ((c + rng.random_range(-0.05..0.05)) - COLOR_OFFSET) / C0);
    }
    Ok(scene)
}

/// Builds the ground truth, renders it and degrades every view. Deterministic
/// in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticOutput> {
    spec.validate()?;
    let scene = ground_truth_scene(spec, seed)?;
    let cameras = spec.ring_cameras()?;
    let truth = SmokeTruth {
        seed,
        spec: spec.clone(),
        haze: spec.haze,
        airlight: spec.airlight,
        tint_degree: spec.tint_degree,
        tint_coeffs: tint_field(spec, seed)?,
    };
    let cfg = RenderConfig::default();
    let mut clean = Vec::with_capacity(cameras.len());
    let mut hazy = Vec::with_capacity(cameras.len());
    let mut frames = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let img = rasterize(&scene, cam, &cfg)?.image;
        hazy.push(truth.degrade(&img, cam)?);
        clean.push(img);
        let id = format!("{i:03}");
        frames.push(FrameRecord {
            image: Some(format!("hazy/{id}.png")),
            id,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            cam_to_world: pose_rows(&cam.cam_to_world),
            split: Some(if spec.is_holdout(i) {
                Split::Holdout
            } else {
                Split::Train
            }),
        });
    }
    Ok(SyntheticOutput {
        scene,
        manifest: Manifest {
            width: spec.width,
            height: spec.height,
            bounds: Some(spec.bounds),
            frames,
        },
        cameras,
        clean,
        hazy,
        truth,
    })
}

/// Writes `clean/`, `hazy/`, `manifest.json`, `truth.json` and the
/// ground-truth scene `truth.smgs` under `dir`.
pub fn write_synthetic(out: &SyntheticOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, (c, h)) in out.manifest.frames.iter().zip(out.clean.iter().zip(&out.hazy)) {
        write_image(c, &dir.join("clean").join(format!("{}.png", f.id)))?;
        write_image(h, &dir.join("hazy").join(format!("{}.png", f.id)))?;
    }
    out.manifest.write(&dir.join(MANIFEST_FILE))?;
    let truth = serde_json::to_string_pretty(&out.truth).expect("truth serializes");
    let p = dir.join("truth.json");
    std::fs::write(&p, truth + "\n").map_err(|e| Error::io(&p, e))?;
    save_checkpoint(&out.scene, &dir.join("truth.smgs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec {
            gaussians: 40,
            width: 24,
            height: 24,
            cameras: 4,
            holdout_every: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn no_smoke_means_clean() {
        let spec = SyntheticSpec {
            haze: 0.0,
            tint_amplitude: 0.0,
            ..tiny()
        };
        let out = generate_synthetic(&spec, 3).unwrap();
        assert_eq!(out.clean, out.hazy);
        assert!(out.clean.iter().any(|c| c.data.iter().any(|&v| v > 0.05)));
    }

    #[test]
    fn full_haze_is_airlight_plus_tint() {
        let spec = SyntheticSpec { haze: 1.0, ..tiny() };
        let out = generate_synthetic(&spec, 3).unwrap();
        let cam = &out.cameras[1];
        let rays = cam.ray_direction_field();
        for (i, d) in rays.iter().enumerate() {
            let t = out.truth.tint(*d).unwrap();
            for k in 0..3 {
                let expected = spec.airlight[k] + t[k];
                assert!((out.hazy[1].data[3 * i + k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tint_is_normalized_and_zero_mean() {
        let spec = tiny();
        let coeffs = tint_field(&spec, 9).unwrap();
        assert_eq!(coeffs[0], [0.0; 3]);
        let truth = SmokeTruth {
            seed: 9,
            spec: spec.clone(),
            haze: 0.0,
            airlight: [0.0; 3],
            tint_degree: spec.tint_degree,
            tint_coeffs: coeffs,
        };
        let dirs = fibonacci_sphere(NORMALIZATION_SAMPLES);
        let mut peak: f64 = 0.0;
        let mut mean = [0.0; 3];
        for d in &dirs {
            let t = truth.tint(*d).unwrap();
            for k in 0..3 {
                peak = peak.max(t[k].abs());
                mean[k] += t[k] / dirs.len() as f64;
            }
        }
        assert!((peak - spec.tint_amplitude).abs() < 1e-12);
        assert!(mean.iter().all(|m| m.abs() < 1e-3));
    }

    #[test]
    fn splits_and_validation() {
        let out = generate_synthetic(&tiny(), 1).unwrap();
        let splits: Vec<_> = out.manifest.frames.iter().map(|f| f.split.unwrap()).collect();
        assert_eq!(splits, [Split::Train, Split::Holdout, Split::Train, Split::Holdout]);
        for bad in [
            SyntheticSpec { cameras: 1, ..tiny() },
            SyntheticSpec { haze: 1.5, ..tiny() },
            SyntheticSpec {
                tint_amplitude: -0.1,
                ..tiny()
            },
        ] {
            assert!(matches!(generate_synthetic(&bad, 1), Err(Error::InvalidArgument(_))));
        }
    }
}
