//! Datasets on disk: the scene manifest, image files and the synthetic
//! smoke-scene generator.
//!
//! A scene directory holds `manifest.json` and the images it references.
//! Manifest fields:
//!
//! - `width`, `height`: image size in pixels, shared by every frame.
//! - `bounds` (optional): `{ "min": [x, y, z], "max": [x, y, z] }`, the box
//!   Gaussians are initialized in.
//! - `frames`: list of
//!   - `id`: unique frame name, also the render output name;
//!   - `image` (optional): path relative to the manifest; frames without one
//!     are render-only poses;
//!   - `fx`, `fy`, `cx`, `cy`: pinhole intrinsics in pixels;
//!   - `cam_to_world`: 4x4 row-major rigid pose, camera looking down -z with
//!     y up;
//!   - `split` (optional): `"train"` or `"holdout"`. Without any split field
//!     in the manifest, every n-th imaged frame is held out.

mod io;
mod synth;

pub use io::{decode_srgb, quantize, read_image, read_image_with, write_image};
pub use synth::{generate_synthetic, write_synthetic, SmokeTruth, SyntheticOutput, SyntheticSpec};

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{rigidity_error, Camera};
use crate::error::{DataError, Error, Result};
use crate::image::ImageBuffer;
use crate::scene::Aabb;

pub const MANIFEST_FILE: &str = "manifest.json";
const RIGIDITY_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_to_world: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Aabb>,
    pub frames: Vec<FrameRecord>,
}

impl Manifest {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            DataError::MalformedManifest {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
            .into()
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(DataError::MissingManifest(path.to_path_buf()).into());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn pose_matrix(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| rows[r][c])
}

pub fn pose_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Checks a pose against the ingest tolerance and snaps its rotation to the
/// nearest orthonormal matrix.
fn rigid_pose(frame: &str, rows: &[[f64; 4]; 4]) -> Result<Matrix4<f64>> {
    let non_rigid = |reason: String| -> Error {
        DataError::NonRigidPose {
            frame: frame.to_string(),
            reason,
        }
        .into()
    };
    let m = pose_matrix(rows);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(non_rigid("non-finite entry".into()));
    }
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(non_rigid(format!("last row {bottom:?} is not [0, 0, 0, 1]")));
    }
    let (ortho, det) = rigidity_error(&m);
    if ortho > RIGIDITY_TOLERANCE || det > RIGIDITY_TOLERANCE {
        return Err(non_rigid(format!("|R^T R - I| = {ortho:.2e}, |det R - 1| = {det:.2e}")));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = r.svd(true, true);
    let snapped = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
    let mut out = m;
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&snapped);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameRole {
    Train,
    Holdout,
    /// Pose without an image.
    RenderOnly,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub id: String,
    pub camera: Camera,
    pub image: Option<ImageBuffer>,
    pub role: FrameRole,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<Frame>,
    pub bounds: Option<Aabb>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub downscale: usize,
    /// Hold out every n-th imaged frame when the manifest has no split; `0`
    /// trains on all of them.
    pub holdout_every: usize,
    /// Decode 8-bit values as sRGB instead of linear `v / 255`.
    pub srgb: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            downscale: 1,
            holdout_every: 8,
            srgb: false,
        }
    }
}

impl Dataset {
    pub fn train_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.role == FrameRole::Train)
    }

    pub fn holdout_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.role == FrameRole::Holdout)
    }

    /// Manifest bounds, or a box around the region the cameras surround.
    pub fn scene_bounds(&self) -> Aabb {
        if let Some(b) = self.bounds {
            return b;
        }
        let n = self.frames.len() as f64;
        let centers: Vec<_> = self.frames.iter().map(|f| f.camera.center()).collect();
        let mean = centers.iter().fold(nalgebra::Vector3::zeros(), |a, c| a + c) / n;
        let radius = centers.iter().map(|c| (c - mean).norm()).sum::<f64>() / n;
        let half = if radius > 0.0 { 0.5 * radius } else { 1.0 };
        Aabb::new(
            [mean.x - half, mean.y - half, mean.z - half],
            [mean.x + half, mean.y + half, mean.z + half],
        )
    }
}

/// Loads `root/manifest.json` and every referenced image.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if opts.downscale == 0 {
        return Err(Error::InvalidArgument("downscale factor must be >= 1".into()));
    }
    let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
    let explicit_split = manifest.frames.iter().any(|f| f.split.is_some());
    let mut imaged = 0usize;
    let mut roles = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let role = match (&f.image, f.split) {
            (None, _) => FrameRole::RenderOnly,
            (Some(_), Some(Split::Holdout)) => FrameRole::Holdout,
            (Some(_), Some(Split::Train)) => FrameRole::Train,
            (Some(_), None) if explicit_split => FrameRole::Train,
            (Some(_), None) => {
                imaged += 1;
                if opts.holdout_every > 0 && imaged % opts.holdout_every == 0 {
                    FrameRole::Holdout
                } else {
                    FrameRole::Train
                }
            }
        };
        roles.push(role);
    }

    let frames: Vec<Frame> = manifest
        .frames
        .par_iter()
        .zip(roles)
        .map(|(f, role)| -> Result<Frame> {
            let pose = rigid_pose(&f.id, &f.cam_to_world)?;
            let full = Camera::new(f.fx, f.fy, f.cx, f.cy, manifest.width, manifest.height, pose).map_err(|e| {
                Error::from(DataError::MalformedManifest {
                    path: root.join(MANIFEST_FILE),
                    reason: format!("frame {}: {e}", f.id),
                })
            })?;
            let camera = full.downscaled(opts.downscale)?;
            let image = match &f.image {
                None => None,
                Some(rel) => {
                    let img = read_image_with(&root.join(rel), opts.srgb)?;
                    if (img.width, img.height) != (manifest.width, manifest.height) {
                        return Err(DataError::ResolutionMismatch {
                            frame: f.id.clone(),
                            found: (img.width, img.height),
                            expected: (manifest.width, manifest.height),
                        }
                        .into());
                    }
                    Some(img.downscale(opts.downscale))
                }
            };
            Ok(Frame {
                id: f.id.clone(),
                camera,
                image,
                role,
            })
        })
        .collect::<Result<_>>()?;

    let mut ids = std::collections::HashSet::new();
    for f in &frames {
        if !ids.insert(f.id.as_str()) {
            return Err(DataError::MalformedManifest {
                path: root.join(MANIFEST_FILE),
                reason: format!("duplicate frame id {}", f.id),
            }
            .into());
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        frames,
        bounds: manifest.bounds,
    })
}

#[derive(Deserialize)]
struct TransformsFile {
    camera_angle_x: Option<f64>,
    fl_x: Option<f64>,
    fl_y: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    w: Option<f64>,
    h: Option<f64>,
    frames: Vec<TransformsFrame>,
}

#[derive(Deserialize)]
struct TransformsFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Converts a NeRF-style `transforms.json` into a manifest. Image paths
/// without an extension get `.png`. Image size comes from `w`/`h` or, when
/// absent, from the first image. Experimental: only the common fields are
/// understood.
pub fn manifest_from_transforms(path: &Path, split: Option<Split>) -> Result<Manifest> {
    let malformed = |reason: String| -> Error {
        DataError::MalformedManifest {
            path: path.to_path_buf(),
            reason,
        }
        .into()
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tf: TransformsFile = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let image_path = |p: &str| {
        let p = p.trim_start_matches("./");
        if Path::new(p).extension().is_some() {
            p.to_string()
        } else {
            format!("{p}.png")
        }
    };
    let (w, h) = match (tf.w, tf.h) {
        (Some(w), Some(h)) => (w as usize, h as usize),
        _ => {
            let first = tf.frames.first().ok_or_else(|| malformed("no frames".into()))?;
            let img = read_image(&base.join(image_path(&first.file_path)))?;
            (img.width, img.height)
        }
    };
    let fx = match (tf.fl_x, tf.camera_angle_x) {
        (Some(f), _) => f,
        (None, Some(a)) => 0.5 * w as f64 / (0.5 * a).tan(),
        (None, None) => return Err(malformed("neither fl_x nor camera_angle_x".into())),
    };
    let fy = tf.fl_y.unwrap_or(fx);
    let frames = tf
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| FrameRecord {
            id: Path::new(&f.file_path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{i:04}")),
            image: Some(image_path(&f.file_path)),
            fx,
            fy,
            cx: tf.cx.unwrap_or(w as f64 / 2.0),
            cy: tf.cy.unwrap_or(h as f64 / 2.0),
            cam_to_world: f.transform_matrix,
            split,
        })
        .collect();
    Ok(Manifest {
        width: w,
        height: h,
        bounds: None,
        frames,
    })
}
