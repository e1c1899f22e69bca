//! Pinhole cameras.
//!
//! Poses are stored camera-to-world (`T_cam`). The camera frame of `T_cam`
//! follows the graphics convention (x right, y up, looking down -z); the view
//! matrix inverts the pose and negates its second and third rows, giving the
//! render frame (x right, y down, looking down +z) in which pixels are
//! `u = fx * x / z + cx`, `v = fy * y / z + cy`.
//!
//! Medium-branch rays are built from the normalized pixel coordinates
//! `(x, y, 1)` and mapped to world space with the transpose of the
//! world-to-camera rotation, without the row flip.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Rigid camera-to-world transform.
    pub cam_to_world: Matrix4<f64>,
}

/// Maximum deviation of `R^T R` from identity and `|det R - 1|`.
pub fn rigidity_error(pose: &Matrix4<f64>) -> (f64, f64) {
    let r: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let gram = r.transpose() * r - Matrix3::identity();
    (gram.amax(), (r.determinant() - 1.0).abs())
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_to_world: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_to_world,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = Vector3::from(target) - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye coincides with target".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-12 {
            return Err(Error::InvalidPose("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let cam_up = right.cross(&forward);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        pose.fixed_view_mut::<3, 1>(0, 1).copy_from(&cam_up);
        pose.fixed_view_mut::<3, 1>(0, 2).copy_from(&(-forward));
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height, pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be at least 1x1".into()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..w).contains(&self.cx) || !(0.0..h).contains(&self.cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if self.cam_to_world.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite pose entry".into()));
        }
        let (ortho, det) = rigidity_error(&self.cam_to_world);
        if ortho >= ORTHONORMAL_TOLERANCE || det >= ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (|R^T R - I| = {ortho:.3e}, |det - 1| = {det:.3e})"
            )));
        }
        Ok(())
    }

    /// Camera-to-world rotation block.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.cam_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Rigid inverse of the pose, without the render-frame flip.
    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let rt = self.rotation().transpose();
        let t = -(rt * self.center());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    /// `T_cam^-1` with its second and third rows negated.
    pub fn view_matrix(&self) -> Result<Matrix4<f64>> {
        let mut v = self
            .cam_to_world
            .try_inverse()
            .ok_or_else(|| Error::InvalidPose("singular pose matrix".into()))?;
        for row in 1..3 {
            for col in 0..4 {
                v[(row, col)] = -v[(row, col)];
            }
        }
        Ok(v)
    }

    /// Unit world-space ray direction for continuous pixel coordinates.
    /// Pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub fn pixel_ray_world(&self, u: f64, v: f64) -> [f64; 3] {
        let r_c2w = self.rotation();
        ray_through(&r_c2w, self.fx, self.fy, self.cx, self.cy, u, v)
    }

    /// `pixel_ray_world` at every pixel center, row-major.
    pub fn ray_direction_field(&self) -> Vec<[f64; 3]> {
        let r_c2w = self.rotation();
        let mut out = Vec::with_capacity(self.width * self.height);
        for j in 0..self.height {
            let v = j as f64 + 0.5;
            for i in 0..self.width {
                let u = i as f64 + 0.5;
                out.push(ray_through(&r_c2w, self.fx, self.fy, self.cx, self.cy, u, v));
            }
        }
        out
    }

    /// Same pose with intrinsics divided by an integer downscale factor.
    pub fn downscaled(&self, factor: usize) -> Result<Camera> {
        if factor == 0 {
            return Err(Error::InvalidArgument("downscale factor must be >= 1".into()));
        }
        let f = factor as f64;
        Camera::new(
            self.fx / f,
            self.fy / f,
            self.cx / f,
            self.cy / f,
            self.width / factor,
            self.height / factor,
            self.cam_to_world,
        )
    }
}

#[inline]
fn ray_through(r_c2w: &Matrix3<f64>, fx: f64, fy: f64, cx: f64, cy: f64, u: f64, v: f64) -> [f64; 3] {
    let d = Vector3::new((u - cx) / fx, (v - cy) / fy, 1.0).normalize();
    // R is the world-to-camera rotation, so R^T = rotation of the pose.
    let w = (r_c2w * d).normalize();
    [w.x, w.y, w.z]
}
