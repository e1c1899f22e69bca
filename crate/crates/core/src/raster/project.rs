//! Projection of 3D Gaussians to screen-space ellipses, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};
use rayon::prelude::*;

use super::RenderConfig;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scene::{GaussianScene, GradientSet};
use crate::sh::{self, COLOR_COEFFS, COLOR_OFFSET};

/// A Gaussian after projection into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Index into the scene.
    pub index: usize,
    /// Screen-space mean in pixels.
    pub mean: [f64; 2],
    /// Screen covariance `(xx, xy, yy)` in pixels², floor included.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same packing.
    pub conic: [f64; 3],
    /// Render-frame depth.
    pub depth: f64,
    /// Evaluated RGB after the gray offset and zero clamp.
    pub color: [f64; 3],
    pub opacity: f64,
    /// Pixel radius of the support ellipse's bounding circle.
    pub radius: f64,
    pub(crate) view_pos: [f64; 3],
    pub(crate) rotation: [f64; 4],
    pub(crate) scale: [f64; 3],
    pub(crate) color_clamped: [bool; 3],
    pub(crate) view_dir: [f64; 3],
    pub(crate) view_dist: f64,
}

impl ProjectedGaussian {
    pub fn covariance_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0], self.cov[1], self.cov[1], self.cov[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Visible Gaussians in scene order.
    pub gaussians: Vec<ProjectedGaussian>,
    /// Gaussians dropped by the near plane.
    pub culled: usize,
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R diag(scale^2) R^T` for a unit quaternion.
pub fn covariance_3d(rotation: [f64; 4], scale: [f64; 3]) -> Matrix3<f64> {
    let m = quat_to_matrix(rotation) * Matrix3::from_diagonal(&Vector3::from(scale));
    m * m.transpose()
}

fn perspective_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * t.x * inv_z2,
        0.0,
        cam.fy * inv_z,
        -cam.fy * t.y * inv_z2,
    )
}

pub(crate) fn view_rotation(view: &Matrix4<f64>) -> Matrix3<f64> {
    view.fixed_view::<3, 3>(0, 0).into_owned()
}

fn project_one(
    scene: &GaussianScene,
    j: usize,
    cam: &Camera,
    view: &Matrix4<f64>,
    center: &Vector3<f64>,
    cfg: &RenderConfig,
) -> Result<Option<ProjectedGaussian>> {
    let g = scene.activated(j)?;
    let mu = Vector3::from(g.position);
    let t = (view * mu.push(1.0)).xyz();
    if !(t.z > cfg.near) {
        if !t.z.is_finite() {
            return Err(Error::numeric("view-space position", j));
        }
        return Ok(None);
    }
    let w = view_rotation(view);
    let jac = perspective_jacobian(cam, &t);
    let tw = jac * w;
    let cov3 = covariance_3d(g.rotation, g.scale);
    let cov2 = tw * cov3 * tw.transpose();
    let cov = [
        cov2[(0, 0)] + cfg.cov_floor,
        0.5 * (cov2[(0, 1)] + cov2[(1, 0)]),
        cov2[(1, 1)] + cfg.cov_floor,
    ];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::numeric("screen covariance", j));
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let mean = [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
    let half_trace = 0.5 * (cov[0] + cov[2]);
    let lambda_max = half_trace + (0.25 * (cov[0] - cov[2]).powi(2) + cov[1] * cov[1]).sqrt();
    let radius = cfg.support_sigma * lambda_max.sqrt();

    let v = mu - center;
    let dist = v.norm();
    let dir = v / dist;
    let view_dir = [dir.x, dir.y, dir.z];
    let mut basis = [0.0; COLOR_COEFFS];
    sh::sh_polynomial_into(scene.active_sh_degree, view_dir, &mut basis);
    let raw = sh::sh_color_raw(&scene.sh_coeffs[j], &basis, scene.active_sh_degree);
    let mut color = [0.0; 3];
    let mut color_clamped = [false; 3];
    for c in 0..3 {
        let shifted = raw[c] + COLOR_OFFSET;
        color_clamped[c] = shifted < 0.0;
        color[c] = shifted.max(0.0);
    }
    let finite = mean.iter().chain(&conic).chain(&color).all(|v| v.is_finite()) && radius.is_finite();
    if !finite {
        return Err(Error::numeric("projected Gaussian", j));
    }
    Ok(Some(ProjectedGaussian {
        index: j,
        mean,
        cov,
        conic,
        depth: t.z,
        color,
        opacity: g.opacity,
        radius,
        view_pos: [t.x, t.y, t.z],
        rotation: g.rotation,
        scale: g.scale,
        color_clamped,
        view_dir,
        view_dist: dist,
    }))
}

/// Projects every Gaussian in front of the near plane.
pub fn project_gaussians(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> Result<Projection> {
    scene.check_shapes()?;
    let view = cam.view_matrix()?;
    let center = cam.center();
    let results: Vec<Result<Option<ProjectedGaussian>>> = (0..scene.len())
        .into_par_iter()
        .map(|j| project_one(scene, j, cam, &view, &center, cfg))
        .collect();
    let mut gaussians = Vec::with_capacity(scene.len());
    let mut culled = 0;
    for r in results {
        match r? {
            Some(p) => gaussians.push(p),
            None => culled += 1,
        }
    }
    Ok(Projection { gaussians, culled })
}

/// Gradients of the loss with respect to one projected Gaussian's screen-space
/// quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScreenGrad {
    pub mean: [f64; 2],
    /// With respect to the packed conic `(a, b, c)` of `a dx² + 2 b dx dy + c dy²`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl ScreenGrad {
    pub(crate) fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

/// Per-Gaussian parameter gradients produced by [`backward_one`].
pub(crate) struct ParamGrad {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: [[f64; 3]; COLOR_COEFFS],
}

fn quat_matrix_backward(q: [f64; 4], d: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0 * (-z * d[(0, 1)] + y * d[(0, 2)] + z * d[(1, 0)] - x * d[(1, 2)] - y * d[(2, 0)] + x * d[(2, 1)]);
    let dx = 2.0
        * (y * d[(0, 1)] + z * d[(0, 2)] + y * d[(1, 0)] - 2.0 * x * d[(1, 1)] - w * d[(1, 2)]
            + z * d[(2, 0)]
            + w * d[(2, 1)]
            - 2.0 * x * d[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * d[(0, 0)] + x * d[(0, 1)] + w * d[(0, 2)] + x * d[(1, 0)] + z * d[(1, 2)] - w * d[(2, 0)]
            + z * d[(2, 1)]
            - 2.0 * y * d[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * d[(0, 0)] - w * d[(0, 1)] + x * d[(0, 2)] + w * d[(1, 0)] - 2.0 * z * d[(1, 1)]
            + y * d[(1, 2)]
            + x * d[(2, 0)]
            + y * d[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Chains screen-space gradients back to the raw scene parameters of one
/// Gaussian.
pub(crate) fn backward_one(
    p: &ProjectedGaussian,
    g: &ScreenGrad,
    scene: &GaussianScene,
    cam: &Camera,
    view: &Matrix4<f64>,
) -> ParamGrad {
    let j = p.index;
    let degree = scene.active_sh_degree;
    let coeffs = &scene.sh_coeffs[j];

    // Color: clamp, SH coefficients, and the direction's dependence on mu.
    let d_raw: [f64; 3] = [0, 1, 2].map(|c| if p.color_clamped[c] { 0.0 } else { g.color[c] });
    let mut basis = [0.0; COLOR_COEFFS];
    sh::sh_polynomial_into(degree, p.view_dir, &mut basis);
    let mut d_sh = [[0.0; 3]; COLOR_COEFFS];
    for k in 0..sh::num_coeffs(degree) {
        for c in 0..3 {
            d_sh[k][c] = d_raw[c] * basis[k];
        }
    }
    let mut d_mu = Vector3::zeros();
    if degree > 0 {
        let mut jac = [[0.0; 3]; COLOR_COEFFS];
        sh::sh_jacobian_into(degree, p.view_dir, &mut jac);
        let mut d_dir = Vector3::zeros();
        for k in 1..sh::num_coeffs(degree) {
            let w = coeffs[k][0] * d_raw[0] + coeffs[k][1] * d_raw[1] + coeffs[k][2] * d_raw[2];
            d_dir += Vector3::from(jac[k]) * w;
        }
        let dir = Vector3::from(p.view_dir);
        d_mu += (d_dir - dir * dir.dot(&d_dir)) / p.view_dist;
    }

    let op = p.opacity;
    let d_logit = g.opacity * op * (1.0 - op);

    // Conic -> screen covariance: dL/dSigma = -K G K.
    let k = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let gk = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let d_cov2 = -(k * gk * k);

    let t = Vector3::from(p.view_pos);
    let w = view_rotation(view);
    let jac = perspective_jacobian(cam, &t);
    let tw = jac * w;
    let rot = quat_to_matrix(p.rotation);
    let s = Matrix3::from_diagonal(&Vector3::from(p.scale));
    let m = rot * s;
    let cov3 = m * m.transpose();

    let d_cov3 = tw.transpose() * d_cov2 * tw;
    let d_tw = 2.0 * d_cov2 * tw * cov3;
    let d_jac = d_tw * w.transpose();

    let d_m = 2.0 * d_cov3 * m;
    let d_rot = d_m * s;
    let mut d_log_scale = [0.0; 3];
    for i in 0..3 {
        let d_s = rot.column(i).dot(&d_m.column(i));
        d_log_scale[i] = d_s * p.scale[i];
    }
    let d_qhat = quat_matrix_backward(p.rotation, &d_rot);
    let raw_q = scene.rotations[j];
    let q_norm = raw_q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = (0..4).map(|i| p.rotation[i] * d_qhat[i]).sum();
    let d_rotation = [0, 1, 2, 3].map(|i| (d_qhat[i] - p.rotation[i] * dot) / q_norm);

    // Jacobian and mean depend on the view-space position.
    let (fx, fy) = (cam.fx, cam.fy);
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let mut d_t = Vector3::new(
        d_jac[(0, 2)] * (-fx * inv_z2),
        d_jac[(1, 2)] * (-fy * inv_z2),
        d_jac[(0, 0)] * (-fx * inv_z2)
            + d_jac[(0, 2)] * (2.0 * fx * t.x * inv_z3)
            + d_jac[(1, 1)] * (-fy * inv_z2)
            + d_jac[(1, 2)] * (2.0 * fy * t.y * inv_z3),
    );
    let gm = Vector2::from(g.mean);
    d_t.x += gm.x * fx * inv_z;
    d_t.y += gm.y * fy * inv_z;
    d_t.z += -gm.x * fx * t.x * inv_z2 - gm.y * fy * t.y * inv_z2;
    d_mu += w.transpose() * d_t;

    ParamGrad {
        position: [d_mu.x, d_mu.y, d_mu.z],
        rotation: d_rotation,
        log_scale: d_log_scale,
        opacity_logit: d_logit,
        sh: d_sh,
    }
}

pub(crate) fn scatter(grads: &mut GradientSet, index: usize, pg: &ParamGrad) {
    for i in 0..3 {
        grads.positions[index][i] += pg.position[i];
        grads.log_scales[index][i] += pg.log_scale[i];
    }
    for i in 0..4 {
        grads.rotations[index][i] += pg.rotation[i];
    }
    grads.opacity_logits[index] += pg.opacity_logit;
    for (dst, src) in grads.sh_coeffs[index].iter_mut().zip(&pg.sh) {
        for c in 0..3 {
            dst[c] += src[c];
        }
    }
}
