//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smoke_gs::camera::Camera;
use smoke_gs::image::ImageBuffer;
use smoke_gs::medium::{encode_directions, fuse, medium_forward, MediumWeights};
use smoke_gs::raster::{rasterize, RenderConfig};
use smoke_gs::scene::{init_scene, Aabb, GaussianScene};

// ---------------------------------------------------------------------------
// Real spherical harmonics from associated Legendre functions.

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// `P_l^m(x)` with the Condon-Shortley phase, `m >= 0`.
fn legendre(l: u32, m: u32, x: f64) -> f64 {
    let mut pmm = 1.0;
    let s = (1.0 - x * x).max(0.0).sqrt();
    for i in 0..m {
        pmm *= -(2.0 * f64::from(i) + 1.0) * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2.0 * f64::from(m) + 1.0) * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        let llf = f64::from(ll);
        let mf = f64::from(m);
        pll = ((2.0 * llf - 1.0) * x * pm1 - (llf + mf - 1.0) * pmm) / (llf - mf);
        pmm = pm1;
        pm1 = pll;
    }
    pll
}

/// Real SH basis up to `degree`, ordered by `l` then `m = -l..=l`.
pub fn sh_oracle(degree: u32, d: [f64; 3]) -> Vec<f64> {
    let [x, y, z] = d;
    let phi = y.atan2(x);
    let mut out = Vec::new();
    for l in 0..=degree {
        for m in -(l as i32)..=(l as i32) {
            let am = m.unsigned_abs();
            let k = ((2.0 * f64::from(l) + 1.0) / (4.0 * std::f64::consts::PI) * factorial(l - am) / factorial(l + am))
                .sqrt();
            let p = legendre(l, am, z);
            let v = match m.cmp(&0) {
                std::cmp::Ordering::Equal => k * p,
                std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * k * (f64::from(am) * phi).cos() * p,
                std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * k * (f64::from(am) * phi).sin() * p,
            };
            out.push(v);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Brute-force compositor: every Gaussian for every pixel, one global depth
// order, no tiles and no early termination.

pub struct OracleGaussian {
    pub index: usize,
    pub depth: f64,
    pub mean: [f64; 2],
    pub inv_cov: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

fn quat_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    // Rotation as the conjugation v -> q v q*, expanded column by column.
    let rotate = |v: Vector3<f64>| {
        let u = Vector3::new(x, y, z);
        v + 2.0 * u.cross(&(u.cross(&v) + w * v))
    };
    Matrix3::from_columns(&[rotate(Vector3::x()), rotate(Vector3::y()), rotate(Vector3::z())])
}

pub fn oracle_project(scene: &GaussianScene, cam: &Camera) -> Vec<OracleGaussian> {
    let view = cam.view_matrix().unwrap();
    let w = view.fixed_view::<3, 3>(0, 0).into_owned();
    let tr = view.fixed_view::<3, 1>(0, 3).into_owned();
    let center = cam.center();
    let mut out = Vec::new();
    for j in 0..scene.len() {
        let mu = Vector3::from(scene.positions[j]);
        let t = w * mu + tr;
        if t.z <= 0.01 {
            continue;
        }
        let r = quat_matrix(scene.rotations[j]);
        let s = Matrix3::from_diagonal(&Vector3::from(scene.log_scales[j].map(f64::exp)));
        let sigma = r * s * s * r.transpose();
        let jac = Matrix2x3::new(
            cam.fx / t.z,
            0.0,
            -cam.fx * t.x / (t.z * t.z),
            0.0,
            cam.fy / t.z,
            -cam.fy * t.y / (t.z * t.z),
        );
        let cov = jac * w * sigma * w.transpose() * jac.transpose() + Matrix2::identity() * 0.3;
        let dir = (mu - center).normalize();
        let basis = sh_oracle(3, [dir.x, dir.y, dir.z]);
        let n_active = (scene.active_sh_degree + 1).pow(2);
        let mut color = [0.5; 3];
        for (k, b) in basis.iter().enumerate().take(n_active) {
            for c in 0..3 {
                color[c] += scene.sh_coeffs[j][k][c] * b;
            }
        }
        out.push(OracleGaussian {
            index: j,
            depth: t.z,
            mean: [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy],
            inv_cov: cov.try_inverse().unwrap(),
            opacity: 1.0 / (1.0 + (-scene.opacity_logits[j]).exp()),
            color: color.map(|v| v.max(0.0)),
        });
    }
    out.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    out
}

pub fn brute_force_render(scene: &GaussianScene, cam: &Camera) -> ImageBuffer {
    let gs = oracle_project(scene, cam);
    let mut img = ImageBuffer::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = nalgebra::Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for g in &gs {
                let d = p - nalgebra::Vector2::from(g.mean);
                let m2 = (d.transpose() * g.inv_cov * d)[0];
                if m2 > 9.0 {
                    continue;
                }
                let a = (g.opacity * (-0.5 * m2).exp()).min(0.99);
                for k in 0..3 {
                    c[k] += g.color[k] * a * t;
                }
                t *= 1.0 - a;
            }
            img.set(x, y, c);
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Random small scenes for gradient and oracle tests.

pub fn look_camera(size: usize, eye: [f64; 3]) -> Camera {
    Camera::look_at(
        eye,
        [0.0; 3],
        [0.0, 1.0, 0.0],
        size as f64 * 1.1,
        size as f64 * 1.1,
        size,
        size,
    )
    .unwrap()
}

/// A scene of `count` Gaussians near the origin with random shapes, colors
/// (all SH degrees populated) and opacities.
pub fn random_scene(count: usize, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = init_scene(count, &Aabb::new([-0.6; 3], [0.6; 3]), seed).unwrap();
    for j in 0..count {
        s.rotations[j] = [
            rng.random_range(0.5..1.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ];
        s.log_scales[j] = [0; 3].map(|_| rng.random_range(-1.8..-0.9));
        s.opacity_logits[j] = rng.random_range(-1.5..2.0);
        for k in 0..16 {
            for c in 0..3 {
                let amp = if k == 0 { 0.8 } else { 0.15 };
                s.sh_coeffs[j][k][c] = rng.random_range(-amp..amp);
            }
        }
    }
    s.active_sh_degree = 3;
    s
}

pub fn random_image(w: usize, h: usize, seed: u64, range: f64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.random_range(-range..range)).collect();
    ImageBuffer::from_data(w, h, data).unwrap()
}

/// Full forward pipeline: Gaussian render plus fused medium correction.
pub fn fused_render(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig, weight: f64) -> ImageBuffer {
    let base = rasterize(scene, cam, cfg).unwrap();
    let feats = encode_directions(&cam.ray_direction_field()).unwrap();
    let med = medium_forward(&scene.medium, &feats, cam.width, cam.height).unwrap();
    fuse(&base.image, &med.outputs, weight).unwrap()
}

pub fn dot(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Whether a scene is far enough from the renderer's non-smooth points
/// (support boundary, alpha clamp, color clamp, termination) that central
/// differences are meaningful.
pub fn smooth_enough(scene: &GaussianScene, cam: &Camera) -> bool {
    let gs = oracle_project(scene, cam);
    for g in &gs {
        if g.color.iter().any(|&c| c < 0.02) {
            return false;
        }
    }
    for w in gs.windows(2) {
        if (w[1].depth - w[0].depth).abs() < 1e-3 {
            return false;
        }
    }
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = nalgebra::Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            for g in &gs {
                let d = p - nalgebra::Vector2::from(g.mean);
                let m2 = (d.transpose() * g.inv_cov * d)[0];
                if (m2 - 9.0).abs() < 0.05 {
                    return false;
                }
                if m2 > 9.0 {
                    continue;
                }
                let raw = g.opacity * (-0.5 * m2).exp();
                if (raw - 0.99).abs() < 1e-3 {
                    return false;
                }
                t *= 1.0 - raw.min(0.99);
                if (t - 1e-4).abs() < 1e-5 {
                    return false;
                }
            }
        }
    }
    true
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` with respect to `params[i]`, step `1e-4` scaled
/// by the parameter magnitude.
pub fn central_difference<P>(state: &mut P, get: impl Fn(&mut P) -> &mut f64, f: impl Fn(&P) -> f64) -> f64 {
    let x = *get(state);
    let h = 1e-4 * x.abs().max(1.0);
    *get(state) = x + h;
    let fp = f(state);
    *get(state) = x - h;
    let fm = f(state);
    *get(state) = x;
    (fp - fm) / (2.0 * h)
}

/// Analytic gradient of `L = <cotangent, fused_render>` through both branches.
pub fn analytic_gradients(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RenderConfig,
    weight: f64,
    cotangent: &ImageBuffer,
) -> smoke_gs::scene::GradientSet {
    let base = rasterize(scene, cam, cfg).unwrap();
    let feats = encode_directions(&cam.ray_direction_field()).unwrap();
    let med = medium_forward(&scene.medium, &feats, cam.width, cam.height).unwrap();
    let mut grads = smoke_gs::raster::rasterize_backward(scene, &base, cotangent).unwrap();
    let mg = smoke_gs::medium::medium_backward(&scene.medium, &med, &feats, cotangent, weight, false).unwrap();
    grads.medium = mg.weights;
    grads
}

/// Largest relative error over every parameter of the scene, with the
/// tensor index and flat offset where it occurs.
pub fn worst_gradient_error(scene: &GaussianScene, cam: &Camera, seed: u64) -> (f64, usize, usize, f64, f64) {
    let cfg = RenderConfig {
        termination_threshold: 0.0,
        ..RenderConfig::default()
    };
    let cot = random_image(cam.width, cam.height, seed ^ 0xC07, 1.0);
    let grads = analytic_gradients(scene, cam, &cfg, 0.2, &cot);
    let loss = |s: &GaussianScene| dot(&cot, &fused_render(s, cam, &cfg, 0.2));
    let mut state = scene.clone();
    let mut worst = (0.0, 0, 0, 0.0, 0.0);
    for (t, g) in grads.tensors().iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let n = central_difference(
                &mut state,
                |s| &mut s.tensors_mut().into_iter().nth(t).unwrap().1[i],
                loss,
            );
            let e = rel_err(a, n);
            if e > worst.0 {
                worst = (e, t, i, a, n);
            }
        }
    }
    worst
}

/// A random scene of `count` Gaussians viewed by an 8x8 camera, redrawn from
/// derived seeds until it is away from every kink.
pub fn smooth_scene(count: usize, seed: u64) -> (GaussianScene, Camera) {
    let cam = look_camera(8, [0.4, 0.5, 3.0]);
    for k in 0..1000 {
        let mut s = random_scene(count, seed.wrapping_mul(1000).wrapping_add(k));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k << 20));
        s.medium = MediumWeights::init(&mut rng);
        if smooth_enough(&s, &cam) {
            return (s, cam);
        }
    }
    panic!("no smooth scene for seed {seed}");
}
