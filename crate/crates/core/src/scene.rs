//! Learnable scene: Gaussian parameters plus the medium MLP.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::medium::{sigmoid, MediumWeights};
use crate::sh::{C0, COLOR_COEFFS, COLOR_OFFSET, MAX_COLOR_DEGREE};

pub type ShCoeffs = [[f64; 3]; COLOR_COEFFS];

const MEDIUM_SEED_SALT: u64 = 0x6d65_6469_756d_5f31;

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn unit_cube() -> Self {
        Self::new([0.0; 3], [1.0; 3])
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.max[i] - self.min[i])
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.extent().iter().all(|e| e.is_finite() && *e > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "bounding box {:?}..{:?} has no volume",
                self.min, self.max
            )))
        }
    }

    pub fn from_points(points: &[[f64; 3]]) -> Option<Self> {
        let first = points.first()?;
        let mut b = Self::new(*first, *first);
        for p in points {
            for i in 0..3 {
                b.min[i] = b.min[i].min(p[i]);
                b.max[i] = b.max[i].max(p[i]);
            }
        }
        Some(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub positions: Vec<[f64; 3]>,
    /// `(w, x, y, z)`, stored unnormalized.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<ShCoeffs>,
    pub medium: MediumWeights,
    pub active_sh_degree: usize,
}

/// Which optimizer learning rate a tensor uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Positions,
    Rotations,
    Scales,
    Opacities,
    /// SH coefficients; the DC term and higher degrees use separate rates.
    Sh,
    Mlp,
}

/// Number of flat tensors a scene or gradient set exposes.
pub const TENSOR_COUNT: usize = 9;

/// Activated, ready-to-render values for one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivatedGaussian {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivatedParams {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub sh_coeffs: Vec<ShCoeffs>,
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let m = self.positions.len();
        let ok = m > 0
            && self.rotations.len() == m
            && self.log_scales.len() == m
            && self.opacity_logits.len() == m
            && self.sh_coeffs.len() == m
            && self.medium.has_expected_shapes()
            && self.active_sh_degree <= MAX_COLOR_DEGREE;
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "scene arrays disagree (M = {m}, rotations {}, scales {}, opacities {}, sh {}, degree {})",
                self.rotations.len(),
                self.log_scales.len(),
                self.opacity_logits.len(),
                self.sh_coeffs.len(),
                self.active_sh_degree
            )))
        }
    }

    /// Raises the active SH degree; never lowers it and caps at 3.
    pub fn raise_sh_degree(&mut self, degree: usize) {
        self.active_sh_degree = self.active_sh_degree.max(degree.min(MAX_COLOR_DEGREE));
    }

    /// Activated parameters of Gaussian `j`, or a numeric fault if any raw
    /// parameter is non-finite or the quaternion is zero.
    pub fn activated(&self, j: usize) -> Result<ActivatedGaussian> {
        let q = self.rotations[j];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let finite = self.positions[j].iter().all(|v| v.is_finite())
            && q.iter().all(|v| v.is_finite())
            && self.log_scales[j].iter().all(|v| v.is_finite())
            && self.opacity_logits[j].is_finite()
            && self.sh_coeffs[j].iter().flatten().all(|v| v.is_finite());
        if !finite || qn == 0.0 {
            return Err(Error::numeric("Gaussian parameters", j));
        }
        let scale = self.log_scales[j].map(f64::exp);
        if scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::numeric("Gaussian scale", j));
        }
        Ok(ActivatedGaussian {
            position: self.positions[j],
            rotation: q.map(|v| v / qn),
            scale,
            opacity: sigmoid(self.opacity_logits[j]),
        })
    }

    pub fn activated_params(&self) -> Result<ActivatedParams> {
        self.check_shapes()?;
        let m = self.len();
        let mut out = ActivatedParams {
            positions: Vec::with_capacity(m),
            rotations: Vec::with_capacity(m),
            scales: Vec::with_capacity(m),
            opacities: Vec::with_capacity(m),
            sh_coeffs: self.sh_coeffs.clone(),
        };
        for j in 0..m {
            let a = self.activated(j)?;
            out.positions.push(a.position);
            out.rotations.push(a.rotation);
            out.scales.push(a.scale);
            out.opacities.push(a.opacity);
        }
        Ok(out)
    }

    pub fn tensors(&self) -> [(ParamGroup, &[f64]); TENSOR_COUNT] {
        let [w1, b1, w2, b2] = self.medium.tensors();
        [
            (ParamGroup::Positions, self.positions.as_flattened()),
            (ParamGroup::Rotations, self.rotations.as_flattened()),
            (ParamGroup::Scales, self.log_scales.as_flattened()),
            (ParamGroup::Opacities, &self.opacity_logits),
            (ParamGroup::Sh, self.sh_coeffs.as_flattened().as_flattened()),
            (ParamGroup::Mlp, w1),
            (ParamGroup::Mlp, b1),
            (ParamGroup::Mlp, w2),
            (ParamGroup::Mlp, b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(ParamGroup, &mut [f64]); TENSOR_COUNT] {
        let [w1, b1, w2, b2] = self.medium.tensors_mut();
        [
            (ParamGroup::Positions, self.positions.as_flattened_mut()),
            (ParamGroup::Rotations, self.rotations.as_flattened_mut()),
            (ParamGroup::Scales, self.log_scales.as_flattened_mut()),
            (ParamGroup::Opacities, &mut self.opacity_logits),
            (ParamGroup::Sh, self.sh_coeffs.as_flattened_mut().as_flattened_mut()),
            (ParamGroup::Mlp, w1),
            (ParamGroup::Mlp, b1),
            (ParamGroup::Mlp, w2),
            (ParamGroup::Mlp, b2),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Gradient accumulators shaped like a [`GaussianScene`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<ShCoeffs>,
    pub medium: MediumWeights,
}

impl GradientSet {
    pub fn zeroed(m: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; m],
            rotations: vec![[0.0; 4]; m],
            log_scales: vec![[0.0; 3]; m],
            opacity_logits: vec![0.0; m],
            sh_coeffs: vec![[[0.0; 3]; COLOR_COEFFS]; m],
            medium: MediumWeights::zeros(),
        }
    }

    pub fn zeroed_like(scene: &GaussianScene) -> Self {
        Self::zeroed(scene.len())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn tensors(&self) -> [&[f64]; TENSOR_COUNT] {
        let [w1, b1, w2, b2] = self.medium.tensors();
        [
            self.positions.as_flattened(),
            self.rotations.as_flattened(),
            self.log_scales.as_flattened(),
            &self.opacity_logits,
            self.sh_coeffs.as_flattened().as_flattened(),
            w1,
            b1,
            w2,
            b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; TENSOR_COUNT] {
        let [w1, b1, w2, b2] = self.medium.tensors_mut();
        [
            self.positions.as_flattened_mut(),
            self.rotations.as_flattened_mut(),
            self.log_scales.as_flattened_mut(),
            &mut self.opacity_logits,
            self.sh_coeffs.as_flattened_mut().as_flattened_mut(),
            w1,
            b1,
            w2,
            b2,
        ]
    }

    pub fn matches(&self, scene: &GaussianScene) -> bool {
        self.tensors()
            .iter()
            .zip(scene.tensors().iter())
            .all(|(g, (_, p))| g.len() == p.len())
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient sets for {} and {} Gaussians",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        let mut offset = 0;
        for t in self.tensors() {
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Some(offset + i);
            }
            offset += t.len();
        }
        None
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitOptions {
    /// Initial Gaussian extent as a fraction of the mean nearest-neighbor spacing.
    pub scale_fraction: f64,
    pub opacity: f64,
    /// Gray level the DC color starts at.
    pub gray: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            scale_fraction: 1.0,
            opacity: 0.1,
            gray: 0.5,
        }
    }
}

/// Random scene: positions uniform in `bounds`, identity rotations, isotropic
/// scales tied to point spacing, opacity 0.1 and gray color.
pub fn init_scene(count: usize, bounds: &Aabb, seed: u64) -> Result<GaussianScene> {
    init_scene_with(count, bounds, seed, &InitOptions::default())
}

pub fn init_scene_with(count: usize, bounds: &Aabb, seed: u64, opts: &InitOptions) -> Result<GaussianScene> {
    if count == 0 {
        return Err(Error::InvalidArgument("Gaussian count must be at least 1".into()));
    }
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = bounds.extent();
    let positions: Vec<[f64; 3]> = (0..count)
        .map(|_| [0, 1, 2].map(|i| bounds.min[i] + ext[i] * rng.random::<f64>()))
        .collect();
    let fallback = (bounds.volume() / count as f64).cbrt();
    build_scene(positions, None, fallback, seed, opts)
}

/// Scene seeded from a point list with optional per-point RGB colors.
pub fn init_from_points(
    points: &[[f64; 3]],
    colors: Option<&[[f64; 3]]>,
    seed: u64,
    opts: &InitOptions,
) -> Result<GaussianScene> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("point cloud is empty".into()));
    }
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} colors for {} points",
                c.len(),
                points.len()
            )));
        }
    }
    let fallback = Aabb::from_points(points)
        .map(|b| b.extent().iter().cloned().fold(0.0, f64::max))
        .filter(|e| *e > 0.0)
        .unwrap_or(1.0);
    build_scene(points.to_vec(), colors, fallback, seed, opts)
}

fn build_scene(
    positions: Vec<[f64; 3]>,
    colors: Option<&[[f64; 3]]>,
    fallback_spacing: f64,
    seed: u64,
    opts: &InitOptions,
) -> Result<GaussianScene> {
    if !(opts.opacity > 0.0 && opts.opacity < 1.0) || !(opts.scale_fraction > 0.0) {
        return Err(Error::InvalidArgument(
            "initial opacity must be in (0, 1) and scale fraction positive".into(),
        ));
    }
    let m = positions.len();
    let spacing = mean_nearest_neighbor_distance(&positions)
        .filter(|d| *d > 0.0)
        .unwrap_or(fallback_spacing);
    let log_scale = (opts.scale_fraction * spacing).ln();
    let dc_from = |c: f64| (c - COLOR_OFFSET) / C0;
    let sh_coeffs = (0..m)
        .map(|j| {
            let mut sh = [[0.0; 3]; COLOR_COEFFS];
            sh[0] = match colors {
                Some(c) => c[j].map(dc_from),
                None => [dc_from(opts.gray); 3],
            };
            sh
        })
        .collect();
    let mut medium_rng = ChaCha8Rng::seed_from_u64(seed ^ MEDIUM_SEED_SALT);
    Ok(GaussianScene {
        positions,
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; m],
        log_scales: vec![[log_scale; 3]; m],
        opacity_logits: vec![logit(opts.opacity); m],
        sh_coeffs,
        medium: MediumWeights::init(&mut medium_rng),
        active_sh_degree: 0,
    })
}

/// Mean distance from each point to its nearest other point, using a uniform
/// grid. `None` for fewer than two points.
pub fn mean_nearest_neighbor_distance(points: &[[f64; 3]]) -> Option<f64> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let bounds = Aabb::from_points(points)?;
    let ext = bounds.extent();
    let longest = ext.iter().cloned().fold(0.0, f64::max);
    if longest == 0.0 {
        return Some(0.0);
    }
    let vol: f64 = ext.iter().map(|e| e.max(longest * 1e-3)).product();
    let cell = (vol / n as f64).cbrt().max(longest * 1e-6);
    let dims = ext.map(|e| (e / cell).floor() as i64 + 1);
    let key = |p: &[f64; 3]| -> [i64; 3] {
        [0, 1, 2].map(|i| (((p[i] - bounds.min[i]) / cell).floor() as i64).clamp(0, dims[i] - 1))
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let max_ring = dims.iter().cloned().max().unwrap_or(1);
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(bucket) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                            continue;
                        };
                        for &o in bucket {
                            if o == i {
                                continue;
                            }
                            let q = points[o];
                            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                            best = best.min(d2);
                        }
                    }
                }
            }
            // Unvisited cells are at least r * cell away.
            if best.sqrt() <= r as f64 * cell {
                break;
            }
        }
        total += best.sqrt();
    }
    Some(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_single_gaussian_values() {
        let s = init_scene(1, &Aabb::unit_cube(), 0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.rotations[0], [1.0, 0.0, 0.0, 0.0]);
        assert!((sigmoid(s.opacity_logits[0]) - 0.1).abs() < 1e-15);
        assert_eq!(s.active_sh_degree, 0);
        assert_eq!(s.sh_coeffs[0], [[0.0; 3]; 16]);
        assert!(s.positions[0].iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_scene(3, &Aabb::unit_cube(), 7).unwrap();
        let b = init_scene(3, &Aabb::unit_cube(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_scene(3, &Aabb::unit_cube(), 8).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn init_rejects_bad_arguments() {
        assert!(init_scene(0, &Aabb::unit_cube(), 0).is_err());
        let flat = Aabb::new([0.0; 3], [1.0, 1.0, 0.0]);
        assert!(init_scene(4, &flat, 0).is_err());
    }

    #[test]
    fn activation_fixed_points() {
        let mut s = init_scene(1, &Aabb::unit_cube(), 0).unwrap();
        s.log_scales[0] = [0.0; 3];
        s.opacity_logits[0] = 0.0;
        s.rotations[0] = [2.0, 0.0, 0.0, 0.0];
        let a = s.activated_params().unwrap();
        assert_eq!(a.scales[0], [1.0; 3]);
        assert_eq!(a.opacities[0], 0.5);
        assert_eq!(a.rotations[0], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_parameter_names_index() {
        let mut s = init_scene(4, &Aabb::unit_cube(), 0).unwrap();
        s.log_scales[2][1] = f64::NAN;
        match s.activated_params() {
            Err(Error::NumericFault { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn nearest_neighbor_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..300)
            .map(|_| {
                [
                    rng.random::<f64>() * 3.0,
                    rng.random::<f64>(),
                    rng.random::<f64>() * 0.5,
                ]
            })
            .collect();
        let brute: f64 = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                pts.iter()
                    .enumerate()
                    .filter(|(o, _)| *o != i)
                    .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / pts.len() as f64;
        let fast = mean_nearest_neighbor_distance(&pts).unwrap();
        assert!((brute - fast).abs() < 1e-12, "{brute} vs {fast}");
    }

    #[test]
    fn point_cloud_seeding_uses_colors() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let cols = [[1.0, 0.0, 0.5], [0.2, 0.4, 0.6]];
        let s = init_from_points(&pts, Some(&cols), 1, &InitOptions::default()).unwrap();
        assert_eq!(s.positions, pts.to_vec());
        for j in 0..2 {
            for c in 0..3 {
                let rendered = 0.5 + C0 * s.sh_coeffs[j][0][c];
                assert!((rendered - cols[j][c]).abs() < 1e-12);
            }
        }
        assert!((s.log_scales[0][0] - 1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sh_degree_only_rises() {
        let mut s = init_scene(2, &Aabb::unit_cube(), 0).unwrap();
        s.raise_sh_degree(2);
        s.raise_sh_degree(1);
        assert_eq!(s.active_sh_degree, 2);
        s.raise_sh_degree(9);
        assert_eq!(s.active_sh_degree, 3);
    }

    #[test]
    fn gradient_set_mirrors_scene() {
        let s = init_scene(5, &Aabb::unit_cube(), 0).unwrap();
        let mut g = GradientSet::zeroed_like(&s);
        assert!(g.matches(&s));
        assert_eq!(g.l2_norm(), 0.0);
        let mut h = g.clone();
        h.positions[1][2] = 1.5;
        g.accumulate(&h).unwrap();
        g.accumulate(&h).unwrap();
        assert_eq!(g.positions[1][2], 3.0);
        h.opacity_logits[0] = f64::INFINITY;
        assert_eq!(h.first_non_finite(), Some(5 * 3 + 5 * 4 + 5 * 3));
    }
}
