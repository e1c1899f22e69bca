//! Adam with per-group learning rates, and the SH degree warm-up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{GaussianScene, GradientSet, ParamGroup};
use crate::sh::{num_coeffs, MAX_COLOR_DEGREE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub positions: f64,
    pub rotations: f64,
    pub scales: f64,
    pub opacities: f64,
    /// Degree-0 SH coefficients.
    pub sh_dc: f64,
    /// SH coefficients of degree 1 and above.
    pub sh_rest: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            positions: 1.6e-4,
            rotations: 1e-3,
            scales: 5e-3,
            opacities: 5e-2,
            sh_dc: 2.5e-3,
            sh_rest: 1.25e-4,
            mlp: 1e-3,
        }
    }
}

impl LearningRates {
    fn all(&self) -> [f64; 7] {
        [
            self.positions,
            self.rotations,
            self.scales,
            self.opacities,
            self.sh_dc,
            self.sh_rest,
            self.mlp,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub grad_clip: f64,
    /// Position learning rate reached after `position_lr_steps` steps under
    /// exponential decay; `0` disables the decay.
    pub position_lr_final: f64,
    pub position_lr_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            position_lr_final: 0.0,
            position_lr_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.lr.all().iter().all(|r| r.is_finite() && *r >= 0.0);
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !rates_ok || !betas_ok || !(self.eps > 0.0) || !(self.grad_clip >= 0.0) || !(self.position_lr_final >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Position learning rate at optimizer step `t` (1-based).
    pub fn position_lr(&self, t: u64) -> f64 {
        let lr0 = self.lr.positions;
        if self.position_lr_final <= 0.0 || self.position_lr_steps == 0 || lr0 <= 0.0 {
            return lr0;
        }
        let frac = (t as f64 / self.position_lr_steps as f64).min(1.0);
        lr0 * (self.position_lr_final / lr0).powf(frac)
    }
}

/// Adam moments mirroring the scene's parameters, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: GradientSet,
    pub v: GradientSet,
}

impl OptimState {
    pub fn new(scene: &GaussianScene, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: GradientSet::zeroed_like(scene),
            v: GradientSet::zeroed_like(scene),
        })
    }

    fn rate(&self, group: ParamGroup, flat: usize, t: u64) -> f64 {
        let lr = &self.config.lr;
        match group {
            ParamGroup::Positions => self.config.position_lr(t),
            ParamGroup::Rotations => lr.rotations,
            ParamGroup::Scales => lr.scales,
            ParamGroup::Opacities => lr.opacities,
            ParamGroup::Sh if (flat / 3) % num_coeffs(MAX_COLOR_DEGREE) == 0 => lr.sh_dc,
            ParamGroup::Sh => lr.sh_rest,
            ParamGroup::Mlp => lr.mlp,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both the
/// scene and the state untouched.
pub fn adam_step(state: &mut OptimState, scene: &mut GaussianScene, grads: &GradientSet) -> Result<()> {
    if !grads.matches(scene) || !state.m.matches(scene) {
        return Err(Error::ShapeMismatch(format!(
            "gradients for {} Gaussians, optimizer for {}, scene has {}",
            grads.len(),
            state.m.len(),
            scene.len()
        )));
    }
    if let Some(i) = grads.first_non_finite() {
        return Err(Error::numeric("gradient", i));
    }
    let cfg = state.config.clone();
    let scale = match grads.l2_norm() {
        n if cfg.grad_clip > 0.0 && n > cfg.grad_clip => cfg.grad_clip / n,
        _ => 1.0,
    };
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let rates: Vec<Vec<f64>> = scene
        .tensors()
        .iter()
        .map(|(group, p)| (0..p.len()).map(|i| state.rate(*group, i, t)).collect())
        .collect();
    let params = scene.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, p), m), v), (g, lr)) in params
        .into_iter()
        .zip(ms)
        .zip(vs)
        .zip(grads.tensors().into_iter().zip(&rates))
    {
        for i in 0..p.len() {
            let gi = g[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr[i] * mh / (vh.sqrt() + cfg.eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Active SH color degree after `step` training steps: one degree per
/// `interval` steps, capped at 3.
pub fn sh_warmup(step: u64, interval: u64) -> usize {
    if interval == 0 {
        return MAX_COLOR_DEGREE;
    }
    (step / interval).min(MAX_COLOR_DEGREE as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{init_scene, Aabb};

    fn scene() -> GaussianScene {
        init_scene(2, &Aabb::unit_cube(), 3).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scene();
        let before = s.clone();
        let mut st = OptimState::new(&s, AdamConfig::default()).unwrap();
        st.m.positions[0][0] = 1.0;
        st.v.positions[0][0] = 1.0;
        let zero = GradientSet::zeroed_like(&s);
        adam_step(&mut st, &mut s, &zero).unwrap();
        assert!((st.m.positions[0][0] - 0.9).abs() < 1e-15);
        assert!((st.v.positions[0][0] - 0.999).abs() < 1e-15);
        assert_eq!(st.step, 1);
        assert_eq!(s.rotations, before.rotations);
        assert_eq!(s.medium, before.medium);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut s = scene();
        let mut st = OptimState::new(&s, AdamConfig::default()).unwrap();
        let mut g = GradientSet::zeroed_like(&s);
        g.positions[0][0] = 1.0;
        g.log_scales[1][2] = f64::NAN;
        let (s0, st0) = (s.clone(), st.clone());
        assert!(matches!(
            adam_step(&mut st, &mut s, &g),
            Err(Error::NumericFault { index: 19, .. })
        ));
        assert_eq!(s, s0);
        assert_eq!(st, st0);
    }

    #[test]
    fn sh_groups_use_dc_and_rest_rates() {
        let s = scene();
        let st = OptimState::new(&s, AdamConfig::default()).unwrap();
        assert_eq!(st.rate(ParamGroup::Sh, 2, 1), 2.5e-3);
        assert_eq!(st.rate(ParamGroup::Sh, 3, 1), 1.25e-4);
        assert_eq!(st.rate(ParamGroup::Sh, 48, 1), 2.5e-3);
    }

    #[test]
    fn position_decay_reaches_final_rate() {
        let cfg = AdamConfig {
            position_lr_final: 1.6e-6,
            position_lr_steps: 100,
            ..AdamConfig::default()
        };
        assert_eq!(cfg.position_lr(0), 1.6e-4);
        assert!((cfg.position_lr(100) - 1.6e-6).abs() < 1e-18);
        assert!((cfg.position_lr(50) - 1.6e-5).abs() < 1e-17);
        assert_eq!(AdamConfig::default().position_lr(10_000), 1.6e-4);
    }

    #[test]
    fn gradient_clip_bounds_the_norm() {
        let mut s = scene();
        let cfg = AdamConfig {
            grad_clip: 1.0,
            ..AdamConfig::default()
        };
        let mut st = OptimState::new(&s, cfg).unwrap();
        let mut g = GradientSet::zeroed_like(&s);
        g.opacity_logits = vec![30.0, 40.0];
        adam_step(&mut st, &mut s, &g).unwrap();
        assert!((st.m.opacity_logits[0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((st.m.opacity_logits[1] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(sh_warmup(0, 10_000), 0);
        assert_eq!(sh_warmup(9_999, 10_000), 0);
        assert_eq!(sh_warmup(10_000, 10_000), 1);
        assert_eq!(sh_warmup(35_000, 10_000), 3);
        assert_eq!(sh_warmup(150_000, 10_000), 3);
    }
}
