//! Photometric losses and evaluation metrics.
//!
//! SSIM is evaluated at every position where the Gaussian window fits
//! entirely inside the image, per channel, and averaged.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const DEFAULT_PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the SSIM term.
    pub lambda: f64,
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "SSIM window {} must be odd and at least 3",
                self.window
            )));
        }
        if !(self.sigma > 0.0 && self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidArgument("SSIM sigma, c1 and c2 must be positive".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let k: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// A scalar loss together with its gradient with respect to `pred`.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: ImageBuffer,
}

/// Mean absolute error. The gradient uses `sign(0) = 0`.
pub fn l1_loss(pred: &ImageBuffer, target: &ImageBuffer) -> Result<LossValue> {
    pred.check_same_shape(target, "l1 loss")?;
    let n = pred.data.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| {
            let d = p - t;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossValue {
        value: sum / n,
        grad: ImageBuffer::from_data(pred.width, pred.height, grad)?,
    })
}

/// Separable correlation of a planar channel with `k`, keeping only the
/// positions where the window fits.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let line = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(line) {
                *o += kv * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow x oh` map back to `w x h`.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let dst = &mut rows[(y + i) * ow..(y + i + 1) * ow];
            for (d, v) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                *d += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Sum of local SSIM over one channel, and optionally its gradient with
/// respect to `x`, both unnormalized.
fn ssim_channel(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    cfg: &LossConfig,
    k: &[f64],
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, w, h, k);
    let my = filter_valid(y, w, h, k);
    let exx = filter_valid(&sq(x, x), w, h, k);
    let eyy = filter_valid(&sq(y, y), w, h, k);
    let exy = filter_valid(&sq(x, y), w, h, k);
    let n = mx.len();
    let mut total = 0.0;
    let (mut d_mu, mut d_exx, mut d_exy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let a1 = 2.0 * ux * uy + cfg.c1;
        let a2 = 2.0 * (exy[i] - ux * uy) + cfg.c2;
        let b1 = ux * ux + uy * uy + cfg.c1;
        let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + cfg.c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            d_mu[i] = 2.0 * uy * (a2 - a1) / (b1 * b2) - 2.0 * ux * s * (1.0 / b1 - 1.0 / b2);
            d_exx[i] = -s / b2;
            d_exy[i] = 2.0 * a1 / (b1 * b2);
        }
    }
    if !want_grad {
        return (total, None);
    }
    let g_mu = filter_valid_adjoint(&d_mu, w, h, k);
    let g_xx = filter_valid_adjoint(&d_exx, w, h, k);
    let g_xy = filter_valid_adjoint(&d_exy, w, h, k);
    let grad = (0..w * h)
        .map(|p| g_mu[p] + 2.0 * x[p] * g_xx[p] + y[p] * g_xy[p])
        .collect();
    (total, Some(grad))
}

fn ssim_impl(
    pred: &ImageBuffer,
    target: &ImageBuffer,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<ImageBuffer>)> {
    pred.check_same_shape(target, "ssim")?;
    cfg.validate()?;
    let (w, h) = (pred.width, pred.height);
    if w < cfg.window || h < cfg.window {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: cfg.window,
        });
    }
    let k = cfg.kernel();
    let per_channel: Vec<_> = (0..3)
        .into_par_iter()
        .map(|c| ssim_channel(&channel(pred, c), &channel(target, c), w, h, cfg, &k, want_grad))
        .collect();
    let count = (3 * (w + 1 - cfg.window) * (h + 1 - cfg.window)) as f64;
    let value = per_channel.iter().map(|(s, _)| s).sum::<f64>() / count;
    if !want_grad {
        return Ok((value, None));
    }
    let mut grad = ImageBuffer::new(w, h);
    for (c, (_, g)) in per_channel.iter().enumerate() {
        for (p, v) in g.as_ref().expect("gradient requested").iter().enumerate() {
            grad.data[3 * p + c] = v / count;
        }
    }
    Ok((value, Some(grad)))
}

/// Mean SSIM and its gradient with respect to `pred`.
pub fn ssim(pred: &ImageBuffer, target: &ImageBuffer, cfg: &LossConfig) -> Result<LossValue> {
    let (value, grad) = ssim_impl(pred, target, cfg, true)?;
    Ok(LossValue {
        value,
        grad: grad.expect("gradient requested"),
    })
}

/// Mean SSIM without the gradient.
pub fn ssim_value(pred: &ImageBuffer, target: &ImageBuffer, cfg: &LossConfig) -> Result<f64> {
    Ok(ssim_impl(pred, target, cfg, false)?.0)
}

/// `(1 - lambda) * l1 + lambda * (1 - ssim)`.
pub fn combine(l1: f64, ssim: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * l1 + lambda * (1.0 - ssim)
}

#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub grad: ImageBuffer,
}

pub fn combined_loss(pred: &ImageBuffer, target: &ImageBuffer, cfg: &LossConfig) -> Result<CombinedLoss> {
    let l1 = l1_loss(pred, target)?;
    let s = ssim(pred, target, cfg)?;
    let lam = cfg.lambda;
    let grad = l1
        .grad
        .data
        .iter()
        .zip(&s.grad.data)
        .map(|(a, b)| (1.0 - lam) * a - lam * b)
        .collect();
    Ok(CombinedLoss {
        total: combine(l1.value, s.value, lam),
        l1: l1.value,
        ssim: s.value,
        grad: ImageBuffer::from_data(pred.width, pred.height, grad)?,
    })
}

/// PSNR in dB for dynamic range 1 after clamping both images to `[0, 1]`.
/// Identical images report `cap`.
pub fn psnr_with_cap(pred: &ImageBuffer, target: &ImageBuffer, cap: f64) -> Result<f64> {
    pred.check_same_shape(target, "psnr")?;
    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p.clamp(0.0, 1.0) - t.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / pred.data.len() as f64;
    Ok(psnr_from_mse(mse, cap))
}

pub fn psnr(pred: &ImageBuffer, target: &ImageBuffer) -> Result<f64> {
    psnr_with_cap(pred, target, DEFAULT_PSNR_CAP)
}

pub fn psnr_from_mse(mse: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        cap
    } else {
        (10.0 * (1.0 / mse).log10()).min(cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 3) % 11) as f64 / 10.0;
                img.set(x, y, [v, 1.0 - v, 0.5 * v]);
            }
        }
        img
    }

    #[test]
    fn l1_examples() {
        let t = ramp(4, 4);
        let same = l1_loss(&t, &t).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.grad.data.iter().all(|&g| g == 0.0));
        let mut p = t.clone();
        p.data.iter_mut().for_each(|v| *v += 0.1);
        let off = l1_loss(&p, &t).unwrap();
        assert!((off.value - 0.1).abs() < 1e-12);
        assert!(off.grad.data.iter().all(|&g| g == 1.0 / 48.0));
    }

    #[test]
    fn ssim_identical_is_one_and_inverse_is_negative() {
        let t = ramp(16, 16);
        let cfg = LossConfig::default();
        assert_eq!(ssim_value(&t, &t, &cfg).unwrap(), 1.0);
        let mut inv = t.clone();
        inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim_value(&inv, &t, &cfg).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let t = ramp(10, 16);
        assert!(matches!(
            ssim_value(&t, &t, &LossConfig::default()),
            Err(Error::ImageTooSmall { window: 11, .. })
        ));
    }

    #[test]
    fn adjoint_filter_is_transpose() {
        let k = LossConfig::default().kernel();
        let (w, h) = (13, 12);
        let a: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 17) as f64 - 8.0).collect();
        let b: Vec<f64> = (0..3 * 2).map(|i| (i as f64).sin()).collect();
        let fa = filter_valid(&a, w, h, &k);
        let tb = filter_valid_adjoint(&b, w, h, &k);
        let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&tb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn combination_arithmetic() {
        assert!((combine(0.1, 0.9, 0.2) - 0.10).abs() < 1e-12);
        assert_eq!(combine(0.37, 0.5, 0.0), 0.37);
        assert_eq!(combine(0.37, 0.5, 1.0), 0.5);
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr_from_mse(0.01, 99.0), 20.0);
        assert_eq!(psnr_from_mse(1.0, 99.0), 0.0);
        let t = ramp(4, 4);
        assert_eq!(psnr(&t, &t).unwrap(), 99.0);
    }
}
