//! Real spherical harmonics up to degree 4.
//!
//! Basis functions use the orthonormal real convention of the usual Gaussian
//! splatting renderers: `l`-major ordering with `m` running from `-l` to `l`,
//! Condon-Shortley phase included. Every function is written as a polynomial
//! in the Cartesian direction components, so it extends to non-unit vectors
//! and its Jacobian is exact.

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 4;
pub const MAX_COLOR_DEGREE: usize = 3;
/// Coefficients per color channel for degree 3.
pub const COLOR_COEFFS: usize = num_coeffs(MAX_COLOR_DEGREE);
/// Length of the degree-4 direction encoding.
pub const ENCODING_DIM: usize = num_coeffs(MAX_DEGREE);

/// Offset added to the SH sum so that all-zero coefficients render mid-gray.
pub const COLOR_OFFSET: f64 = 0.5;

const UNIT_TOLERANCE: f64 = 1e-6;

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];
const C4: [f64; 9] = [
    2.503_342_941_796_704_6,
    -1.770_130_769_779_930_4,
    0.946_174_695_757_560_1,
    -0.669_046_543_557_289_2,
    0.105_785_546_915_204_31,
    -0.669_046_543_557_289_2,
    0.473_087_347_878_780_04,
    -1.770_130_769_779_930_4,
    0.625_835_735_449_176_1,
];

/// `(degree + 1)^2`.
pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

fn check_degree(degree: usize, max: usize) -> Result<()> {
    if degree > max {
        return Err(Error::InvalidArgument(format!("SH degree {degree} exceeds {max}")));
    }
    Ok(())
}

/// Rejects directions whose norm is off by more than `1e-6`.
pub fn check_unit(dir: [f64; 3]) -> Result<()> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE || !norm.is_finite() {
        return Err(Error::InvalidDirection { norm });
    }
    Ok(())
}

/// Basis values for a unit direction, `(degree + 1)^2` entries.
pub fn eval_sh_basis(degree: usize, dir: [f64; 3]) -> Result<Vec<f64>> {
    check_degree(degree, MAX_DEGREE)?;
    check_unit(dir)?;
    let mut out = vec![0.0; num_coeffs(degree)];
    sh_polynomial_into(degree, dir, &mut out);
    Ok(out)
}

/// Evaluates the basis polynomials without checking the direction's norm.
///
/// `out` must hold at least `(degree + 1)^2` values; `degree <= 4`.
pub fn sh_polynomial_into(degree: usize, dir: [f64; 3], out: &mut [f64]) {
    let [x, y, z] = dir;
    out[0] = C0;
    if degree < 1 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = C2[0] * xy;
    out[5] = C2[1] * yz;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * xz;
    out[8] = C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * xy * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
    if degree < 4 {
        return;
    }
    out[16] = C4[0] * xy * (xx - yy);
    out[17] = C4[1] * yz * (3.0 * xx - yy);
    out[18] = C4[2] * xy * (7.0 * zz - 1.0);
    out[19] = C4[3] * yz * (7.0 * zz - 3.0);
    out[20] = C4[4] * (35.0 * zz * zz - 30.0 * zz + 3.0);
    out[21] = C4[5] * xz * (7.0 * zz - 3.0);
    out[22] = C4[6] * (xx - yy) * (7.0 * zz - 1.0);
    out[23] = C4[7] * xz * (xx - 3.0 * yy);
    out[24] = C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy));
}

/// `d basis / d dir`, one row per basis function, with `dir` treated as a free
/// 3-vector. Projecting out the radial part is left to the caller.
pub fn sh_basis_jacobian(degree: usize, dir: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    check_degree(degree, MAX_DEGREE)?;
    let mut out = vec![[0.0; 3]; num_coeffs(degree)];
    sh_jacobian_into(degree, dir, &mut out);
    Ok(out)
}

pub fn sh_jacobian_into(degree: usize, dir: [f64; 3], out: &mut [[f64; 3]]) {
    let [x, y, z] = dir;
    out[0] = [0.0; 3];
    if degree < 1 {
        return;
    }
    out[1] = [0.0, -C1, 0.0];
    out[2] = [0.0, 0.0, C1];
    out[3] = [-C1, 0.0, 0.0];
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = [C2[0] * y, C2[0] * x, 0.0];
    out[5] = [0.0, C2[1] * z, C2[1] * y];
    out[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    out[7] = [C2[3] * z, 0.0, C2[3] * x];
    out[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    if degree < 3 {
        return;
    }
    out[9] = [C3[0] * 6.0 * x * y, C3[0] * 3.0 * (xx - yy), 0.0];
    out[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    out[11] = [
        C3[2] * (-2.0 * x * y),
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        C3[2] * 8.0 * y * z,
    ];
    out[12] = [
        C3[3] * (-6.0 * x * z),
        C3[3] * (-6.0 * y * z),
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    out[13] = [
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        C3[4] * (-2.0 * x * y),
        C3[4] * 8.0 * x * z,
    ];
    out[14] = [C3[5] * 2.0 * x * z, -C3[5] * 2.0 * y * z, C3[5] * (xx - yy)];
    out[15] = [C3[6] * 3.0 * (xx - yy), -C3[6] * 6.0 * x * y, 0.0];
    if degree < 4 {
        return;
    }
    let s7 = 7.0 * zz - 1.0;
    let t7 = 7.0 * zz - 3.0;
    out[16] = [C4[0] * (3.0 * xx * y - yy * y), C4[0] * (xx * x - 3.0 * x * yy), 0.0];
    out[17] = [
        C4[1] * 6.0 * x * y * z,
        C4[1] * 3.0 * z * (xx - yy),
        C4[1] * y * (3.0 * xx - yy),
    ];
    out[18] = [C4[2] * y * s7, C4[2] * x * s7, C4[2] * 14.0 * x * y * z];
    out[19] = [0.0, C4[3] * z * t7, C4[3] * y * (21.0 * zz - 3.0)];
    out[20] = [0.0, 0.0, C4[4] * (140.0 * zz * z - 60.0 * z)];
    out[21] = [C4[5] * z * t7, 0.0, C4[5] * x * (21.0 * zz - 3.0)];
    out[22] = [
        C4[6] * 2.0 * x * s7,
        -C4[6] * 2.0 * y * s7,
        C4[6] * (xx - yy) * 14.0 * z,
    ];
    out[23] = [
        C4[7] * 3.0 * z * (xx - yy),
        -C4[7] * 6.0 * x * y * z,
        C4[7] * x * (xx - 3.0 * yy),
    ];
    out[24] = [
        C4[8] * (4.0 * xx * x - 12.0 * x * yy),
        C4[8] * (4.0 * yy * y - 12.0 * xx * y),
        0.0,
    ];
}

/// Sum of `coeff * basis` over all terms with `l <= active_degree`, before the
/// gray offset and clamp. Linear in `coeffs`.
pub fn sh_color_raw(coeffs: &[[f64; 3]], basis: &[f64], active_degree: usize) -> [f64; 3] {
    let n = num_coeffs(active_degree);
    let mut rgb = [0.0; 3];
    for (c, b) in coeffs[..n].iter().zip(&basis[..n]) {
        rgb[0] += c[0] * b;
        rgb[1] += c[1] * b;
        rgb[2] += c[2] * b;
    }
    rgb
}

/// View-dependent RGB: `max(0, sum + 0.5)` per channel.
pub fn sh_color(coeffs: &[[f64; 3]; COLOR_COEFFS], dir: [f64; 3], active_degree: usize) -> Result<[f64; 3]> {
    check_degree(active_degree, MAX_COLOR_DEGREE)?;
    check_unit(dir)?;
    let mut basis = [0.0; COLOR_COEFFS];
    sh_polynomial_into(active_degree, dir, &mut basis);
    Ok(sh_color_raw(coeffs, &basis, active_degree).map(|v| (v + COLOR_OFFSET).max(0.0)))
}
