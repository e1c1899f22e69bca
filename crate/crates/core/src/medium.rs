//! View-dependent medium branch.
//!
//! Each pixel's world ray is encoded with the 25 degree-4 SH basis values and
//! fed through a 25-128-9 MLP with sigmoid hidden units. Output channels
//! `[0, 3)` are the medium color (sigmoid), `[3, 6)` backscatter (softplus) and
//! `[6, 9)` attenuation (softplus). Only the color is fused into the image:
//! `I = I_gs + w * medium_rgb`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::sh::{self, ENCODING_DIM};

pub const MEDIUM_INPUT: usize = ENCODING_DIM;
pub const MEDIUM_HIDDEN: usize = 128;
pub const MEDIUM_OUTPUT: usize = 9;
pub const DEFAULT_FUSION_WEIGHT: f64 = 0.2;

/// Index ranges of the three output groups.
pub const RGB_CHANNELS: std::ops::Range<usize> = 0..3;
pub const BACKSCATTER_CHANNELS: std::ops::Range<usize> = 3..6;
pub const ATTENUATION_CHANNELS: std::ops::Range<usize> = 6..9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + e^x)`, evaluated without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-major MLP parameters: `w1` is `hidden x input`, `w2` is `output x hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct MediumWeights {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MediumWeights {
    pub fn zeros() -> Self {
        Self {
            w1: vec![0.0; MEDIUM_HIDDEN * MEDIUM_INPUT],
            b1: vec![0.0; MEDIUM_HIDDEN],
            w2: vec![0.0; MEDIUM_OUTPUT * MEDIUM_HIDDEN],
            b2: vec![0.0; MEDIUM_OUTPUT],
        }
    }

    /// Weights uniform in `+-sqrt(1 / fan_in)`, zero biases.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut w = Self::zeros();
        let a1 = (1.0 / MEDIUM_INPUT as f64).sqrt();
        for v in &mut w.w1 {
            *v = rng.random_range(-a1..a1);
        }
        let a2 = (1.0 / MEDIUM_HIDDEN as f64).sqrt();
        for v in &mut w.w2 {
            *v = rng.random_range(-a2..a2);
        }
        w
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn has_expected_shapes(&self) -> bool {
        self.w1.len() == MEDIUM_HIDDEN * MEDIUM_INPUT
            && self.b1.len() == MEDIUM_HIDDEN
            && self.w2.len() == MEDIUM_OUTPUT * MEDIUM_HIDDEN
            && self.b2.len() == MEDIUM_OUTPUT
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// L2 norms of `w1`, `b1`, `w2`, `b2`.
    pub fn norms(&self) -> [f64; 4] {
        self.tensors().map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in self.tensors() {
            for v in t {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Degree-4 SH encoding of a ray field, `count x 25` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionFeatures {
    pub count: usize,
    pub data: Vec<f64>,
}

impl DirectionFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * MEDIUM_INPUT..(i + 1) * MEDIUM_INPUT]
    }
}

pub fn encode_directions(rays: &[[f64; 3]]) -> Result<DirectionFeatures> {
    let mut data = vec![0.0; rays.len() * MEDIUM_INPUT];
    for (ray, row) in rays.iter().zip(data.chunks_exact_mut(MEDIUM_INPUT)) {
        sh::check_unit(*ray)?;
        sh::sh_polynomial_into(sh::MAX_DEGREE, *ray, row);
    }
    Ok(DirectionFeatures {
        count: rays.len(),
        data,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MediumOutputs {
    /// Sigmoid color correction, in `(0, 1)`.
    pub rgb: ImageBuffer,
    /// Softplus backscatter, `>= 0`.
    pub backscatter: ImageBuffer,
    /// Softplus attenuation, `>= 0`.
    pub attenuation: ImageBuffer,
}

/// Forward results plus the hidden activations the backward pass needs.
#[derive(Clone, Debug)]
pub struct MediumForward {
    pub outputs: MediumOutputs,
    hidden: Vec<f64>,
    weights_fingerprint: u32,
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every caller passes slices whose extents cover the strided
    // m x k, k x n and m x n views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub fn medium_forward(
    weights: &MediumWeights,
    features: &DirectionFeatures,
    width: usize,
    height: usize,
) -> Result<MediumForward> {
    let p = features.count;
    if p != width * height || features.data.len() != p * MEDIUM_INPUT {
        return Err(Error::ShapeMismatch(format!(
            "{p} encoded rays for a {width}x{height} image"
        )));
    }
    if !weights.has_expected_shapes() {
        return Err(Error::ShapeMismatch("medium weights have the wrong shapes".into()));
    }
    let (h_dim, i_dim, o_dim) = (MEDIUM_HIDDEN as isize, MEDIUM_INPUT as isize, MEDIUM_OUTPUT as isize);

    // Z1 = F W1^T
    let mut hidden = vec![0.0; p * MEDIUM_HIDDEN];
    gemm(
        p,
        MEDIUM_INPUT,
        MEDIUM_HIDDEN,
        &features.data,
        i_dim,
        1,
        &weights.w1,
        1,
        i_dim,
        &mut hidden,
        h_dim,
        1,
        0.0,
    );
    for row in hidden.chunks_exact_mut(MEDIUM_HIDDEN) {
        for (z, b) in row.iter_mut().zip(&weights.b1) {
            *z = sigmoid(*z + b);
        }
    }

    // O = H W2^T
    let mut raw = vec![0.0; p * MEDIUM_OUTPUT];
    gemm(
        p,
        MEDIUM_HIDDEN,
        MEDIUM_OUTPUT,
        &hidden,
        h_dim,
        1,
        &weights.w2,
        1,
        h_dim,
        &mut raw,
        o_dim,
        1,
        0.0,
    );

    let mut rgb = ImageBuffer::new(width, height);
    let mut backscatter = ImageBuffer::new(width, height);
    let mut attenuation = ImageBuffer::new(width, height);
    for (i, o) in raw.chunks_exact(MEDIUM_OUTPUT).enumerate() {
        for c in 0..3 {
            let v_rgb = sigmoid(o[RGB_CHANNELS.start + c] + weights.b2[RGB_CHANNELS.start + c]);
            let v_bs = softplus(o[BACKSCATTER_CHANNELS.start + c] + weights.b2[BACKSCATTER_CHANNELS.start + c]);
            let v_at = softplus(o[ATTENUATION_CHANNELS.start + c] + weights.b2[ATTENUATION_CHANNELS.start + c]);
            if !(v_rgb.is_finite() && v_bs.is_finite() && v_at.is_finite()) {
                return Err(Error::numeric("medium MLP output", i));
            }
            rgb.data[3 * i + c] = v_rgb;
            backscatter.data[3 * i + c] = v_bs;
            attenuation.data[3 * i + c] = v_at;
        }
    }
    Ok(MediumForward {
        outputs: MediumOutputs {
            rgb,
            backscatter,
            attenuation,
        },
        hidden,
        weights_fingerprint: weights.fingerprint(),
    })
}

/// `I_gs + weight * medium_rgb`, unclamped.
pub fn fuse(base: &ImageBuffer, medium: &MediumOutputs, weight: f64) -> Result<ImageBuffer> {
    base.check_same_shape(&medium.rgb, "fusion")?;
    let data = base
        .data
        .iter()
        .zip(&medium.rgb.data)
        .map(|(b, m)| b + weight * m)
        .collect();
    Ok(ImageBuffer {
        width: base.width,
        height: base.height,
        data,
    })
}

#[derive(Clone, Debug)]
pub struct MediumGradients {
    pub weights: MediumWeights,
    /// `dL / d features`, `count x 25`, when requested.
    pub features: Option<Vec<f64>>,
}

/// Backpropagates `dL / d fused` through the fusion and the MLP. The
/// backscatter and attenuation heads do not reach the loss, so their rows of
/// `w2`/`b2` get exactly zero gradient.
pub fn medium_backward(
    weights: &MediumWeights,
    forward: &MediumForward,
    features: &DirectionFeatures,
    dl_dfused: &ImageBuffer,
    fusion_weight: f64,
    want_feature_grads: bool,
) -> Result<MediumGradients> {
    if weights.fingerprint() != forward.weights_fingerprint {
        return Err(Error::StaleState(
            "medium weights changed since the forward pass".into(),
        ));
    }
    let p = features.count;
    if forward.hidden.len() != p * MEDIUM_HIDDEN {
        return Err(Error::StaleState("features do not match the forward pass".into()));
    }
    dl_dfused.check_same_shape(&forward.outputs.rgb, "medium backward")?;
    let h_dim = MEDIUM_HIDDEN as isize;
    let i_dim = MEDIUM_INPUT as isize;
    let o_dim = MEDIUM_OUTPUT as isize;

    // Only the color head is live; dO is stored with all 9 columns so the
    // layout matches the forward pass.
    let mut d_out = vec![0.0; p * MEDIUM_OUTPUT];
    let rgb = &forward.outputs.rgb.data;
    for i in 0..p {
        for c in 0..3 {
            let s = rgb[3 * i + c];
            d_out[i * MEDIUM_OUTPUT + RGB_CHANNELS.start + c] =
                dl_dfused.data[3 * i + c] * fusion_weight * s * (1.0 - s);
        }
    }

    let mut grads = MediumWeights::zeros();
    for row in d_out.chunks_exact(MEDIUM_OUTPUT) {
        for (g, d) in grads.b2.iter_mut().zip(row) {
            *g += d;
        }
    }
    // dW2[rgb rows] = dO[:, rgb]^T H
    gemm(
        RGB_CHANNELS.len(),
        p,
        MEDIUM_HIDDEN,
        &d_out,
        1,
        o_dim,
        &forward.hidden,
        h_dim,
        1,
        &mut grads.w2,
        h_dim,
        1,
        0.0,
    );
    // dH = dO[:, rgb] W2[rgb rows]
    let mut d_hidden = vec![0.0; p * MEDIUM_HIDDEN];
    gemm(
        p,
        RGB_CHANNELS.len(),
        MEDIUM_HIDDEN,
        &d_out,
        o_dim,
        1,
        &weights.w2,
        h_dim,
        1,
        &mut d_hidden,
        h_dim,
        1,
        0.0,
    );
    for (d, h) in d_hidden.iter_mut().zip(&forward.hidden) {
        *d *= h * (1.0 - h);
    }
    for row in d_hidden.chunks_exact(MEDIUM_HIDDEN) {
        for (g, d) in grads.b1.iter_mut().zip(row) {
            *g += d;
        }
    }
    // dW1 = dZ1^T F
    gemm(
        MEDIUM_HIDDEN,
        p,
        MEDIUM_INPUT,
        &d_hidden,
        1,
        h_dim,
        &features.data,
        i_dim,
        1,
        &mut grads.w1,
        i_dim,
        1,
        0.0,
    );
    let feature_grads = want_feature_grads.then(|| {
        let mut d_feat = vec![0.0; p * MEDIUM_INPUT];
        gemm(
            p,
            MEDIUM_HIDDEN,
            MEDIUM_INPUT,
            &d_hidden,
            h_dim,
            1,
            &weights.w1,
            i_dim,
            1,
            &mut d_feat,
            i_dim,
            1,
            0.0,
        );
        d_feat
    });
    Ok(MediumGradients {
        weights: grads,
        features: feature_grads,
    })
}
