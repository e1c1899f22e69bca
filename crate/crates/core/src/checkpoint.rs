//! Binary scene checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `SMGS` |
//! | 4     | format version (u32, currently 1) |
//! | 8     | Gaussian count `M` (u64) |
//! | 4     | SH coefficients per Gaussian `K` (u32, must be 16) |
//! | 4     | active SH degree (u32) |
//! | 12    | medium MLP input, hidden and output widths (3 x u32: 25, 128, 9) |
//! | 4     | medium channel layout (u32, 0 = rgb, backscatter, attenuation) |
//! | 4     | flags (u32, bit 0 = optimizer state present) |
//! | 8     | training step (u64) |
//! | 8     | optimizer step (u64) |
//! | ...   | body: f64 arrays |
//! | 4     | CRC32 of the body |
//!
//! The body holds positions (M x 3), rotations (M x 4), log-scales (M x 3),
//! opacity logits (M), SH coefficients (M x 16 x 3), then `w1` (128 x 25),
//! `b1`, `w2` (9 x 128) and `b2`. When the optimizer flag is set, the Adam
//! first moments and then the second moments follow in the same order.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::medium::{MediumWeights, MEDIUM_HIDDEN, MEDIUM_INPUT, MEDIUM_OUTPUT};
use crate::optim::{AdamConfig, OptimState};
use crate::scene::{GaussianScene, GradientSet};
use crate::sh::{COLOR_COEFFS, MAX_COLOR_DEGREE};

pub const MAGIC: [u8; 4] = *b"SMGS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4 + 12 + 4 + 4 + 8 + 8;
const CHANNEL_LAYOUT: u32 = 0;
const FLAG_OPTIMIZER: u32 = 1;

/// Optimizer progress stored alongside the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    /// Training steps completed.
    pub step: u64,
    pub optim_step: u64,
    pub m: GradientSet,
    pub v: GradientSet,
}

impl TrainingState {
    pub fn from_optim(step: u64, optim: &OptimState) -> Self {
        Self {
            step,
            optim_step: optim.step,
            m: optim.m.clone(),
            v: optim.v.clone(),
        }
    }

    pub fn into_optim(self, config: AdamConfig) -> Result<OptimState> {
        config.validate()?;
        Ok(OptimState {
            config,
            step: self.optim_step,
            m: self.m,
            v: self.v,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub scene: GaussianScene,
    pub training: Option<TrainingState>,
}

fn medium_len() -> usize {
    MediumWeights::zeros().tensors().iter().map(|t| t.len()).sum()
}

fn push_tensors<'a>(out: &mut Vec<u8>, tensors: impl IntoIterator<Item = &'a [f64]>) {
    for t in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let scene = &ck.scene;
    scene.check_shapes()?;
    let m = scene.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * scene.parameter_count() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    for v in [
        COLOR_COEFFS as u32,
        scene.active_sh_degree as u32,
        MEDIUM_INPUT as u32,
        MEDIUM_HIDDEN as u32,
        MEDIUM_OUTPUT as u32,
        CHANNEL_LAYOUT,
        if ck.training.is_some() { FLAG_OPTIMIZER } else { 0 },
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let (step, optim_step) = ck.training.as_ref().map_or((0, 0), |t| (t.step, t.optim_step));
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&optim_step.to_le_bytes());

    let body_start = out.len();
    push_tensors(&mut out, scene.tensors().into_iter().map(|(_, t)| t));
    if let Some(t) = &ck.training {
        if !t.m.matches(scene) || !t.v.matches(scene) {
            return Err(Error::ShapeMismatch("optimizer moments do not match the scene".into()));
        }
        push_tensors(&mut out, t.m.tensors());
        push_tensors(&mut out, t.v.tensors());
    }
    let crc = crc32fast::hash(&out[body_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }

    fn fill(&mut self, dst: &mut [f64]) {
        let src = self.take(8 * dst.len());
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
}

fn shape(msg: String) -> Error {
    CheckpointError::ShapeMismatch(msg).into()
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let truncated = |needed: usize| -> Error {
        CheckpointError::Truncated {
            needed,
            found: bytes.len(),
        }
        .into()
    };
    if bytes.len() < 8 {
        return Err(truncated(HEADER_LEN));
    }
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4).try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let m = r.u64();
    let k = r.u32();
    let degree = r.u32();
    let dims = [r.u32(), r.u32(), r.u32()];
    let layout = r.u32();
    let flags = r.u32();
    let step = r.u64();
    let optim_step = r.u64();

    if k as usize != COLOR_COEFFS {
        return Err(shape(format!("K = {k}, expected {COLOR_COEFFS}")));
    }
    if m == 0 {
        return Err(shape("M = 0".into()));
    }
    if degree as usize > MAX_COLOR_DEGREE {
        return Err(shape(format!("active SH degree {degree} exceeds {MAX_COLOR_DEGREE}")));
    }
    let expected_dims = [MEDIUM_INPUT as u32, MEDIUM_HIDDEN as u32, MEDIUM_OUTPUT as u32];
    if dims != expected_dims {
        return Err(shape(format!("medium MLP {dims:?}, expected {expected_dims:?}")));
    }
    if layout != CHANNEL_LAYOUT {
        return Err(shape(format!("unknown medium channel layout {layout}")));
    }
    if flags & !FLAG_OPTIMIZER != 0 {
        return Err(shape(format!("unknown flags {flags:#x}")));
    }
    let has_optim = flags & FLAG_OPTIMIZER != 0;
    let per_gaussian = 3 + 4 + 3 + 1 + 3 * COLOR_COEFFS;
    let floats = usize::try_from(m)
        .ok()
        .and_then(|m| m.checked_mul(per_gaussian))
        .and_then(|n| n.checked_add(medium_len()))
        .and_then(|n| n.checked_mul(if has_optim { 3 } else { 1 }))
        .ok_or_else(|| shape(format!("M = {m} is too large")))?;
    let needed = HEADER_LEN + 8 * floats + 4;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(shape(format!("{} trailing bytes", bytes.len() - needed)));
    }
    let body = &bytes[HEADER_LEN..needed - 4];
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let m = m as usize;
    let mut scene = GaussianScene {
        positions: vec![[0.0; 3]; m],
        rotations: vec![[0.0; 4]; m],
        log_scales: vec![[0.0; 3]; m],
        opacity_logits: vec![0.0; m],
        sh_coeffs: vec![[[0.0; 3]; COLOR_COEFFS]; m],
        medium: MediumWeights::zeros(),
        active_sh_degree: degree as usize,
    };
    for (_, t) in scene.tensors_mut() {
        r.fill(t);
    }
    let training = if has_optim {
        let mut mo = GradientSet::zeroed(m);
        let mut vo = GradientSet::zeroed(m);
        for t in mo.tensors_mut() {
            r.fill(t);
        }
        for t in vo.tensors_mut() {
            r.fill(t);
        }
        Some(TrainingState {
            step,
            optim_step,
            m: mo,
            v: vo,
        })
    } else {
        None
    };
    Ok(Checkpoint { scene, training })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_checkpoint(scene: &GaussianScene, path: &Path) -> Result<()> {
    save(
        path,
        &Checkpoint {
            scene: scene.clone(),
            training: None,
        },
    )
}

pub fn load_checkpoint(path: &Path) -> Result<GaussianScene> {
    Ok(load(path)?.scene)
}
