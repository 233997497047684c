//! Deterministic common-corruption generators at five severities, and frame
//! sequences of gradually increasing perturbation for flip-rate evaluation.
//!
//! Severity parameter tables are fixed in code; outputs always stay in
//! `[0, 1]` and are a pure function of `(image, kind, severity, seed)`.

use crate::error::{AnpError, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn parse(s: &str) -> Result<CorruptionKind> {
        CorruptionKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| AnpError::config(format!("unknown corruption kind {s:?}")))
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Declarative description of one corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1 (mild) to 5 (severe).
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<CorruptionSpec> {
        if !(1..=5).contains(&severity) {
            return Err(AnpError::config(format!(
                "corruption severity {severity} out of range 1..=5"
            )));
        }
        Ok(CorruptionSpec {
            kind,
            severity,
            seed,
        })
    }
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.06, 0.12, 0.20, 0.30, 0.42];
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_FRACTION: [f64; 5] = [0.02, 0.05, 0.10, 0.17, 0.26];
const BOXBLUR_SIZE: [usize; 5] = [3, 5, 7, 9, 11];
const MOTION_LEN: [usize; 5] = [3, 5, 7, 9, 11];
const BRIGHTNESS_DELTA: [f64; 5] = [0.05, 0.12, 0.20, 0.30, 0.42];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.60, 0.45, 0.32, 0.22];
const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];

/// Scalar severity parameter for a (kind, severity) cell of the table.
pub fn severity_param(kind: CorruptionKind, severity: u8) -> f64 {
    let i = (severity as usize).clamp(1, 5) - 1;
    match kind {
        CorruptionKind::GaussianNoise => GAUSSIAN_SIGMA[i],
        CorruptionKind::ShotNoise => SHOT_PHOTONS[i],
        CorruptionKind::ImpulseNoise => IMPULSE_FRACTION[i],
        CorruptionKind::BoxBlur => BOXBLUR_SIZE[i] as f64,
        CorruptionKind::MotionBlur => MOTION_LEN[i] as f64,
        CorruptionKind::Brightness => BRIGHTNESS_DELTA[i],
        CorruptionKind::Contrast => CONTRAST_FACTOR[i],
        CorruptionKind::Pixelate => PIXELATE_BLOCK[i] as f64,
    }
}

fn dims_chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 3 {
        return Err(AnpError::domain(format!(
            "corruption expects a CHW image, got shape {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

fn clip01(t: Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Box mean filter with clamp-to-edge padding, applied per channel.
fn box_blur(x: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims_chw(x)?;
    let r = size as isize / 2;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let norm = 1.0 / (size * size) as f64;
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let sx = (xx + dx).clamp(0, w as isize - 1) as usize;
                        acc += x.data()[base + sy * w + sx];
                    }
                }
                out.data_mut()[base + y as usize * w + xx as usize] = acc * norm;
            }
        }
    }
    Ok(out)
}

/// Diagonal streak average of the given length, clamp-to-edge.
fn motion_blur(x: &Tensor, len: usize) -> Result<Tensor> {
    let (c, h, w) = dims_chw(x)?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let half = len as isize / 2;
    let norm = 1.0 / len as f64;
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for t in -half..(len as isize - half) {
                    let sy = (y + t).clamp(0, h as isize - 1) as usize;
                    let sx = (xx + t).clamp(0, w as isize - 1) as usize;
                    acc += x.data()[base + sy * w + sx];
                }
                out.data_mut()[base + y as usize * w + xx as usize] = acc * norm;
            }
        }
    }
    Ok(out)
}

/// Average-pool over `block x block` cells, then paint each cell with its
/// mean (partial cells at the border use their own mean).
fn pixelate(x: &Tensor, block: usize) -> Result<Tensor> {
    let (c, h, w) = dims_chw(x)?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for ch in 0..c {
        let base = ch * h * w;
        let mut by = 0;
        while by < h {
            let bh = block.min(h - by);
            let mut bx = 0;
            while bx < w {
                let bw = block.min(w - bx);
                let mut acc = 0.0;
                for y in by..by + bh {
                    for xx in bx..bx + bw {
                        acc += x.data()[base + y * w + xx];
                    }
                }
                let mean = acc / (bh * bw) as f64;
                for y in by..by + bh {
                    for xx in bx..bx + bw {
                        out.data_mut()[base + y * w + xx] = mean;
                    }
                }
                bx += block;
            }
            by += block;
        }
    }
    Ok(out)
}

fn contrast(x: &Tensor, factor: f64) -> Tensor {
    let mean = x.data().iter().sum::<f64>() / x.len() as f64;
    x.map(|v| (v - mean) * factor + mean)
}

fn apply_kind(x: &Tensor, kind: CorruptionKind, severity: u8, rng: &mut Rng) -> Result<Tensor> {
    let p = severity_param(kind, severity);
    let out = match kind {
        CorruptionKind::GaussianNoise => x.map(|v| v + p * rng.normal()),
        CorruptionKind::ShotNoise => x.map(|v| rng.poisson((v * p).max(0.0)) as f64 / p),
        CorruptionKind::ImpulseNoise => x.map(|v| {
            if rng.uniform() < p {
                if rng.uniform() < 0.5 {
                    0.0
                } else {
                    1.0
                }
            } else {
                v
            }
        }),
        CorruptionKind::BoxBlur => box_blur(x, p as usize)?,
        CorruptionKind::MotionBlur => motion_blur(x, p as usize)?,
        CorruptionKind::Brightness => x.map(|v| v + p),
        CorruptionKind::Contrast => contrast(x, p),
        CorruptionKind::Pixelate => pixelate(x, p as usize)?,
    };
    Ok(clip01(out))
}

/// Corrupt one CHW image in `[0,1]`. Deterministic given the spec.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    if !(1..=5).contains(&spec.severity) {
        return Err(AnpError::config(format!(
            "corruption severity {} out of range 1..=5",
            spec.severity
        )));
    }
    dims_chw(x)?;
    let mut rng = Rng::seed_from(spec.seed);
    apply_kind(x, spec.kind, spec.severity, &mut rng)
}

/// Corrupt with an externally supplied stream; used when materializing whole
/// datasets with per-image substreams.
pub fn corrupt_with_rng(x: &Tensor, kind: CorruptionKind, severity: u8, rng: &mut Rng) -> Result<Tensor> {
    dims_chw(x)?;
    apply_kind(x, kind, severity, rng)
}

/// Frames of gradually increasing perturbation derived from one clean image.
#[derive(Debug, Clone)]
pub struct PerturbationSequence {
    pub frames: Vec<Tensor>,
    pub kind: CorruptionKind,
    /// Ramp value per frame, strictly increasing from 0 to 1.
    pub intensities: Vec<f64>,
}

/// Per-kind bound on `||frame_j - frame_{j-1}||_inf / ramp_step`, derived
/// from the severity-3 parameter the ramp targets.
pub fn sequence_gain(kind: CorruptionKind) -> f64 {
    match kind {
        // the noise field used by sequences is clamped to 4 sigma
        CorruptionKind::GaussianNoise => 4.0 * severity_param(kind, 3),
        CorruptionKind::Brightness => severity_param(kind, 3),
        CorruptionKind::Contrast => 1.0 - severity_param(kind, 3),
        // blends between two [0,1] images move at most by their gap
        _ => 1.0,
    }
}

/// Build an `n`-frame sequence for one image: frame 1 is the clean image
/// bit-exact, and the kind's severity parameter ramps linearly up to its
/// severity-3 value on the last frame.
pub fn make_sequence(x: &Tensor, kind: CorruptionKind, n: usize, seed: u64) -> Result<PerturbationSequence> {
    if n < 2 {
        return Err(AnpError::config("a perturbation sequence needs n >= 2 frames"));
    }
    dims_chw(x)?;
    let mut rng = Rng::seed_from(seed);
    let p3 = severity_param(kind, 3);

    // fixed realization shared by every frame so that adjacent frames differ
    // only through the ramp
    enum Field {
        Gaussian(Vec<f64>),
        Impulse(Vec<(f64, f64)>), // (threshold draw, salt/pepper value)
        Endpoint(Tensor),
        None,
    }
    let field = match kind {
        CorruptionKind::GaussianNoise => Field::Gaussian(
            (0..x.len()).map(|_| rng.normal().clamp(-4.0, 4.0)).collect(),
        ),
        CorruptionKind::ImpulseNoise => Field::Impulse(
            (0..x.len())
                .map(|_| {
                    let u = rng.uniform();
                    let v = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
                    (u, v)
                })
                .collect(),
        ),
        CorruptionKind::ShotNoise
        | CorruptionKind::BoxBlur
        | CorruptionKind::MotionBlur
        | CorruptionKind::Pixelate => Field::Endpoint(apply_kind(x, kind, 3, &mut rng)?),
        CorruptionKind::Brightness | CorruptionKind::Contrast => Field::None,
    };

    let mut frames = Vec::with_capacity(n);
    let mut intensities = Vec::with_capacity(n);
    for j in 0..n {
        let t = j as f64 / (n - 1) as f64;
        intensities.push(t);
        if j == 0 {
            frames.push(x.clone());
            continue;
        }
        let frame = match &field {
            Field::Gaussian(eta) => {
                let mut f = x.clone();
                for (v, e) in f.data_mut().iter_mut().zip(eta) {
                    *v += t * p3 * e;
                }
                clip01(f)
            }
            Field::Impulse(cells) => {
                let mut f = x.clone();
                for (v, (u, sp)) in f.data_mut().iter_mut().zip(cells) {
                    if *u < t * p3 {
                        *v = *sp;
                    }
                }
                f
            }
            Field::Endpoint(end) => {
                let blended = x.zip_with(end, |a, b| (1.0 - t) * a + t * b)?;
                clip01(blended)
            }
            Field::None => match kind {
                CorruptionKind::Brightness => clip01(x.map(|v| v + t * p3)),
                CorruptionKind::Contrast => clip01(contrast(x, 1.0 + t * (p3 - 1.0))),
                _ => unreachable!(),
            },
        };
        frames.push(frame);
    }

    Ok(PerturbationSequence {
        frames,
        kind,
        intensities,
    })
}
