//! Dense row-major f64 tensors plus the kernels the network layers are
//! built from: matmul, 2-D convolution, 2x2 max-pooling, elementwise maps,
//! softmax, one-hot and the lp-norm family.

mod rng;

pub use rng::Rng;

use crate::error::{AnpError, Result};

/// Norms with magnitude below this are treated as zero when normalizing a
/// gradient direction.
pub const TAU_ZERO: f64 = 1e-12;

/// Norm order used by noise updates and attack bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormOrder {
    L1,
    L2,
    LInf,
}

impl NormOrder {
    pub fn parse(s: &str) -> Result<NormOrder> {
        match s.trim() {
            "1" => Ok(NormOrder::L1),
            "2" => Ok(NormOrder::L2),
            "inf" | "Inf" | "INF" | "oo" => Ok(NormOrder::LInf),
            other => Err(AnpError::config(format!(
                "unknown norm order {other:?} (expected 1, 2 or inf)"
            ))),
        }
    }
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormOrder::L1 => write!(f, "1"),
            NormOrder::L2 => write!(f, "2"),
            NormOrder::LInf => write!(f, "inf"),
        }
    }
}

/// Dense multi-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AnpError::domain(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_flat(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Tensor { shape, data }
    }

    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(AnpError::domain(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Leading dimension, i.e. the batch size of an N x ... tensor.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per example for a batched tensor.
    pub fn example_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Flat index range of example `i` in a batched tensor.
    pub fn example_range(&self, i: usize) -> std::ops::Range<usize> {
        let w = self.example_len();
        i * w..(i + 1) * w
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.data[self.example_range(i)]
    }

    /// Copy of example `i` with the leading dimension dropped to 1.
    pub fn example_tensor(&self, i: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.example(i).to_vec(),
        }
    }

    /// Copy of example `i` without the batch dimension.
    pub fn example_image(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.example(i).to_vec(),
        }
    }

    /// Stack single-example tensors (leading dim 1) into one batch.
    pub fn stack_examples(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(AnpError::domain("cannot stack zero tensors"));
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.len();
        let mut data = Vec::with_capacity(parts[0].len() * parts.len());
        for p in parts {
            if p.shape[1..] != parts[0].shape[1..] || p.shape[0] != 1 {
                return Err(AnpError::domain("stack requires matching 1 x ... shapes"));
            }
            data.extend_from_slice(&p.data);
        }
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(AnpError::domain(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(AnpError::domain(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    // ---- norms ----

    /// `(sum |t_i|^p)^(1/p)` for p in {1, 2}, or `max |t_i|` for p = inf.
    pub fn lp_norm(&self, p: NormOrder) -> Result<f64> {
        if self.data.is_empty() {
            return Err(AnpError::domain("lp_norm of an empty tensor"));
        }
        Ok(lp_norm_slice(&self.data, p))
    }

    /// `t / ||t||_p`; an all-but-zero tensor (norm below `TAU_ZERO`) maps to
    /// the all-zero tensor of the same shape.
    pub fn normalize_lp(&self, p: NormOrder) -> Tensor {
        let mut out = self.clone();
        normalize_lp_slice(&mut out.data, p);
        out
    }

    /// Project every coordinate into `[center - eps, center + eps] ∩ [lo, hi]`.
    pub fn clip_to_linf_ball(&self, center: &Tensor, eps: f64, lo: f64, hi: f64) -> Result<Tensor> {
        if self.shape != center.shape {
            return Err(AnpError::domain(format!(
                "clip shape mismatch {:?} vs {:?}",
                self.shape, center.shape
            )));
        }
        if lo > hi {
            return Err(AnpError::domain(format!("empty box [{lo}, {hi}]")));
        }
        let data = self
            .data
            .iter()
            .zip(&center.data)
            .map(|(&x, &c)| x.clamp(c - eps, c + eps).clamp(lo, hi))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    // ---- linear algebra / nn kernels ----

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(AnpError::domain("matmul requires rank-2 tensors"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(AnpError::domain(format!(
                "matmul inner dims differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Row-wise stable softmax of a `[batch, classes]` tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(AnpError::domain("softmax_rows requires rank-2 tensor"));
        }
        let (n, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &self.data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        Tensor::new(vec![n, c], out)
    }

    /// `[batch, classes]` indicator rows from class labels.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
        let mut out = vec![0.0; labels.len() * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(AnpError::domain(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            out[i * classes + y] = 1.0;
        }
        Tensor::new(vec![labels.len(), classes], out)
    }
}

pub fn lp_norm_slice(xs: &[f64], p: NormOrder) -> f64 {
    match p {
        NormOrder::L1 => xs.iter().map(|v| v.abs()).sum(),
        NormOrder::L2 => xs.iter().map(|v| v * v).sum::<f64>().sqrt(),
        NormOrder::LInf => xs.iter().fold(0.0f64, |m, v| m.max(v.abs())),
    }
}

/// In-place `x / ||x||_p` with the zero-gradient guard.
pub fn normalize_lp_slice(xs: &mut [f64], p: NormOrder) {
    let norm = lp_norm_slice(xs, p);
    if norm < TAU_ZERO {
        xs.iter_mut().for_each(|v| *v = 0.0);
    } else {
        xs.iter_mut().for_each(|v| *v /= norm);
    }
}

/// 2-D convolution of an NCHW input with OIHW kernels, zero padding.
///
/// Output spatial size is `(h + 2*padding - kh) / stride + 1`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [n, ic, h, w] = dims4(input, "conv2d input")?;
    let [oc, kic, kh, kw] = dims4(kernels, "conv2d kernels")?;
    if kic != ic {
        return Err(AnpError::domain(format!(
            "kernel expects {kic} input channels, input has {ic}"
        )));
    }
    if bias.len() != oc {
        return Err(AnpError::domain("bias length must equal kernel count"));
    }
    if stride == 0 {
        return Err(AnpError::domain("stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(AnpError::domain("kernel larger than padded input"));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            let out_base = (b * oc + o) * oh * ow;
            out[out_base..out_base + oh * ow].fill(bias.data()[o]);
            for c in 0..ic {
                let in_base = (b * ic + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kernels.data()[((o * ic + c) * kh + ky) * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = in_base + iy as usize * w;
                            let out_row = out_base + oy * ow;
                            if stride == 1 {
                                // contiguous span where ix = ox + kx - padding stays in [0, w)
                                let ox_lo = padding.saturating_sub(kx);
                                let ox_hi = ow.min(w + padding - kx);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - padding;
                                let src = &input.data()[in_row + ix_lo..in_row + ix_lo + (ox_hi - ox_lo)];
                                let dst = &mut out[out_row + ox_lo..out_row + ox_hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wgt * s;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    out[out_row + ox] += wgt * input.data()[in_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

/// 2x2 max pooling with stride 2 on an NCHW tensor. Returns the pooled
/// tensor and, per output element, the flat input index of its argmax.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = dims4(input, "maxpool input")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(AnpError::domain("maxpool input smaller than 2x2"));
    }
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let in_base = (b * c + ch) * h * w;
            let out_base = (b * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = in_base + (2 * oy) * w + 2 * ox;
                    let cands = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if input.data()[i] > input.data()[best] {
                            best = i;
                        }
                    }
                    out[out_base + oy * ow + ox] = input.data()[best];
                    arg[out_base + oy * ow + ox] = best;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub(crate) fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    if t.shape().len() != 4 {
        return Err(AnpError::domain(format!(
            "{what} must be rank 4, got shape {:?}",
            t.shape()
        )));
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]])
}
