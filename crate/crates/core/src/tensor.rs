//! Dense row-major `f64` arrays and the handful of array kernels the rest of
//! the crate is built from.
//!
//! Video cubes are stored frame-major as `[B, H, W]`, measurements as
//! `[H, W]`, and convolution feature maps as `[C, H, W]`. All kernels are
//! serial and deterministic: the same inputs always give bit-identical
//! outputs.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn expect_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dims mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    fn expect_rank3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "{what}: expected a [C, H, W] tensor, got {:?}",
                self.dims
            ))),
        }
    }

    /// Number of frames / channels of a `[C, H, W]` tensor.
    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    /// Copy of frame `b` of a `[B, H, W]` tensor, as `[H, W]`.
    pub fn frame(&self, b: usize) -> Tensor {
        let (h, w) = (self.dims[1], self.dims[2]);
        let plane = h * w;
        Tensor {
            dims: vec![h, w],
            data: self.data[b * plane..(b + 1) * plane].to_vec(),
        }
    }

    pub fn frame_slice(&self, b: usize) -> &[f64] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[b * plane..(b + 1) * plane]
    }

    /// Stacks equally sized `[H, W]` planes into `[B, H, W]`.
    pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero frames"))?;
        let (h, w) = match *first.dims.as_slice() {
            [h, w] => (h, w),
            _ => return Err(Error::shape("stack_frames expects [H, W] planes")),
        };
        let mut data = Vec::with_capacity(frames.len() * h * w);
        for f in frames {
            first.expect_same_dims(f)?;
            data.extend_from_slice(&f.data);
        }
        Tensor::new(vec![frames.len(), h, w], data)
    }
}

/// Same-padded 2-D cross-correlation.
///
/// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, k, k]` with odd `k`,
/// `bias` has `C_out` elements. Out-of-bounds taps read zero.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (ci, h, w) = input.expect_rank3("conv2d input")?;
    let (co, k) = conv_kernel_dims(kernel, ci)?;
    if bias.len() != co {
        return Err(Error::shape(format!(
            "conv2d bias has {} elements, kernel has {co} output channels",
            bias.len()
        )));
    }
    let plane = h * w;
    let cols = im2col(&input.data, ci, h, w, k);
    let mut out: Vec<f64> = bias.data.iter().flat_map(|&b| std::iter::repeat_n(b, plane)).collect();
    gemm(co, ci * k * k, plane, &kernel.data, false, &cols, false, &mut out, 1.0);
    Tensor::new(vec![co, h, w], out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (co, h, w) = grad_out.expect_rank3("conv2d grad")?;
    let ci = kernel.dims.get(1).copied().unwrap_or(0);
    let (kco, k) = conv_kernel_dims(kernel, ci)?;
    if kco != co {
        return Err(Error::shape("conv2d grad: output channel mismatch"));
    }
    let plane = h * w;
    let mut cols = vec![0.0; ci * k * k * plane];
    gemm(ci * k * k, co, plane, &kernel.data, true, &grad_out.data, false, &mut cols, 0.0);
    Tensor::new(vec![ci, h, w], col2im(&cols, ci, h, w, k))
}

/// Gradients of [`conv2d`] with respect to kernel and bias.
pub fn conv2d_grad_params(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_dims: &[usize],
) -> Result<(Tensor, Tensor)> {
    let (co, h, w) = grad_out.expect_rank3("conv2d grad")?;
    let (ci, ih, iw) = input.expect_rank3("conv2d input")?;
    if (ih, iw) != (h, w) || kernel_dims.len() != 4 || kernel_dims[0] != co || kernel_dims[1] != ci
    {
        return Err(Error::shape("conv2d grad: inconsistent dims"));
    }
    let k = kernel_dims[2];
    let plane = h * w;
    let cols = im2col(&input.data, ci, h, w, k);
    let mut gk = vec![0.0; co * ci * k * k];
    gemm(co, plane, ci * k * k, &grad_out.data, false, &cols, true, &mut gk, 0.0);
    let gb = grad_out.data.chunks(plane).map(|g| g.iter().sum()).collect();
    Ok((
        Tensor::new(kernel_dims.to_vec(), gk)?,
        Tensor::new(vec![co], gb)?,
    ))
}

/// `[C, H, W]` to the zero-padded patch matrix `[C·k·k, H·W]`.
fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let plane = h * w;
    let mut cols = vec![0.0; c * k * k * plane];
    for ch in 0..c {
        let src = &input[ch * plane..(ch + 1) * plane];
        for_each_tap(k, h, w, |tap, dy, dx, ys, xs| {
            let row = &mut cols[(ch * k * k + tap) * plane..(ch * k * k + tap + 1) * plane];
            for y in ys {
                let s = ((y as isize + dy) as usize * w) as isize + xs.start as isize + dx;
                let s = s as usize;
                row[y * w + xs.start..y * w + xs.end].copy_from_slice(&src[s..s + xs.len()]);
            }
        });
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for_each_tap(k, h, w, |tap, dy, dx, ys, xs| {
            let row = &cols[(ch * k * k + tap) * plane..(ch * k * k + tap + 1) * plane];
            for y in ys {
                let s = (((y as isize + dy) as usize * w) as isize + xs.start as isize + dx) as usize;
                for (d, v) in dst[s..s + xs.len()].iter_mut().zip(&row[y * w + xs.start..y * w + xs.end]) {
                    *d += v;
                }
            }
        });
    }
    out
}

/// `c = op(a)·op(b) + beta·c` for row-major `a` (m×n after op), `b` (n×p after op).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, n: usize, p: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() == m * n && b.len() == n * p && c.len() == m * p);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (n as isize, 1) };
    let (rsb, csb) = if b_t { (1, n as isize) } else { (p as isize, 1) };
    // SAFETY: the strides above address exactly the checked slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m, n, p, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), p as isize, 1,
        );
    }
}

fn conv_kernel_dims(kernel: &Tensor, ci: usize) -> Result<(usize, usize)> {
    match *kernel.dims.as_slice() {
        [co, kci, kh, kw] => {
            if kci != ci {
                return Err(Error::shape(format!(
                    "conv2d: input has {ci} channels, kernel expects {kci}"
                )));
            }
            if kh != kw || kh % 2 == 0 {
                return Err(Error::shape(format!(
                    "conv2d: kernel must be square with odd size, got {kh}x{kw}"
                )));
            }
            Ok((co, kh))
        }
        _ => Err(Error::shape(format!(
            "conv2d: kernel must be [C_out, C_in, k, k], got {:?}",
            kernel.dims
        ))),
    }
}

/// Visits every kernel tap with its offset and the output rows/cols whose
/// shifted source pixel lies inside the image.
fn for_each_tap(
    k: usize,
    h: usize,
    w: usize,
    mut f: impl FnMut(usize, isize, isize, std::ops::Range<usize>, std::ops::Range<usize>),
) {
    let p = (k / 2) as isize;
    for ky in 0..k {
        let dy = ky as isize - p;
        let ys = (-dy).max(0) as usize..(h as isize - dy).min(h as isize).max(0) as usize;
        if ys.is_empty() {
            continue;
        }
        for kx in 0..k {
            let dx = kx as isize - p;
            let xs = (-dx).max(0) as usize..(w as isize - dx).min(w as isize).max(0) as usize;
            if xs.is_empty() {
                continue;
            }
            f(ky * k + kx, dy, dx, ys.clone(), xs);
        }
    }
}

/// 2x2 block mean. H and W must be even.
pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.expect_rank3("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "avg_pool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input.data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                // pairwise so a constant block averages back exactly
                dst[y * ow + x] = 0.25 * ((src[i] + src[i + 1]) + (src[i + w] + src[i + w + 1]));
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Gradient of [`avg_pool2`]: spreads each upstream value as a quarter over its block.
pub fn avg_pool2_grad(grad_out: &Tensor) -> Result<Tensor> {
    Ok(upsample2(grad_out)?.scale(0.25))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.expect_rank3("upsample2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input.data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Gradient of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_grad(grad_out: &Tensor) -> Result<Tensor> {
    Ok(avg_pool2(grad_out)?.scale(4.0))
}

/// Channels of `a` followed by channels of `b`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c1, h1, w1) = a.expect_rank3("concat_channels")?;
    let (c2, h2, w2) = b.expect_rank3("concat_channels")?;
    if (h1, w1) != (h2, w2) {
        return Err(Error::shape(format!(
            "concat_channels: spatial mismatch {h1}x{w1} vs {h2}x{w2}"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(vec![c1 + c2, h1, w1], data)
}

/// Inverse of [`concat_channels`]: the first `c1` channels and the rest.
pub fn split_channels(t: &Tensor, c1: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = t.expect_rank3("split_channels")?;
    if c1 == 0 || c1 >= c {
        return Err(Error::shape(format!(
            "split_channels: cannot split {c} channels at {c1}"
        )));
    }
    let at = c1 * h * w;
    Ok((
        Tensor::new(vec![c1, h, w], t.data[..at].to_vec())?,
        Tensor::new(vec![c - c1, h, w], t.data[at..].to_vec())?,
    ))
}

/// Sums a `[B, H, W]` cube over frames into `[H, W]`.
pub fn frame_sum(cube: &Tensor) -> Result<Tensor> {
    let (b, h, w) = cube.expect_rank3("frame_sum")?;
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for f in 0..b {
        for (o, v) in out.iter_mut().zip(&cube.data[f * plane..(f + 1) * plane]) {
            *o += v;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Replicates an `[H, W]` plane into `frames` identical frames.
pub fn frame_repeat(plane: &Tensor, frames: usize) -> Result<Tensor> {
    let (h, w) = match *plane.dims.as_slice() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "frame_repeat expects [H, W], got {:?}",
                plane.dims
            )))
        }
    };
    if frames == 0 {
        return Err(Error::shape("frame_repeat: zero frames"));
    }
    let mut data = Vec::with_capacity(frames * h * w);
    for _ in 0..frames {
        data.extend_from_slice(&plane.data);
    }
    Tensor::new(vec![frames, h, w], data)
}

/// Output frame `k` is input frame `index[k]`.
pub fn gather_frames(cube: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (b, h, w) = cube.expect_rank3("gather_frames")?;
    if index.is_empty() {
        return Err(Error::shape("gather_frames: empty index"));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= b) {
        return Err(Error::shape(format!(
            "gather_frames: frame {bad} out of range for {b} frames"
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(index.len() * plane);
    for &i in index {
        data.extend_from_slice(&cube.data[i * plane..(i + 1) * plane]);
    }
    Tensor::new(vec![index.len(), h, w], data)
}

/// Gradient of [`gather_frames`]: scatter-adds upstream frames back.
pub fn gather_frames_grad(grad_out: &Tensor, index: &[usize], frames: usize) -> Result<Tensor> {
    let (_, h, w) = grad_out.expect_rank3("gather_frames grad")?;
    let plane = h * w;
    let mut out = vec![0.0; frames * plane];
    for (k, &i) in index.iter().enumerate() {
        let src = &grad_out.data[k * plane..(k + 1) * plane];
        for (o, s) in out[i * plane..(i + 1) * plane].iter_mut().zip(src) {
            *o += s;
        }
    }
    Tensor::new(vec![frames, h, w], out)
}
