//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate is built on.
//!
//! All reductions use a fixed loop order so results are reproducible bit for
//! bit across runs.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOW])
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + std * rng.normal()).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let offset: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Row `i` of a matrix (or of the leading axis in general).
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let width = self.data.len() / self.shape[0];
        &mut self.data[i * width..(i + 1) * width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`, in place.
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "axpy: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on differing shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Self> {
        let [m, n] = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub(crate) fn matrix_dims(&self, op: &str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(Error::dim(format!("{op}: expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// Selects entries along the leading axis.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let width = if self.shape[0] == 0 { 0 } else { self.data.len() / self.shape[0] };
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Flattens every axis after the first.
    pub fn flatten_batch(self) -> Self {
        let b = self.shape.first().copied().unwrap_or(1);
        let f = if b == 0 { 0 } else { self.data.len() / b };
        Tensor { shape: vec![b, f], data: self.data }
    }
}

/// Matrix product with a fixed accumulation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([m, k], [k2, n]) = (a.matrix_dims("matmul")?, b.matrix_dims("matmul")?);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: inner dimensions of {:?} and {:?} disagree",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut out);
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `c += a · b` with `a: m×k`, `b: k×n`. Each output accumulates over `p`
/// in increasing order.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    rows_times_b(m, k, n, |i, p| a[i * k + p], b, c);
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`. Each output accumulates over `p`
/// in increasing order.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    rows_times_b(m, k, n, |i, p| a[i * k + p], &bt, c);
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`. Accumulates over `p` in
/// increasing order.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    rows_times_b(m, k, n, |i, p| a[p * m + i], b, c);
}

const MR: usize = 4;
const NR: usize = 16;

/// Depth of the `k` blocks, sized so a block of `b` stays in cache.
const KC: usize = 256;

/// `c[i] += Σ_p coef(i, p) · b[p]` over rows `i`, with `p` increasing for
/// every output element. Full `MR×NR` tiles accumulate in registers; blocking
/// over `p` leaves the order of additions unchanged.
#[inline(always)]
fn rows_times_b(m: usize, k: usize, n: usize, coef: impl Fn(usize, usize) -> f64, b: &[f64], c: &mut [f64]) {
    let mut panel = vec![0.0; KC.min(k) * MR];
    for k0 in (0..k).step_by(KC) {
        let k1 = (k0 + KC).min(k);
        let kb = k1 - k0;
        let mut i = 0;
        while i + MR <= m {
            for p in 0..kb {
                for r in 0..MR {
                    panel[p * MR + r] = coef(i + r, k0 + p);
                }
            }
            let mut j = 0;
            while j + NR <= n {
                let mut acc = [[0.0f64; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
                }
                for p in 0..kb {
                    let q = (k0 + p) * n + j;
                    let bp: &[f64; NR] = b[q..q + NR].try_into().expect("NR columns");
                    let ap = &panel[p * MR..p * MR + MR];
                    for r in 0..MR {
                        for t in 0..NR {
                            acc[r][t] = ap[r].mul_add(bp[t], acc[r][t]);
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
                }
                j += NR;
            }
            if j < n {
                for r in 0..MR {
                    let crow = &mut c[(i + r) * n + j..(i + r + 1) * n];
                    for p in 0..kb {
                        let av = panel[p * MR + r];
                        let q = (k0 + p) * n;
                        for (cv, bv) in crow.iter_mut().zip(&b[q + j..q + n]) {
                            *cv = av.mul_add(*bv, *cv);
                        }
                    }
                }
            }
            i += MR;
        }
        for i in i..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in k0..k1 {
                let av = coef(i, p);
                for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv = av.mul_add(*bv, *cv);
                }
            }
        }
    }
}

/// Geometry of a 2-D sliding window over a `C×H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(
        input_chw: (usize, usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (channels, height, width) = input_chw;
        let g = ConvGeometry { channels, height, width, kernel, stride, padding };
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::arg("kernel and stride must be positive"));
        }
        if kernel.0 > height + 2 * padding.0 || kernel.1 > width + 2 * padding.1 {
            return Err(Error::dim(format!(
                "kernel {}x{} larger than padded input {}x{}",
                kernel.0,
                kernel.1,
                height + 2 * padding.0,
                width + 2 * padding.1
            )));
        }
        Ok(g)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1
    }

    pub fn patches(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Output columns `ox` whose tap `ox·sw + kj − pw` lands inside the image.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        let (sw, pw, ow) = (self.stride.1, self.padding.1, self.out_w());
        let lo = if pw > kj { (pw - kj).div_ceil(sw) } else { 0 };
        let hi = (self.width + pw).saturating_sub(kj).div_ceil(sw).min(ow);
        lo.min(hi)..hi
    }

    /// Column layout `[patch_dim × patches]` for one image.
    pub(crate) fn lower(&self, image: &[f64], cols: &mut [f64]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let (oh, ow) = (self.out_h(), self.out_w());
        let p_total = oh * ow;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..kh {
                for kj in 0..kw {
                    let d = (c * kh + ki) * kw + kj;
                    let dst = &mut cols[d * p_total..(d + 1) * p_total];
                    let valid = self.valid_cols(kj);
                    for oy in 0..oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        let row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize || valid.is_empty() {
                            row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        row[..valid.start].fill(0.0);
                        row[valid.end..].fill(0.0);
                        let x0 = valid.start * sw + kj - pw;
                        if sw == 1 {
                            row[valid.clone()].copy_from_slice(&src[x0..x0 + valid.len()]);
                        } else {
                            for (v, x) in row[valid.clone()].iter_mut().zip((x0..).step_by(sw)) {
                                *v = src[x];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`lower`](Self::lower): scatters columns back, accumulating.
    pub(crate) fn raise(&self, cols: &[f64], image: &mut [f64]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let (oh, ow) = (self.out_h(), self.out_w());
        let p_total = oh * ow;
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..kh {
                for kj in 0..kw {
                    let d = (c * kh + ki) * kw + kj;
                    let src = &cols[d * p_total..(d + 1) * p_total];
                    for oy in 0..oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && ix < self.width as isize {
                                plane[iy as usize * self.width + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Extracts every sliding-window patch of a `B×C×H×W` batch.
///
/// The result is `B×P×(C·kh·kw)` with patches in row-major output order and
/// each patch flattened in (channel, row, col) order. Out-of-bounds taps read
/// zero.
pub fn im2col(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let [b, c, h, w] = match input.shape[..] {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(Error::dim(format!("im2col expects B×C×H×W, got {:?}", input.shape))),
    };
    let g = ConvGeometry::new((c, h, w), kernel, stride, padding)?;
    let (p, d) = (g.patches(), g.patch_dim());
    let mut cols = vec![0.0; d * p];
    let mut out = vec![0.0; b * p * d];
    for bi in 0..b {
        g.lower(&input.data[bi * g.image_len()..(bi + 1) * g.image_len()], &mut cols);
        let dst = &mut out[bi * p * d..(bi + 1) * p * d];
        for di in 0..d {
            for pi in 0..p {
                dst[pi * d + di] = cols[di * p + pi];
            }
        }
    }
    Tensor::new(&[b, p, d], out)
}

/// Arithmetic mean over the listed axes, which are removed from the shape.
pub fn reduce_mean(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = t.ndim();
    let mut reduced = vec![false; nd];
    for &a in axes {
        if a >= nd {
            return Err(Error::arg(format!("axis {a} out of range for {nd}-d tensor")));
        }
        if reduced[a] {
            return Err(Error::arg(format!("axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> =
        t.shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&s, _)| s).collect();
    let count: usize = t.shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&s, _)| s).product();
    let out_len: usize = out_shape.iter().product();
    let mut sums = vec![0.0; out_len];

    // Output stride for each input axis (0 for reduced axes).
    let mut out_strides = vec![0usize; nd];
    let mut acc = 1;
    for ax in (0..nd).rev() {
        if !reduced[ax] {
            out_strides[ax] = acc;
            acc *= t.shape[ax];
        }
    }
    let mut index = vec![0usize; nd];
    for &v in &t.data {
        let o: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        sums[o] += v;
        for ax in (0..nd).rev() {
            index[ax] += 1;
            if index[ax] < t.shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    let inv = 1.0 / count as f64;
    Tensor::new(&out_shape, sums.into_iter().map(|s| s * inv).collect())
}
