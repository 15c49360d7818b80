//! Forward and backward kernels for the individual layer kinds.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry, Tensor};

fn dims4(t: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape()[..] {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(format!("{op} expects a B×C×H×W tensor, got {:?}", t.shape()))),
    }
}

/// Saved state of a convolution needed for its backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    pub geometry: ConvGeometry,
    pub batch: usize,
    /// Per-image column buffers, `[patch_dim × patches]` each, concatenated.
    pub cols: Vec<f64>,
}

/// Cross-correlation with zero padding, `weights: O×C×kh×kw`.
pub fn conv_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    conv_forward_impl(input, weights, bias, stride, pad, false).map(|(out, _)| out)
}

pub fn conv_forward_cached(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvCache)> {
    conv_forward_impl(input, weights, bias, stride, pad, true)
}

/// Without `keep`, one image's columns are reused and the cache is empty.
fn conv_forward_impl(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    keep: bool,
) -> Result<(Tensor, ConvCache)> {
    let (b, c, h, w) = dims4(input, "conv_forward")?;
    let (o, c2, kh, kw) = dims4(weights, "conv_forward weights")?;
    if c != c2 {
        return Err(Error::dim(format!(
            "conv input has {c} channels but weights {:?} expect {c2}",
            weights.shape()
        )));
    }
    if bias.len() != o {
        return Err(Error::dim(format!("conv bias of length {} for {o} filters", bias.len())));
    }
    let g = ConvGeometry::new((c, h, w), (kh, kw), (stride, stride), (pad, pad))?;
    let (p, d) = (g.patches(), g.patch_dim());
    let mut cols = vec![0.0; if keep { b } else { 1 } * d * p];
    let mut out = vec![0.0; b * o * p];
    for bi in 0..b {
        let slot = if keep { bi } else { 0 };
        let col = &mut cols[slot * d * p..(slot + 1) * d * p];
        g.lower(&input.data()[bi * g.image_len()..(bi + 1) * g.image_len()], col);
        let dst = &mut out[bi * o * p..(bi + 1) * o * p];
        for (oc, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        gemm_nn(o, d, p, weights.data(), col, dst);
    }
    let out = Tensor::new(&[b, o, g.out_h(), g.out_w()], out)?;
    Ok((out, ConvCache { geometry: g, batch: b, cols }))
}

/// Returns `(d_input, d_weights, d_bias)`.
pub fn conv_backward(
    dout: &Tensor,
    weights: &Tensor,
    cache: &ConvCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = &cache.geometry;
    let b = cache.batch;
    let (p, d) = (g.patches(), g.patch_dim());
    let o = weights.shape()[0];
    if dout.len() != b * o * p {
        return Err(Error::dim(format!("conv_backward: gradient {:?} does not match output", dout.shape())));
    }
    let mut dw = vec![0.0; o * d];
    let mut db = vec![0.0; o];
    let mut dx = vec![0.0; b * g.image_len()];
    let mut dcol = vec![0.0; d * p];
    for bi in 0..b {
        let dy = &dout.data()[bi * o * p..(bi + 1) * o * p];
        let col = &cache.cols[bi * d * p..(bi + 1) * d * p];
        gemm_nt(o, p, d, dy, col, &mut dw);
        for (oc, chunk) in dy.chunks(p).enumerate() {
            db[oc] += chunk.iter().sum::<f64>();
        }
        dcol.fill(0.0);
        gemm_tn(d, o, p, weights.data(), dy, &mut dcol);
        g.raise(&dcol, &mut dx[bi * g.image_len()..(bi + 1) * g.image_len()]);
    }
    Ok((
        Tensor::new(&[b, g.channels, g.height, g.width], dx)?,
        Tensor::new(weights.shape(), dw)?,
        Tensor::from_vec(db),
    ))
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat input index of the selected maximum (first in row-major order on
/// ties).
pub fn maxpool_forward(input: &Tensor, kh: usize, kw: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = dims4(input, "maxpool_forward")?;
    if kh == 0 || kw == 0 || stride == 0 {
        return Err(Error::arg("pooling window and stride must be positive"));
    }
    if kh > h || kw > w {
        return Err(Error::dim(format!("pooling window {kh}x{kw} larger than input {h}x{w}")));
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    let x = input.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let at = base + (oy * stride + ki) * w + ox * stride + kj;
                        if x[at] > best_v {
                            best_v = x[at];
                            best = at;
                        }
                    }
                }
                out.push(best_v);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, oh, ow], out)?, idx))
}

pub fn maxpool_backward(dout: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if dout.len() != argmax.len() {
        return Err(Error::dim("maxpool_backward: gradient and index lengths differ"));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (g, &i) in dout.data().iter().zip(argmax) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gradient through ReLU given the forward output.
pub fn relu_backward(dout: &Tensor, output: &Tensor) -> Result<Tensor> {
    dout.zip_map_checked(output, |g, y| if y > 0.0 { g } else { 0.0 })
}

/// Inverted dropout. Returns the output and the applied per-element scale
/// (`0` or `1/(1−rate)`) when training.
pub fn dropout_forward(
    input: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::arg(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len()).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((Tensor::new(input.shape(), data)?, Some(mask)))
}

/// `input: B×I`, `weight: O×I` → `B×O`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [b, i] = input.matrix_dims("linear_forward")?;
    let [o, i2] = weight.matrix_dims("linear_forward weights")?;
    if i != i2 || bias.len() != o {
        return Err(Error::dim(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm_nt(b, i, o, input.data(), weight.data(), &mut out);
    Tensor::new(&[b, o], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward(dout: &Tensor, input: &Tensor, weight: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [b, i] = input.matrix_dims("linear_backward")?;
    let [o, _] = weight.matrix_dims("linear_backward weights")?;
    let [b2, o2] = dout.matrix_dims("linear_backward grad")?;
    if b != b2 || o != o2 {
        return Err(Error::dim("linear_backward: gradient shape mismatch"));
    }
    let mut dx = vec![0.0; b * i];
    gemm_nn(b, o, i, dout.data(), weight.data(), &mut dx);
    let mut dw = vec![0.0; o * i];
    gemm_tn(o, b, i, dout.data(), input.data(), &mut dw);
    let mut db = vec![0.0; o];
    for r in 0..b {
        for (acc, g) in db.iter_mut().zip(dout.row(r)) {
            *acc += g;
        }
    }
    Ok((Tensor::new(&[b, i], dx)?, Tensor::new(&[o, i], dw)?, Tensor::from_vec(db)))
}

/// How batch normalization scales each channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnMode {
    /// Each channel divided by its own standard deviation.
    Standard,
    /// Every channel divided by `sqrt(mean_c σ²_c + ε)`, preserving the
    /// relative order of channel variances.
    VarianceAveraged,
}

impl BnMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BnMode::Standard => "standard",
            BnMode::VarianceAveraged => "variance-averaged",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(BnMode::Standard),
            "variance-averaged" => Ok(BnMode::VarianceAveraged),
            other => Err(Error::arg(format!("unknown batchnorm mode {other:?}"))),
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::arg("batchnorm epsilon must be positive"));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub shape: Vec<usize>,
    pub mode: BnMode,
    pub xhat: Vec<f64>,
    /// `1/s` per channel (all equal in variance-averaged mode).
    pub inv_std: Vec<f64>,
}

/// Channel layout of `B×C` or `B×C×…` input: `(batch, channels, inner)`.
fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("batchnorm expects B×C×…, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub fn batchnorm_forward(input: &Tensor, state: &mut BatchNormState, mode: BnMode, training: bool) -> Result<Tensor> {
    batchnorm_forward_cached(input, state, mode, training).map(|(y, _)| y)
}

/// Eval-mode forward without touching the state.
pub fn batchnorm_eval(input: &Tensor, state: &BatchNormState, mode: BnMode) -> Result<Tensor> {
    let (b, c, inner) = bn_layout(input.shape())?;
    if c != state.channels() {
        return Err(Error::dim(format!("batchnorm over {c} channels with state for {}", state.channels())));
    }
    let inv_std = divisors(state.running_var.data(), mode, state.epsilon);
    let mut out = input.data().to_vec();
    for bi in 0..b {
        for ch in 0..c {
            let (m, s, g, be) =
                (state.running_mean.data()[ch], inv_std[ch], state.gamma.data()[ch], state.beta.data()[ch]);
            for v in &mut out[(bi * c + ch) * inner..(bi * c + ch + 1) * inner] {
                *v = (*v - m) * s * g + be;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

fn divisors(var: &[f64], mode: BnMode, eps: f64) -> Vec<f64> {
    match mode {
        BnMode::Standard => var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
        BnMode::VarianceAveraged => {
            let avg = var.iter().sum::<f64>() / var.len() as f64;
            vec![1.0 / (avg + eps).sqrt(); var.len()]
        }
    }
}

pub fn batchnorm_forward_cached(
    input: &Tensor,
    state: &mut BatchNormState,
    mode: BnMode,
    training: bool,
) -> Result<(Tensor, BatchNormCache)> {
    let (b, c, inner) = bn_layout(input.shape())?;
    if c != state.channels() {
        return Err(Error::dim(format!("batchnorm over {c} channels with state for {}", state.channels())));
    }
    if !training {
        let y = batchnorm_eval(input, state, mode)?;
        let inv_std = divisors(state.running_var.data(), mode, state.epsilon);
        let mut xhat = input.data().to_vec();
        for bi in 0..b {
            for ch in 0..c {
                for v in &mut xhat[(bi * c + ch) * inner..(bi * c + ch + 1) * inner] {
                    *v = (*v - state.running_mean.data()[ch]) * inv_std[ch];
                }
            }
        }
        return Ok((y, BatchNormCache { shape: input.shape().to_vec(), mode, xhat, inv_std }));
    }
    if b < 2 {
        return Err(Error::arg("batchnorm training needs a batch of at least 2"));
    }
    let n = (b * inner) as f64;
    let x = input.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            mean[ch] += x[(bi * c + ch) * inner..(bi * c + ch + 1) * inner].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for bi in 0..b {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += x[(bi * c + ch) * inner..(bi * c + ch + 1) * inner]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let inv_std = divisors(&var, mode, state.epsilon);
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let range = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
            let (g, be) = (state.gamma.data()[ch], state.beta.data()[ch]);
            for k in range {
                let h = (x[k] - mean[ch]) * inv_std[ch];
                xhat[k] = h;
                out[k] = h * g + be;
            }
        }
    }
    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let mom = state.momentum;
    for ch in 0..c {
        let rm = &mut state.running_mean.data_mut()[ch];
        *rm = (1.0 - mom) * *rm + mom * mean[ch];
        let rv = &mut state.running_var.data_mut()[ch];
        *rv = (1.0 - mom) * *rv + mom * var[ch] * unbias;
    }
    Ok((Tensor::new(input.shape(), out)?, BatchNormCache { shape: input.shape().to_vec(), mode, xhat, inv_std }))
}

/// Training-mode backward. Returns `(d_input, d_gamma, d_beta)`.
///
/// With `ĝ = dy·γ`, standard mode gives
/// `dx = (ĝ − mean_c ĝ − x̂ · mean_c(ĝ x̂)) / s_c`; the variance-averaged mode
/// replaces `mean_c(ĝ x̂)` by its mean over all channels.
pub fn batchnorm_backward(dout: &Tensor, state: &BatchNormState, cache: &BatchNormCache) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, inner) = bn_layout(&cache.shape)?;
    if dout.shape() != cache.shape.as_slice() {
        return Err(Error::dim("batchnorm_backward: gradient shape mismatch"));
    }
    let n = (b * inner) as f64;
    let dy = dout.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let g = state.gamma.data()[ch];
            for k in (bi * c + ch) * inner..(bi * c + ch + 1) * inner {
                dgamma[ch] += dy[k] * cache.xhat[k];
                dbeta[ch] += dy[k];
                let gh = dy[k] * g;
                sum_g[ch] += gh;
                sum_gx[ch] += gh * cache.xhat[k];
            }
        }
    }
    let proj: Vec<f64> = match cache.mode {
        BnMode::Standard => sum_gx.iter().map(|s| s / n).collect(),
        BnMode::VarianceAveraged => {
            let all = sum_gx.iter().sum::<f64>() / (n * c as f64);
            vec![all; c]
        }
    };
    let mut dx = vec![0.0; dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let g = state.gamma.data()[ch];
            let mg = sum_g[ch] / n;
            for k in (bi * c + ch) * inner..(bi * c + ch + 1) * inner {
                dx[k] = (dy[k] * g - mg - cache.xhat[k] * proj[ch]) * cache.inv_std[ch];
            }
        }
    }
    Ok((Tensor::new(&cache.shape, dx)?, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta)))
}

/// Eval-mode backward (affine map with frozen statistics).
pub fn batchnorm_eval_backward(dout: &Tensor, state: &BatchNormState, cache: &BatchNormCache) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, inner) = bn_layout(&cache.shape)?;
    let dy = dout.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let k0 = (bi * c + ch) * inner;
            for k in k0..k0 + inner {
                dgamma[ch] += dy[k] * cache.xhat[k];
                dbeta[ch] += dy[k];
                dx[k] = dy[k] * state.gamma.data()[ch] * cache.inv_std[ch];
            }
        }
    }
    Ok((Tensor::new(&cache.shape, dx)?, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta)))
}

impl Tensor {
    pub(crate) fn zip_map_checked(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!("shapes {:?} and {:?} differ", self.shape(), other.shape())));
        }
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(self.shape(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::direct_conv2d;

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(1);
        let x = Tensor::normal(&[2, 1, 4, 5], 0.0, 1.0, &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_gives_nines() {
        let x = Tensor::full(&[1, 1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = Rng::new(2);
        let x = Tensor::normal(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
        let w = Tensor::normal(&[4, 3, 3, 3], 0.0, 1.0, &mut rng);
        let b = Tensor::normal(&[4], 0.0, 1.0, &mut rng);
        let y = conv_forward(&x, &w, &b, 2, 1).unwrap();
        let want = direct_conv2d(&x, &w, Some(&b), (2, 2), (1, 1)).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_constant_input() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.0);
        let (y, idx) = maxpool_forward(&x, 2, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        // first element of each window
        assert_eq!(&idx[..4], &[0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool_forward(&x, 2, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn maxpool_window_too_large() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(maxpool_forward(&x, 3, 3, 1).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(0);
        let x = Tensor::normal(&[10, 10], 0.0, 1.0, &mut rng);
        assert_eq!(dropout_forward(&x, 0.0, true, &mut rng).unwrap().0, x);
        assert_eq!(dropout_forward(&x, 0.7, false, &mut rng).unwrap().0, x);
        assert!(dropout_forward(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = Rng::new(99);
        let x = Tensor::full(&[100_000], 1.0);
        let (y, _) = dropout_forward(&x, 0.5, true, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!(survivors > 0.49 && survivors < 0.51, "{survivors}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (b, c, inner) = bn_layout(t.shape()).unwrap();
        let n = (b * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                for k in 0..inner {
                    mean[ch] += t.data()[(bi * c + ch) * inner + k] / n;
                }
            }
        }
        for bi in 0..b {
            for ch in 0..c {
                for k in 0..inner {
                    let d = t.data()[(bi * c + ch) * inner + k] - mean[ch];
                    var[ch] += d * d / n;
                }
            }
        }
        (mean, var)
    }

    #[test]
    fn bn_standard_on_normalized_input_is_near_identity() {
        // each channel has values ±1: zero mean, unit variance
        let x = Tensor::new(&[2, 2, 1, 2], vec![1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0]).unwrap();
        let mut st = BatchNormState::new(2);
        let y = batchnorm_forward(&x, &mut st, BnMode::Standard, true).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn bn_variance_averaged_shared_divisor() {
        // channel 0 values ±1 (var 1), channel 1 values ±3 (var 9)
        let x = Tensor::new(&[2, 2], vec![1.0, 3.0, -1.0, -3.0]).unwrap();
        let mut st = BatchNormState::new(2).with_epsilon(1e-300).unwrap();
        let y = batchnorm_forward(&x, &mut st, BnMode::VarianceAveraged, true).unwrap();
        let s = 5f64.sqrt();
        assert!((y.data()[0] - 1.0 / s).abs() < 1e-12);
        assert!((y.data()[1] - 3.0 / s).abs() < 1e-12);
        let (_, var) = channel_stats(&y.reshape(&[2, 2, 1]).unwrap());
        assert!((var[1] / var[0] - 9.0).abs() < 1e-9);
    }

    #[test]
    fn bn_output_variance_normalized() {
        let mut rng = Rng::new(17);
        let mut x = Tensor::normal(&[16, 4, 3, 3], 0.0, 1.0, &mut rng);
        for (k, v) in x.data_mut().iter_mut().enumerate() {
            let ch = (k / 9) % 4;
            *v = *v * (ch as f64 + 1.0) + ch as f64;
        }
        let mut st = BatchNormState::new(4).with_epsilon(1e-12).unwrap();
        let y = batchnorm_forward(&x, &mut st, BnMode::Standard, true).unwrap();
        let (_, var) = channel_stats(&y);
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-6));

        let mut st = BatchNormState::new(4).with_epsilon(1e-12).unwrap();
        let y = batchnorm_forward(&x, &mut st, BnMode::VarianceAveraged, true).unwrap();
        let (mean, var) = channel_stats(&y);
        let avg = var.iter().sum::<f64>() / 4.0;
        assert!((avg - 1.0).abs() < 1e-6);
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn bn_training_needs_two_samples() {
        let x = Tensor::zeros(&[1, 3]);
        let mut st = BatchNormState::new(3);
        assert!(matches!(
            batchnorm_forward(&x, &mut st, BnMode::Standard, true),
            Err(Error::Argument(_))
        ));
        assert!(batchnorm_forward(&x, &mut st, BnMode::Standard, false).is_ok());
    }

    #[test]
    fn bn_running_stats_move_toward_batch() {
        let x = Tensor::new(&[2, 1], vec![4.0, 6.0]).unwrap();
        let mut st = BatchNormState::new(1);
        batchnorm_forward(&x, &mut st, BnMode::VarianceAveraged, true).unwrap();
        assert!((st.running_mean.data()[0] - 0.5).abs() < 1e-12);
        // unbiased var 2, so 0.9·1 + 0.1·2
        assert!((st.running_var.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_matmul() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let b = Tensor::from_vec(vec![0.5, 0.0, -1.0]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.5, 2.0, 5.0, -0.5, 0.0, -4.0]);
    }
}
