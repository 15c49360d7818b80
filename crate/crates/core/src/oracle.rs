//! Brute-force references used to validate the learning rules and kernels.
//!
//! Nothing here calls into the optimized kernels of [`crate::tensor`]; every
//! routine is a plain nested loop over `Vec<f64>`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_JACOBI_DIM: usize = 64;
const MAX_SWEEPS: usize = 100;

/// Exact principal components of a sample matrix.
#[derive(Clone, Debug)]
pub struct PcaOracle {
    /// `d×d` sample covariance `(1/n) XᵀX` of the centered samples.
    pub covariance: Tensor,
    /// Eigenvalues, descending.
    pub eigvals: Vec<f64>,
    /// `d×d`, column `i` is the eigenvector of `eigvals[i]`.
    pub eigvecs: Tensor,
}

impl PcaOracle {
    /// The top `k` eigenvectors as a `d×k` matrix.
    pub fn top(&self, k: usize) -> Tensor {
        let d = self.eigvals.len();
        let mut out = vec![0.0; d * k];
        for r in 0..d {
            for c in 0..k {
                out[r * k + c] = self.eigvecs.data()[r * d + c];
            }
        }
        Tensor::new(&[d, k], out).expect("shape is consistent")
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns `(eigvals, eigvecs)` sorted by descending eigenvalue, eigenvectors
/// stored column-wise in a row-major `d×d` buffer.
pub fn jacobi_eigen(matrix: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != d * d {
        return Err(Error::dim(format!("expected {d}x{d} matrix, got {} entries", matrix.len())));
    }
    if d > MAX_JACOBI_DIM {
        return Err(Error::arg(format!("jacobi solver limited to d <= {MAX_JACOBI_DIM}, got {d}")));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix entry".into()));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j * d + j].total_cmp(&a[i * d + i]));
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vecs = vec![0.0; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..d {
            vecs[r * d + new_col] = v[r * d + old_col];
        }
    }
    Ok((eigvals, vecs))
}

/// PCA of `samples: n×d` after subtracting the sample mean.
pub fn exact_pca(samples: &Tensor) -> Result<PcaOracle> {
    let [n, d] = samples.matrix_dims("exact_pca")?;
    if n == 0 {
        return Err(Error::arg("exact_pca needs at least one sample"));
    }
    let x = samples.data();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite sample".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[i * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            let xa = x[i * d + a] - mean[a];
            for b in a..d {
                cov[a * d + b] += xa * (x[i * d + b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= n as f64;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(&cov, d)?;
    Ok(PcaOracle {
        covariance: Tensor::new(&[d, d], cov)?,
        eigvals,
        eigvecs: Tensor::new(&[d, d], eigvecs)?,
    })
}

/// Largest per-pair angle, in degrees, between row `i` of `w: k×d` and
/// column `i` of `v: d×k`. Sign is ignored.
pub fn subspace_angle(w: &Tensor, v: &Tensor) -> Result<f64> {
    let [k, d] = w.matrix_dims("subspace_angle")?;
    let [d2, k2] = v.matrix_dims("subspace_angle")?;
    if d != d2 || k != k2 {
        return Err(Error::dim(format!(
            "subspace_angle: W {:?} vs V {:?}",
            w.shape(),
            v.shape()
        )));
    }
    let mut worst: f64 = 0.0;
    for i in 0..k {
        let (mut dotp, mut nw, mut nv) = (0.0, 0.0, 0.0);
        for j in 0..d {
            let a = w.data()[i * d + j];
            let b = v.data()[j * k + i];
            dotp += a * b;
            nw += a * a;
            nv += b * b;
        }
        if nw == 0.0 || nv == 0.0 {
            return Err(Error::arg(format!("zero vector in pair {i}")));
        }
        let cos = (dotp.abs() / (nw.sqrt() * nv.sqrt())).min(1.0);
        worst = worst.max(cos.acos().to_degrees());
    }
    Ok(worst)
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.matrix_dims("naive_matmul")?;
    let [k2, n] = b.matrix_dims("naive_matmul")?;
    if k != k2 {
        return Err(Error::dim(format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Direct nested-loop cross-correlation with zero padding.
///
/// `input: B×C×H×W`, `weights: O×C×kh×kw`, `bias: O` (optional).
pub fn direct_conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let (b, c, h, w) = match input.shape()[..] {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::dim("direct_conv2d input must be 4-d")),
    };
    let (o, c2, kh, kw) = match weights.shape()[..] {
        [o, c2, kh, kw] => (o, c2, kh, kw),
        _ => return Err(Error::dim("direct_conv2d weights must be 4-d")),
    };
    if c != c2 {
        return Err(Error::dim("channel mismatch"));
    }
    let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * padding.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb.data()[oc]);
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (y * stride.0 + ki) as isize - padding.0 as isize;
                                let ix = (x * stride.1 + kj) as isize - padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += input.at(&[bi, ic, iy as usize, ix as usize])
                                    * weights.at(&[oc, ic, ki, kj]);
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + x] = s;
                }
            }
        }
    }
    Tensor::new(&[b, o, oh, ow], out)
}

/// Lloyd's k-means from `init: k×d` until assignments stop changing or
/// `max_iters` passes. Ties go to the lowest centroid index; an empty
/// cluster keeps its centroid.
pub fn kmeans(samples: &Tensor, init: &Tensor, max_iters: usize) -> Result<Tensor> {
    let [n, d] = samples.matrix_dims("kmeans samples")?;
    let [k, d2] = init.matrix_dims("kmeans init")?;
    if d != d2 {
        return Err(Error::dim(format!("kmeans: samples {:?} vs init {:?}", samples.shape(), init.shape())));
    }
    let mut c = init.data().to_vec();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for s in 0..n {
            let x = &samples.data()[s * d..(s + 1) * d];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let mut dist = 0.0;
                for t in 0..d {
                    let e = x[t] - c[j * d + t];
                    dist += e * e;
                }
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            if assign[s] != best {
                assign[s] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sum = vec![0.0; k * d];
        let mut count = vec![0usize; k];
        for s in 0..n {
            count[assign[s]] += 1;
            for t in 0..d {
                sum[assign[s] * d + t] += samples.data()[s * d + t];
            }
        }
        for j in 0..k {
            if count[j] > 0 {
                for t in 0..d {
                    c[j * d + t] = sum[j * d + t] / count[j] as f64;
                }
            }
        }
    }
    Tensor::new(&[k, d], c)
}

/// One shared-weight Hebbian PCA step written as an explicit loop over every
/// (image, offset) patch of `patches: B×P×D`.
///
/// The running mean moves toward the mean of all patches with momentum
/// `momentum`; each centered patch then contributes
/// `η f(y_i)(x − Σ_{j≤i} f(y_j) w_j) / (B·P)` to row `i`. Returns the new
/// weights and running mean.
pub fn conv_hebbian_reference(
    weights: &Tensor,
    running_mean: &Tensor,
    patches: &Tensor,
    eta: f64,
    momentum: f64,
    f: impl Fn(f64) -> f64,
) -> Result<(Tensor, Tensor)> {
    let (b, p, d) = match patches.shape()[..] {
        [b, p, d] => (b, p, d),
        _ => return Err(Error::dim("conv_hebbian_reference patches must be B×P×D")),
    };
    let [n, d2] = weights.matrix_dims("conv_hebbian_reference weights")?;
    if d != d2 || running_mean.len() != d {
        return Err(Error::dim("conv_hebbian_reference: inconsistent dimensions"));
    }
    let count = (b * p) as f64;
    let mut mean = running_mean.data().to_vec();
    for t in 0..d {
        let mut s = 0.0;
        for bi in 0..b {
            for pi in 0..p {
                s += patches.at(&[bi, pi, t]);
            }
        }
        mean[t] = (1.0 - momentum) * mean[t] + momentum * (s / count);
    }
    let w = weights.data();
    let mut delta = vec![0.0; n * d];
    for bi in 0..b {
        for pi in 0..p {
            let x: Vec<f64> = (0..d).map(|t| patches.at(&[bi, pi, t]) - mean[t]).collect();
            let fy: Vec<f64> = (0..n)
                .map(|i| f((0..d).map(|t| w[i * d + t] * x[t]).sum::<f64>()))
                .collect();
            for i in 0..n {
                for t in 0..d {
                    let mut recon = 0.0;
                    for j in 0..=i {
                        recon += fy[j] * w[j * d + t];
                    }
                    delta[i * d + t] += eta * fy[i] * (x[t] - recon) / count;
                }
            }
        }
    }
    let updated: Vec<f64> = w.iter().zip(&delta).map(|(a, b)| a + b).collect();
    Ok((Tensor::new(&[n, d], updated)?, Tensor::from_vec(mean)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_psd(d: usize, rng: &mut Rng) -> Vec<f64> {
        let m: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    c[i * d + j] += m[i * d + k] * m[j * d + k];
                }
            }
        }
        c
    }

    #[test]
    fn jacobi_reconstructs_random_psd() {
        let mut rng = Rng::new(77);
        for d in [1, 2, 3, 5, 8, 16] {
            let c = random_psd(d, &mut rng);
            let (vals, vecs) = jacobi_eigen(&c, d).unwrap();
            for w in vals.windows(2) {
                assert!(w[0] >= w[1]);
            }
            let mut worst: f64 = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += vecs[i * d + k] * vals[k] * vecs[j * d + k];
                    }
                    worst = worst.max((s - c[i * d + j]).abs());
                }
            }
            assert!(worst < 1e-8, "d={d} worst={worst}");
            // orthonormal columns
            for a in 0..d {
                for b in 0..d {
                    let s: f64 = (0..d).map(|r| vecs[r * d + a] * vecs[r * d + b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((s - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn jacobi_matches_characteristic_roots_2x2() {
        for &(a, b, c) in &[(2.0, 1.0, 3.0), (5.0, -2.0, 1.0), (1.0, 0.0, 4.0), (3.0, 3.0, 3.0)] {
            let (vals, _) = jacobi_eigen(&[a, b, b, c], 2).unwrap();
            let tr: f64 = a + c;
            let det = a * c - b * b;
            let disc = (tr * tr / 4.0 - det).sqrt();
            assert!((vals[0] - (tr / 2.0 + disc)).abs() < 1e-10);
            assert!((vals[1] - (tr / 2.0 - disc)).abs() < 1e-10);
        }
    }

    #[test]
    fn pca_single_dimension_is_variance() {
        let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let p = exact_pca(&x).unwrap();
        // mean 3, squared deviations 4+1+0+9 = 14, over n
        assert!((p.eigvals[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn pca_diagonal_covariance() {
        let mut rng = Rng::new(4);
        let n = 10_000;
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            data.push(2.0 * rng.normal());
            data.push(rng.normal());
        }
        let p = exact_pca(&Tensor::new(&[n, 2], data).unwrap()).unwrap();
        assert!((p.eigvals[0] - 4.0).abs() / 4.0 < 0.05);
        assert!((p.eigvals[1] - 1.0).abs() < 0.05);
        let axes = Tensor::eye(2);
        assert!(subspace_angle(&axes, &p.top(2)).unwrap() < 5.0);
    }

    #[test]
    fn pca_rotation_invariant_eigvals() {
        let mut rng = Rng::new(8);
        let (n, d) = (500, 4);
        let x = Tensor::normal(&[n, d], 0.0, 1.0, &mut rng);
        let q = {
            let (_, v) = jacobi_eigen(&random_psd(d, &mut rng), d).unwrap();
            Tensor::new(&[d, d], v).unwrap()
        };
        let xq = naive_matmul(&x, &q.transpose().unwrap()).unwrap();
        let a = exact_pca(&x).unwrap();
        let b = exact_pca(&xq).unwrap();
        for (u, v) in a.eigvals.iter().zip(&b.eigvals) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn subspace_angle_cases() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let aligned = Tensor::new(&[2, 1], vec![-3.0, 0.0]).unwrap();
        assert!(subspace_angle(&w, &aligned).unwrap().abs() < 1e-12);
        let ortho = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert!((subspace_angle(&w, &ortho).unwrap() - 90.0).abs() < 1e-12);
        let zero = Tensor::new(&[2, 1], vec![0.0, 0.0]).unwrap();
        assert!(subspace_angle(&w, &zero).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let x = Tensor::new(&[2, 1], vec![1.0, f64::NAN]).unwrap();
        assert!(exact_pca(&x).is_err());
    }

    #[test]
    fn kmeans_two_blobs() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.2, 0.0], vec![5.0, 5.0], vec![5.0, 5.4]]).unwrap();
        let init = Tensor::from_rows(&[vec![1.0, 1.0], vec![4.0, 4.0]]).unwrap();
        let c = kmeans(&x, &init, 10).unwrap();
        assert_eq!(c.data(), &[0.1, 0.0, 5.0, 5.2]);
    }

    #[test]
    fn conv_reference_single_patch_is_sanger() {
        // One patch, one neuron, identity: Δw = η y (x − y w).
        let w = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let patches = Tensor::new(&[1, 1, 2], vec![2.0, 1.0]).unwrap();
        let (nw, mean) = conv_hebbian_reference(&w, &Tensor::zeros(&[2]), &patches, 0.1, 0.0, |v| v).unwrap();
        assert_eq!(mean.data(), &[0.0, 0.0]);
        // y = 2, x − y w = [0, 1]
        assert!((nw.data()[0] - 1.0).abs() < 1e-15);
        assert!((nw.data()[1] - 0.2).abs() < 1e-15);
    }
}
