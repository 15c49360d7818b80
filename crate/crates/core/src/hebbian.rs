//! Local plasticity rules: plain Hebb, decay Hebb, winner-takes-all and the
//! (non)linear Hebbian PCA rule, plus the weight-sharing update used for
//! convolutional filters.
//!
//! All rules compute deltas from the same pre-update weights for every sample
//! of a batch, average them, and apply once.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Default momentum of the running input mean.
pub const DEFAULT_MEAN_MOMENTUM: f64 = 0.1;

/// Pointwise neuron nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn eval(self, y: f64) -> f64 {
        match self {
            Activation::Identity => y,
            Activation::Relu => y.max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RuleKind {
    /// `Δw = η y x`
    PlainHebb,
    /// `Δw = η y (x − w)` on every neuron.
    DecayHebb,
    /// `Δw = η y (x − w)` on the closest neuron only.
    Wta,
    /// Sanger's rule, `f = identity`.
    LinearHpca,
    /// `Δw_i = η f(y_i) (x − Σ_{j≤i} f(y_j) w_j)`
    NonlinearHpca(Activation),
}

impl RuleKind {
    /// The activation entering the reconstruction, when the rule has one.
    pub fn hpca_activation(self) -> Option<Activation> {
        match self {
            RuleKind::LinearHpca => Some(Activation::Identity),
            RuleKind::NonlinearHpca(f) => Some(f),
            _ => None,
        }
    }

    fn reconstruction_activation(self) -> Activation {
        self.hpca_activation().unwrap_or(Activation::Identity)
    }
}

/// Weights of one Hebbian layer and the running input mean used to center
/// its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HebbianLayerState {
    weights: Tensor,
    running_input_mean: Tensor,
    mean_momentum: f64,
    learning_rate: f64,
}

impl HebbianLayerState {
    /// Uniform init in `[−1/√d, 1/√d]`, zero running mean.
    pub fn new(num_neurons: usize, input_dim: usize, learning_rate: f64, rng: &mut Rng) -> Result<Self> {
        if num_neurons == 0 || input_dim == 0 {
            return Err(Error::arg("hebbian layer needs at least one neuron and one input"));
        }
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weights = Tensor::uniform(&[num_neurons, input_dim], -bound, bound, rng);
        Self::from_weights(weights, learning_rate, DEFAULT_MEAN_MOMENTUM)
    }

    pub fn from_weights(weights: Tensor, learning_rate: f64, mean_momentum: f64) -> Result<Self> {
        let [_, d] = weights.matrix_dims("hebbian weights")?;
        if !(learning_rate > 0.0) {
            return Err(Error::arg(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(mean_momentum > 0.0 && mean_momentum <= 1.0) {
            return Err(Error::arg(format!("mean momentum must lie in (0, 1], got {mean_momentum}")));
        }
        Ok(HebbianLayerState {
            weights,
            running_input_mean: Tensor::zeros(&[d]),
            mean_momentum,
            learning_rate,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn running_input_mean(&self) -> &Tensor {
        &self.running_input_mean
    }

    pub fn set_running_input_mean(&mut self, mean: Tensor) -> Result<()> {
        if mean.shape() != self.running_input_mean.shape() {
            return Err(Error::dim(format!(
                "running mean shape {:?}, expected {:?}",
                mean.shape(),
                self.running_input_mean.shape()
            )));
        }
        self.running_input_mean = mean;
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn mean_momentum(&self) -> f64 {
        self.mean_momentum
    }

    pub fn num_neurons(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    fn check_vector(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "input of length {} for a layer with input_dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize> {
        let [b, d] = x.matrix_dims("hebbian batch")?;
        if d != self.input_dim() {
            return Err(Error::dim(format!(
                "batch of shape {:?} for a layer with input_dim {}",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(b)
    }

    fn responses(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        (0..self.num_neurons())
            .map(|i| {
                let w = &self.weights.data()[i * d..(i + 1) * d];
                w.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// `ΔW[i] = η y_i x`. Pure; the state is not modified.
    pub fn plain_hebb_update(&self, x: &Tensor) -> Result<Tensor> {
        self.check_vector(x)?;
        let d = self.input_dim();
        let y = self.responses(x.data());
        let mut delta = Tensor::zeros(self.weights.shape());
        for (i, yi) in y.iter().enumerate() {
            let row = &mut delta.data_mut()[i * d..(i + 1) * d];
            for (r, xv) in row.iter_mut().zip(x.data()) {
                *r = self.learning_rate * yi * xv;
            }
        }
        Ok(delta)
    }

    /// `ΔW[i] = η y_i (x − w_i)` on every neuron.
    pub fn decay_hebb_update(&self, x: &Tensor) -> Result<Tensor> {
        self.check_vector(x)?;
        let d = self.input_dim();
        let y = self.responses(x.data());
        let mut delta = Tensor::zeros(self.weights.shape());
        for (i, yi) in y.iter().enumerate() {
            let w = &self.weights.data()[i * d..(i + 1) * d];
            let row = &mut delta.data_mut()[i * d..(i + 1) * d];
            for ((r, xv), wv) in row.iter_mut().zip(x.data()).zip(w) {
                *r = self.learning_rate * yi * (xv - wv);
            }
        }
        Ok(delta)
    }

    /// Index of the neuron whose weights are closest (Euclidean) to `x`;
    /// ties go to the lowest index.
    pub fn winner(&self, x: &Tensor) -> Result<usize> {
        self.check_vector(x)?;
        let d = self.input_dim();
        let mut best = (0, f64::INFINITY);
        for i in 0..self.num_neurons() {
            let w = &self.weights.data()[i * d..(i + 1) * d];
            let dist: f64 = w.iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (i, dist);
            }
        }
        Ok(best.0)
    }

    /// Winner-takes-all: only the closest neuron moves, by `η y (x − w)`.
    pub fn wta_update(&self, x: &Tensor) -> Result<Tensor> {
        let win = self.winner(x)?;
        let d = self.input_dim();
        let w = &self.weights.data()[win * d..(win + 1) * d];
        let y: f64 = w.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let mut delta = Tensor::zeros(self.weights.shape());
        let row = &mut delta.data_mut()[win * d..(win + 1) * d];
        for ((r, xv), wv) in row.iter_mut().zip(x.data()).zip(w) {
            *r = self.learning_rate * y * (xv - wv);
        }
        Ok(delta)
    }

    /// Hebbian PCA delta for a centered batch `x: batch×d`, averaged over the
    /// batch. Each sample contributes
    /// `η f(y_i) (x − Σ_{j≤i} f(y_j) w_j)` to row `i`.
    pub fn hpca_update(&self, x: &Tensor, rule: RuleKind) -> Result<Tensor> {
        let f = rule
            .hpca_activation()
            .ok_or_else(|| Error::arg(format!("{rule:?} is not a Hebbian PCA rule")))?;
        let b = self.check_batch(x)?;
        let (n, d) = (self.num_neurons(), self.input_dim());
        let mut delta = vec![0.0; n * d];
        let mut recon = vec![0.0; d];
        for s in 0..b {
            let xs = x.row(s);
            let fy: Vec<f64> = self.responses(xs).into_iter().map(|y| f.eval(y)).collect();
            recon.fill(0.0);
            for i in 0..n {
                let wi = &self.weights.data()[i * d..(i + 1) * d];
                for (r, w) in recon.iter_mut().zip(wi) {
                    *r += fy[i] * w;
                }
                if fy[i] == 0.0 {
                    continue;
                }
                let row = &mut delta[i * d..(i + 1) * d];
                for ((dv, xv), r) in row.iter_mut().zip(xs).zip(&recon) {
                    *dv += fy[i] * (xv - r);
                }
            }
        }
        let k = self.learning_rate / b.max(1) as f64;
        for v in &mut delta {
            *v *= k;
        }
        Tensor::new(&[n, d], delta)
    }

    /// Mean over the batch of `‖x − Σ_j f(y_j) w_j‖²` over all neurons.
    pub fn representation_error(&self, x: &Tensor, rule: RuleKind) -> Result<f64> {
        let b = self.check_batch(x)?;
        if b == 0 {
            return Ok(0.0);
        }
        let f = rule.reconstruction_activation();
        let d = self.input_dim();
        let mut total = 0.0;
        let mut resid = vec![0.0; d];
        for s in 0..b {
            let xs = x.row(s);
            let y = self.responses(xs);
            resid.copy_from_slice(xs);
            for (i, yi) in y.iter().enumerate() {
                let fy = f.eval(*yi);
                let wi = &self.weights.data()[i * d..(i + 1) * d];
                for (r, w) in resid.iter_mut().zip(wi) {
                    *r -= fy * w;
                }
            }
            total += resid.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(total / b as f64)
    }

    /// Centers a batch `x: batch×d`. In training mode the running mean is
    /// first moved toward the batch mean; in evaluation it is left frozen.
    pub fn center_inputs(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        let b = self.check_batch(x)?;
        let d = self.input_dim();
        if training && b > 0 {
            let mut batch_mean = vec![0.0; d];
            for s in 0..b {
                for (m, v) in batch_mean.iter_mut().zip(x.row(s)) {
                    *m += v;
                }
            }
            let m = self.mean_momentum;
            for (r, bm) in self.running_input_mean.data_mut().iter_mut().zip(&batch_mean) {
                *r = (1.0 - m) * *r + m * (bm / b as f64);
            }
        }
        let mut out = x.clone();
        for s in 0..b {
            for (v, mu) in out.row_mut(s).iter_mut().zip(self.running_input_mean.data()) {
                *v -= mu;
            }
        }
        Ok(out)
    }

    /// Averaged delta over a centered batch for any rule, computed from the
    /// current weights.
    pub fn batch_delta(&self, x: &Tensor, rule: RuleKind) -> Result<Tensor> {
        self.batch_delta_with_responses(x, rule).map(|(delta, _)| delta)
    }

    /// [`Self::batch_delta`] together with the linear responses `X Wᵀ`
    /// (`batch×neurons`) of the current weights.
    pub fn batch_delta_with_responses(&self, x: &Tensor, rule: RuleKind) -> Result<(Tensor, Tensor)> {
        let b = self.check_batch(x)?;
        let (n, d) = (self.num_neurons(), self.input_dim());
        let mut y = vec![0.0; b * n];
        gemm_nt(b, d, n, x.data(), self.weights.data(), &mut y);
        if let Some(f) = rule.hpca_activation() {
            let delta = self.hpca_delta_gemm(x.data(), &y, b, f);
            return Ok((delta, Tensor::new(&[b, n], y)?));
        }
        let mut acc = Tensor::zeros(self.weights.shape());
        for s in 0..b {
            let xs = Tensor::from_vec(x.row(s).to_vec());
            let delta = match rule {
                RuleKind::PlainHebb => self.plain_hebb_update(&xs)?,
                RuleKind::DecayHebb => self.decay_hebb_update(&xs)?,
                RuleKind::Wta => self.wta_update(&xs)?,
                RuleKind::LinearHpca | RuleKind::NonlinearHpca(_) => unreachable!(),
            };
            acc.axpy(1.0, &delta)?;
        }
        Ok((acc.scale(1.0 / b.max(1) as f64), Tensor::new(&[b, n], y)?))
    }

    /// Matrix form of the batch-averaged HPCA delta:
    /// `η/B · (Fᵀ X − tril(Fᵀ F) W)` with `F = f(Y)`, `Y = X Wᵀ`.
    fn hpca_delta_gemm(&self, x: &[f64], y: &[f64], b: usize, f: Activation) -> Tensor {
        let (n, d) = (self.num_neurons(), self.input_dim());
        let w = self.weights.data();
        let fy: Vec<f64> = y.iter().map(|v| f.eval(*v)).collect();
        let mut hebb = vec![0.0; n * d];
        gemm_tn(n, b, d, &fy, x, &mut hebb);
        let mut gram = vec![0.0; n * n];
        gemm_tn(n, b, n, &fy, &fy, &mut gram);
        for i in 0..n {
            let row = &mut hebb[i * d..(i + 1) * d];
            for j in 0..=i {
                let g = gram[i * n + j];
                if g == 0.0 {
                    continue;
                }
                for (h, wv) in row.iter_mut().zip(&w[j * d..(j + 1) * d]) {
                    *h -= g * wv;
                }
            }
        }
        let k = self.learning_rate / b.max(1) as f64;
        for v in &mut hebb {
            *v *= k;
        }
        Tensor::new(&[n, d], hebb).expect("shape is consistent")
    }

    pub fn apply(&mut self, delta: &Tensor) -> Result<()> {
        self.weights.axpy(1.0, delta)?;
        if !self.weights.is_finite() {
            return Err(Error::Numerical("hebbian weights diverged".into()));
        }
        Ok(())
    }

    /// One unsupervised step on a raw batch `x: batch×d`: update the running
    /// mean, center, compute the averaged delta and apply it.
    pub fn train_step(&mut self, x: &Tensor, rule: RuleKind) -> Result<()> {
        let centered = self.center_inputs(x, true)?;
        let delta = self.batch_delta(&centered, rule)?;
        self.apply(&delta)
    }

    /// Convolutional step on `patches: B×P×D` as produced by
    /// [`im2col`](crate::tensor::im2col). Every patch counts as one input;
    /// deltas are averaged over batch and spatial offsets and applied once to
    /// the shared filters.
    pub fn conv_hebbian_step(&mut self, patches: &Tensor, rule: RuleKind) -> Result<()> {
        let (b, p, d) = match patches.shape()[..] {
            [b, p, d] => (b, p, d),
            _ => {
                return Err(Error::dim(format!(
                    "conv_hebbian_step expects B×P×D patches, got {:?}",
                    patches.shape()
                )))
            }
        };
        let flat = Tensor::new(&[b * p, d], patches.data().to_vec())?;
        self.train_step(&flat, rule)
    }

    /// Bias that makes `W x + b` equal to `W (x − mean)`.
    pub fn centering_bias(&self) -> Tensor {
        let d = self.input_dim();
        let mu = self.running_input_mean.data();
        let bias = (0..self.num_neurons())
            .map(|i| {
                let w = &self.weights.data()[i * d..(i + 1) * d];
                -w.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Tensor::from_vec(bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(rows: &[Vec<f64>], eta: f64) -> HebbianLayerState {
        HebbianLayerState::from_weights(Tensor::from_rows(rows).unwrap(), eta, DEFAULT_MEAN_MOMENTUM).unwrap()
    }

    #[test]
    fn plain_hebb_zero_input() {
        let s = state(&[vec![1.0, 0.5], vec![-0.2, 0.3]], 0.1);
        let d = s.plain_hebb_update(&Tensor::zeros(&[2])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_hebb_hand_example() {
        let s = state(&[vec![1.0, 0.0]], 0.1);
        let d = s.plain_hebb_update(&Tensor::from_vec(vec![2.0, 0.0])).unwrap();
        assert!((d.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn plain_hebb_grows_without_bound() {
        let mut s = state(&[vec![0.3, 0.1, -0.2]], 0.05);
        let x = Tensor::from_vec(vec![1.0, 0.5, -0.5]);
        let mut last = s.weights().norm();
        for _ in 0..100 {
            let d = s.plain_hebb_update(&x).unwrap();
            s.apply(&d).unwrap();
            let now = s.weights().norm();
            assert!(now > last);
            last = now;
        }
        assert!(last > 10.0);
    }

    #[test]
    fn dimension_errors() {
        let s = state(&[vec![1.0, 0.0]], 0.1);
        let x = Tensor::zeros(&[3]);
        assert!(matches!(s.plain_hebb_update(&x), Err(Error::Dimension(_))));
        assert!(matches!(s.wta_update(&x), Err(Error::Dimension(_))));
        assert!(matches!(
            s.hpca_update(&Tensor::zeros(&[2, 3]), RuleKind::LinearHpca),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn wta_fixed_point() {
        let s = state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.5);
        let d = s.wta_update(&Tensor::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wta_hand_example() {
        let s = state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        let d = s.wta_update(&Tensor::from_vec(vec![0.9, 0.1])).unwrap();
        assert!((d.data()[0] + 0.09).abs() < 1e-12);
        assert!((d.data()[1] - 0.09).abs() < 1e-12);
        assert_eq!(&d.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn wta_tie_goes_to_lowest_index() {
        let s = state(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        assert_eq!(s.winner(&Tensor::from_vec(vec![0.5, 0.5])).unwrap(), 0);
    }

    #[test]
    fn hpca_zero_batch_gives_zero() {
        let s = state(&[vec![0.3, -0.4], vec![0.1, 0.2]], 0.1);
        let d = s.hpca_update(&Tensor::zeros(&[4, 2]), RuleKind::NonlinearHpca(Activation::Relu)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hpca_orthogonal_input_no_response() {
        let s = state(&[vec![1.0, 0.0]], 1.0);
        let x = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let d = s.hpca_update(&x, RuleKind::LinearHpca).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hpca_rejects_non_hpca_rule() {
        let s = state(&[vec![1.0, 0.0]], 1.0);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(s.hpca_update(&x, RuleKind::Wta), Err(Error::Argument(_))));
    }

    #[test]
    fn hpca_single_sample_equals_textbook_sanger() {
        let mut rng = Rng::new(31);
        let s = HebbianLayerState::new(4, 6, 0.05, &mut rng).unwrap();
        let x = Tensor::normal(&[1, 6], 0.0, 1.0, &mut rng);
        let got = s.hpca_update(&x, RuleKind::LinearHpca).unwrap();

        // Reference double loop, same accumulation order.
        let w = s.weights().data();
        let (n, d) = (4, 6);
        let y: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|k| w[i * d + k] * x.data()[k]).sum())
            .collect();
        let mut want = vec![0.0; n * d];
        for i in 0..n {
            for k in 0..d {
                let mut recon = 0.0;
                for j in 0..=i {
                    recon += y[j] * w[j * d + k];
                }
                want[i * d + k] = 0.0 + y[i] * (x.data()[k] - recon);
            }
        }
        for (g, r) in got.data().iter().zip(&want) {
            assert_eq!(g.to_bits(), (r * (0.05 / 1.0)).to_bits());
        }
    }

    #[test]
    fn gemm_path_matches_per_sample_path() {
        let mut rng = Rng::new(12);
        let s = HebbianLayerState::new(5, 9, 0.01, &mut rng).unwrap();
        let x = Tensor::normal(&[13, 9], 0.0, 1.0, &mut rng);
        for rule in [RuleKind::LinearHpca, RuleKind::NonlinearHpca(Activation::Relu)] {
            let a = s.hpca_update(&x, rule).unwrap();
            let b = s.batch_delta(&x, rule).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-14);
        }
    }

    #[test]
    fn representation_error_orthonormal_basis_is_zero() {
        let s = state(&[vec![0.6, 0.8], vec![-0.8, 0.6]], 0.1);
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.3, 0.7]]).unwrap();
        assert!(s.representation_error(&x, RuleKind::LinearHpca).unwrap() < 1e-24);
    }

    #[test]
    fn representation_error_zero_weights() {
        let s = state(&[vec![0.0, 0.0]], 0.1);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let e = s.representation_error(&x, RuleKind::NonlinearHpca(Activation::Relu)).unwrap();
        assert!((e - 7.0).abs() < 1e-12);
    }

    #[test]
    fn representation_error_permutation_invariant() {
        let mut rng = Rng::new(3);
        let s = HebbianLayerState::new(3, 4, 0.1, &mut rng).unwrap();
        let x = Tensor::normal(&[8, 4], 0.0, 1.0, &mut rng);
        let rev: Vec<usize> = (0..8).rev().collect();
        let a = s.representation_error(&x, RuleKind::LinearHpca).unwrap();
        let b = s.representation_error(&x.gather_rows(&rev), RuleKind::LinearHpca).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn center_constant_stream() {
        let mut s = state(&[vec![1.0, 0.0, 0.0]], 0.1);
        let x = Tensor::from_rows(&vec![vec![2.0, -1.0, 0.5]; 4]).unwrap();
        let mut out = x.clone();
        for _ in 0..400 {
            out = s.center_inputs(&x, true).unwrap();
        }
        assert!(s.running_input_mean().max_abs_diff(&Tensor::from_vec(vec![2.0, -1.0, 0.5])) < 1e-12);
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn center_momentum_one_uses_batch_mean() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mut s = HebbianLayerState::from_weights(w, 0.1, 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, -2.0], vec![5.0, 1.0]]).unwrap();
        let c = s.center_inputs(&x, true).unwrap();
        for j in 0..2 {
            let m: f64 = (0..3).map(|i| c.at(&[i, j])).sum();
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn center_eval_is_frozen() {
        let mut s = state(&[vec![1.0, 0.0]], 0.1);
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        s.center_inputs(&x, true).unwrap();
        let before = s.running_input_mean().clone();
        s.center_inputs(&Tensor::from_rows(&[vec![9.0, 9.0]]).unwrap(), false).unwrap();
        assert_eq!(&before, s.running_input_mean());
    }

    #[test]
    fn conv_step_identical_patches_match_single_patch() {
        let mut rng = Rng::new(5);
        let base = HebbianLayerState::new(3, 4, 0.05, &mut rng).unwrap();
        let patch = Tensor::normal(&[4], 0.0, 1.0, &mut rng);
        let mut data = Vec::new();
        for _ in 0..2 * 6 {
            data.extend_from_slice(patch.data());
        }
        let patches = Tensor::new(&[2, 6, 4], data).unwrap();
        let single = Tensor::new(&[1, 1, 4], patch.data().to_vec()).unwrap();
        let rule = RuleKind::NonlinearHpca(Activation::Relu);
        let mut a = base.clone();
        a.conv_hebbian_step(&patches, rule).unwrap();
        let mut b = base.clone();
        b.conv_hebbian_step(&single, rule).unwrap();
        assert!(a.weights().max_abs_diff(b.weights()) < 1e-14);
    }

    #[test]
    fn conv_step_single_patch_equals_hpca_update() {
        let mut rng = Rng::new(6);
        let base = HebbianLayerState::new(3, 5, 0.05, &mut rng).unwrap();
        let x = Tensor::normal(&[1, 1, 5], 0.0, 1.0, &mut rng);
        let rule = RuleKind::LinearHpca;
        let mut a = base.clone();
        a.conv_hebbian_step(&x, rule).unwrap();

        let mut b = base.clone();
        let flat = x.clone().reshape(&[1, 5]).unwrap();
        let centered = b.center_inputs(&flat, true).unwrap();
        let d = b.hpca_update(&centered, rule).unwrap();
        b.apply(&d).unwrap();
        assert!(a.weights().max_abs_diff(b.weights()) < 1e-14);
    }

    #[test]
    fn centering_bias_reproduces_centered_response() {
        let mut rng = Rng::new(2);
        let mut s = HebbianLayerState::new(2, 3, 0.1, &mut rng).unwrap();
        s.set_running_input_mean(Tensor::from_vec(vec![0.5, -1.0, 2.0])).unwrap();
        let x = [1.0, 2.0, 3.0];
        let b = s.centering_bias();
        for i in 0..2 {
            let w = s.weights().row(i);
            let direct: f64 = w.iter().zip(x).zip(s.running_input_mean().data()).map(|((w, x), m)| w * (x - m)).sum();
            let affine: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b.data()[i];
            assert!((direct - affine).abs() < 1e-12);
        }
    }
}
