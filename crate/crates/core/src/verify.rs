//! Quick self-checks of the learning rules and kernels against the oracles.

use crate::autodiff::{backward, forward, Tape};
use crate::data::synth_gaussian_stream;
use crate::error::Result;
use crate::hebbian::{Activation, HebbianLayerState, RuleKind};
use crate::layers::{ops, BatchNormState, BnMode, Layer};
use crate::oracle::{conv_hebbian_reference, direct_conv2d, exact_pca, kmeans, naive_matmul, subspace_angle};
use crate::rng::Rng;
use crate::tensor::{im2col, matmul, Tensor};

/// Outcome of one check: `value` must stay below `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub unit: &'static str,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value < self.threshold
    }
}

/// Eigenvalues of the planted-covariance stream.
pub const PLANTED_EIGVALS: [f64; 5] = [9.0, 4.0, 1.0, 0.25, 0.04];

/// Trains three linear HPCA neurons online on the planted stream and returns
/// the largest angle, in degrees, to the exact top-3 eigenvectors of the
/// samples seen.
pub fn hpca_pca_angle(seed: u64, steps: usize, eta: f64) -> Result<f64> {
    let mut stream = synth_gaussian_stream(5, &PLANTED_EIGVALS, seed)?;
    let mut state = HebbianLayerState::new(3, 5, eta, &mut Rng::new(seed))?;
    let samples = stream.next_batch(steps);
    for s in 0..steps {
        let x = Tensor::new(&[1, 5], samples.row(s).to_vec())?;
        let delta = state.batch_delta(&x, RuleKind::LinearHpca)?;
        state.apply(&delta)?;
    }
    let pca = exact_pca(&samples)?;
    subspace_angle(state.weights(), &pca.top(3))
}

/// Two-neuron WTA on two Gaussian clusters centred at (2, 0.5) and
/// (0.5, 2) with standard deviation 0.1. Returns the largest distance from a
/// weight to the sample mean of the cluster it claims, and the largest
/// distance to the k-means centroids started from the same weights; the
/// first is infinite when both neurons claim the same cluster.
pub fn wta_centroid_error(seed: u64, steps: usize, eta: f64) -> Result<(f64, f64)> {
    let centres = [[2.0, 0.5], [0.5, 2.0]];
    let mut rng = Rng::new(seed);
    let init = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let mut state = HebbianLayerState::from_weights(init.clone(), eta, 0.1)?;
    let mut rows = Vec::with_capacity(steps);
    let mut labels = Vec::with_capacity(steps);
    for _ in 0..steps {
        let c = rng.below(2);
        let x = vec![centres[c][0] + 0.1 * rng.normal(), centres[c][1] + 0.1 * rng.normal()];
        let delta = state.wta_update(&Tensor::from_vec(x.clone()))?;
        state.apply(&delta)?;
        rows.push(x);
        labels.push(c);
    }
    let mut means = [[0.0; 2]; 2];
    let mut counts = [0usize; 2];
    for (x, &c) in rows.iter().zip(&labels) {
        means[c][0] += x[0];
        means[c][1] += x[1];
        counts[c] += 1;
    }
    for c in 0..2 {
        means[c][0] /= counts[c].max(1) as f64;
        means[c][1] /= counts[c].max(1) as f64;
    }
    let w = state.weights();
    let dist = |i: usize, m: &[f64]| ((w.at(&[i, 0]) - m[0]).powi(2) + (w.at(&[i, 1]) - m[1]).powi(2)).sqrt();
    let claimed: Vec<usize> = (0..2).map(|i| if dist(i, &means[0]) <= dist(i, &means[1]) { 0 } else { 1 }).collect();
    let to_means =
        if claimed[0] == claimed[1] { f64::INFINITY } else { (0..2).map(|i| dist(i, &means[claimed[i]])).fold(0.0, f64::max) };
    let samples = Tensor::from_rows(&rows)?;
    let km = kmeans(&samples, &init, 100)?;
    let to_kmeans = (0..2).map(|i| dist(i, km.row(i))).fold(0.0, f64::max);
    Ok((to_means, to_kmeans))
}

/// Largest absolute difference between `conv_hebbian_step` and the
/// explicit per-offset loop on random patches.
pub fn conv_step_deviation(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let images = Tensor::normal(&[3, 2, 6, 5], 0.3, 1.0, &mut rng);
    let patches = im2col(&images, (3, 3), (1, 1), (1, 1))?;
    let mut state = HebbianLayerState::new(4, 18, 0.05, &mut rng)?;
    state.set_running_input_mean(Tensor::normal(&[18], 0.0, 0.2, &mut rng))?;
    let (w, m) = conv_hebbian_reference(
        state.weights(),
        state.running_input_mean(),
        &patches,
        state.learning_rate(),
        state.mean_momentum(),
        |v| Activation::Relu.eval(v),
    )?;
    state.conv_hebbian_step(&patches, RuleKind::NonlinearHpca(Activation::Relu))?;
    Ok(state.weights().max_abs_diff(&w).max(state.running_input_mean().max_abs_diff(&m)))
}

/// Largest absolute difference between the im2col convolution and the
/// direct loop, and between the blocked and naive matrix products.
pub fn kernel_deviation(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let x = Tensor::normal(&[2, 3, 9, 7], 0.0, 1.0, &mut rng);
    let w = Tensor::normal(&[5, 3, 3, 3], 0.0, 1.0, &mut rng);
    let b = Tensor::normal(&[5], 0.0, 1.0, &mut rng);
    let fast = ops::conv_forward(&x, &w, &b, 2, 1)?;
    let slow = direct_conv2d(&x, &w, Some(&b), (2, 2), (1, 1))?;
    let a = Tensor::normal(&[37, 29], 0.0, 1.0, &mut rng);
    let c = Tensor::normal(&[29, 41], 0.0, 1.0, &mut rng);
    Ok(fast.max_abs_diff(&slow).max(matmul(&a, &c)?.max_abs_diff(&naive_matmul(&a, &c)?)))
}

fn probe_loss(layers: &[Layer], x: &Tensor, r: &Tensor, seed: u64) -> Result<f64> {
    let mut l = layers.to_vec();
    let y = forward(&mut l, x, &mut Rng::new(seed), &mut Tape::new(), true)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(a).max(scale(n)).max(GRAD_FLOOR)
}

/// Gradient norm below which errors are measured absolutely; a conv bias
/// feeding a batch norm has an exactly zero gradient, and central
/// differences return rounding noise for it.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Worst relative error `‖g − ĝ‖/max(‖g‖, ‖ĝ‖, GRAD_FLOOR)` between backpropagated and
/// central-difference gradients of `Σ r ⊙ f(x)` for a random `r`, over the
/// input and every parameter tensor. Batch norms use batch statistics and the
/// dropout mask is held fixed by reseeding every forward pass.
pub fn gradient_check(layers: &[Layer], x: &Tensor, h: f64, seed: u64) -> Result<f64> {
    let mut l = layers.to_vec();
    let mut tape = Tape::new();
    let y = forward(&mut l, x, &mut Rng::new(seed), &mut tape, true)?;
    let r = Tensor::normal(y.shape(), 0.0, 1.0, &mut Rng::with_stream(seed, 1));
    let grads = backward(&l, &tape, r.clone())?;
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        numeric.push((probe_loss(layers, &xp, &r, seed)? - probe_loss(layers, &xm, &r, seed)?) / (2.0 * h));
    }
    let mut worst = relative_error(grads.input.data(), &numeric);
    for (li, layer) in layers.iter().enumerate() {
        for (pi, p) in layer.params().iter().enumerate() {
            let mut numeric = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                let mut plus = layers.to_vec();
                plus[li].params_mut()[pi].data_mut()[j] += h;
                let mut minus = layers.to_vec();
                minus[li].params_mut()[pi].data_mut()[j] -= h;
                numeric.push((probe_loss(&plus, x, &r, seed)? - probe_loss(&minus, x, &r, seed)?) / (2.0 * h));
            }
            worst = worst.max(relative_error(grads.layers[li][pi].data(), &numeric));
        }
    }
    Ok(worst)
}

/// Conv · BN · ReLU · pool · flatten · FC on a 2×3×8×8 batch.
pub fn composed_stack(rng: &mut Rng) -> Vec<Layer> {
    let b = 1.0 / 27f64.sqrt();
    let mut bn = BatchNormState::new(4);
    bn.gamma = Tensor::uniform(&[4], 0.5, 1.5, rng);
    bn.beta = Tensor::normal(&[4], 0.0, 0.1, rng);
    vec![
        Layer::Conv {
            weight: Tensor::uniform(&[4, 3, 3, 3], -b, b, rng),
            bias: Tensor::uniform(&[4], -b, b, rng),
            stride: 1,
            pad: 1,
        },
        Layer::BatchNorm { state: bn, mode: BnMode::Standard },
        Layer::Relu,
        Layer::MaxPool { kernel: (2, 2), stride: 2 },
        Layer::Flatten,
        Layer::fc(64, 5, rng),
    ]
}

/// Gradient check of [`composed_stack`] with `h = 1e-5`.
pub fn composed_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let layers = composed_stack(&mut rng);
    let x = Tensor::normal(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    gradient_check(&layers, &x, 1e-5, seed)
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let (wta_means, wta_kmeans) = wta_centroid_error(seed, 2000, 0.01)?;
    Ok(vec![
        Check { name: "linear HPCA vs exact PCA", value: hpca_pca_angle(seed, 20_000, 5e-3)?, threshold: 8.0, unit: "deg" },
        Check { name: "WTA weights vs cluster means", value: wta_means, threshold: 0.1, unit: "" },
        Check { name: "WTA weights vs k-means", value: wta_kmeans, threshold: 0.1, unit: "" },
        Check { name: "conv Hebbian step vs per-offset loop", value: conv_step_deviation(seed)?, threshold: 1e-10, unit: "" },
        Check { name: "im2col conv and GEMM vs direct loops", value: kernel_deviation(seed)?, threshold: 1e-10, unit: "" },
        Check { name: "backprop vs finite differences", value: composed_gradient_error(seed)?, threshold: 1e-4, unit: "" },
    ])
}
