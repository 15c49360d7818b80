use hebbseed_core::layers::{ArchConfig, BatchNormState, BnMode, Layer, Network, NetworkSpec};
use hebbseed_core::sgd::cross_entropy;
use hebbseed_core::verify::{composed_gradient_error, gradient_check};
use hebbseed_core::{Rng, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn conv(cin: usize, cout: usize, k: (usize, usize), stride: usize, pad: usize, rng: &mut Rng) -> Layer {
    let b = 1.0 / ((cin * k.0 * k.1) as f64).sqrt();
    Layer::Conv {
        weight: Tensor::uniform(&[cout, cin, k.0, k.1], -b, b, rng),
        bias: Tensor::uniform(&[cout], -b, b, rng),
        stride,
        pad,
    }
}

fn bn(channels: usize, mode: BnMode, rng: &mut Rng) -> Layer {
    let mut state = BatchNormState::new(channels);
    state.gamma = Tensor::uniform(&[channels], 0.5, 1.5, rng);
    state.beta = Tensor::normal(&[channels], 0.0, 0.2, rng);
    Layer::BatchNorm { state, mode }
}

struct Case {
    name: &'static str,
    layers: Vec<Layer>,
    input: Vec<usize>,
}

fn cases() -> Vec<Case> {
    let rng = &mut Rng::new(11);
    let c = |name, layers, input: &[usize]| Case { name, layers, input: input.to_vec() };
    vec![
        c("conv 3x3 pad 1", vec![conv(2, 3, (3, 3), 1, 1, rng)], &[2, 2, 5, 5]),
        c("conv 3x3 no pad", vec![conv(3, 2, (3, 3), 1, 0, rng)], &[2, 3, 6, 5]),
        c("conv 5x5 pad 2", vec![conv(3, 4, (5, 5), 1, 2, rng)], &[2, 3, 6, 6]),
        c("conv 1x1", vec![conv(4, 3, (1, 1), 1, 0, rng)], &[3, 4, 3, 3]),
        c("conv stride 2", vec![conv(2, 3, (3, 3), 2, 1, rng)], &[2, 2, 7, 7]),
        c("conv rectangular kernel", vec![conv(2, 2, (2, 3), 1, 1, rng)], &[2, 2, 4, 6]),
        c("conv single image", vec![conv(1, 2, (3, 3), 1, 1, rng)], &[1, 1, 5, 4]),
        c("fc", vec![Layer::fc(7, 4, rng)], &[3, 7]),
        c("fc wide", vec![Layer::fc(3, 11, rng)], &[2, 3]),
        c("fc relu", vec![Layer::fc(6, 5, rng), Layer::Relu], &[4, 6]),
        c("maxpool 2x2", vec![Layer::MaxPool { kernel: (2, 2), stride: 2 }], &[2, 3, 6, 6]),
        c("maxpool 3x3 stride 1", vec![Layer::MaxPool { kernel: (3, 3), stride: 1 }], &[2, 2, 5, 5]),
        c("maxpool odd input", vec![Layer::MaxPool { kernel: (2, 2), stride: 2 }], &[1, 2, 5, 7]),
        c("batchnorm 4d", vec![bn(3, BnMode::Standard, rng)], &[4, 3, 3, 3]),
        c("batchnorm 2d", vec![bn(5, BnMode::Standard, rng)], &[6, 5]),
        c("variance-averaged batchnorm 4d", vec![bn(3, BnMode::VarianceAveraged, rng)], &[3, 3, 2, 4]),
        c("variance-averaged batchnorm 2d", vec![bn(4, BnMode::VarianceAveraged, rng)], &[5, 4]),
        c("dropout fc", vec![Layer::fc(8, 6, rng), Layer::Dropout { rate: 0.5 }, Layer::fc(6, 3, rng)], &[3, 8]),
        c("flatten fc", vec![Layer::Flatten, Layer::fc(12, 4, rng)], &[2, 3, 2, 2]),
        c(
            "conv bn relu",
            vec![conv(2, 3, (3, 3), 1, 1, rng), bn(3, BnMode::Standard, rng), Layer::Relu],
            &[3, 2, 4, 4],
        ),
        c(
            "conv pool conv",
            vec![
                conv(2, 3, (3, 3), 1, 1, rng),
                Layer::MaxPool { kernel: (2, 2), stride: 2 },
                conv(3, 2, (3, 3), 1, 1, rng),
            ],
            &[2, 2, 6, 6],
        ),
        c(
            "fc bn relu fc",
            vec![Layer::fc(6, 5, rng), bn(5, BnMode::VarianceAveraged, rng), Layer::Relu, Layer::fc(5, 3, rng)],
            &[4, 6],
        ),
        c(
            "conv stack to logits",
            vec![
                conv(3, 4, (5, 5), 1, 2, rng),
                bn(4, BnMode::Standard, rng),
                Layer::Relu,
                Layer::MaxPool { kernel: (2, 2), stride: 2 },
                conv(4, 3, (3, 3), 1, 1, rng),
                bn(3, BnMode::VarianceAveraged, rng),
                Layer::Relu,
                Layer::Flatten,
                Layer::fc(27, 4, rng),
            ],
            &[2, 3, 6, 6],
        ),
    ]
}

#[test]
fn every_layer_combination_matches_finite_differences() {
    let cases = cases();
    assert!(cases.len() >= 20);
    for (i, case) in cases.iter().enumerate() {
        let x = Tensor::normal(&case.input, 0.1, 1.0, &mut Rng::with_stream(5, i as u64));
        let err = gradient_check(&case.layers, &x, H, i as u64).unwrap();
        assert!(err < TOL, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn composed_six_layer_stack() {
    for seed in 0..3 {
        let err = composed_gradient_error(seed).unwrap();
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn small_five_block_network() {
    let mut arch = ArchConfig::scaled(4, 32);
    arch.input_shape = (3, 8, 8);
    let net = Network::new(NetworkSpec::five_block(&arch), &mut Rng::new(2)).unwrap();
    let x = Tensor::normal(&[3, 3, 8, 8], 0.0, 1.0, &mut Rng::new(3));
    let err = gradient_check(net.layers(), &x, H, 4).unwrap();
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn cross_entropy_on_top_of_a_stack() {
    let rng = &mut Rng::new(9);
    let mut layers = vec![conv(2, 3, (3, 3), 1, 1, rng), Layer::Relu, Layer::Flatten, Layer::fc(48, 4, rng)];
    let x = Tensor::normal(&[3, 2, 4, 4], 0.0, 1.0, rng);
    let labels = [0, 3, 1];
    let loss = |layers: &[Layer]| -> f64 {
        let mut h = x.clone();
        for l in layers {
            h = l.forward_eval(&h).unwrap();
        }
        cross_entropy(&h, &labels).unwrap().0
    };
    let mut tape = hebbseed_core::autodiff::Tape::new();
    let logits = hebbseed_core::autodiff::forward(&mut layers, &x, rng, &mut tape, true).unwrap();
    let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
    let grads = hebbseed_core::autodiff::backward(&layers, &tape, dlogits).unwrap();
    let w = grads.layers[0][0].clone();
    let mut num = Vec::new();
    for j in 0..w.len() {
        let mut plus = layers.clone();
        plus[0].params_mut()[0].data_mut()[j] += H;
        let mut minus = layers.clone();
        minus[0].params_mut()[0].data_mut()[j] -= H;
        num.push((loss(&plus) - loss(&minus)) / (2.0 * H));
    }
    let diff: f64 = w.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(diff / w.norm() < TOL, "relative error {:e}", diff / w.norm());
}
