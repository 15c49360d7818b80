//! Layer kernels, the runtime layer stack and the five-block network.

pub mod ops;
pub mod spec;

pub use ops::{BatchNormState, BnMode};
pub use spec::{ArchConfig, LayerSpec, NetworkSpec, ProbePoint};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A layer with its parameters and buffers.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { weight: Tensor, bias: Tensor, stride: usize, pad: usize },
    MaxPool { kernel: (usize, usize), stride: usize },
    Relu,
    Dropout { rate: f64 },
    Fc { weight: Tensor, bias: Tensor },
    BatchNorm { state: BatchNormState, mode: BnMode },
    Flatten,
}

impl Layer {
    /// Fully connected layer with `U(−1/√in, 1/√in)` weights and bias.
    pub fn fc(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let b = 1.0 / (inputs as f64).sqrt();
        Layer::Fc {
            weight: Tensor::uniform(&[outputs, inputs], -b, b, rng),
            bias: Tensor::uniform(&[outputs], -b, b, rng),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::Fc { .. } => "fc",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Flatten => "flatten",
        }
    }

    /// Trainable parameters, in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Fc { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { state, .. } => vec![&state.gamma, &state.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Fc { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { state, .. } => vec![&mut state.gamma, &mut state.beta],
            _ => vec![],
        }
    }

    /// Parameters and buffers with their short names, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Fc { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            Layer::BatchNorm { state, .. } => vec![
                ("gamma", &state.gamma),
                ("beta", &state.beta),
                ("running_mean", &state.running_mean),
                ("running_var", &state.running_var),
            ],
            _ => vec![],
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Fc { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            Layer::BatchNorm { state, .. } => vec![
                ("gamma", &mut state.gamma),
                ("beta", &mut state.beta),
                ("running_mean", &mut state.running_mean),
                ("running_var", &mut state.running_var),
            ],
            _ => vec![],
        }
    }

    /// Inference forward; never touches state.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { weight, bias, stride, pad } => ops::conv_forward(x, weight, bias, *stride, *pad),
            Layer::MaxPool { kernel, stride } => Ok(ops::maxpool_forward(x, kernel.0, kernel.1, *stride)?.0),
            Layer::Relu => Ok(ops::relu_forward(x)),
            Layer::Dropout { .. } => Ok(x.clone()),
            Layer::Fc { weight, bias } => ops::linear_forward(x, weight, bias),
            Layer::BatchNorm { state, mode } => ops::batchnorm_eval(x, state, *mode),
            Layer::Flatten => Ok(x.clone().flatten_batch()),
        }
    }
}

/// Per-sample output shape of each layer of `spec`, starting from its input.
pub fn layer_shapes(spec: &NetworkSpec) -> Result<Vec<Vec<usize>>> {
    let (c, h, w) = spec.input_shape;
    let mut cur = vec![c, h, w];
    let mut shapes = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        cur = match (*l, cur.as_slice()) {
            (LayerSpec::Conv { out_channels, kernel, stride, pad }, &[_, h, w]) => {
                if kernel.0 > h + 2 * pad || kernel.1 > w + 2 * pad || stride == 0 {
                    return Err(Error::dim(format!("layer {i}: conv kernel does not fit {h}x{w}")));
                }
                vec![out_channels, (h + 2 * pad - kernel.0) / stride + 1, (w + 2 * pad - kernel.1) / stride + 1]
            }
            (LayerSpec::MaxPool { kernel, stride }, &[c, h, w]) => {
                if kernel.0 > h || kernel.1 > w || stride == 0 {
                    return Err(Error::dim(format!("layer {i}: pooling window does not fit {h}x{w}")));
                }
                vec![c, (h - kernel.0) / stride + 1, (w - kernel.1) / stride + 1]
            }
            (LayerSpec::Flatten, s) => vec![s.iter().product()],
            (LayerSpec::Fc { out_features }, &[_]) => vec![out_features],
            (LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::BatchNorm { .. }, s) => s.to_vec(),
            (l, s) => return Err(Error::dim(format!("layer {i}: {l:?} cannot take input of shape {s:?}"))),
        };
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

/// The five-block network with its runtime state.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Builds the network with PyTorch-style `U(−1/√fan_in, 1/√fan_in)`
    /// initialization. Batch norms start in standard mode.
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = layer_shapes(&spec)?;
        let (c, h, w) = spec.input_shape;
        let mut prev = vec![c, h, w];
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, shape) in spec.layers.iter().zip(&shapes) {
            let layer = match *l {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let fan_in = prev[0] * kernel.0 * kernel.1;
                    let b = 1.0 / (fan_in as f64).sqrt();
                    Layer::Conv {
                        weight: Tensor::uniform(&[out_channels, prev[0], kernel.0, kernel.1], -b, b, rng),
                        bias: Tensor::uniform(&[out_channels], -b, b, rng),
                        stride,
                        pad,
                    }
                }
                LayerSpec::Fc { out_features } => Layer::fc(prev[0], out_features, rng),
                LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool { kernel, stride },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dropout { rate } => Layer::Dropout { rate },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::BatchNorm { .. } => {
                    Layer::BatchNorm { state: BatchNormState::new(prev[0]), mode: BnMode::Standard }
                }
            };
            layers.push(layer);
            prev = shape.clone();
        }
        Ok(Network { spec, layers, shapes })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Per-sample output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-sample input shape of layer `i`.
    pub fn input_shape(&self, i: usize) -> Vec<usize> {
        if i == 0 {
            let (c, h, w) = self.spec.input_shape;
            vec![c, h, w]
        } else {
            self.shapes[i - 1].clone()
        }
    }

    /// Flattened feature count at a probe point.
    pub fn probe_features(&self, probe: ProbePoint) -> Result<usize> {
        Ok(self.shapes[self.spec.probe_index(probe)?].iter().product())
    }

    /// Switches batch norms to their Hebbian-phase modes.
    pub fn use_hebbian_bn(&mut self) {
        for (l, s) in self.layers.iter_mut().zip(&self.spec.layers) {
            if let (Layer::BatchNorm { mode, .. }, LayerSpec::BatchNorm { hebbian_mode }) = (l, s) {
                *mode = *hebbian_mode;
            }
        }
    }

    pub fn use_standard_bn(&mut self) {
        for l in &mut self.layers {
            if let Layer::BatchNorm { mode, .. } = l {
                *mode = BnMode::Standard;
            }
        }
    }

    /// Current mode of every batch norm, in layer order.
    pub fn bn_modes(&self) -> Vec<BnMode> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { mode, .. } => Some(*mode),
                _ => None,
            })
            .collect()
    }

    pub fn set_bn_modes(&mut self, modes: &[BnMode]) -> Result<()> {
        let mut it = modes.iter();
        for l in &mut self.layers {
            if let Layer::BatchNorm { mode, .. } = l {
                *mode = *it.next().ok_or_else(|| Error::arg("too few batchnorm modes"))?;
            }
        }
        if it.next().is_some() {
            return Err(Error::arg("too many batchnorm modes"));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        if x.ndim() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::dim(format!("network expects B×{c}×{h}×{w}, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Eval-mode forward through the layers `range`, starting from `x`.
    pub fn forward_range(&self, x: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers[range] {
            h = l.forward_eval(&h)?;
        }
        Ok(h)
    }

    /// Eval-mode features at `probe`, flattened to `B × features`.
    pub fn features(&self, x: &Tensor, probe: ProbePoint) -> Result<Tensor> {
        self.check_input(x)?;
        let end = self.spec.probe_index(probe)? + 1;
        Ok(self.forward_range(x, 0..end)?.flatten_batch())
    }

    /// Runs the layers up to and including `probe`. In training mode batch
    /// norms use (and update) batch statistics and dropout is active.
    pub fn forward_to_probe(
        &mut self,
        x: &Tensor,
        probe: ProbePoint,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        if !training {
            return self.features(x, probe);
        }
        self.check_input(x)?;
        let end = self.spec.probe_index(probe)? + 1;
        let mut tape = crate::autodiff::Tape::new();
        let out = crate::autodiff::forward(&mut self.layers[..end], x, rng, &mut tape, true)?;
        Ok(out.flatten_batch())
    }

    /// Eval-mode logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.features(x, ProbePoint::Final)
    }

    /// All trainable parameters in layer order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    /// `(name, tensor)` for every parameter and buffer, e.g. `"3.conv.weight"`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.named_tensors() {
                out.push((format!("{i}.{}.{n}", l.kind()), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let kind = l.kind();
            for (n, t) in l.named_tensors_mut() {
                out.push((format!("{i}.{kind}.{n}"), t));
            }
        }
        out
    }

    /// Index of the first classifier layer (right after the L5 probe point).
    pub fn head_start(&self) -> usize {
        self.spec.probe_points.last().map_or(0, |p| p.0 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        let mut arch = ArchConfig::scaled(10, 16);
        arch.input_shape = (3, 32, 32);
        NetworkSpec::five_block(&arch)
    }

    #[test]
    fn shapes_for_32x32_input() {
        let spec = NetworkSpec::five_block(&ArchConfig::full(10));
        let net = Network::new(spec, &mut Rng::new(0)).unwrap();
        assert_eq!(net.output_shape(net.spec().probe_index(ProbePoint::L1).unwrap()), &[96, 16, 16]);
        assert_eq!(net.output_shape(net.spec().probe_index(ProbePoint::L3).unwrap()), &[192, 8, 8]);
        assert_eq!(net.probe_features(ProbePoint::L4).unwrap(), 256 * 64);
        assert_eq!(net.probe_features(ProbePoint::L5).unwrap(), 300);
        assert_eq!(net.probe_features(ProbePoint::Final).unwrap(), 10);
    }

    #[test]
    fn probe_l1_shape_from_forward() {
        let net = Network::new(tiny_spec(), &mut Rng::new(1)).unwrap();
        let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut Rng::new(2));
        let f = net.features(&x, ProbePoint::L1).unwrap();
        assert_eq!(f.shape(), &[2, 6 * 16 * 16]);
    }

    #[test]
    fn zero_classifier_gives_uniform_logits() {
        let mut net = Network::new(tiny_spec(), &mut Rng::new(1)).unwrap();
        if let Some(Layer::Fc { weight, bias }) = net.layers_mut().last_mut() {
            *weight = Tensor::zeros(weight.shape());
            *bias = Tensor::zeros(bias.shape());
        }
        let x = Tensor::uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut Rng::new(2));
        let logits = net.forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = Network::new(tiny_spec(), &mut Rng::new(4)).unwrap();
        let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut Rng::new(5));
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn final_probe_equals_full_forward() {
        let mut net = Network::new(tiny_spec(), &mut Rng::new(4)).unwrap();
        let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut Rng::new(5));
        let full = net.forward(&x).unwrap();
        let probed = net.forward_to_probe(&x, ProbePoint::Final, false, &mut Rng::new(0)).unwrap();
        assert_eq!(full, probed);
    }

    #[test]
    fn bn_mode_switching() {
        let mut net = Network::new(tiny_spec(), &mut Rng::new(4)).unwrap();
        assert!(net.bn_modes().iter().all(|m| *m == BnMode::Standard));
        net.use_hebbian_bn();
        let modes = net.bn_modes();
        assert_eq!(modes.iter().filter(|m| **m == BnMode::VarianceAveraged).count(), 2);
        net.use_standard_bn();
        assert!(net.bn_modes().iter().all(|m| *m == BnMode::Standard));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = Network::new(tiny_spec(), &mut Rng::new(4)).unwrap();
        assert!(net.features(&Tensor::zeros(&[1, 3, 16, 16]), ProbePoint::L1).is_err());
    }
}
