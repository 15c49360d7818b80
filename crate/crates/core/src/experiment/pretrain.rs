//! Unsupervised Hebbian training of the five internal blocks.

use crate::autodiff::{self, Tape};
use crate::error::{Error, Result};
use crate::hebbian::{Activation, HebbianLayerState, RuleKind, DEFAULT_MEAN_MOMENTUM};
use crate::layers::{ops, Layer, Network};
use crate::rng::{streams, Rng};
use crate::tensor::{im2col, Tensor};
use crate::train::reestimate_bn;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HebbianConfig {
    pub rule: RuleKind,
    pub learning_rate: f64,
    pub mean_momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Train one block at a time (to the full epoch budget) instead of all
    /// blocks on every batch.
    pub layerwise: bool,
    /// Images in the fixed batch used to trace representation error.
    pub monitor_batch: usize,
}

impl Default for HebbianConfig {
    fn default() -> Self {
        HebbianConfig {
            rule: RuleKind::NonlinearHpca(Activation::Relu),
            learning_rate: 1e-3,
            mean_momentum: DEFAULT_MEAN_MOMENTUM,
            epochs: 20,
            batch: 64,
            layerwise: false,
            monitor_batch: 16,
        }
    }
}

/// Layer ranges of one internal block around its Hebbian layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub hebbian: usize,
    /// One past the probe layer.
    pub end: usize,
}

/// Splits the internal layers into blocks at the probe points. Every block
/// must contain exactly one conv or FC layer.
pub fn blocks(net: &Network) -> Result<Vec<Block>> {
    let mut out = Vec::new();
    let mut start = 0;
    for &(probe, name) in &net.spec().probe_points {
        let end = probe + 1;
        let learnable: Vec<usize> = (start..end)
            .filter(|&i| matches!(net.layers()[i], Layer::Conv { .. } | Layer::Fc { .. }))
            .collect();
        match learnable[..] {
            [h] => out.push(Block { start, hebbian: h, end }),
            _ => return Err(Error::arg(format!("block {name} must hold exactly one conv or fc layer"))),
        }
        start = end;
    }
    Ok(out)
}

/// Per-epoch trace of the pre-training run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Row 0 is measured before training, row `e + 1` after epoch `e`
    /// (after each block's last epoch in layer-wise mode). One column per
    /// block.
    pub representation_error: Vec<Vec<f64>>,
}

/// Result of pre-training: the Hebbian states behind each block's learnable
/// layer, whose weights and centering biases are already written into the
/// network.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub states: Vec<HebbianLayerState>,
    pub report: PretrainReport,
}

fn layer_matrix(layer: &Layer) -> Result<Tensor> {
    match layer {
        Layer::Conv { weight, .. } | Layer::Fc { weight, .. } => {
            let o = weight.shape()[0];
            weight.clone().reshape(&[o, weight.len() / o])
        }
        other => Err(Error::arg(format!("{} layer has no hebbian weights", other.kind()))),
    }
}

/// Writes `W` and the centering bias `−Wμ` into the network layer.
fn sync_layer(layer: &mut Layer, state: &HebbianLayerState) -> Result<()> {
    match layer {
        Layer::Conv { weight, bias, .. } | Layer::Fc { weight, bias } => {
            let shape = weight.shape().to_vec();
            *weight = state.weights().clone().reshape(&shape)?;
            *bias = state.centering_bias();
            Ok(())
        }
        other => Err(Error::arg(format!("{} layer has no hebbian weights", other.kind()))),
    }
}

/// Rows fed to the Hebbian rule: patches for a conv, samples for an FC.
fn hebbian_inputs(layer: &Layer, h: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Conv { weight, stride, pad, .. } => {
            let k = (weight.shape()[2], weight.shape()[3]);
            let patches = im2col(h, k, (*stride, *stride), (*pad, *pad))?;
            let (b, p, d) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
            patches.reshape(&[b * p, d])
        }
        Layer::Fc { .. } => Ok(h.clone().flatten_batch()),
        other => Err(Error::arg(format!("{} layer has no hebbian weights", other.kind()))),
    }
}

/// Lays out per-row responses `rows×neurons` as the layer's output: conv
/// rows are `(image, patch)` pairs.
fn responses_to_output(net: &Network, layer: usize, y: Tensor, batch: usize) -> Result<Tensor> {
    let shape = net.output_shape(layer);
    let n = shape[0];
    let patches: usize = shape[1..].iter().product();
    let mut dims = vec![batch];
    dims.extend_from_slice(shape);
    if patches == 1 {
        return y.reshape(&dims);
    }
    let src = y.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for p in 0..patches {
            let row = &src[(b * patches + p) * n..(b * patches + p + 1) * n];
            for (o, v) in row.iter().enumerate() {
                out[(b * n + o) * patches + p] = *v;
            }
        }
    }
    Tensor::new(&dims, out)
}

/// One Hebbian step of a block on input `h`; returns the block output.
/// The layer output is the response `W(x − μ)` of the weights from before
/// the update.
fn block_step(
    net: &mut Network,
    block: &Block,
    state: &mut HebbianLayerState,
    rule: RuleKind,
    h: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let batch = h.shape()[0];
    let h = net.forward_range(h, block.start..block.hebbian)?;
    let rows = hebbian_inputs(&net.layers()[block.hebbian], &h)?;
    let centered = state.center_inputs(&rows, true)?;
    let (delta, y) = state.batch_delta_with_responses(&centered, rule)?;
    let h = responses_to_output(net, block.hebbian, y, batch)?;
    state.apply(&delta)?;
    sync_layer(&mut net.layers_mut()[block.hebbian], state)?;
    let mut tape = Tape::new();
    autodiff::forward(&mut net.layers_mut()[block.hebbian + 1..block.end], &h, rng, &mut tape, true)
}

/// Representation error of every block on `x`. Batch norms use the batch
/// statistics of `x`, so the trace does not depend on their running
/// estimates; the network itself is left untouched.
pub fn representation_errors(
    net: &Network,
    states: &[HebbianLayerState],
    rule: RuleKind,
    x: &Tensor,
) -> Result<Vec<f64>> {
    let mut scratch = net.clone();
    let mut rng = Rng::new(0);
    let mut h = x.clone();
    let mut out = Vec::new();
    for (block, state) in blocks(net)?.iter().zip(states) {
        let mut tape = Tape::new();
        let pre = autodiff::forward(&mut scratch.layers_mut()[block.start..block.hebbian], &h, &mut rng, &mut tape, true)?;
        let rows = hebbian_inputs(&net.layers()[block.hebbian], &pre)?;
        let mut probe = state.clone();
        let centered = probe.center_inputs(&rows, false)?;
        out.push(state.representation_error(&centered, rule)?);
        h = autodiff::forward(&mut scratch.layers_mut()[block.hebbian..block.end], &pre, &mut rng, &mut tape, true)?;
    }
    Ok(out)
}

/// Trains every internal block with the Hebbian rule on unlabeled images.
/// Batch norms run in their Hebbian modes with batch statistics; their
/// affine parameters stay at identity. A final pass re-estimates their
/// running statistics. Only `images` is consulted, so labels cannot
/// influence the result.
pub fn pretrain(net: &mut Network, images: &Tensor, config: &HebbianConfig, seed: u64) -> Result<Pretrained> {
    if config.batch < 2 {
        return Err(Error::arg("hebbian batch must hold at least two images for batch norm"));
    }
    let n = images.shape()[0];
    if n < 2 {
        return Err(Error::arg("pre-training needs at least two images"));
    }
    net.use_hebbian_bn();
    let blocks = blocks(net)?;
    let mut states = blocks
        .iter()
        .map(|b| HebbianLayerState::from_weights(layer_matrix(&net.layers()[b.hebbian])?, config.learning_rate, config.mean_momentum))
        .collect::<Result<Vec<_>>>()?;
    for (b, s) in blocks.iter().zip(&states) {
        sync_layer(&mut net.layers_mut()[b.hebbian], s)?;
    }
    let monitor = images.gather_rows(&(0..config.monitor_batch.clamp(2, n)).collect::<Vec<_>>());
    let mut report = PretrainReport { representation_error: vec![representation_errors(net, &states, config.rule, &monitor)?] };
    let mut order = Rng::with_stream(seed, streams::HEBBIAN_ORDER);
    let mut scratch = Rng::with_stream(seed, streams::HEBBIAN_AUX);
    let passes: Vec<Option<usize>> =
        if config.layerwise { (0..blocks.len()).map(Some).collect() } else { vec![None] };
    for only in passes {
        for _ in 0..config.epochs {
            let perm = order.permutation(n);
            for chunk in perm.chunks(config.batch) {
                if chunk.len() < 2 {
                    continue;
                }
                let mut h = images.gather_rows(chunk);
                for (k, block) in blocks.iter().enumerate() {
                    match only {
                        Some(target) if k < target => h = net.forward_range(&h, block.start..block.end)?,
                        Some(target) if k > target => break,
                        _ => h = block_step(net, block, &mut states[k], config.rule, &h, &mut scratch)?,
                    }
                }
            }
            if only.is_none() {
                report.representation_error.push(representation_errors(net, &states, config.rule, &monitor)?);
            }
        }
        if only.is_some() {
            report.representation_error.push(representation_errors(net, &states, config.rule, &monitor)?);
        }
    }
    // Running batch-norm statistics lag the moving weights; one more pass
    // fits them to the final ones.
    reestimate_bn(net, images, config.batch)?;
    Ok(Pretrained { states, report })
}

/// Linear part of a layer's response, `W(x − μ)`, as the network computes it.
pub fn hebbian_response(layer: &Layer, h: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Conv { weight, bias, stride, pad } => ops::conv_forward(h, weight, bias, *stride, *pad),
        Layer::Fc { weight, bias } => ops::linear_forward(&h.clone().flatten_batch(), weight, bias),
        other => Err(Error::arg(format!("{} layer has no hebbian weights", other.kind()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ArchConfig, NetworkSpec};

    fn tiny_net(seed: u64) -> Network {
        let mut arch = ArchConfig::scaled(4, 16);
        arch.input_shape = (3, 8, 8);
        Network::new(NetworkSpec::five_block(&arch), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn five_blocks_found() {
        let net = tiny_net(0);
        let b = blocks(&net).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b[0], Block { start: 0, hebbian: 0, end: 4 });
        assert!(matches!(net.layers()[b[4].hebbian], Layer::Fc { .. }));
    }

    #[test]
    fn bias_centers_inputs() {
        let mut net = tiny_net(1);
        let mut rng = Rng::new(2);
        let x = Tensor::uniform(&[6, 3, 8, 8], 0.0, 1.0, &mut rng);
        let cfg = HebbianConfig { epochs: 1, batch: 3, ..HebbianConfig::default() };
        let pre = pretrain(&mut net, &x, &cfg, 0).unwrap();
        let rows = hebbian_inputs(&net.layers()[0], &x).unwrap();
        let centered = pre.states[0].clone().center_inputs(&rows, false).unwrap();
        let direct = crate::tensor::matmul(&centered, &pre.states[0].weights().transpose().unwrap()).unwrap();
        let net_out = hebbian_response(&net.layers()[0], &x).unwrap();
        // net_out is B×O×H×W, direct is (B·P)×O
        let (o, p) = (net_out.shape()[1], net_out.shape()[2] * net_out.shape()[3]);
        for b in 0..6 {
            for oc in 0..o {
                for pi in 0..p {
                    let a = net_out.data()[(b * o + oc) * p + pi];
                    let d = direct.data()[(b * p + pi) * o + oc];
                    assert!((a - d).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_label_free() {
        let mut rng = Rng::new(3);
        let x = Tensor::uniform(&[8, 3, 8, 8], 0.0, 1.0, &mut rng);
        let cfg = HebbianConfig { epochs: 2, batch: 4, learning_rate: 1e-2, ..HebbianConfig::default() };
        let mut a = tiny_net(4);
        let mut b = tiny_net(4);
        let pa = pretrain(&mut a, &x, &cfg, 9).unwrap();
        let pb = pretrain(&mut b, &x, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(pa.report.representation_error.len(), 3);
    }

    #[test]
    fn layerwise_trace_has_one_row_per_block() {
        let mut rng = Rng::new(3);
        let x = Tensor::uniform(&[8, 3, 8, 8], 0.0, 1.0, &mut rng);
        let cfg = HebbianConfig { epochs: 1, batch: 4, layerwise: true, ..HebbianConfig::default() };
        let mut net = tiny_net(5);
        let p = pretrain(&mut net, &x, &cfg, 0).unwrap();
        assert_eq!(p.report.representation_error.len(), 6);
    }
}
