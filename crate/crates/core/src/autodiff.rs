//! Reverse-mode differentiation over a layer stack.
//!
//! A forward pass records one [`TapeNode`] per layer with whatever the
//! layer's backward needs. [`backward`] walks the tape from the last node to
//! the first, so every node is visited exactly once in reverse topological
//! order.

use crate::error::{Error, Result};
use crate::layers::ops::{self, BatchNormCache, ConvCache};
use crate::layers::Layer;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum NodeOp {
    Conv(ConvCache),
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Relu { output: Tensor },
    Dropout { mask: Option<Vec<f64>> },
    Fc { input: Tensor },
    BatchNorm { cache: BatchNormCache, training: bool },
    Flatten { input_shape: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    /// Index of the layer in the stack that produced this node.
    pub layer: usize,
    pub op: NodeOp,
    /// Node whose output fed this one; `None` for the stack input.
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, layer: usize, op: NodeOp) {
        let parent = self.nodes.len().checked_sub(1);
        self.nodes.push(TapeNode { layer, op, parent });
    }
}

/// Forward through `layers`, recording a tape. With `training`, batch norms
/// use batch statistics (updating running stats) and dropout is active.
pub fn forward(layers: &mut [Layer], x: &Tensor, rng: &mut Rng, tape: &mut Tape, training: bool) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in layers.iter_mut().enumerate() {
        h = match layer {
            Layer::Conv { weight, bias, stride, pad } => {
                let (y, cache) = ops::conv_forward_cached(&h, weight, bias, *stride, *pad)?;
                tape.push(i, NodeOp::Conv(cache));
                y
            }
            Layer::MaxPool { kernel, stride } => {
                let (y, argmax) = ops::maxpool_forward(&h, kernel.0, kernel.1, *stride)?;
                tape.push(i, NodeOp::MaxPool { argmax, input_shape: h.shape().to_vec() });
                y
            }
            Layer::Relu => {
                let y = ops::relu_forward(&h);
                tape.push(i, NodeOp::Relu { output: y.clone() });
                y
            }
            Layer::Dropout { rate } => {
                let (y, mask) = ops::dropout_forward(&h, *rate, training, rng)?;
                tape.push(i, NodeOp::Dropout { mask });
                y
            }
            Layer::Fc { weight, bias } => {
                let y = ops::linear_forward(&h, weight, bias)?;
                tape.push(i, NodeOp::Fc { input: h });
                y
            }
            Layer::BatchNorm { state, mode } => {
                let (y, cache) = ops::batchnorm_forward_cached(&h, state, *mode, training)?;
                tape.push(i, NodeOp::BatchNorm { cache, training });
                y
            }
            Layer::Flatten => {
                let shape = h.shape().to_vec();
                tape.push(i, NodeOp::Flatten { input_shape: shape });
                h.flatten_batch()
            }
        };
    }
    Ok(h)
}

/// Gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Per layer, gradients matching [`Layer::params`].
    pub layers: Vec<Vec<Tensor>>,
    /// Gradient with respect to the stack input.
    pub input: Tensor,
}

impl Gradients {
    /// Parameter gradients flattened in stack order.
    pub fn flat(&self) -> Vec<&Tensor> {
        self.layers.iter().flatten().collect()
    }

    pub fn into_flat(self) -> Vec<Tensor> {
        self.layers.into_iter().flatten().collect()
    }
}

/// Propagates `dout` back through the tape recorded for `layers`.
pub fn backward(layers: &[Layer], tape: &Tape, dout: Tensor) -> Result<Gradients> {
    if tape.len() != layers.len() {
        return Err(Error::arg(format!("tape has {} nodes for {} layers", tape.len(), layers.len())));
    }
    let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); layers.len()];
    let mut g = dout;
    let mut cursor = tape.nodes.len().checked_sub(1);
    while let Some(idx) = cursor {
        let node = &tape.nodes[idx];
        let layer = &layers[node.layer];
        g = match (&node.op, layer) {
            (NodeOp::Conv(cache), Layer::Conv { weight, .. }) => {
                let (dx, dw, db) = ops::conv_backward(&g, weight, cache)?;
                grads[node.layer] = vec![dw, db];
                dx
            }
            (NodeOp::MaxPool { argmax, input_shape }, Layer::MaxPool { .. }) => {
                ops::maxpool_backward(&g, argmax, input_shape)?
            }
            (NodeOp::Relu { output }, Layer::Relu) => ops::relu_backward(&g, output)?,
            (NodeOp::Dropout { mask }, Layer::Dropout { .. }) => match mask {
                Some(m) => {
                    let data = g.data().iter().zip(m).map(|(a, b)| a * b).collect();
                    Tensor::new(g.shape(), data)?
                }
                None => g,
            },
            (NodeOp::Fc { input }, Layer::Fc { weight, .. }) => {
                let (dx, dw, db) = ops::linear_backward(&g, input, weight)?;
                grads[node.layer] = vec![dw, db];
                dx
            }
            (NodeOp::BatchNorm { cache, training }, Layer::BatchNorm { state, .. }) => {
                let (dx, dgamma, dbeta) = if *training {
                    ops::batchnorm_backward(&g, state, cache)?
                } else {
                    ops::batchnorm_eval_backward(&g, state, cache)?
                };
                grads[node.layer] = vec![dgamma, dbeta];
                dx
            }
            (NodeOp::Flatten { input_shape }, Layer::Flatten) => g.reshape(input_shape)?,
            (op, l) => {
                return Err(Error::arg(format!("tape node {op:?} does not match layer {}", l.kind())));
            }
        };
        cursor = node.parent;
    }
    Ok(Gradients { layers: grads, input: g })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_links_nodes_in_order() {
        let mut rng = Rng::new(0);
        let mut layers = vec![Layer::Flatten, Layer::fc(4, 3, &mut rng), Layer::Relu];
        let x = Tensor::normal(&[2, 1, 2, 2], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        forward(&mut layers, &x, &mut rng, &mut tape, true).unwrap();
        assert_eq!(tape.len(), 3);
        assert_eq!(tape.nodes()[0].parent, None);
        assert_eq!(tape.nodes()[2].parent, Some(1));
        let g = backward(&layers, &tape, Tensor::full(&[2, 3], 1.0)).unwrap();
        assert_eq!(g.input.shape(), &[2, 1, 2, 2]);
        assert_eq!(g.layers[1].len(), 2);
    }

    #[test]
    fn mismatched_tape_rejected() {
        let layers = vec![Layer::Relu];
        let tape = Tape::new();
        assert!(backward(&layers, &tape, Tensor::zeros(&[1])).is_err());
    }
}
