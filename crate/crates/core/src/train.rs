//! Supervised phases: linear classifiers on frozen features and end-to-end
//! backpropagation, both with per-epoch validation and early stopping.

use crate::autodiff::{self, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Layer, Network, NetworkSpec};
use crate::rng::{streams, Rng};
use crate::sgd::{cross_entropy, top_k_accuracy, Sgd, SgdConfig};
use crate::tensor::Tensor;

/// Batch size used for inference passes.
pub const EVAL_BATCH: usize = 256;

/// Random streams owned by one supervised phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseStreams {
    pub order: u64,
    pub dropout: u64,
}

impl PhaseStreams {
    pub const PROBE: PhaseStreams = PhaseStreams { order: streams::PROBE_ORDER, dropout: streams::PROBE_DROPOUT };
    pub const BP: PhaseStreams = PhaseStreams { order: streams::BP_ORDER, dropout: streams::BP_DROPOUT };
    pub const FINE_TUNE: PhaseStreams = PhaseStreams { order: streams::FT_ORDER, dropout: streams::FT_DROPOUT };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub sgd: SgdConfig,
    /// Accuracy counts a hit when the label is among the `top_k` logits.
    pub top_k: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch: usize, sgd: SgdConfig, top_k: usize) -> Self {
        TrainConfig { epochs, batch, sgd, top_k }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.top_k == 0 {
            return Err(Error::arg("batch size and top-k must be positive"));
        }
        self.sgd.validate()
    }
}

/// One row of a training trace. `train_acc` and `loss` are measured on the
/// training-mode outputs seen during the epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// `None` when no epoch ran and the initial weights were kept.
    pub best_epoch: Option<usize>,
}

/// Epoch with the highest validation accuracy; ties go to the earliest.
pub fn early_stop_select(val_accs: &[f64]) -> Result<usize> {
    if val_accs.is_empty() {
        return Err(Error::arg("early stopping needs at least one epoch"));
    }
    let mut best = 0;
    for (i, &v) in val_accs.iter().enumerate() {
        if v > val_accs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Eval-mode logits of a layer stack, computed in chunks.
pub fn predict(layers: &[Layer], x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut out: Vec<f64> = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut h = x.gather_rows(&idx);
        for l in layers {
            h = l.forward_eval(&h)?;
        }
        width = h.len() / idx.len();
        out.extend_from_slice(h.data());
    }
    Tensor::new(&[n, width], out)
}

pub fn accuracy(layers: &[Layer], x: &Tensor, labels: &[usize], top_k: usize) -> Result<f64> {
    top_k_accuracy(&predict(layers, x)?, labels, top_k)
}

/// Dropout followed by a fully connected layer, trained on frozen features.
/// Starts from zero weights and bias, so every class begins with equal
/// logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub layers: Vec<Layer>,
}

impl LinearClassifier {
    pub fn new(features: usize, classes: usize, dropout: f64) -> Self {
        let fc = Layer::Fc { weight: Tensor::zeros(&[classes, features]), bias: Tensor::zeros(&[classes]) };
        LinearClassifier { layers: vec![Layer::Dropout { rate: dropout }, fc] }
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        predict(&self.layers, features)
    }
}

/// Trains a classifier on precomputed features `N×F`. The feature extractor
/// is not involved at all, so it cannot change.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    num_classes: usize,
    dropout: f64,
    config: &TrainConfig,
    seed: u64,
    phase: PhaseStreams,
) -> Result<(LinearClassifier, TrainOutcome)> {
    if train_y.is_empty() {
        return Err(Error::arg("classifier training needs at least one labeled sample"));
    }
    let [_, f] = train_x.matrix_dims("train_classifier")?;
    let mut clf = LinearClassifier::new(f, num_classes, dropout);
    let outcome = fit(&mut clf.layers, train_x, train_y, val_x, val_y, config, seed, phase)?;
    Ok((clf, outcome))
}

/// Starting point of an end-to-end run.
#[derive(Clone, Debug)]
pub enum Init {
    Scratch(NetworkSpec),
    FromCheckpoint { expected: NetworkSpec, network: Box<Network> },
}

/// Full backpropagation through every layer on the labeled data. A
/// checkpoint start switches batch norms to standard mode and re-estimates
/// their statistics over one pass before training; with zero epochs the
/// checkpoint comes back untouched.
pub fn train_end_to_end(
    init: Init,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Network, TrainOutcome)> {
    let (mut net, phase) = match init {
        Init::Scratch(spec) => {
            let mut rng = Rng::with_stream(seed, streams::INIT);
            (Network::new(spec, &mut rng)?, PhaseStreams::BP)
        }
        Init::FromCheckpoint { expected, network } => {
            if *network.spec() != expected {
                return Err(Error::Checkpoint("checkpoint architecture does not match the configuration".into()));
            }
            if config.epochs == 0 {
                return Ok((*network, TrainOutcome { records: Vec::new(), best_epoch: None }));
            }
            let mut net = *network;
            net.use_standard_bn();
            reestimate_bn(&mut net, &train.images, config.batch)?;
            (net, PhaseStreams::FINE_TUNE)
        }
    };
    let outcome =
        fit(net.layers_mut(), &train.images, &train.labels, &val.images, &val.labels, config, seed, phase)?;
    Ok((net, outcome))
}

/// Running statistics become the plain average of batch statistics over one
/// pass of `x`.
pub fn reestimate_bn(net: &mut Network, x: &Tensor, batch: usize) -> Result<()> {
    let stop = net.head_start();
    let n = x.shape()[0];
    let mut rng = Rng::new(0);
    let saved: Vec<f64> = bn_momenta(net.layers_mut());
    for (t, start) in (0..n).step_by(batch.max(2)).enumerate() {
        let end = (start + batch.max(2)).min(n);
        if end - start < 2 {
            break;
        }
        for l in net.layers_mut().iter_mut() {
            if let Layer::BatchNorm { state, .. } = l {
                state.momentum = 1.0 / (t + 1) as f64;
            }
        }
        let idx: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        autodiff::forward(&mut net.layers_mut()[..stop], &x.gather_rows(&idx), &mut rng, &mut tape, true)?;
    }
    let mut it = saved.into_iter();
    for l in net.layers_mut().iter_mut() {
        if let Layer::BatchNorm { state, .. } = l {
            state.momentum = it.next().unwrap_or(state.momentum);
        }
    }
    Ok(())
}

fn bn_momenta(layers: &mut [Layer]) -> Vec<f64> {
    layers
        .iter()
        .filter_map(|l| match l {
            Layer::BatchNorm { state, .. } => Some(state.momentum),
            _ => None,
        })
        .collect()
}

/// Shared mini-batch SGD loop. Leaves `layers` at the best-validation epoch.
#[allow(clippy::too_many_arguments)]
fn fit(
    layers: &mut [Layer],
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    config: &TrainConfig,
    seed: u64,
    phase: PhaseStreams,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = train_y.len();
    if n == 0 {
        return Err(Error::arg("training needs at least one labeled sample"));
    }
    if train_x.shape()[0] != n || val_x.shape()[0] != val_y.len() {
        return Err(Error::dim("sample and label counts differ"));
    }
    // Batch statistics are undefined for a single sample.
    let min_batch = if layers.iter().any(|l| matches!(l, Layer::BatchNorm { .. })) { 2 } else { 1 };
    let mut order_rng = Rng::with_stream(seed, phase.order);
    let mut dropout_rng = Rng::with_stream(seed, phase.dropout);
    let mut opt = Sgd::new(config.sgd, layers.iter().flat_map(Layer::params));
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<Layer>)> = None;
    for epoch in 0..config.epochs {
        let perm = order_rng.permutation(n);
        let (mut loss_sum, mut hits, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for chunk in perm.chunks(config.batch) {
            if chunk.len() < min_batch {
                continue;
            }
            let xb = train_x.gather_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let logits = autodiff::forward(layers, &xb, &mut dropout_rng, &mut tape, true)?;
            let (loss, dlogits) = cross_entropy(&logits, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss became {loss} at epoch {epoch}")));
            }
            hits += top_k_accuracy(&logits, &yb, config.top_k)? * yb.len() as f64;
            seen += yb.len();
            loss_sum += loss;
            batches += 1;
            let grads = autodiff::backward(layers, &tape, dlogits)?;
            let mut params: Vec<&mut Tensor> = layers.iter_mut().flat_map(Layer::params_mut).collect();
            opt.step(&mut params, &grads.flat(), epoch)?;
        }
        let val_acc = accuracy(layers, val_x, val_y, config.top_k)?;
        records.push(EpochRecord {
            epoch,
            train_acc: if seen > 0 { hits / seen as f64 } else { 0.0 },
            val_acc,
            loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            lr: config.sgd.lr(epoch),
        });
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, layers.to_vec()));
        }
    }
    let best_epoch = match best {
        Some((epoch, _, state)) => {
            layers.clone_from_slice(&state);
            Some(epoch)
        }
        None => None,
    };
    debug_assert_eq!(best_epoch, early_stop_select(&records.iter().map(|r| r.val_acc).collect::<Vec<_>>()).ok());
    Ok(TrainOutcome { records, best_epoch })
}
