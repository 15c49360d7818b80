//! Sweep execution over seeds × regimes × methods × probes.

use std::collections::BTreeSet;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, make_split, Dataset, RegimeSplit, TextureConfig};
use crate::error::{Error, Result};
use crate::experiment::config::{DatasetKind, ExperimentConfig, Method};
use crate::experiment::pretrain::{pretrain, Pretrained};
use crate::layers::{Layer, Network, ProbePoint};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;
use crate::train::{self, train_classifier, train_end_to_end, Init, PhaseStreams, TrainOutcome, EVAL_BATCH};

/// Training pool (train + validation) and test set.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub pool: Dataset,
    pub test: Dataset,
}

fn take_front(ds: Dataset, n: usize) -> Result<Dataset> {
    if n == 0 || n >= ds.len() {
        return Ok(ds);
    }
    ds.subset(&(0..n).collect::<Vec<_>>())
}

/// Loads the configured dataset and applies the subset limits.
pub fn load_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (pool, test) = match config.dataset {
        DatasetKind::Cifar10 => data::load_cifar10(&config.data_dir)?,
        DatasetKind::Cifar100 => data::load_cifar100(&config.data_dir)?,
        DatasetKind::Textures => {
            let tc = TextureConfig::default();
            let n_pool = if config.train_subset == 0 { 6000 } else { config.train_subset };
            let n_test = if config.test_subset == 0 { 1000 } else { config.test_subset };
            (data::synth_textures(n_pool, &tc, 0, 0)?, data::synth_textures(n_test, &tc, 0, 1)?)
        }
    };
    Ok(PreparedData { pool: take_front(pool, config.train_subset)?, test: take_front(test, config.test_subset)? })
}

/// One per-epoch training row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub run_id: String,
    pub seed: u64,
    pub regime: f64,
    pub method: String,
    pub probe: String,
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub loss: f64,
    pub lr: f64,
    /// `backprop`, `classifier`, `fine-tune` or `probe`.
    pub phase: String,
}

/// Test accuracy of one (seed, regime, method, probe) cell at its
/// early-stopped epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub run_id: String,
    pub seed: u64,
    pub regime: f64,
    pub method: String,
    pub probe: String,
    pub best_epoch: Option<usize>,
    pub test_acc: f64,
    pub top_k: usize,
}

/// Representation-error trace of one seed's pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct HebbianTrace {
    pub seed: u64,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepOutput {
    pub records: Vec<RecordRow>,
    pub cells: Vec<CellResult>,
    pub hebbian: Vec<HebbianTrace>,
    /// Labeled sets were nested across regimes for every seed.
    pub nested: bool,
}

/// Eval-mode features at `probe`, computed in chunks.
pub fn extract_features(net: &Network, x: &Tensor, probe: ProbePoint) -> Result<Tensor> {
    let n = x.shape()[0];
    let width = net.probe_features(probe)?;
    let mut out = Vec::with_capacity(n * width);
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        out.extend_from_slice(net.features(&x.gather_rows(&idx), probe)?.data());
    }
    Tensor::new(&[n, width], out)
}

/// Everything a cell needs about one regime of one seed.
pub struct RegimeData {
    pub split: RegimeSplit,
    pub labeled: Dataset,
    pub val: Dataset,
}

impl RegimeData {
    pub fn new(pool: &Dataset, config: &ExperimentConfig, regime: f64, seed: u64) -> Result<Self> {
        let split = make_split(pool, config.val_fraction, regime, seed)?;
        let labeled = pool.subset(&split.labeled_idx)?;
        let val = pool.subset(&split.val_idx)?;
        Ok(RegimeData { split, labeled, val })
    }
}

/// Network built from the configured architecture with the seed's init.
pub fn initial_network(config: &ExperimentConfig, seed: u64) -> Result<Network> {
    Network::new(config.network_spec(), &mut Rng::with_stream(seed, streams::INIT))
}

/// Hebbian pre-training on every non-validation image of the pool. The
/// images are selected without looking at labels.
pub fn run_hpca_pretrain(config: &ExperimentConfig, pool: &Dataset, seed: u64) -> Result<(Network, Pretrained)> {
    let split = make_split(pool, config.val_fraction, 100.0, seed)?;
    let images = pool.images.gather_rows(&split.train_idx());
    let mut net = initial_network(config, seed)?;
    let pre = pretrain(&mut net, &images, &config.hebbian(), seed)?;
    Ok((net, pre))
}

/// Result of a linear probe on a frozen network.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub classifier: train::LinearClassifier,
    pub outcome: TrainOutcome,
    pub test_acc: f64,
}

/// Features read by a probe; `Final` probes a frozen network at L5.
fn feature_point(probe: ProbePoint) -> ProbePoint {
    if probe == ProbePoint::Final {
        ProbePoint::L5
    } else {
        probe
    }
}

/// Trains a classifier on frozen `probe` features of `net` with the labeled
/// data and reports test accuracy at the early-stopped epoch.
pub fn run_probe_eval(
    net: &Network,
    probe: ProbePoint,
    regime: &RegimeData,
    test: &Dataset,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let point = feature_point(probe);
    let fx = extract_features(net, &regime.labeled.images, point)?;
    let fv = extract_features(net, &regime.val.images, point)?;
    let cfg = config.classifier_training();
    let (classifier, outcome) = train_classifier(
        &fx,
        &regime.labeled.labels,
        &fv,
        &regime.val.labels,
        config.num_classes(),
        config.dropout,
        &cfg,
        seed,
        PhaseStreams::PROBE,
    )?;
    let ft = extract_features(net, &test.images, point)?;
    let test_acc = train::accuracy(&classifier.layers, &ft, &test.labels, cfg.top_k)?;
    Ok(ProbeResult { classifier, outcome, test_acc })
}

/// Replaces the network's dropout + FC head with a trained classifier.
pub fn install_head(net: &mut Network, classifier: &train::LinearClassifier) -> Result<()> {
    let start = net.head_start();
    let head = &mut net.layers_mut()[start..];
    if head.len() != classifier.layers.len() {
        return Err(Error::arg("classifier does not match the network head"));
    }
    for (dst, src) in head.iter_mut().zip(&classifier.layers) {
        let same = match (&*dst, src) {
            (Layer::Fc { weight: w0, bias: b0 }, Layer::Fc { weight: w1, bias: b1 }) => {
                w0.shape() == w1.shape() && b0.shape() == b1.shape()
            }
            (a, b) => a.kind() == b.kind(),
        };
        if !same {
            return Err(Error::arg("classifier does not match the network head"));
        }
        *dst = src.clone();
    }
    Ok(())
}

struct CellSink<'a> {
    run_id: &'a str,
    seed: u64,
    regime: f64,
    top_k: usize,
    out: &'a mut SweepOutput,
}

impl CellSink<'_> {
    fn trace(&mut self, method: Method, probe: ProbePoint, phase: &str, outcome: &TrainOutcome) {
        for r in &outcome.records {
            self.out.records.push(RecordRow {
                run_id: self.run_id.to_string(),
                seed: self.seed,
                regime: self.regime,
                method: method.label().into(),
                probe: probe.as_str().into(),
                epoch: r.epoch,
                train_acc: r.train_acc,
                val_acc: r.val_acc,
                loss: r.loss,
                lr: r.lr,
                phase: phase.into(),
            });
        }
    }

    fn cell(&mut self, method: Method, probe: ProbePoint, best_epoch: Option<usize>, test_acc: f64) {
        self.out.cells.push(CellResult {
            run_id: self.run_id.to_string(),
            seed: self.seed,
            regime: self.regime,
            method: method.label().into(),
            probe: probe.as_str().into(),
            best_epoch,
            test_acc,
            top_k: self.top_k,
        });
    }
}

/// Probes every requested internal point of a supervised network; `Final`
/// reads the network's own classifier.
fn probe_supervised(
    sink: &mut CellSink<'_>,
    method: Method,
    net: &Network,
    final_best: Option<usize>,
    rd: &RegimeData,
    test: &Dataset,
    config: &ExperimentConfig,
) -> Result<()> {
    for &probe in &config.probes {
        if probe == ProbePoint::Final {
            let acc = train::accuracy(net.layers(), &test.images, &test.labels, config.top_k())?;
            sink.cell(method, probe, final_best, acc);
        } else {
            let r = run_probe_eval(net, probe, rd, test, config, sink.seed)?;
            sink.trace(method, probe, "probe", &r.outcome);
            sink.cell(method, probe, r.outcome.best_epoch, r.test_acc);
        }
    }
    Ok(())
}

fn missing_checkpoint() -> Error {
    Error::Checkpoint("no pre-trained network for this seed".into())
}

/// Pre-trained network and its Hebbian states as a checkpoint; the running
/// input means travel as extras.
pub fn pretrained_checkpoint(net: &Network, pre: &Pretrained) -> Checkpoint {
    let mut ck = Checkpoint::new(net.clone());
    for (i, st) in pre.states.iter().enumerate() {
        ck.extras.push((format!("hebbian.{i}.input_mean"), st.running_input_mean().clone()));
    }
    ck
}

/// Runs one seed of the sweep, appending to `out`. With `ckpt_dir` the
/// pre-trained network is saved as `seed-<seed>.bin`.
pub fn run_seed(
    config: &ExperimentConfig,
    data: &PreparedData,
    run_id: &str,
    seed: u64,
    ckpt_dir: Option<&Path>,
    out: &mut SweepOutput,
) -> Result<()> {
    let pretrained = if config.methods.iter().any(|m| m.needs_checkpoint()) {
        info!("seed {seed}: hebbian pre-training");
        let (net, pre) = run_hpca_pretrain(config, &data.pool, seed)?;
        if let Some(dir) = ckpt_dir {
            pretrained_checkpoint(&net, &pre).save(&dir.join(format!("seed-{seed}.bin")))?;
        }
        out.hebbian.push(HebbianTrace { seed, rows: pre.report.representation_error.clone() });
        Some(net)
    } else {
        None
    };
    run_cells(config, data, run_id, seed, pretrained.as_ref(), out)
}

/// Every (regime, method, probe) cell of one seed, given the pre-trained
/// network the HPCA methods start from.
pub fn run_cells(
    config: &ExperimentConfig,
    data: &PreparedData,
    run_id: &str,
    seed: u64,
    pretrained: Option<&Network>,
    out: &mut SweepOutput,
) -> Result<()> {
    if let Some(net) = pretrained {
        if *net.spec() != config.network_spec() {
            return Err(Error::Checkpoint("pre-trained network does not match the configured architecture".into()));
        }
    }
    let top_k = config.top_k();
    let mut regimes = config.regimes.clone();
    regimes.sort_by(f64::total_cmp);
    let regime_data =
        regimes.iter().map(|&r| RegimeData::new(&data.pool, config, r, seed)).collect::<Result<Vec<_>>>()?;
    let nested = regime_data.windows(2).all(|w| {
        let big: BTreeSet<usize> = w[1].split.labeled_idx.iter().copied().collect();
        w[0].split.labeled_idx.iter().all(|i| big.contains(i))
    });
    out.nested &= nested;
    for (&regime, rd) in regimes.iter().zip(&regime_data) {
        let mut sink = CellSink { run_id, seed, regime, top_k, out: &mut *out };
        // Frozen L5 probe of the pre-trained network: the HPCA L5 and Final
        // cells and the HPCA+FT starting head all use it.
        let mut l5: Option<ProbeResult> = None;
        let mut l5_probe = |net: &Network| -> Result<ProbeResult> {
            if l5.is_none() {
                l5 = Some(run_probe_eval(net, ProbePoint::L5, rd, &data.test, config, seed)?);
            }
            Ok(l5.clone().expect("computed above"))
        };
        for &method in &config.methods {
            info!("seed {seed}: {regime}% {method}");
            match method {
                Method::Bp => {
                    let (net, outcome) = train_end_to_end(
                        Init::Scratch(config.network_spec()),
                        &rd.labeled,
                        &rd.val,
                        &config.backprop_training(),
                        seed,
                    )?;
                    sink.trace(method, ProbePoint::Final, "backprop", &outcome);
                    probe_supervised(&mut sink, method, &net, outcome.best_epoch, rd, &data.test, config)?;
                }
                Method::Hpca => {
                    let net = pretrained.ok_or_else(missing_checkpoint)?;
                    for &probe in &config.probes {
                        let r = if matches!(probe, ProbePoint::L5 | ProbePoint::Final) {
                            l5_probe(net)?
                        } else {
                            run_probe_eval(net, probe, rd, &data.test, config, seed)?
                        };
                        sink.trace(method, probe, "probe", &r.outcome);
                        sink.cell(method, probe, r.outcome.best_epoch, r.test_acc);
                    }
                }
                Method::HpcaFt => {
                    let base = pretrained.ok_or_else(missing_checkpoint)?;
                    let head = l5_probe(base)?;
                    sink.trace(method, ProbePoint::Final, "classifier", &head.outcome);
                    let mut net = base.clone();
                    install_head(&mut net, &head.classifier)?;
                    let init = Init::FromCheckpoint { expected: config.network_spec(), network: Box::new(net) };
                    let (net, outcome) =
                        train_end_to_end(init, &rd.labeled, &rd.val, &config.fine_tune_training(), seed)?;
                    sink.trace(method, ProbePoint::Final, "fine-tune", &outcome);
                    probe_supervised(&mut sink, method, &net, outcome.best_epoch, rd, &data.test, config)?;
                }
            }
        }
    }
    Ok(())
}

/// Deterministic run identifier derived from the configuration; where the
/// results are written does not count.
pub fn run_id(config: &ExperimentConfig) -> String {
    let text = ExperimentConfig { output_dir: Default::default(), ..config.clone() }.to_toml();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Runs every seed of the configuration.
pub fn run_sweep(config: &ExperimentConfig, data: &PreparedData, ckpt_dir: Option<&Path>) -> Result<SweepOutput> {
    config.validate()?;
    let id = run_id(config);
    let mut out = SweepOutput { nested: true, ..SweepOutput::default() };
    for &seed in &config.seeds {
        run_seed(config, data, &id, seed, ckpt_dir, &mut out)?;
    }
    Ok(out)
}
