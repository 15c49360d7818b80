//! Declarative network descriptions and their canonical text form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ops::BnMode;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: (usize, usize), stride: usize, pad: usize },
    MaxPool { kernel: (usize, usize), stride: usize },
    Relu,
    Dropout { rate: f64 },
    Fc { out_features: usize },
    /// `hebbian_mode` is the normalization used while the layers below are
    /// trained with the Hebbian rule; supervised phases always use
    /// [`BnMode::Standard`].
    BatchNorm { hebbian_mode: BnMode },
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbePoint {
    L1,
    L2,
    L3,
    L4,
    L5,
    Final,
}

impl ProbePoint {
    pub const INTERNAL: [ProbePoint; 5] = [ProbePoint::L1, ProbePoint::L2, ProbePoint::L3, ProbePoint::L4, ProbePoint::L5];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbePoint::L1 => "L1",
            ProbePoint::L2 => "L2",
            ProbePoint::L3 => "L3",
            ProbePoint::L4 => "L4",
            ProbePoint::L5 => "L5",
            ProbePoint::Final => "Final",
        }
    }
}

impl fmt::Display for ProbePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbePoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(ProbePoint::L1),
            "L2" | "l2" => Ok(ProbePoint::L2),
            "L3" | "l3" => Ok(ProbePoint::L3),
            "L4" | "l4" => Ok(ProbePoint::L4),
            "L5" | "l5" => Ok(ProbePoint::L5),
            "Final" | "final" => Ok(ProbePoint::Final),
            other => Err(Error::arg(format!("unknown probe point {other:?}"))),
        }
    }
}

/// Layer stack plus the five named cut points.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// `(channels, height, width)`
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// `(layer index, name)`: the probe reads the output of that layer.
    pub probe_points: Vec<(usize, ProbePoint)>,
}

/// Widths and switches of the five-block conv/FC architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchConfig {
    /// Filters of L1..L4 and units of L5.
    pub widths: [usize; 5],
    pub num_classes: usize,
    pub pooling: bool,
    pub input_shape: (usize, usize, usize),
    pub dropout: f64,
}

impl ArchConfig {
    pub fn full(num_classes: usize) -> Self {
        ArchConfig {
            widths: [96, 128, 192, 256, 300],
            num_classes,
            pooling: true,
            input_shape: (3, 32, 32),
            dropout: 0.5,
        }
    }

    /// Widths divided by `factor` (rounded, at least 1).
    pub fn scaled(num_classes: usize, factor: usize) -> Self {
        let mut a = Self::full(num_classes);
        for w in &mut a.widths {
            *w = (*w / factor).max(1);
        }
        a
    }
}

impl NetworkSpec {
    /// Five blocks plus a dropout + linear classifier:
    /// conv5×5 · BN · ReLU · pool | conv3×3 · BN · ReLU | conv3×3 · BN · ReLU · pool |
    /// conv3×3 · BN* · ReLU | flatten · FC · BN* · ReLU | dropout · FC.
    /// `BN*` is variance-averaged while training with the Hebbian rule.
    pub fn five_block(arch: &ArchConfig) -> Self {
        use LayerSpec::*;
        let std_bn = BatchNorm { hebbian_mode: BnMode::Standard };
        let avg_bn = BatchNorm { hebbian_mode: BnMode::VarianceAveraged };
        let pool = MaxPool { kernel: (2, 2), stride: 2 };
        let w = arch.widths;
        let mut layers = Vec::new();
        let mut probes = Vec::new();
        let mut block = |layers: &mut Vec<LayerSpec>, items: &[LayerSpec], name: ProbePoint| {
            layers.extend_from_slice(items);
            probes.push((layers.len() - 1, name));
        };
        let conv = |o, k, pad| Conv { out_channels: o, kernel: (k, k), stride: 1, pad };
        if arch.pooling {
            block(&mut layers, &[conv(w[0], 5, 2), std_bn, Relu, pool], ProbePoint::L1);
        } else {
            block(&mut layers, &[conv(w[0], 5, 2), std_bn, Relu], ProbePoint::L1);
        }
        block(&mut layers, &[conv(w[1], 3, 1), std_bn, Relu], ProbePoint::L2);
        if arch.pooling {
            block(&mut layers, &[conv(w[2], 3, 1), std_bn, Relu, pool], ProbePoint::L3);
        } else {
            block(&mut layers, &[conv(w[2], 3, 1), std_bn, Relu], ProbePoint::L3);
        }
        block(&mut layers, &[conv(w[3], 3, 1), avg_bn, Relu], ProbePoint::L4);
        block(&mut layers, &[Flatten, Fc { out_features: w[4] }, avg_bn, Relu], ProbePoint::L5);
        layers.push(Dropout { rate: arch.dropout });
        layers.push(Fc { out_features: arch.num_classes });
        NetworkSpec { input_shape: arch.input_shape, num_classes: arch.num_classes, layers, probe_points: probes }
    }

    pub fn validate(&self) -> Result<()> {
        let names: Vec<ProbePoint> = self.probe_points.iter().map(|p| p.1).collect();
        if names != ProbePoint::INTERNAL {
            return Err(Error::arg(format!("expected probe points L1..L5 in order, got {names:?}")));
        }
        if self.probe_points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::arg("probe points must be at increasing layer indices"));
        }
        if self.probe_points.iter().any(|p| p.0 >= self.layers.len()) {
            return Err(Error::arg("probe point past the last layer"));
        }
        match self.layers.last() {
            Some(LayerSpec::Fc { out_features }) if *out_features == self.num_classes => {}
            _ => return Err(Error::arg("last layer must be an FC layer with num_classes outputs")),
        }
        for l in &self.layers {
            if let LayerSpec::Dropout { rate } = l {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::arg(format!("dropout rate {rate} outside [0, 1)")));
                }
            }
        }
        Ok(())
    }

    /// Index of the last layer included when probing at `probe`.
    pub fn probe_index(&self, probe: ProbePoint) -> Result<usize> {
        if probe == ProbePoint::Final {
            return Ok(self.layers.len() - 1);
        }
        self.probe_points
            .iter()
            .find(|p| p.1 == probe)
            .map(|p| p.0)
            .ok_or_else(|| Error::arg(format!("network has no probe point {probe}")))
    }

    /// Canonical text: one layer per line, probe markers after the layer
    /// they tag.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (c, h, w) = self.input_shape;
        out.push_str(&format!("input {c} {h} {w}\nclasses {}\n", self.num_classes));
        for (i, l) in self.layers.iter().enumerate() {
            let line = match l {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    format!("conv {out_channels} {} {} {stride} {pad}", kernel.0, kernel.1)
                }
                LayerSpec::MaxPool { kernel, stride } => format!("maxpool {} {} {stride}", kernel.0, kernel.1),
                LayerSpec::Relu => "relu".into(),
                LayerSpec::Dropout { rate } => format!("dropout {rate:?}"),
                LayerSpec::Fc { out_features } => format!("fc {out_features}"),
                LayerSpec::BatchNorm { hebbian_mode } => format!("batchnorm {}", hebbian_mode.as_str()),
                LayerSpec::Flatten => "flatten".into(),
            };
            out.push_str(&line);
            out.push('\n');
            for p in self.probe_points.iter().filter(|p| p.0 == i) {
                out.push_str(&format!("probe {}\n", p.1));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Checkpoint(format!("malformed network line {line:?}"));
        let num = |s: Option<&str>, line: &str| -> Result<usize> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))
        };
        let mut input_shape = None;
        let mut num_classes = None;
        let mut layers = Vec::new();
        let mut probe_points = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut it = line.split_whitespace();
            let head = it.next().unwrap_or_default();
            match head {
                "input" => {
                    input_shape = Some((num(it.next(), line)?, num(it.next(), line)?, num(it.next(), line)?));
                }
                "classes" => num_classes = Some(num(it.next(), line)?),
                "conv" => layers.push(LayerSpec::Conv {
                    out_channels: num(it.next(), line)?,
                    kernel: (num(it.next(), line)?, num(it.next(), line)?),
                    stride: num(it.next(), line)?,
                    pad: num(it.next(), line)?,
                }),
                "maxpool" => layers.push(LayerSpec::MaxPool {
                    kernel: (num(it.next(), line)?, num(it.next(), line)?),
                    stride: num(it.next(), line)?,
                }),
                "relu" => layers.push(LayerSpec::Relu),
                "flatten" => layers.push(LayerSpec::Flatten),
                "dropout" => {
                    let rate = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(line))?;
                    layers.push(LayerSpec::Dropout { rate })
                }
                "fc" => layers.push(LayerSpec::Fc { out_features: num(it.next(), line)? }),
                "batchnorm" => {
                    let mode = BnMode::parse(it.next().ok_or_else(|| bad(line))?)?;
                    layers.push(LayerSpec::BatchNorm { hebbian_mode: mode })
                }
                "probe" => {
                    let name: ProbePoint = it.next().ok_or_else(|| bad(line))?.parse()?;
                    if layers.is_empty() {
                        return Err(bad(line));
                    }
                    probe_points.push((layers.len() - 1, name));
                }
                _ => return Err(bad(line)),
            }
            if it.next().is_some() {
                return Err(bad(line));
            }
        }
        let spec = NetworkSpec {
            input_shape: input_shape.ok_or_else(|| Error::Checkpoint("missing input line".into()))?,
            num_classes: num_classes.ok_or_else(|| Error::Checkpoint("missing classes line".into()))?,
            layers,
            probe_points,
        };
        spec.validate()?;
        Ok(spec)
    }
}
