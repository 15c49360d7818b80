//! Experiment configuration: a flat TOML table whose every key has a
//! default. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::pretrain::HebbianConfig;
use crate::hebbian::{Activation, RuleKind};
use crate::layers::{ArchConfig, NetworkSpec, ProbePoint};
use crate::sgd::{Schedule, SgdConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    /// Generated oriented-grating images with CIFAR-10's shape.
    Textures,
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Cifar10 | DatasetKind::Textures => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    /// Top-1 for 10 classes, top-5 for 100.
    pub fn default_top_k(self) -> usize {
        match self {
            DatasetKind::Cifar100 => 5,
            _ => 1,
        }
    }

    /// L2 coefficient of end-to-end backpropagation.
    pub fn default_l2_end_to_end(self) -> f64 {
        match self {
            DatasetKind::Cifar100 => 1e-2,
            _ => 5e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bp")]
    Bp,
    #[serde(rename = "hpca")]
    Hpca,
    #[serde(rename = "hpca-ft")]
    HpcaFt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Bp, Method::Hpca, Method::HpcaFt];

    pub fn label(self) -> &'static str {
        match self {
            Method::Bp => "BP",
            Method::Hpca => "HPCA",
            Method::HpcaFt => "HPCA_FT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bp" | "BP" => Ok(Method::Bp),
            "hpca" | "HPCA" => Ok(Method::Hpca),
            "hpca-ft" | "hpca_ft" | "HPCA_FT" => Ok(Method::HpcaFt),
            other => Err(Error::arg(format!("unknown method {other:?}"))),
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Method::Hpca | Method::HpcaFt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Images taken from the front of the training pool; 0 keeps all.
    pub train_subset: usize,
    /// Images taken from the front of the test set; 0 keeps all.
    pub test_subset: usize,
    pub val_fraction: f64,
    pub regimes: Vec<f64>,
    pub methods: Vec<Method>,
    pub probes: Vec<ProbePoint>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub lr_constant_epochs: usize,
    pub lr_halve_every: usize,
    /// End-to-end L2; the dataset's value when absent.
    pub l2_end_to_end: Option<f64>,
    pub l2_classifier: f64,
    pub ft_epochs: usize,
    pub hebbian_lr: f64,
    pub hebbian_epochs: usize,
    pub hebbian_batch: usize,
    pub hebbian_activation: String,
    pub hebbian_mean_momentum: f64,
    pub layerwise: bool,
    pub width_divisor: usize,
    pub dropout: f64,
    /// Reported accuracy is top-k; the dataset's value when absent.
    pub top_k: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Cifar10,
            data_dir: PathBuf::from("data"),
            train_subset: 0,
            test_subset: 0,
            val_fraction: 0.2,
            regimes: vec![1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 25.0, 100.0],
            methods: Method::ALL.to_vec(),
            probes: vec![
                ProbePoint::L1,
                ProbePoint::L2,
                ProbePoint::L3,
                ProbePoint::L4,
                ProbePoint::L5,
                ProbePoint::Final,
            ],
            seeds: vec![0, 1, 2, 3, 4],
            epochs: 20,
            batch: 64,
            lr0: 1e-3,
            momentum: 0.9,
            nesterov: true,
            lr_constant_epochs: 10,
            lr_halve_every: 2,
            l2_end_to_end: None,
            l2_classifier: 5e-4,
            ft_epochs: 20,
            hebbian_lr: 1e-3,
            hebbian_epochs: 20,
            hebbian_batch: 64,
            hebbian_activation: "relu".into(),
            hebbian_mean_momentum: crate::hebbian::DEFAULT_MEAN_MOMENTUM,
            layerwise: false,
            width_divisor: 1,
            dropout: 0.5,
            top_k: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Laptop-sized sweep: 5,000 train / 1,000 validation / 1,000 test
    /// images, four regimes, three seeds, half-width network.
    pub fn desk() -> Self {
        ExperimentConfig {
            train_subset: 6000,
            test_subset: 1000,
            val_fraction: 1.0 / 6.0,
            regimes: vec![1.0, 5.0, 25.0, 100.0],
            seeds: vec![0, 1, 2],
            width_divisor: 2,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys in `text` replace those of `base`; absent keys keep `base`'s
    /// values.
    pub fn from_toml_over(base: &Self, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        base.merged(overlay)
    }

    /// Applies `key=value` assignments; values are TOML literals, anything
    /// that does not parse as one is taken as a string.
    pub fn with_assignments(&self, assignments: &[String]) -> Result<Self> {
        let mut overlay = toml::Table::new();
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {a:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(v.to_string()),
            };
            overlay.insert(k.to_string(), value);
        }
        self.merged(overlay)
    }

    fn merged(&self, overlay: toml::Table) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        table.extend(overlay);
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.regimes.is_empty() || self.regimes.iter().any(|&r| !(r > 0.0 && r <= 100.0)) {
            return bad(format!("regimes must be non-empty and in (0, 100], got {:?}", self.regimes));
        }
        if self.methods.is_empty() || self.probes.is_empty() || self.seeds.is_empty() {
            return bad("methods, probes and seeds must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.batch == 0 || self.hebbian_batch < 2 || self.width_divisor == 0 {
            return bad("batch sizes and width divisor must be positive (hebbian_batch ≥ 2)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.hebbian_lr > 0.0) || !(self.lr0 > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_halve_every == 0 {
            return bad("lr_halve_every must be positive".into());
        }
        if self.top_k == Some(0) {
            return bad("top_k must be positive".into());
        }
        self.activation()?;
        self.sgd(0.0).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn activation(&self) -> Result<Activation> {
        match self.hebbian_activation.as_str() {
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown hebbian_activation {other:?}"))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    pub fn top_k(&self) -> usize {
        self.top_k.unwrap_or_else(|| self.dataset.default_top_k())
    }

    pub fn l2_end_to_end(&self) -> f64 {
        self.l2_end_to_end.unwrap_or_else(|| self.dataset.default_l2_end_to_end())
    }

    pub fn arch(&self) -> ArchConfig {
        let mut arch = ArchConfig::scaled(self.num_classes(), self.width_divisor);
        arch.dropout = self.dropout;
        arch
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec::five_block(&self.arch())
    }

    fn sgd(&self, l2: f64) -> SgdConfig {
        SgdConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            nesterov: self.nesterov,
            l2,
            schedule: Schedule::ConstantThenHalve {
                constant_epochs: self.lr_constant_epochs,
                halve_every: self.lr_halve_every,
            },
        }
    }

    pub fn classifier_training(&self) -> TrainConfig {
        TrainConfig::new(self.epochs, self.batch, self.sgd(self.l2_classifier), self.top_k())
    }

    pub fn backprop_training(&self) -> TrainConfig {
        TrainConfig::new(self.epochs, self.batch, self.sgd(self.l2_end_to_end()), self.top_k())
    }

    pub fn fine_tune_training(&self) -> TrainConfig {
        TrainConfig::new(self.ft_epochs, self.batch, self.sgd(self.l2_end_to_end()), self.top_k())
    }

    pub fn hebbian(&self) -> HebbianConfig {
        HebbianConfig {
            rule: RuleKind::NonlinearHpca(self.activation().unwrap_or(Activation::Relu)),
            learning_rate: self.hebbian_lr,
            mean_momentum: self.hebbian_mean_momentum,
            epochs: self.hebbian_epochs,
            batch: self.hebbian_batch,
            layerwise: self.layerwise,
            ..HebbianConfig::default()
        }
    }

    /// Keys whose values differ from the defaults, sorted.
    pub fn overrides(&self) -> Vec<String> {
        let ours = toml::Table::try_from(self).expect("config serializes");
        let base = toml::Table::try_from(Self::default()).expect("config serializes");
        let mut keys: Vec<String> = ours.iter().filter(|(k, v)| base.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
        keys.extend(base.keys().filter(|k| !ours.contains_key(*k)).cloned());
        keys.sort();
        keys
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(cfg.overrides().is_empty());
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("learning_rate = 0.1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_listed() {
        let cfg = ExperimentConfig::from_toml("epochs = 3\nmethods = [\"bp\", \"hpca-ft\"]\nprobes = [\"L3\"]\n").unwrap();
        assert_eq!(cfg.methods, vec![Method::Bp, Method::HpcaFt]);
        assert_eq!(cfg.overrides(), vec!["epochs", "methods", "probes"]);
    }

    #[test]
    fn dataset_bound_defaults() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!((cfg.top_k(), cfg.l2_end_to_end()), (1, 5e-2));
        cfg.dataset = DatasetKind::Cifar100;
        assert_eq!((cfg.top_k(), cfg.l2_end_to_end()), (5, 1e-2));
        assert_eq!(cfg.classifier_training().sgd.l2, 5e-4);
        assert_eq!(cfg.hebbian().learning_rate, 1e-3);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml("regimes = [0.0]\n").is_err());
        assert!(ExperimentConfig::from_toml("hebbian_activation = \"tanh\"\n").is_err());
        assert!(ExperimentConfig::from_toml("seeds = []\n").is_err());
    }

    #[test]
    fn overlay_keeps_base_values() {
        let desk = ExperimentConfig::desk();
        let cfg = ExperimentConfig::from_toml_over(&desk, "epochs = 3").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seeds, desk.seeds);
        assert!(ExperimentConfig::from_toml_over(&desk, "epoch = 3").is_err());
    }

    #[test]
    fn assignments_parse_literals_and_strings() {
        let cfg = ExperimentConfig::default()
            .with_assignments(&["dataset=textures".into(), "regimes=[1, 5]".into(), "layerwise = true".into()])
            .unwrap();
        assert_eq!(cfg.dataset, DatasetKind::Textures);
        assert_eq!(cfg.regimes, vec![1.0, 5.0]);
        assert!(cfg.layerwise);
        assert!(ExperimentConfig::default().with_assignments(&["epochs".into()]).is_err());
    }
}
