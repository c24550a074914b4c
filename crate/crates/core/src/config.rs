//! Run configuration, read from a flat TOML key/value file.
//!
//! ```toml
//! name = "mnist100-dropback-20k"
//! network = "mnist_100_100"     # or "lenet_300_100", or "custom" with `layers`
//! optimizer = "dropback"        # "dropback" | "sgd" | "magnitude"
//! k = 20000
//! lr0 = 0.4
//! lr_schedule = [[20, 0.5], [40, 0.5], [60, 0.5], [80, 0.5]]
//! momentum = 0.5
//! freeze_epoch = 5
//! epochs = 100
//! batch_size = 64
//! seed = 1
//! dataset = "mnist"
//! mnist_dir = "data/mnist"
//! output_dir = "runs/mnist100-dropback-20k"
//! ```
//!
//! Every omitted key takes its default, and the filled-in config is echoed
//! into the run record.

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::init::Seed;
use crate::metrics::EnergyModel;
use crate::nn::NetworkSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,

    pub network: String,
    /// Layer widths `[input, hidden..., classes]` for `network = "custom"`.
    pub layers: Vec<usize>,

    pub optimizer: String,
    /// Dropback tracked-set capacity.
    pub k: Option<usize>,
    /// Magnitude pruning: number of weights kept after each step.
    pub magnitude_keep: Option<usize>,
    /// Magnitude pruning: fraction of weights zeroed (0.8 keeps 20%).
    pub magnitude_prune_fraction: Option<f64>,

    pub lr0: f64,
    /// `(epoch, multiplier)` pairs; a multiplier applies from its epoch on.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    /// Epoch (0-based, i.e. after this many completed epochs) at which the
    /// tracked set is frozen. 0, absent, or `>= epochs` means never.
    pub freeze_epoch: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u32,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Abort when the mini-batch loss exceeds this multiple of the first one.
    pub divergence_factor: f64,

    /// `"mnist"` or `"synth"`.
    pub dataset: String,
    pub mnist_dir: String,
    /// Use only the first N training rows.
    pub train_limit: Option<usize>,
    /// Use only the first N validation rows.
    pub validation_limit: Option<usize>,
    pub synth_classes: usize,
    pub synth_dims: usize,
    pub synth_train_per_class: usize,
    pub synth_validation_per_class: usize,
    pub synth_spread: f64,

    /// Mini-batches between diffusion samples (0 disables).
    pub diffusion_every: u64,
    /// Mini-batches between weight snapshots for PCA (0 disables).
    pub snapshot_every: u64,
    pub histogram_bins: usize,
    /// Write one CSV row per mini-batch with churn and threshold.
    pub log_steps: bool,

    pub energy_dram_pj: f64,
    pub energy_flop_pj: f64,
    pub energy_regen_pj: f64,

    /// Where the record, metrics and checkpoint go; nothing is written when empty.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let energy = EnergyModel::default();
        Self {
            name: "run".into(),
            network: "mnist_100_100".into(),
            layers: Vec::new(),
            optimizer: "sgd".into(),
            k: None,
            magnitude_keep: None,
            magnitude_prune_fraction: None,
            lr0: 0.4,
            lr_schedule: default_schedule(),
            momentum: 0.5,
            freeze_epoch: None,
            epochs: 100,
            batch_size: 64,
            seed: 1,
            patience: 5,
            divergence_factor: 1e3,
            dataset: "mnist".into(),
            mnist_dir: "data/mnist".into(),
            train_limit: None,
            validation_limit: None,
            synth_classes: 3,
            synth_dims: 6,
            synth_train_per_class: 100,
            synth_validation_per_class: 50,
            synth_spread: 0.05,
            diffusion_every: 100,
            snapshot_every: 100,
            histogram_bins: 100,
            log_steps: true,
            energy_dram_pj: energy.dram_access_pj,
            energy_flop_pj: energy.flop_pj,
            energy_regen_pj: energy.regen_pj,
            output_dir: String::new(),
        }
    }
}

/// Halve the rate at epochs 20, 40, 60 and 80.
pub fn default_schedule() -> Vec<(usize, f64)> {
    vec![(20, 0.5), (40, 0.5), (60, 0.5), (80, 0.5)]
}

/// Which optimizer a config selects, with its budget resolved to a count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgd,
    Dropback { k: usize },
    Magnitude { keep: usize },
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> Seed {
        Seed(self.seed)
    }

    pub fn energy_model(&self) -> EnergyModel {
        EnergyModel {
            dram_access_pj: self.energy_dram_pj,
            flop_pj: self.energy_flop_pj,
            regen_pj: self.energy_regen_pj,
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        match self.network.as_str() {
            "mnist_100_100" => Ok(NetworkSpec::mnist_100_100()),
            "lenet_300_100" => Ok(NetworkSpec::lenet_300_100()),
            "custom" => NetworkSpec::mlp(&self.layers),
            other => Err(Error::Config(format!("unknown network {other:?}"))),
        }
    }

    pub fn optimizer_choice(&self, total_params: usize) -> Result<OptimizerChoice> {
        match self.optimizer.as_str() {
            "sgd" => Ok(OptimizerChoice::Sgd),
            "dropback" => {
                let k = self
                    .k
                    .ok_or_else(|| Error::Config("dropback needs `k`".into()))?;
                if k == 0 || k > total_params {
                    return Err(Error::Config(format!(
                        "k = {k} must be in 1..={total_params}"
                    )));
                }
                Ok(OptimizerChoice::Dropback { k })
            }
            "magnitude" => {
                let keep = match (self.magnitude_keep, self.magnitude_prune_fraction) {
                    (Some(m), None) => m,
                    (None, Some(f)) if (0.0..1.0).contains(&f) => {
                        ((1.0 - f) * total_params as f64).round() as usize
                    }
                    (None, Some(f)) => {
                        return Err(Error::Config(format!("prune fraction {f} outside [0, 1)")))
                    }
                    _ => {
                        return Err(Error::Config(
                            "magnitude needs exactly one of `magnitude_keep`, `magnitude_prune_fraction`"
                                .into(),
                        ))
                    }
                };
                if keep == 0 || keep > total_params {
                    return Err(Error::Config(format!(
                        "magnitude keep {keep} must be in 1..={total_params}"
                    )));
                }
                Ok(OptimizerChoice::Magnitude { keep })
            }
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }

    /// Freeze epoch that actually takes effect.
    pub fn effective_freeze_epoch(&self) -> Option<usize> {
        self.freeze_epoch.filter(|&f| f > 0 && f < self.epochs)
    }

    /// Checks everything that can be checked before loading data.
    pub fn validate(&self) -> Result<()> {
        let spec = self.network_spec()?;
        spec.check()?;
        self.optimizer_choice(spec.num_params())?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if let Some((e, m)) = self.lr_schedule.iter().find(|(_, m)| !(*m > 0.0)) {
            return Err(Error::Config(format!("schedule multiplier {m} at epoch {e} must be > 0")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(f) = self.freeze_epoch {
            if f > self.epochs {
                return Err(Error::Config(format!(
                    "freeze_epoch {f} exceeds epochs {}",
                    self.epochs
                )));
            }
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        match self.dataset.as_str() {
            "mnist" => {
                if !Path::new(&self.mnist_dir).is_dir() {
                    return Err(Error::Config(format!(
                        "mnist_dir {:?} is not a directory",
                        self.mnist_dir
                    )));
                }
                if spec.input_dim() != 784 || spec.output_dim() != 10 {
                    return Err(Error::Config("MNIST needs a 784-input, 10-class network".into()));
                }
            }
            "synth" => {
                if self.synth_dims == 0 || self.synth_classes < 2 || self.synth_train_per_class == 0 {
                    return Err(Error::Config("synthetic data needs dims >= 1, classes >= 2".into()));
                }
                if spec.input_dim() != self.synth_dims || spec.output_dim() != self.synth_classes {
                    return Err(Error::Config(format!(
                        "network is {}-in/{}-out but synthetic data has {} dims and {} classes",
                        spec.input_dim(),
                        spec.output_dim(),
                        self.synth_dims,
                        self.synth_classes
                    )));
                }
            }
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
        Ok(())
    }

    /// Training and validation sets.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut val) = match self.dataset.as_str() {
            "mnist" => data::load_mnist_split(Path::new(&self.mnist_dir))?,
            "synth" => {
                let make = |per_class, stream| {
                    data::synth_blobs_stream(
                        self.seed(),
                        stream,
                        self.synth_classes,
                        self.synth_dims,
                        per_class,
                        self.synth_spread,
                    )
                };
                (
                    make(self.synth_train_per_class, 1),
                    make(self.synth_validation_per_class.max(1), 2),
                )
            }
            other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
        };
        if let Some(n) = self.train_limit {
            train = train.slice(0..n.min(train.len()));
        }
        if let Some(n) = self.validation_limit {
            val = val.slice(0..n.min(val.len()));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training and validation sets must be non-empty".into()));
        }
        Ok((train, val))
    }

    pub fn output_path(&self) -> Option<PathBuf> {
        (!self.output_dir.is_empty()).then(|| PathBuf::from(&self.output_dir))
    }
}
