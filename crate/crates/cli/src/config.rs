//! Run configuration: a TOML file with one table per concern. Unknown keys
//! are rejected everywhere.

use std::path::{Path, PathBuf};

use bireal_core::binarize::WeightMode;
use bireal_core::netspec::{reference, NetworkSpec};
use bireal_core::surrogate::SurrogateKind;
use bireal_core::train::{bn_retrain_phase, init_chain, two_step_schedule, PhaseConfig, PhaseMode, TrainConfig};
use bireal_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core, 1 is the bit-exact mode.
    #[serde(default)]
    pub threads: usize,
    pub network: NetworkConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: MainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Reference spec name, e.g. `bireal10_mnist`.
    pub spec: String,
    /// Multiplies every channel count of the reference spec.
    #[serde(default = "one")]
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_mode: Option<WeightMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_grad: Option<bool>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub dir: PathBuf,
    /// Keep only the first `n` training samples (0 keeps all).
    #[serde(default)]
    pub train_limit: usize,
    #[serde(default)]
    pub test_limit: usize,
    /// Maximum random shift in pixels during training.
    #[serde(default)]
    pub augment_pad: usize,
    #[serde(default)]
    pub augment_flip: bool,
    #[serde(default = "eval_batch")]
    pub eval_batch: usize,
}

fn eval_batch() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Epochs of the ReLU, leaky-clip and clip phases.
    pub epochs: [usize; 3],
    pub lr: f64,
    pub weight_decay: f64,
    /// Pretrain with ReLU only.
    #[serde(default)]
    pub skip_chain: bool,
    #[serde(default = "batch")]
    pub batch_size: usize,
}

fn batch() -> usize {
    128
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: [2, 2, 2], lr: 0.1, weight_decay: 1e-4, skip_chain: false, batch_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "momentum")]
    pub momentum: f64,
    /// Rate for the closing batch-norm retraining epoch; `None` skips it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_retrain_lr: Option<f64>,
}

fn momentum() -> f64 {
    0.9
}

impl Default for MainConfig {
    fn default() -> Self {
        MainConfig {
            epochs: 20,
            lr: 0.01,
            batch_size: 128,
            decay_epochs: vec![10, 15],
            momentum: 0.9,
            bn_retrain_lr: Some(0.01),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.network.width == 0 {
            return Err(Error::Config("network.width must be positive".into()));
        }
        if self.data.eval_batch == 0 {
            return Err(Error::Config("data.eval_batch must be positive".into()));
        }
        self.train_config(true)?.validate()
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        let mut spec = reference::by_name(&self.network.spec)?.widened(self.network.width)?;
        let b = &mut spec.binarization;
        if let Some(s) = self.network.surrogate {
            b.surrogate = s;
        }
        if let Some(m) = self.network.weight_mode {
            b.weight_mode = m;
        }
        if let Some(g) = self.network.scale_grad {
            b.scale_grad = g;
        }
        Ok(spec)
    }

    pub fn pretrain_phases(&self) -> Vec<PhaseConfig> {
        let p = &self.pretrain;
        init_chain(p.epochs, p.lr, p.weight_decay, p.skip_chain)
            .into_iter()
            .map(|ph| PhaseConfig { batch_size: p.batch_size, ..ph })
            .collect()
    }

    /// Binary phases (split in two for bottleneck nets) plus the optional
    /// batch-norm retraining epoch.
    pub fn main_phases(&self) -> Result<Vec<PhaseConfig>> {
        let t = &self.train;
        let main = PhaseConfig {
            batch_size: t.batch_size,
            decay_epochs: t.decay_epochs.clone(),
            ..PhaseConfig::new("binary", PhaseMode::Binary, t.epochs, t.lr)
        };
        let spec = self.spec()?;
        let mut phases = match two_step_schedule(&spec, &main) {
            Ok(mut p) => {
                p.pop();
                p
            }
            Err(_) => vec![main],
        };
        if let Some(lr) = t.bn_retrain_lr {
            phases.push(bn_retrain_phase(lr, t.batch_size));
        }
        Ok(phases)
    }

    /// The schedule a command runs: the pretraining chain, then (if
    /// `with_main`) the binary phases.
    pub fn train_config(&self, with_main: bool) -> Result<TrainConfig> {
        let mut phases = self.pretrain_phases();
        if with_main {
            phases.extend(self.main_phases()?);
        }
        Ok(self.with_phases(phases))
    }

    pub fn with_phases(&self, phases: Vec<PhaseConfig>) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            momentum: self.train.momentum,
            augment_pad: self.data.augment_pad,
            augment_flip: self.data.augment_flip,
            eval_batch: self.data.eval_batch,
            phases,
        }
    }
}
