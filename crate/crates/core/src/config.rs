//! Run configuration, read from TOML.
//!
//! Every section has defaults for every key and rejects unknown keys. A
//! minimal file can be empty.
//!
//! ```toml
//! seed = 3
//! out_dir = "runs/desk"
//!
//! [space]
//! channels = 8
//! K = 1
//! bits = [4, 8]
//!
//! [search]
//! epochs = 20
//! strategy = "san"
//! eta = 1e-3
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitmixer::{SanScaling, Strategy};
use crate::data::{png_dir_samples, synthetic_samples, Sample, Splits};
use crate::error::{Error, Result};
use crate::objective::FlopConvention;
use crate::quant::NoiseDist;
use crate::supernet::SearchSpaceSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Alternating architecture search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Iterations per epoch; `0` means one pass over the architecture split.
    pub iters_per_epoch: usize,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    /// Hardware penalty coefficient.
    pub eta: f64,
    /// Initial entropy coefficient.
    pub mu0: f64,
    pub strategy: Strategy,
    pub noise_dist: NoiseDist,
    pub san_noise_scaling: SanScaling,
    /// Side of the square low-resolution image used for BitOps.
    pub bitops_image: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 20,
            batch_size: 16,
            iters_per_epoch: 0,
            w_lr: 1e-3,
            w_momentum: 0.9,
            w_weight_decay: 3e-7,
            alpha_lr: 3e-4,
            eta: 0.0,
            mu0: 1e-4,
            strategy: Strategy::San,
            noise_dist: NoiseDist::Gaussian,
            san_noise_scaling: SanScaling::Range,
            bitops_image: 32,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        positive("search.batch_size", self.batch_size)?;
        non_negative("search.w_lr", self.w_lr)?;
        non_negative("search.alpha_lr", self.alpha_lr)?;
        non_negative("search.eta", self.eta)?;
        non_negative("search.mu0", self.mu0)?;
        non_negative("search.w_weight_decay", self.w_weight_decay)?;
        unit_interval("search.w_momentum", self.w_momentum)?;
        positive("search.bitops_image", self.bitops_image)
    }
}

/// From-scratch training of a fixed network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Iterations per epoch; `0` means one pass over the training samples.
    pub iters_per_epoch: usize,
    pub optimizer: OptimizerKind,
    /// Initial learning rate, cosine-annealed to zero.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            iters_per_epoch: 0,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 3e-7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("train.batch_size", self.batch_size)?;
        non_negative("train.lr", self.lr)?;
        non_negative("train.weight_decay", self.weight_decay)?;
        unit_interval("train.momentum", self.momentum)
    }
}

/// Where training patches come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of patches (synthetic), or patches per image with `image_dir`.
    pub samples: usize,
    /// Side of the square high-resolution patch.
    pub hr_patch: usize,
    /// Patches held out for evaluation.
    pub valid: usize,
    /// Directory of PNG images; synthetic textures when absent.
    pub image_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 96,
            hr_patch: 64,
            valid: 16,
            image_dir: None,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, scale: usize) -> Result<()> {
        positive("data.hr_patch", self.hr_patch)?;
        if scale > 0 && self.hr_patch % scale != 0 {
            return Err(Error::config(format!(
                "data.hr_patch = {} is not divisible by space.scale = {scale}",
                self.hr_patch
            )));
        }
        positive("data.samples", self.samples)
    }
}

impl DataConfig {
    /// Synthetic textures, or random crops of the PNGs in `image_dir`.
    pub fn samples(&self, scale: usize) -> Result<Vec<Sample>> {
        self.validate(scale)?;
        match &self.image_dir {
            Some(dir) => png_dir_samples(dir, self.samples, self.hr_patch, scale, self.seed),
            None => synthetic_samples(self.samples, self.hr_patch, scale, self.seed),
        }
    }

    pub fn splits(&self, scale: usize) -> Result<Splits> {
        Splits::new(self.samples(scale)?, self.valid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub etas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            etas: vec![0.0, 5e-5, 1e-4, 1e-3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub iterations: usize,
    /// Numbers of candidate bit widths to time.
    pub bit_counts: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub batch_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iterations: 60,
            bit_counts: vec![1, 2, 3],
            strategies: vec![Strategy::Independent, Strategy::Shared, Strategy::San],
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub convention: FlopConvention,
    /// Side of the square image used for BitOps.
    pub bitops_image: usize,
    /// Side of the square image used for FLOPs.
    pub flops_image: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            convention: FlopConvention::Mac,
            bitops_image: 32,
            flops_image: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides every section's seed when present.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub space: SearchSpaceSpec,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub cost: CostConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: PathBuf::from("runs"),
            space: SearchSpaceSpec::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
            cost: CostConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if let Some(s) = cfg.seed {
            cfg.set_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.search.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.search.validate()?;
        self.train.validate()?;
        self.data.validate(self.space.scale)?;
        for &e in &self.sweep.etas {
            non_negative("sweep.etas", e)?;
        }
        for &b in &self.bench.bit_counts {
            if !(1..=3).contains(&b) {
                return Err(Error::config(format!("bench.bit_counts: {b} is outside 1..=3")));
            }
        }
        positive("bench.batch_size", self.bench.batch_size)?;
        positive("cost.bitops_image", self.cost.bitops_image)?;
        positive("cost.flops_image", self.cost.flops_image)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

impl SearchSpaceSpec {
    /// `default`, `full` or `degenerate`.
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "full" => Some(Self::full()),
            "degenerate" => Some(Self::degenerate()),
            _ => None,
        }
    }

    /// A TOML file holding the keys of the `[space]` section.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SearchSpaceSpec = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// A preset name or a path to a space file.
    pub fn resolve(arg: &str) -> Result<Self> {
        if let Some(s) = Self::named(arg) {
            return Ok(s);
        }
        let path = Path::new(arg);
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(format!("{key} must be positive")));
    }
    Ok(())
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::config(format!("{key} must be a finite non-negative number, got {v}")));
    }
    Ok(())
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::config(format!("{key} must lie in [0, 1), got {v}")));
    }
    Ok(())
}
