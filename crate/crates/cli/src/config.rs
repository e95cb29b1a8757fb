//! Versioned TOML run configuration and `--ablate key=value` overrides.

use std::path::{Path, PathBuf};

use magicnet_core::augment::BaselineAug;
use magicnet_core::eval::EvalConfig;
use magicnet_core::phantom::PhantomSpec;
use magicnet_core::trainer::{MixScope, Preset, SupMode, TrainConfig};
use magicnet_core::volume::Dims;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `phantom generate`; when absent the phantom
    /// dataset is generated in memory from the master seed.
    pub dir: Option<PathBuf>,
    pub cases: usize,
    pub labeled_fraction: f64,
    /// Held-out cases for validation and final evaluation.
    pub test_cases: usize,
    /// Phantom layout; the desk default when absent.
    pub phantom: Option<PhantomSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: None, cases: 40, labeled_fraction: 0.1, test_cases: 20, phantom: None }
    }
}

impl DataConfig {
    pub fn phantom_spec(&self) -> PhantomSpec {
        self.phantom.clone().unwrap_or_else(PhantomSpec::desk_default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Checkpoint interval in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Validation interval in iterations; 0 disables periodic validation.
    pub validate_every: u64,
    /// Held-out cases used for periodic validation.
    pub validation_cases: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { checkpoint_every: 500, validate_every: 500, validation_cases: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::parse(path, e))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!("{}: unsupported config version {}", path.display(), cfg.version)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Training config with the master seed applied.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_train().validate()?;
        if self.data.dir.is_none() {
            self.data_phantom_check()?;
        }
        if !(0.0..=1.0).contains(&self.data.labeled_fraction) {
            return Err(CliError::Config(format!("labeled fraction {} outside [0, 1]", self.data.labeled_fraction)));
        }
        Ok(())
    }

    fn data_phantom_check(&self) -> Result<()> {
        let spec = self.data.phantom_spec();
        spec.validate()?;
        if spec.organs.iter().map(|o| o.class as usize).max().unwrap_or(0) > self.train.network.num_classes {
            return Err(CliError::Config("phantom has more organ classes than the network".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn ablate(&mut self, kv: &str) -> Result<()> {
        let (key, value) =
            kv.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{kv}` is not key=value")))?;
        let bad = || CliError::Usage(format!("invalid value `{value}` for `{key}`"));
        let flag = || match value {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            _ => Err(bad()),
        };
        let t = &mut self.train;
        match key {
            "preset" => {
                let p = Preset::from_name(value).ok_or_else(bad)?;
                *t = p.apply(t);
            }
            "cross" => t.ablation.cross = flag()?,
            "in" | "within" => t.ablation.within = flag()?,
            "loc" => t.ablation.loc = flag()?,
            "bld" | "blend" => {
                t.ablation.sup_mode = if flag()? { SupMode::Blend } else { SupMode::Teacher };
            }
            "scramble" => t.ablation.scramble = flag()?,
            "mix_scope" => {
                t.ablation.mix_scope = match value {
                    "U" | "u" => MixScope::U,
                    "LU" | "lu" => MixScope::LU,
                    _ => return Err(bad()),
                }
            }
            "sup_mode" => {
                t.ablation.sup_mode = match value {
                    "blend" => SupMode::Blend,
                    "teacher" => SupMode::Teacher,
                    "mutual" => SupMode::Mutual,
                    _ => return Err(bad()),
                }
            }
            "baseline" => {
                let side = t.crop.w / 2;
                t.ablation.baseline = match value {
                    "none" => None,
                    "cutmix" => Some(BaselineAug::CutMix { size: Dims::cube(side) }),
                    "cutout" => Some(BaselineAug::CutOut { size: Dims::cube(side) }),
                    "mixup" => Some(BaselineAug::MixUp { lambda: None }),
                    _ => return Err(bad()),
                }
            }
            "n" | "N" => {
                let n: usize = value.parse().map_err(|_| bad())?;
                t.n_cubes = n;
                t.network.n_locations = n * n * n;
                // Fall back to global pooling when the cube bottleneck does
                // not split into the configured location grid.
                let m = t.network.size_multiple();
                if n > 0 && t.crop.divisible_by(n * m) && !t.crop.div(n * m).divisible_by(t.network.cls_grid) {
                    t.network.cls_grid = 1;
                }
            }
            "unlabeled_per_batch" => t.unlabeled_per_batch = value.parse().map_err(|_| bad())?,
            "labeled_per_batch" => t.labeled_per_batch = value.parse().map_err(|_| bad())?,
            "max_iter" => t.max_iter = value.parse().map_err(|_| bad())?,
            "base_lr" => t.base_lr = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(CliError::Usage(format!("unknown override key `{key}`"))),
        }
        Ok(())
    }
}
