//! Run configuration: one TOML file covering data, networks and all three
//! stages, plus the on-disk layout of a run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::{DegradationSpec, MaskSpec, ToySpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::NetworkConfig;
use crate::training::{CodebookInit, StageConfig, Task};

/// Environment variable that replaces `output_dir` from the config file.
pub const OUTPUT_ROOT_ENV: &str = "ADACODE_OUTPUT_ROOT";

/// Per-stage optimisation settings. Seed, degradation and mask come from
/// the top level of [`RunConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub loss_weights: LossWeights,
    pub codebook_sizes: Vec<usize>,
    pub basis_subset: Option<Vec<String>>,
    pub task: Option<Task>,
    pub adv_warmup: f64,
    pub codebook_init: CodebookInit,
}

impl Default for StageSection {
    fn default() -> Self {
        Self::from(&StageConfig::desk(1))
    }
}

impl From<&StageConfig> for StageSection {
    fn from(c: &StageConfig) -> Self {
        Self {
            iterations: c.iterations,
            batch_size: c.batch_size,
            lr_generator: c.lr_generator,
            lr_discriminator: c.lr_discriminator,
            loss_weights: c.loss_weights,
            codebook_sizes: c.codebook_sizes.clone(),
            basis_subset: c.basis_subset.clone(),
            task: (c.stage == 3).then_some(c.task),
            adv_warmup: c.adv_warmup,
            codebook_init: c.codebook_init,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Toy dataset written by `synth-data`.
    pub toy: ToySpec,
    /// Training data root with one subdirectory per super-class; defaults
    /// to `<output>/data`.
    pub train_dir: Option<PathBuf>,
    /// Flat directory of evaluation images; defaults to the training images.
    pub eval_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub degradation: DegradationSpec,
    pub mask: MaskSpec,
    pub stage1: StageSection,
    pub stage2: StageSection,
    pub stage3: StageSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            network: NetworkConfig::desk(),
            data: DataConfig::default(),
            degradation: DegradationSpec::default(),
            mask: MaskSpec::default(),
            stage1: StageSection::default(),
            stage2: StageSection::default(),
            stage3: StageSection {
                task: Some(Task::SuperResolution),
                ..StageSection::default()
            },
        }
    }
}

impl RunConfig {
    /// Small networks and short schedules that finish in seconds.
    pub fn tiny() -> Self {
        let s = |stage| StageSection {
            iterations: 20,
            ..StageSection::from(&StageConfig::tiny(stage))
        };
        Self {
            network: NetworkConfig::tiny(),
            data: DataConfig {
                toy: ToySpec {
                    classes: 3,
                    patches_per_class: 4,
                    patch_size: 16,
                },
                ..DataConfig::default()
            },
            degradation: DegradationSpec {
                scale: 2,
                ..DegradationSpec::default()
            },
            stage1: s(1),
            stage2: s(2),
            stage3: s(3),
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let c = Self::parse(&text)?;
        c.validate()?;
        Ok(c)
    }

    /// Replaces `output_dir` when [`OUTPUT_ROOT_ENV`] is set and non-empty.
    pub fn apply_env(&mut self) {
        if let Some(v) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(v);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved config to `path`, creating parent directories.
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn section(&self, stage: u8) -> Result<&StageSection> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            s => Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
        }
    }

    pub fn section_mut(&mut self, stage: u8) -> Result<&mut StageSection> {
        match stage {
            1 => Ok(&mut self.stage1),
            2 => Ok(&mut self.stage2),
            3 => Ok(&mut self.stage3),
            s => Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
        }
    }

    /// Full training configuration for `stage`.
    pub fn stage_config(&self, stage: u8) -> Result<StageConfig> {
        let s = self.section(stage)?;
        let task = match stage {
            3 => s
                .task
                .ok_or_else(|| Error::Config("stage3.task must be `sr` or `inpaint`".into()))?,
            _ => Task::Reconstruction,
        };
        let c = StageConfig {
            stage,
            iterations: s.iterations,
            batch_size: s.batch_size,
            lr_generator: s.lr_generator,
            lr_discriminator: s.lr_discriminator,
            loss_weights: s.loss_weights,
            codebook_sizes: s.codebook_sizes.clone(),
            basis_subset: s.basis_subset.clone(),
            task,
            adv_warmup: s.adv_warmup,
            codebook_init: s.codebook_init,
            degradation: self.degradation.clone(),
            mask: self.mask.clone(),
            seed: self.seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        self.network.validate().map_err(as_config)?;
        self.data.toy.validate()?;
        for stage in 1..=3 {
            if stage != 3 && self.section(stage)?.task.is_some_and(|t| t != Task::Reconstruction) {
                return Err(Error::Config(format!("stage{stage}.task can only be `reconstruction`")));
            }
            self.stage_config(stage).map_err(as_config)?;
        }
        Ok(())
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout {
            root: self.output_dir.clone(),
            data: self.data.train_dir.clone().unwrap_or_else(|| self.output_dir.join("data")),
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Where a run keeps its files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl RunLayout {
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn stage1_checkpoint(&self, label: &str) -> PathBuf {
        self.checkpoints().join(format!("stage1_{label}.ckpt"))
    }

    pub fn stage2_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("stage2.ckpt")
    }

    pub fn stage3_checkpoint(&self, task: Task) -> PathBuf {
        self.checkpoints().join(format!("stage3_{}.ckpt", task.name()))
    }
}
