//! Run configuration (TOML) and the manifest written next to trained models.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::HashingMode;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::supervision::{HeightSource, NoiseSpec, SamplerConfig};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    Baseline,
    /// Keep semantic labels on this fraction of frames.
    Sparse { fraction: f64 },
    /// Flip this fraction of labeled pixels to a different class.
    Noise { ratio: f64 },
    /// Replace every hash encoder's mode.
    Ablation { mode: HashingMode },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Ground grid spacing for hole and manhole metrics.
    pub grid_step: f64,
    /// Vertex spacing of exported meshes.
    pub export_step: f64,
    /// Samples per frame when rendering evaluation views.
    pub samples_per_frame: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_step: 0.1,
            export_step: 0.1,
            samples_per_frame: 200_000,
            seed: 7,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            samples_per_frame: self.samples_per_frame,
            drop_ignored: false,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub height_source: HeightSource,
    /// Dataset poses and clouds use recorded-drive camera axes.
    #[serde(default)]
    pub kitti_axes: bool,
    pub experiment: Experiment,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            height_source: HeightSource::Lidar,
            kitti_axes: false,
            experiment: Experiment::Baseline,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        match self.experiment {
            Experiment::Sparse { fraction } if !(0.0..=1.0).contains(&fraction) => {
                return Err(Error::Config(format!("sparse fraction {fraction} outside [0, 1]")))
            }
            Experiment::Noise { ratio } => NoiseSpec { ratio, seed: 0 }.validate()?,
            _ => {}
        }
        if !(self.eval.grid_step > 0.0) || !(self.eval.export_step > 0.0) {
            return Err(Error::Config("eval grid steps must be positive".into()));
        }
        if self.eval.samples_per_frame == 0 {
            return Err(Error::Config("eval samples_per_frame must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Model configuration with the experiment's hash mode applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Experiment::Ablation { mode } = self.experiment {
            for enc in [&mut m.height_encoder, &mut m.color_encoder, &mut m.semantic_encoder] {
                enc.set_hash_mode(mode);
            }
        }
        m
    }
}

/// Written beside every trained checkpoint; the config echo reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub dataset_hash: String,
    pub model_digest: String,
    pub trace_digest: String,
    pub config: RunConfig,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
