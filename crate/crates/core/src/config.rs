//! Run configuration: one strict TOML document holding everything a run
//! depends on.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::derive_seed;
use crate::checkpoint::config_hash;
use crate::data::{Dataset, ImageSource};
use crate::error::{Error, Result};
use crate::eval::EvalGrid;
use crate::net::ModelConfig;
use crate::scalar::{Precision, Scalar};
use crate::train::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: ImageSource,
    pub eval: ImageSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: ImageSource::Procedural { count: 512 },
            eval: ImageSource::Procedural { count: 256 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    /// stages `train` runs, in pipeline order regardless of listing order
    pub stages: Vec<Stage>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalGrid,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            output_dir: PathBuf::from("runs/default"),
            stages: Stage::ORDER.to_vec(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalGrid::default(),
            data: DataConfig::default(),
        }
    }
}

/// The part of a run that determines trained weights.
#[derive(Serialize)]
struct TrainingIdentity<'a> {
    seed: u64,
    precision: Precision,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    data: &'a ImageSource,
}

const TRAIN_DATA: u64 = 0xDA7A_0001;
const EVAL_DATA: u64 = 0xDA7A_0002;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Desk-scale trend experiment: 16×16 antennas, `d = 16`, 32×32
    /// procedural images, two adaptor blocks, 2000 pre-training steps and
    /// 1000 per later stage.
    pub fn desk_trend() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/tiny"),
            model: ModelConfig {
                n_tx: 16,
                n_rx: 16,
                d: 16,
                d_prime: 32,
                n_blocks: 2,
                heads: 4,
                mlp_ratio: 2,
                image: [3, 32, 32],
                stage_channels: vec![16, 32, 32],
                snr_hidden: 16,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 32,
                steps: 1000,
                pretrain_steps: Some(2000),
                pretrain_lr: Some(3e-3),
                ..TrainConfig::default()
            },
            eval: EvalGrid {
                images: 128,
                realizations: 1,
                ..EvalGrid::default()
            },
            data: DataConfig {
                train: ImageSource::Procedural { count: 512 },
                eval: ImageSource::Procedural { count: 128 },
            },
            ..Self::default()
        }
    }

    /// Miniature model and a few steps per stage, for smoke runs.
    pub fn smoke() -> Self {
        Self {
            output_dir: PathBuf::from("runs/smoke"),
            model: ModelConfig {
                compression_ratio: Some(1.0 / 24.0),
                ..ModelConfig::miniature()
            },
            train: TrainConfig {
                batch_size: 4,
                steps: 50,
                ..TrainConfig::default()
            },
            eval: EvalGrid {
                snr_db: vec![0.0, 10.0],
                sigma_e: vec![0.01, 0.1],
                seeds: vec![0, 1],
                images: 8,
                realizations: 1,
                batch: 8,
                ..EvalGrid::default()
            },
            data: DataConfig {
                train: ImageSource::Procedural { count: 32 },
                eval: ImageSource::Procedural { count: 8 },
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("stages must not be empty".into()));
        }
        Ok(())
    }

    /// Hash stored in every checkpoint. Covers the fields that shape the
    /// weights, so editing the eval grid or output directory keeps
    /// checkpoints loadable.
    pub fn training_hash(&self) -> String {
        config_hash(&TrainingIdentity {
            seed: self.seed,
            precision: self.precision,
            model: &self.model,
            train: &self.train,
            data: &self.data.train,
        })
    }

    pub fn train_data<T: Scalar>(&self) -> Result<Dataset<T>> {
        Dataset::load(
            &self.data.train,
            self.model.image,
            derive_seed(&[self.seed, TRAIN_DATA]),
        )
    }

    pub fn eval_data<T: Scalar>(&self) -> Result<Dataset<T>> {
        Dataset::load(
            &self.data.eval,
            self.model.image,
            derive_seed(&[self.seed, EVAL_DATA]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn shipped_configs_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (file, preset) in [
            ("tiny.toml", RunConfig::desk_trend()),
            ("smoke.toml", RunConfig::smoke()),
        ] {
            assert_eq!(RunConfig::load(&dir.join(file)).unwrap(), preset, "{file}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            "sede = 1",
            "[model]\nn_txx = 4",
            "[train]\nbeta = 1.0\nalpha = 2.0",
            "[eval]\nseed = [1]",
            "[data]\ntest = { procedural = { count = 4 } }",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 7\nprecision = \"f64\"\nstages = [\"PRETRAIN_BASELINE\"]\n[model]\nd_prime = 32\n[data]\ntrain = { directory = { path = \"imgs\" } }",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.model.d_prime, 32);
        assert_eq!(cfg.model.n_tx, ModelConfig::default().n_tx);
        assert_eq!(
            cfg.data.train,
            ImageSource::Directory {
                path: "imgs".into()
            }
        );
    }

    #[test]
    fn training_hash_ignores_eval_and_output() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.seeds = vec![9];
        b.output_dir = "elsewhere".into();
        assert_eq!(a.training_hash(), b.training_hash());
        b.train.beta = 0.5;
        assert_ne!(a.training_hash(), b.training_hash());
        b = a.clone();
        b.seed = 1;
        assert_ne!(a.training_hash(), b.training_hash());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml("[train]\nbatch_size = 0"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("stages = []"),
            Err(Error::Config(_))
        ));
    }
}
