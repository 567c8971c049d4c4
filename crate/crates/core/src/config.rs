//! Experiment configuration, read from a sectioned TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, LabeledClip, SplitSpec};
use crate::dictionary::{DcAtom, DctGrid, DctOptions};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Variant};
use crate::signal::StftConfig;
use crate::trainer::TrainConfig;

/// Overrides `experiment.output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "SDM_VAE_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub variant: Variant,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            variant: Variant::SdmDct,
            seed: 0,
            output_dir: PathBuf::from("runs/experiment"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridName {
    #[default]
    HalfSample,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub m: usize,
    pub k: usize,
    pub hidden: usize,
    pub dct_grid: GridName,
    /// Standardize the encoder's log-power input per bin with training-set
    /// statistics.
    pub standardize_input: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            m: 32,
            k: 64,
            hidden: 128,
            dct_grid: GridName::HalfSample,
            standardize_input: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSection {
    pub window: usize,
    pub hop: usize,
}

impl Default for StftSection {
    fn default() -> Self {
        let d = StftConfig::default();
        Self {
            window: d.window_len,
            hop: d.hop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            patience: d.patience,
            max_epochs: d.max_epochs,
            lr: d.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Wav,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// WAV directory, required when `source = "wav"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub n_clips: usize,
    pub n_speakers: usize,
    pub duration_s: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            n_clips: 60,
            n_speakers: 10,
            duration_s: 1.0,
            train_ratio: 0.7,
            val_ratio: 0.15,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub stft: StftSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .filter(|_| e.message().contains("field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.m == 0 {
            return Err(Error::config("model.m", "must be >= 1"));
        }
        if m.hidden == 0 {
            return Err(Error::config("model.hidden", "must be >= 1"));
        }
        match self.experiment.variant {
            Variant::SdmIdentity if m.k != m.m => {
                return Err(Error::config(
                    "model.k",
                    format!("identity dictionary needs k == m (k={}, m={})", m.k, m.m),
                ))
            }
            Variant::SdmDct if m.k == 0 => return Err(Error::config("model.k", "must be >= 1")),
            Variant::SdmDct if m.m < 2 => return Err(Error::config("model.m", "DCT atoms need m >= 2")),
            _ => {}
        }
        self.stft_config()
            .validate()
            .map_err(|e| Error::config("stft.window", e.to_string()))?;
        self.train_config().validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field: format!("train.{field}"),
                reason,
            },
            other => other,
        })?;
        self.split_spec().validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::Config {
                field: format!("data.{field}"),
                reason,
            },
            other => other,
        })?;
        let d = &self.data;
        match d.source {
            DataSource::Wav if d.path.is_none() => {
                return Err(Error::config("data.path", "required when data.source = \"wav\""))
            }
            DataSource::Synthetic => {
                if d.n_clips == 0 {
                    return Err(Error::config("data.n_clips", "must be >= 1"));
                }
                if d.n_speakers == 0 {
                    return Err(Error::config("data.n_speakers", "must be >= 1"));
                }
                if !(d.duration_s >= 0.5) {
                    return Err(Error::config("data.duration_s", "must be >= 0.5"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            window_len: self.stft.window,
            hop: self.stft.hop,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            patience: self.train.patience,
            max_epochs: self.train.max_epochs,
            lr: self.train.lr,
            seed: self.experiment.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.data.train_ratio,
            validation: self.data.val_ratio,
            seed: self.experiment.seed,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let grid = match self.model.dct_grid {
            GridName::HalfSample => DctGrid::HalfSample,
            GridName::Sample => DctGrid::Sample,
        };
        ModelSpec {
            variant: self.experiment.variant,
            n_bins: self.stft_config().n_bins(),
            hidden: self.model.hidden,
            m: self.model.m,
            k: if self.experiment.variant == Variant::Standard {
                self.model.m
            } else {
                self.model.k
            },
            dct: DctOptions {
                dc: DcAtom::Keep,
                grid,
            },
        }
    }

    /// `experiment.output_dir`, unless overridden by [`OUTPUT_DIR_ENV`].
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| self.experiment.output_dir.clone())
    }

    /// Every clip of the configured data source, before splitting.
    pub fn load_clips(&self) -> Result<Vec<LabeledClip>> {
        match self.data.source {
            DataSource::Synthetic => corpus::synthetic_corpus(
                self.experiment.seed,
                self.data.n_clips,
                self.data.n_speakers,
                self.data.duration_s,
            ),
            DataSource::Wav => corpus::read_wav_dir(self.data.path.as_ref().expect("validated")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.model_spec().n_bins, 513);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[experiment]\nvariant = \"sdm_identity\"\nseed = 4\n[model]\nm = 8\nk = 8\n[train]\nmax_epochs = 30\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment.variant, Variant::SdmIdentity);
        assert_eq!(cfg.train_config().seed, 4);
        assert_eq!(cfg.train.max_epochs, 30);
        assert_eq!(cfg.stft.window, 1024);
    }

    #[test]
    fn identity_with_k_not_m_is_rejected() {
        let err = ExperimentConfig::from_toml("[experiment]\nvariant = \"sdm_identity\"\n[model]\nm = 8\nk = 16\n")
            .unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "model.k"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let field = |text: &str| match ExperimentConfig::from_toml(text).unwrap_err() {
            Error::Config { field, .. } => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("[train]\nbatch_size = 0\n"), "train.batch_size");
        assert_eq!(field("[stft]\nwindow = 1000\nhop = 256\n"), "stft.window");
        assert_eq!(field("[data]\nsource = \"wav\"\n"), "data.path");
        assert_eq!(field("[data]\ntrain_ratio = 0.9\nval_ratio = 0.2\n"), "data.val_ratio");
        assert_eq!(field("[model]\nbogus = 1\n"), "bogus");
        assert!(matches!(
            ExperimentConfig::from_toml("[experiment]\nvariant = \"vsc\"\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn standard_variant_ignores_k() {
        let cfg = ExperimentConfig::from_toml("[experiment]\nvariant = \"standard\"\n[model]\nm = 16\nk = 64\n").unwrap();
        let spec = cfg.model_spec();
        assert_eq!(spec.architecture().code_dim, 16);
        spec.build(0).unwrap();
    }
}
