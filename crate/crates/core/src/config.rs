//! Run configuration: a TOML file with every omitted field defaulted.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs/example"
//!
//! [dataset.synthetic]
//! samples_per_class = [60, 60, 60]
//! num_classes = 3
//!
//! [stages.stage1]
//! epochs = 5
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::{BaselineCorruptionParams, ChaosParams, Corruption, CorruptionKind};
use crate::data::{
    generate_synthetic, load_image_folder, Dataset, FolderOptions, SyntheticTextureConfig,
};
use crate::error::{Error, Result};
use crate::models::{EncoderConfig, FusionConfig};
use crate::optim::AdamWConfig;
use crate::pipeline::{Stage, StageConfig};
use crate::seed;
use crate::tensor::Precision;

/// Where the images come from. Exactly one source must be given; with
/// neither, the default synthetic set is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTextureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folder: Option<FolderSource>,
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            synthetic: None,
            folder: None,
            split: default_split(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderSource {
    pub path: PathBuf,
    #[serde(default)]
    pub options: FolderOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SyntheticTextureConfig),
    Folder(FolderSource),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => generate_synthetic(cfg),
            DataSource::Folder(f) => load_image_folder(&f.path, &f.options),
        }
    }
}

/// Partial stage settings; missing fields take the stage defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adamw: Option<AdamWConfig>,
}

impl StageSection {
    fn resolve(&self, stage: Stage, master: u64, precision: Precision) -> StageConfig {
        let d = StageConfig::defaults(stage);
        StageConfig {
            stage,
            epochs: self.epochs.unwrap_or(d.epochs),
            lr: self.lr.unwrap_or(d.lr),
            eta_min: self.eta_min.unwrap_or(d.eta_min),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: seed::derive_named(master, stage.as_str()),
            adamw: self.adamw.unwrap_or(d.adamw),
            augment: self.augment.unwrap_or(d.augment),
            precision,
        }
    }

    fn from_resolved(c: &StageConfig) -> Self {
        StageSection {
            epochs: Some(c.epochs),
            lr: Some(c.lr),
            eta_min: Some(c.eta_min),
            batch_size: Some(c.batch_size),
            augment: Some(c.augment),
            adamw: Some(c.adamw),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesSection {
    #[serde(default)]
    pub stage1: StageSection,
    #[serde(default)]
    pub pretrain: StageSection,
    #[serde(default)]
    pub stage2: StageSection,
    #[serde(default)]
    pub stage3: StageSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    #[serde(default = "default_kind")]
    pub kind: CorruptionKind,
    #[serde(default)]
    pub chaos: ChaosParams,
    #[serde(default)]
    pub baseline: BaselineCorruptionParams,
}

fn default_kind() -> CorruptionKind {
    CorruptionKind::Chaotic
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection {
            kind: default_kind(),
            chaos: ChaosParams::default(),
            baseline: BaselineCorruptionParams::default(),
        }
    }
}

impl CorruptionSection {
    pub fn build(&self, kind: CorruptionKind) -> Corruption {
        Corruption::from_parts(kind, self.chaos, self.baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSection {
    #[serde(default = "EncoderConfig::wide")]
    pub b1: EncoderConfig,
    #[serde(default = "EncoderConfig::narrow")]
    pub b2: EncoderConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
}

impl Default for ModelsSection {
    fn default() -> Self {
        ModelsSection {
            b1: EncoderConfig::wide(),
            b2: EncoderConfig::narrow(),
            fusion: FusionConfig::default(),
        }
    }
}

/// The configuration file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    seed: u64,
    #[serde(default = "default_out_dir")]
    out_dir: PathBuf,
    #[serde(default)]
    precision: Precision,
    #[serde(default)]
    dataset: DatasetSection,
    #[serde(default)]
    models: ModelsSection,
    #[serde(default)]
    corruption: CorruptionSection,
    #[serde(default)]
    stages: StagesSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Fully resolved, validated configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub data: DataSource,
    pub split: [f64; 3],
    pub models: ModelsSection,
    pub corruption: CorruptionSection,
    pub stage1: StageConfig,
    pub pretrain: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_seed(0)
    }
}

impl RunConfig {
    /// Defaults everywhere, driven by `seed`.
    pub fn from_seed(seed: u64) -> Self {
        let raw = RawRunConfig {
            seed,
            out_dir: default_out_dir(),
            precision: Precision::F64,
            dataset: DatasetSection::default(),
            models: ModelsSection::default(),
            corruption: CorruptionSection::default(),
            stages: StagesSection::default(),
        };
        RunConfig::resolve(raw).expect("defaults are valid")
    }

    fn resolve(raw: RawRunConfig) -> Result<Self> {
        let data = match (raw.dataset.synthetic, raw.dataset.folder) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "dataset",
                    "give either `synthetic` or `folder`, not both",
                ))
            }
            (None, Some(f)) => DataSource::Folder(f),
            (s, None) => {
                let mut s = s.unwrap_or_default();
                s.seed.get_or_insert(raw.seed);
                DataSource::Synthetic(s)
            }
        };
        let (m, p) = (raw.seed, raw.precision);
        let cfg = RunConfig {
            seed: raw.seed,
            out_dir: raw.out_dir,
            precision: raw.precision,
            data,
            split: raw.dataset.split,
            models: ModelsSection {
                b1: raw.models.b1.normalized(),
                b2: raw.models.b2.normalized(),
                fusion: raw.models.fusion,
            },
            corruption: raw.corruption,
            stage1: raw.stages.stage1.resolve(Stage::Stage1, m, p),
            pretrain: raw.stages.pretrain.resolve(Stage::CdaePretrain, m, p),
            stage2: raw.stages.stage2.resolve(Stage::Stage2Finetune, m, p),
            stage3: raw.stages.stage3.resolve(Stage::Stage3, m, p),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        fn at(path: &'static str) -> impl Fn(Error) -> Error {
            move |e| Error::config(path, e.to_string())
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate().map_err(at("dataset.synthetic"))?,
            DataSource::Folder(f) => {
                if !f.path.is_dir() {
                    return Err(Error::config(
                        "dataset.folder.path",
                        format!("{} is not a directory", f.path.display()),
                    ));
                }
            }
        }
        let [a, b, c] = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "dataset.split",
                "fractions must be positive and sum to 1",
            ));
        }
        self.models.b1.validate().map_err(at("models.b1"))?;
        self.models.b2.validate().map_err(at("models.b2"))?;
        if self.models.b1.input_channels != self.models.b2.input_channels {
            return Err(Error::config(
                "models",
                "b1 and b2 disagree on input_channels",
            ));
        }
        let data_channels = match &self.data {
            DataSource::Synthetic(s) => s.channels,
            DataSource::Folder(f) => f.options.channels,
        };
        if data_channels != self.models.b1.input_channels {
            return Err(Error::config(
                "models.b1.input_channels",
                format!(
                    "models take {} channels but the dataset has {data_channels}",
                    self.models.b1.input_channels
                ),
            ));
        }
        crate::nn::bottleneck(
            self.models.b1.feature_dim + self.models.b2.feature_dim,
            self.models.fusion.se_ratio,
        )
        .map_err(at("models.fusion.se_ratio"))?;
        self.corruption
            .baseline
            .validate()
            .map_err(at("corruption.baseline"))?;
        for (name, s) in [
            ("stages.stage1", &self.stage1),
            ("stages.pretrain", &self.pretrain),
            ("stages.stage2", &self.stage2),
            ("stages.stage3", &self.stage3),
        ] {
            s.validate().map_err(at(name))?;
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive_named(self.seed, "split")
    }

    /// Uses `seed` as the master seed, re-deriving every stage seed.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        let mut raw = self.to_raw();
        raw.seed = seed;
        if let Some(s) = raw.dataset.synthetic.as_mut() {
            if s.seed == Some(self.seed) {
                s.seed = Some(seed);
            }
        }
        RunConfig::resolve(raw)
    }

    pub fn with_precision(&self, precision: Precision) -> Self {
        let mut c = self.clone();
        c.precision = precision;
        for s in [&mut c.stage1, &mut c.pretrain, &mut c.stage2, &mut c.stage3] {
            s.precision = precision;
        }
        c
    }

    fn to_raw(&self) -> RawRunConfig {
        let (synthetic, folder) = match &self.data {
            DataSource::Synthetic(s) => (Some(s.clone()), None),
            DataSource::Folder(f) => (None, Some(f.clone())),
        };
        RawRunConfig {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            precision: self.precision,
            dataset: DatasetSection {
                synthetic,
                folder,
                split: self.split,
            },
            models: self.models.clone(),
            corruption: self.corruption.clone(),
            stages: StagesSection {
                stage1: StageSection::from_resolved(&self.stage1),
                pretrain: StageSection::from_resolved(&self.pretrain),
                stage2: StageSection::from_resolved(&self.stage2),
                stage3: StageSection::from_resolved(&self.stage3),
            },
        }
    }

    /// Every field written out explicitly; parses back to an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.to_raw()).expect("config serialises")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text)
            .map_err(|e| Error::config("<document>", e.to_string().trim().to_string()))?;
        let raw: RawRunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let reason = e.into_inner().to_string();
            Error::config(path, reason.trim().to_string())
        })?;
        RunConfig::resolve(raw)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_toml_str(&text)
}
