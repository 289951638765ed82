//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `CDAECKPT` |
//! | 4 | format version (u32) |
//! | 4 | header length `h` (u32) |
//! | h | JSON header: topology, metadata, tensor table |
//! | 8 per value | parameter values as f64, in tensor-table order |
//! | 4 | CRC-32 of every preceding byte |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{AnyModel, Autoencoder, ClassifierModel, EncoderConfig, FusionModel};
use crate::nn::Parameters;
use crate::pipeline::Stage;
use crate::seed;

pub const MAGIC: &[u8; 8] = b"CDAECKPT";
pub const VERSION: u32 = 1;

/// Enough structure to rebuild a model before its values are loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    Autoencoder {
        encoder: EncoderConfig,
        image_size: usize,
    },
    Classifier {
        encoder: EncoderConfig,
        num_classes: usize,
        frozen: bool,
    },
    Fusion {
        b1: EncoderConfig,
        b2: EncoderConfig,
        num_classes: usize,
        se_ratio: usize,
    },
}

impl Topology {
    pub fn of(model: &AnyModel) -> Topology {
        match model {
            AnyModel::Autoencoder(m) => Topology::Autoencoder {
                encoder: m.encoder.config().clone(),
                image_size: m.image_size(),
            },
            AnyModel::Classifier(m) => Topology::Classifier {
                encoder: m.backbone.config().clone(),
                num_classes: m.head.out_dim(),
                frozen: m.is_frozen(),
            },
            AnyModel::Fusion(m) => Topology::Fusion {
                b1: m.b1().backbone.config().clone(),
                b2: m.b2().backbone.config().clone(),
                num_classes: m.classifier.out_dim(),
                se_ratio: m.attention.ratio,
            },
        }
    }

    /// A model of this shape with placeholder values.
    fn build(&self) -> Result<AnyModel> {
        let mut rng = seed::rng(0);
        Ok(match self {
            Topology::Autoencoder {
                encoder,
                image_size,
            } => Autoencoder::new(encoder.clone(), *image_size, &mut rng)?.into(),
            Topology::Classifier {
                encoder,
                num_classes,
                frozen,
            } => {
                let mut m = ClassifierModel::new(encoder.clone(), *num_classes, &mut rng)?;
                if *frozen {
                    m.freeze();
                }
                m.into()
            }
            Topology::Fusion {
                b1,
                b2,
                num_classes,
                se_ratio,
            } => {
                let mut m1 = ClassifierModel::new(b1.clone(), *num_classes, &mut rng)?;
                let mut m2 = ClassifierModel::new(b2.clone(), *num_classes, &mut rng)?;
                m1.freeze();
                m2.freeze();
                FusionModel::new(m1, m2, *se_ratio, &mut rng)?.into()
            }
        })
    }
}

/// Training context stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Option<Stage>,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    requires_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    topology: Topology,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub meta: CheckpointMeta,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: impl Into<AnyModel>, meta: CheckpointMeta) -> Self {
        Checkpoint {
            model: model.into(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let header = Header {
            topology: Topology::of(&self.model),
            meta: self.meta.clone(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    requires_grad: t.requires_grad(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let values: usize = params.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        if bytes.len() < 20 {
            return Err(corrupt("truncated checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch (truncated or corrupted file)"));
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let json = body
            .get(16..16 + header_len)
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let mut blob = &body[16 + header_len..];

        let mut model = header.topology.build()?;
        let mut params = model.params_mut();
        if params.len() != header.tensors.len() {
            return Err(corrupt(format!(
                "topology has {} tensors, file lists {}",
                params.len(),
                header.tensors.len()
            )));
        }
        for ((name, t), entry) in params.iter_mut().zip(&header.tensors) {
            if *name != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(corrupt(format!(
                    "tensor `{}` {:?} does not match topology `{name}` {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            let n = t.numel();
            if blob.len() < 8 * n {
                return Err(corrupt(format!("values of `{name}` are truncated")));
            }
            for (dst, chunk) in t.data_mut().iter_mut().zip(blob[..8 * n].chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            t.set_requires_grad(entry.requires_grad);
            blob = &blob[8 * n..];
        }
        if !blob.is_empty() {
            return Err(corrupt(format!(
                "{} trailing bytes after values",
                blob.len()
            )));
        }
        drop(params);
        Ok(Checkpoint {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| corrupt(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(
    model: impl Into<AnyModel>,
    meta: CheckpointMeta,
    path: &Path,
) -> Result<()> {
    Checkpoint::new(model, meta).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
