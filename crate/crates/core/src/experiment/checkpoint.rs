//! On-disk model format: a directory holding `manifest.json` and
//! `weights.bin`, the latter being every tensor as little-endian `f32`,
//! concatenated in manifest order.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

/// Where a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub step: usize,
    pub final_loss: f64,
    pub modulation: usize,
    pub snr_range_db: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_id: String,
    pub byte_order: String,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub provenance: Option<Provenance>,
}

impl CheckpointManifest {
    pub fn total_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.length).sum()
    }

    fn check(&self, path: &Path) -> Result<()> {
        let fail = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(fail(format!("unsupported format version {}", self.format_version)));
        }
        if self.byte_order != "little-endian" || self.dtype != "f32" {
            return Err(fail(format!("unsupported encoding {} {}", self.byte_order, self.dtype)));
        }
        let mut offset = 0;
        for t in &self.tensors {
            let want = 4 * t.shape.iter().product::<usize>();
            if t.offset != offset || t.length != want {
                return Err(fail(format!("entry {} is not contiguous", t.name)));
            }
            offset += t.length;
        }
        Ok(())
    }
}

/// A loaded model with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn new(model_id: impl Into<String>, params: ModelParams<f32>, provenance: Option<Provenance>) -> Self {
        let mut offset = 0;
        let tensors = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    length: 4 * t.numel(),
                };
                offset += entry.length;
                entry
            })
            .collect();
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                model_id: model_id.into(),
                byte_order: "little-endian".into(),
                dtype: "f32".into(),
                config: *params.config(),
                tensors,
                provenance,
            },
            params,
        }
    }

    pub fn model_id(&self) -> &str {
        &self.manifest.model_id
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.manifest.total_bytes());
        for t in self.params.tensors() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        // write into temporaries first so an interrupted save leaves the
        // previous checkpoint intact
        let tmp_w = dir.join(format!("{WEIGHTS}.tmp"));
        let tmp_m = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp_w, &bytes)?;
        fs::write(&tmp_m, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        fs::rename(tmp_w, dir.join(WEIGHTS))?;
        fs::rename(tmp_m, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath: PathBuf = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::Checkpoint {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        manifest.check(&mpath)?;
        let wpath = dir.join(WEIGHTS);
        let bytes = fs::read(&wpath).map_err(|e| Error::Checkpoint {
            path: wpath.clone(),
            msg: e.to_string(),
        })?;
        if bytes.len() != manifest.total_bytes() {
            return Err(Error::Checkpoint {
                path: wpath,
                msg: format!("expected {} bytes, found {}", manifest.total_bytes(), bytes.len()),
            });
        }
        let tensors = manifest
            .tensors
            .iter()
            .map(|e| {
                let data = bytes[e.offset..e.offset + e.length]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::new(&e.shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_tensors(manifest.config, tensors)?;
        if params.names().iter().zip(&manifest.tensors).any(|(a, e)| *a != e.name) {
            return Err(Error::Checkpoint {
                path: mpath,
                msg: "tensor names do not follow the canonical order".into(),
            });
        }
        Ok(Checkpoint { manifest, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::for_block(2, 3, 11);
        let params = ModelParams::init(cfg, &mut Streams::new(4).stream(Purpose::Init, 0)).unwrap();
        Checkpoint::new("m", params, None)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let m = &back.manifest;
        assert_eq!(m.total_bytes(), 4 * ck.params.num_params());
        assert_eq!(fs::metadata(dir.path().join(WEIGHTS)).unwrap().len() as usize, m.total_bytes());
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let w = dir.path().join(WEIGHTS);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(Error::Checkpoint { .. })));
    }
}
