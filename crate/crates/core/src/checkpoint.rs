//! Checkpoint container: magic `IVSC`, a JSON header and little-endian
//! f32 weight blobs.
//!
//! Layout: `b"IVSC"`, u32 version, u32 header length, header bytes, then
//! each blob listed in the header, in order, as `product(shape)` f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{quantize_i16, DatasetManifest, SamplingProfile};
use crate::features::{BowFeaturizer, KmeansCodebook, Normalization, PcaModel, StftConfig};
use crate::neural::{EpochRecord, Model, ModelSpec, NeuralError, TrainConfig};
use crate::params::PatchClasses;
use crate::synth::{AudioBuffer, RenderConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IVSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: not a checkpoint (bad magic)")]
    BadMagic(PathBuf),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// What a checkpoint was trained on. Evaluation and inference data must
/// share the fingerprint; the normalization statistics travel with the
/// weights so inputs are standardized exactly as in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBinding {
    pub manifest_hash: String,
    pub fingerprint: String,
    pub profile: SamplingProfile,
    pub seed: u64,
    pub normalization: Normalization,
    pub render: RenderConfig,
    pub stft: StftConfig,
}

impl DatasetBinding {
    pub fn from_manifest(m: &DatasetManifest) -> Self {
        DatasetBinding {
            manifest_hash: m.hash(),
            fingerprint: m.fingerprint.clone(),
            profile: m.profile,
            seed: m.seed,
            normalization: m.normalization,
            render: m.render,
            stft: m.stft.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCheckpoint {
    pub model: Model,
    pub train_config: TrainConfig,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub featurizer: Option<BowFeaturizer>,
}

/// Maps audio fingerprints straight to patches. Used to exercise the
/// evaluation pipeline with known-perfect predictions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LookupTable {
    pub entries: BTreeMap<String, PatchClasses>,
}

impl LookupTable {
    /// Key of a clip: SHA-256 of its 16-bit PCM samples, so a clip and its
    /// WAV export share a key.
    pub fn key(audio: &AudioBuffer) -> String {
        let mut h = Sha256::new();
        for &s in &audio.samples {
            h.update(quantize_i16(s).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn insert(&mut self, audio: &AudioBuffer, patch: PatchClasses) {
        self.entries.insert(Self::key(audio), patch);
    }

    pub fn get(&self, audio: &AudioBuffer) -> Option<&PatchClasses> {
        self.entries.get(&Self::key(audio))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Network(Box<NetworkCheckpoint>),
    Lookup(LookupTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub binding: DatasetBinding,
    pub predictor: Predictor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeaturizerMeta {
    pca_input_dim: usize,
    pca_dim: usize,
    eigenvalues: Vec<f64>,
    retained_variance: f64,
    k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Body {
    Network {
        spec: ModelSpec,
        train_config: TrainConfig,
        curve: Vec<EpochRecord>,
        best_epoch: usize,
        featurizer: Option<FeaturizerMeta>,
    },
    Lookup {
        entries: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dataset: DatasetBinding,
    body: Body,
    blobs: Vec<BlobEntry>,
}

impl Checkpoint {
    pub fn network(&self) -> Option<&NetworkCheckpoint> {
        match &self.predictor {
            Predictor::Network(n) => Some(n),
            Predictor::Lookup(_) => None,
        }
    }

    pub fn name(&self) -> String {
        match &self.predictor {
            Predictor::Network(n) => n.model.spec().name.clone(),
            Predictor::Lookup(_) => "lookup".into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut data: Vec<&[f64]> = Vec::new();
        let body = match &self.predictor {
            Predictor::Network(n) => {
                for (shape, values) in n.model.param_shapes().into_iter().zip(n.model.params()) {
                    blobs.push(BlobEntry { name: shape.name, shape: shape.shape });
                    data.push(values);
                }
                let featurizer = n.featurizer.as_ref().map(|f| {
                    blobs.push(BlobEntry { name: "pca.mean".into(), shape: vec![f.pca.input_dim] });
                    data.push(&f.pca.mean);
                    blobs.push(BlobEntry { name: "pca.components".into(), shape: vec![f.pca.dim, f.pca.input_dim] });
                    data.push(&f.pca.components);
                    blobs.push(BlobEntry { name: "kmeans.centroids".into(), shape: vec![f.codebook.k, f.codebook.dim] });
                    data.push(&f.codebook.centroids);
                    FeaturizerMeta {
                        pca_input_dim: f.pca.input_dim,
                        pca_dim: f.pca.dim,
                        eigenvalues: f.pca.eigenvalues.clone(),
                        retained_variance: f.pca.retained_variance,
                        k: f.codebook.k,
                    }
                });
                Body::Network {
                    spec: n.model.spec().clone(),
                    train_config: n.train_config.clone(),
                    curve: n.curve.clone(),
                    best_epoch: n.best_epoch,
                    featurizer,
                }
            }
            Predictor::Lookup(t) => {
                Body::Lookup { entries: t.entries.iter().map(|(k, v)| (k.clone(), v.to_string())).collect() }
            }
        };
        let header = Header { dataset: self.binding.clone(), body, blobs };
        let text = serde_json::to_vec_pretty(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(&text);
        for values in data {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(if bytes.len() >= 4 && bytes[..4] != CHECKPOINT_MAGIC {
                CheckpointError::BadMagic(path.to_path_buf())
            } else {
                CheckpointError::Truncated
            });
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(path.to_path_buf()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let text = bytes.get(12..12 + hlen).ok_or(CheckpointError::Truncated)?;
        let header: Header = serde_json::from_slice(text).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut rest = &bytes[12 + hlen..];
        let mut blobs = BTreeMap::new();
        for b in &header.blobs {
            let n: usize = b.shape.iter().product();
            if rest.len() < n * 4 {
                return Err(CheckpointError::Truncated);
            }
            let values: Vec<f64> =
                rest[..n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            rest = &rest[n * 4..];
            blobs.insert(b.name.clone(), (b.shape.clone(), values));
        }
        if !rest.is_empty() {
            return Err(CheckpointError::Header(format!("{} trailing bytes", rest.len())));
        }

        let predictor = match header.body {
            Body::Lookup { entries } => {
                let entries = entries
                    .into_iter()
                    .map(|(k, v)| v.parse::<PatchClasses>().map(|p| (k, p)))
                    .collect::<Result<_, _>>()
                    .map_err(|e| CheckpointError::Header(e.to_string()))?;
                Predictor::Lookup(LookupTable { entries })
            }
            Body::Network { spec, train_config, curve, best_epoch, featurizer } => {
                if best_epoch >= curve.len() {
                    return Err(CheckpointError::Header(format!("best epoch {best_epoch} outside curve")));
                }
                let mut model = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
                let mut weights = Vec::new();
                for expect in model.param_shapes() {
                    let (shape, values) = blobs
                        .remove(&expect.name)
                        .ok_or_else(|| CheckpointError::Header(format!("missing blob {}", expect.name)))?;
                    if shape != expect.shape {
                        return Err(CheckpointError::Header(format!(
                            "blob {} has shape {shape:?}, model wants {:?}",
                            expect.name, expect.shape
                        )));
                    }
                    weights.push(values);
                }
                model.set_params(weights)?;
                let featurizer = match featurizer {
                    None => None,
                    Some(meta) => {
                        let mut take = |name: &str| {
                            blobs.remove(name).map(|(_, v)| v).ok_or_else(|| CheckpointError::Header(format!("missing blob {name}")))
                        };
                        let mean = take("pca.mean")?;
                        let components = take("pca.components")?;
                        let centroids = take("kmeans.centroids")?;
                        Some(BowFeaturizer {
                            pca: PcaModel {
                                input_dim: meta.pca_input_dim,
                                dim: meta.pca_dim,
                                mean,
                                components,
                                eigenvalues: meta.eigenvalues,
                                retained_variance: meta.retained_variance,
                            },
                            codebook: KmeansCodebook { k: meta.k, dim: meta.pca_dim, centroids },
                        })
                    }
                };
                Predictor::Network(Box::new(NetworkCheckpoint { model, train_config, curve, best_epoch, featurizer }))
            }
        };
        if let Some(name) = blobs.keys().next() {
            return Err(CheckpointError::Header(format!("unexpected blob {name}")));
        }
        Ok(Checkpoint { binding: header.dataset, predictor })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, path)
    }
}
