//! Binary model container.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, a JSON
//! header, then every tensor as row-major little-endian f32 in manifest order.
//! The header carries the effective run configuration, vocabulary, shapes,
//! phase provenance and the sha256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Parcellation;
use crate::decoder::{DecoderConfig, DecoderParams, LoraAdapters, LoraConfig, Tensor, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::FusionModel;
use crate::tokenizer::{init_tokenizers, LowRankProjection};
use crate::trainer::{EpochMetrics, TrainReport};

pub const MAGIC: &[u8; 8] = b"BRNLANG\0";
pub const FORMAT_VERSION: u32 = 1;

/// What produced a checkpoint; excludes wall-clock time so reruns are
/// byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseProvenance {
    pub phase: String,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    pub param_hash: String,
}

impl From<&TrainReport> for PhaseProvenance {
    fn from(r: &TrainReport) -> Self {
        Self {
            phase: r.phase.clone(),
            initial_val_loss: r.initial_val_loss,
            epochs: r.epochs.clone(),
            param_hash: r.param_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: serde_json::Value,
    vocab: Vocabulary,
    decoder: DecoderConfig,
    lora: Option<LoraConfig>,
    tokenizer_hidden: usize,
    parcellation: Parcellation,
    explained_variance_ratio: Vec<f64>,
    banned: Vec<u32>,
    provenance: Vec<PhaseProvenance>,
    manifest: Vec<ManifestEntry>,
    payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Effective configuration of the run that wrote this file.
    pub config: serde_json::Value,
    pub model: FusionModel,
    pub provenance: Vec<PhaseProvenance>,
}

fn projection_tensors(p: &LowRankProjection) -> [Tensor<'_>; 2] {
    use crate::decoder::ParamGroup;
    [
        Tensor {
            name: "projection.components".into(),
            group: ParamGroup::TokenizerWeight,
            shape: vec![p.components.rows, p.components.cols],
            data: &p.components.data,
        },
        Tensor {
            name: "projection.mean".into(),
            group: ParamGroup::TokenizerBias,
            shape: vec![p.mean.len()],
            data: &p.mean,
        },
    ]
}

fn all_tensors(model: &FusionModel) -> Vec<Tensor<'_>> {
    let mut t = model.tensors();
    t.extend(projection_tensors(&model.projection));
    t
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let tensors = all_tensors(m);
        let mut payload = Vec::new();
        for t in &tensors {
            for &x in t.data {
                let y = x as f32;
                if !y.is_finite() {
                    return Err(Error::Numerical(format!("tensor {} not representable as finite f32", t.name)));
                }
                payload.extend_from_slice(&y.to_le_bytes());
            }
        }
        let header = Header {
            config: self.config.clone(),
            vocab: m.vocab.clone(),
            decoder: m.decoder.config.clone(),
            lora: m.lora.as_ref().map(|l| l.config),
            tokenizer_hidden: m.tokenizers.first().map_or(0, |t| t.hidden_width()),
            parcellation: m.parcellation.clone(),
            explained_variance_ratio: m.projection.explained_variance_ratio.clone(),
            banned: m.banned.clone(),
            provenance: self.provenance.clone(),
            manifest: tensors
                .iter()
                .map(|t| ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload hash mismatch"));
        }
        header.decoder.validate()?;
        header.parcellation.validate()?;

        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        if !payload.len().is_multiple_of(4) {
            return Err(bad("payload length not a multiple of 4"));
        }
        let mut take = |e: &ManifestEntry| -> Result<Vec<f64>> {
            let n: usize = e.shape.iter().product();
            let v: Vec<f64> = values.by_ref().take(n).collect();
            if v.len() != n {
                return Err(Error::Checkpoint(format!("payload ends inside tensor {}", e.name)));
            }
            Ok(v)
        };

        // projection tensors are the last two manifest entries
        let nm = header.manifest.len();
        if nm < 2 {
            return Err(bad("manifest lacks projection tensors"));
        }
        let (model_entries, proj_entries) = header.manifest.split_at(nm - 2);
        let skip: usize = model_entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let proj_start = skip * 4;
        if proj_start > payload.len() {
            return Err(bad("payload shorter than manifest"));
        }
        let mut proj_values = payload[proj_start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut proj_take = |e: &ManifestEntry, name: &str| -> Result<Vec<f64>> {
            if e.name != name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {}", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let v: Vec<f64> = proj_values.by_ref().take(n).collect();
            if v.len() != n {
                return Err(Error::Checkpoint(format!("payload ends inside tensor {name}")));
            }
            Ok(v)
        };
        let comp = &proj_entries[0];
        if comp.shape.len() != 2 {
            return Err(bad("projection components must be 2-d"));
        }
        let components = Mat::from_vec(comp.shape[0], comp.shape[1], proj_take(comp, "projection.components")?);
        let mean = proj_take(&proj_entries[1], "projection.mean")?;
        let projection = LowRankProjection {
            components,
            mean,
            explained_variance_ratio: header.explained_variance_ratio.clone(),
        };

        let decoder = DecoderParams::init(&header.decoder, 0)?;
        let lora = header
            .lora
            .map(|c| LoraAdapters::init(&header.decoder, c, 0))
            .transpose()?;
        let tokenizers = init_tokenizers(&header.parcellation, header.tokenizer_hidden, &projection, 0);
        let mut model = FusionModel {
            vocab: header.vocab,
            decoder,
            projection,
            parcellation: header.parcellation,
            tokenizers,
            lora,
            banned: header.banned,
        };
        {
            let mut slots = model.tensors_mut();
            if slots.len() != model_entries.len() {
                return Err(Error::Checkpoint(format!(
                    "manifest lists {} model tensors, configuration implies {}",
                    model_entries.len(),
                    slots.len()
                )));
            }
            for (slot, e) in slots.iter_mut().zip(model_entries) {
                if slot.name != e.name || slot.shape != e.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        e.name, e.shape, slot.name, slot.shape
                    )));
                }
                slot.data.copy_from_slice(&take(e)?);
            }
        }
        if proj_start + proj_entries.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum::<usize>() != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        if model.vocab.len() != model.decoder.config.vocab_size {
            return Err(bad("vocabulary size disagrees with decoder"));
        }
        Ok(Self {
            config: header.config,
            model,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// sha256 over the serialized file.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
