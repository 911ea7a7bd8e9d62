//! Single-file checkpoint container.
//!
//! Layout: the magic `ADACKPT1`, a little-endian `u64` manifest length, a
//! JSON manifest, then every tensor as raw little-endian `f64` in manifest
//! order. The manifest lists parameter groups with their freeze flag, tensor
//! shapes and offsets, and a SHA-256 content hash per group.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::{BasisSet, WeightPredictor};
use crate::codebook::VectorCodebook;
use crate::error::{Error, Result};
use crate::networks::{ConvProjection, Decoder, Discriminator, Encoder, NetworkConfig, RestorationEncoder};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::training::StageConfig;

const MAGIC: &[u8; 8] = b"ADACKPT1";
const CODEBOOK_PREFIX: &str = "codebook/";

pub const ENCODER: &str = "encoder";
pub const RESTORATION_ENCODER: &str = "restoration_encoder";
pub const DECODER: &str = "decoder";
pub const DISCRIMINATOR: &str = "discriminator";
pub const PROJECTION: &str = "projection";
pub const PREDICTOR: &str = "predictor";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    /// Frozen groups are never updated by the stage that wrote the checkpoint.
    pub frozen: bool,
    pub params: ParamSet,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, frozen: bool, params: ParamSet) -> Self {
        Self {
            name: name.into(),
            frozen,
            params,
        }
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub iteration: u64,
    pub network: NetworkConfig,
    pub config: StageConfig,
    pub groups: Vec<ParamGroup>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    frozen: bool,
    sha256: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: u8,
    iteration: u64,
    network: serde_json::Value,
    config: serde_json::Value,
    groups: Vec<GroupEntry>,
}

impl Checkpoint {
    pub fn expect_stage(&self, expected: u8) -> Result<()> {
        if self.stage != expected {
            return Err(Error::StageMismatch {
                expected,
                found: self.stage,
            });
        }
        Ok(())
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` parameter group")))
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut ParamGroup> {
        self.groups
            .iter_mut()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` parameter group")))
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.groups.iter().any(|g| g.name == name)
    }

    /// Group name to content hash, in group order.
    pub fn hashes(&self) -> Vec<(String, String)> {
        self.groups.iter().map(|g| (g.name.clone(), g.content_hash())).collect()
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Ok(Encoder {
            config: self.network.clone(),
            params: self.group(ENCODER)?.params.clone(),
        })
    }

    pub fn restoration_encoder(&self) -> Result<RestorationEncoder> {
        let params = self.group(RESTORATION_ENCODER)?.params.clone();
        let in_channels = params
            .get("conv_in.weight")
            .ok_or_else(|| Error::Format("restoration encoder lacks conv_in.weight".into()))?
            .shape()[1];
        Ok(RestorationEncoder {
            config: self.network.clone(),
            in_channels,
            params,
        })
    }

    pub fn decoder(&self) -> Result<Decoder> {
        Ok(Decoder {
            config: self.network.clone(),
            params: self.group(DECODER)?.params.clone(),
        })
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        Ok(Discriminator {
            config: self.network.clone(),
            params: self.group(DISCRIMINATOR)?.params.clone(),
        })
    }

    pub fn projection(&self) -> Result<ConvProjection> {
        Ok(ConvProjection {
            params: self.group(PROJECTION)?.params.clone(),
        })
    }

    pub fn predictor(&self) -> Result<WeightPredictor> {
        let params = self.group(PREDICTOR)?.params.clone();
        let head = params
            .get("head.weight")
            .ok_or_else(|| Error::Format("predictor lacks head.weight".into()))?;
        Ok(WeightPredictor {
            config: self.network.predictor.clone(),
            latent_dim: self.network.latent_dim,
            num_bases: head.shape()[0],
            params,
        })
    }

    /// Codebooks in group order.
    pub fn basis(&self) -> Result<BasisSet> {
        let books = self
            .groups
            .iter()
            .filter_map(|g| g.name.strip_prefix(CODEBOOK_PREFIX).map(|l| (l, g)))
            .map(|(label, g)| {
                let entries = g
                    .params
                    .get("entries")
                    .ok_or_else(|| Error::Format(format!("codebook group `{}` lacks entries", g.name)))?;
                VectorCodebook::new(entries.clone(), label)
            })
            .collect::<Result<Vec<_>>>()?;
        if books.is_empty() {
            return Err(Error::Format("checkpoint has no codebook groups".into()));
        }
        BasisSet::new(books)
    }

    pub fn codebook_group(cb: &VectorCodebook, frozen: bool) -> ParamGroup {
        let mut ps = ParamSet::new();
        ps.insert("entries", cb.entries().clone());
        ParamGroup::new(format!("{CODEBOOK_PREFIX}{}", cb.label()), frozen, ps)
    }

    pub fn codebook_group_name(label: &str) -> String {
        format!("{CODEBOOK_PREFIX}{label}")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut groups = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let tensors = g
                .params
                .iter()
                .map(|(name, t)| {
                    let e = TensorEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        offset,
                        len: t.len(),
                    };
                    offset += t.len();
                    e
                })
                .collect();
            groups.push(GroupEntry {
                name: g.name.clone(),
                frozen: g.frozen,
                sha256: g.content_hash(),
                tensors,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            stage: self.stage,
            iteration: self.iteration,
            network: serde_json::to_value(&self.network)?,
            config: serde_json::to_value(&self.config)?,
            groups,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for g in &self.groups {
            for (_, t) in g.params.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::Format(format!("unreadable manifest: {e}")))?;
        let network: NetworkConfig = serde_json::from_value(manifest.network)
            .map_err(|e| Error::Format(format!("bad network snapshot: {e}")))?;
        let config: StageConfig = serde_json::from_value(manifest.config)
            .map_err(|e| Error::Format(format!("bad config snapshot: {e}")))?;
        network.validate().map_err(|e| Error::Format(e.to_string()))?;
        let data = &bytes[data_start..];
        let total: usize = manifest.groups.iter().flat_map(|g| &g.tensors).map(|t| t.len).sum();
        if data.len() != total * 8 {
            return Err(Error::Format(format!(
                "data section holds {} bytes, manifest describes {}",
                data.len(),
                total * 8
            )));
        }
        let mut groups = Vec::with_capacity(manifest.groups.len());
        for ge in manifest.groups {
            let mut ps = ParamSet::new();
            for te in &ge.tensors {
                let end = te
                    .offset
                    .checked_add(te.len)
                    .filter(|&e| e <= total)
                    .ok_or_else(|| Error::Format(format!("tensor `{}` lies outside the data section", te.name)))?;
                let values = data[te.offset * 8..end * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let t = Tensor::new(te.shape.clone(), values).map_err(|e| Error::Format(e.to_string()))?;
                ps.insert(te.name.clone(), t);
            }
            let group = ParamGroup::new(ge.name, ge.frozen, ps);
            if group.content_hash() != ge.sha256 {
                return Err(Error::Corrupt(group.name));
            }
            groups.push(group);
        }
        Ok(Self {
            stage: manifest.stage,
            iteration: manifest.iteration,
            network,
            config,
            groups,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}
