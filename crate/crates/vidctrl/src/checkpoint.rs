//! Named-parameter checkpoints for backbone and encoder weights.
//!
//! Layout: magic `VCTLCKPT`, `u32` version, SHA-256 of the rest of the file,
//! `u32` manifest length, JSON manifest, then every parameter as little-endian
//! `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vidctrl_core::backbone::{ArchConfig, BackboneWeights};
use vidctrl_core::dataset::Modality;
use vidctrl_core::encoder::{EncoderVariant, EncoderWeights};
use vidctrl_core::evaluation::hex;
use vidctrl_core::params::ParamStore;
use vidctrl_core::Tensor;

use crate::bytes::{put_f32s, put_u32, Reader};
use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 8] = b"VCTLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Backbone,
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Noise schedule a backbone was trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: String,
    pub steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { kind: "linear-vp".into(), steps: 1000 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<vidctrl_core::diffusion::DiffusionSchedule> {
        Ok(vidctrl_core::diffusion::DiffusionSchedule::make(self.steps, &self.kind)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub arch: ArchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<EncoderVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    /// Hex digest of the backbone an encoder was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    pub params: Vec<ParamEntry>,
}

fn encode(manifest: &CheckpointManifest, params: &ParamStore<f32>) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut rest = Vec::new();
    put_u32(&mut rest, json.len() as u32);
    rest.extend_from_slice(&json);
    for p in params.iter() {
        put_f32s(&mut rest, p.value.data());
    }
    let mut out = Vec::with_capacity(rest.len() + 44);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&Sha256::digest(&rest));
    out.extend_from_slice(&rest);
    out
}

/// Verifies magic, version and checksum, then returns the manifest and parameters.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointManifest, ParamStore<f32>)> {
    if bytes.len() < 44 || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic or too short)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let (sum, rest) = bytes[12..].split_at(32);
    if Sha256::digest(rest).as_slice() != sum {
        return Err(Error::Integrity("checkpoint checksum mismatch (file modified or truncated)".into()));
    }
    let mut r = Reader::new(rest, "checkpoint");
    let as_integrity = |e: Error| Error::Integrity(e.to_string());
    let mlen = r.u32().map_err(as_integrity)? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(r.take(mlen).map_err(as_integrity)?)
        .map_err(|e| Error::Integrity(format!("bad checkpoint manifest: {e}")))?;
    let mut store = ParamStore::new();
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let data = r.f32s(n).map_err(as_integrity)?;
        store.add(p.name.clone(), Tensor::from_vec(&p.shape, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Integrity(format!("{} unexpected bytes after the parameters", r.remaining())));
    }
    Ok((manifest, store))
}

fn entries(params: &ParamStore<f32>) -> Vec<ParamEntry> {
    params.iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect()
}

pub fn encode_backbone(w: &BackboneWeights<f32>, schedule: &ScheduleSpec) -> Vec<u8> {
    let m = CheckpointManifest {
        kind: CheckpointKind::Backbone,
        arch: w.config().clone(),
        variant: None,
        modality: None,
        backbone_digest: None,
        schedule: Some(schedule.clone()),
        params: entries(w.params()),
    };
    encode(&m, w.params())
}

pub fn encode_encoder(w: &EncoderWeights<f32>, backbone_digest: Option<[u8; 32]>) -> Vec<u8> {
    let m = CheckpointManifest {
        kind: CheckpointKind::Encoder,
        arch: w.config().clone(),
        variant: Some(w.variant()),
        modality: Some(w.modality()),
        backbone_digest: backbone_digest.map(|d| hex(&d)),
        schedule: None,
        params: entries(w.params()),
    };
    encode(&m, w.params())
}

/// Backbone weights plus the schedule they were trained with.
pub struct LoadedBackbone {
    pub weights: BackboneWeights<f32>,
    pub schedule: ScheduleSpec,
}

pub fn decode_backbone(bytes: &[u8]) -> Result<LoadedBackbone> {
    let (m, params) = decode(bytes)?;
    if m.kind != CheckpointKind::Backbone {
        return Err(Error::Config("checkpoint holds an encoder, expected a backbone".into()));
    }
    Ok(LoadedBackbone { weights: BackboneWeights::from_params(m.arch, params)?, schedule: m.schedule.unwrap_or_default() })
}

/// An encoder plus the backbone digest recorded at training time.
pub struct LoadedEncoder {
    pub weights: EncoderWeights<f32>,
    pub backbone_digest: Option<String>,
}

pub fn decode_encoder(bytes: &[u8]) -> Result<LoadedEncoder> {
    let (m, params) = decode(bytes)?;
    if m.kind != CheckpointKind::Encoder {
        return Err(Error::Config("checkpoint holds a backbone, expected an encoder".into()));
    }
    let (Some(variant), Some(modality)) = (m.variant, m.modality) else {
        return Err(Error::Integrity("encoder checkpoint lacks variant or modality".into()));
    };
    let weights = EncoderWeights::from_params(m.arch, variant, modality, params)?;
    Ok(LoadedEncoder { weights, backbone_digest: m.backbone_digest })
}

pub fn save_backbone(path: &Path, w: &BackboneWeights<f32>, schedule: &ScheduleSpec) -> Result<()> {
    write_file(path, &encode_backbone(w, schedule))
}

pub fn load_backbone(path: &Path) -> Result<LoadedBackbone> {
    decode_backbone(&read_file(path)?)
}

pub fn save_encoder(path: &Path, w: &EncoderWeights<f32>, backbone_digest: Option<[u8; 32]>) -> Result<()> {
    write_file(path, &encode_encoder(w, backbone_digest))
}

pub fn load_encoder(path: &Path) -> Result<LoadedEncoder> {
    decode_encoder(&read_file(path)?)
}

/// Rejects an encoder whose recorded backbone digest differs from `backbone`.
pub fn check_pairing(enc: &LoadedEncoder, backbone: &BackboneWeights<f32>) -> Result<()> {
    if let Some(d) = &enc.backbone_digest {
        if *d != hex(&backbone.digest()) {
            return Err(Error::Integrity(format!(
                "{} encoder was trained against backbone {}, got {}",
                enc.weights.variant(),
                d,
                hex(&backbone.digest())
            )));
        }
    }
    if enc.weights.config() != backbone.config() {
        return Err(Error::Config("encoder and backbone architectures differ".into()));
    }
    Ok(())
}
