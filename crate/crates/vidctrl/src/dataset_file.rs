//! On-disk container for rendered synthetic videos.
//!
//! Layout: magic `VCTLDATA`, `u32` version, `u32` manifest length, JSON manifest,
//! the records, then a SHA-256 of everything before it. A record is the scene
//! description (reals as `f64`) followed by the RGB video `[N,3,H,W]` and the depth
//! video `[N,1,H,W]` as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vidctrl_core::dataset::{SceneObject, SceneSpec, ShapeKind, VideoRecord};
use vidctrl_core::Tensor;

use crate::bytes::{put_f32s, put_f64, put_u32, put_u64, Reader};
use crate::error::{read_file, write_file, Error, Result};

pub const MAGIC: &[u8; 8] = b"VCTLDATA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub records: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Tensors stored per record.
    pub modalities: Vec<String>,
}

fn manifest_for(records: &[VideoRecord<f32>]) -> Result<DatasetManifest> {
    let (frames, height, width) = match records.first() {
        Some(r) => {
            let (n, _, h, w) = r.rgb.dims4();
            (n, h, w)
        }
        None => (0, 0, 0),
    };
    for (i, r) in records.iter().enumerate() {
        let want_rgb = [frames, 3, height, width];
        let want_depth = [frames, 1, height, width];
        if r.rgb.shape() != want_rgb || r.depth.shape() != want_depth {
            return Err(Error::Usage(format!("record {i} has a different video shape from record 0")));
        }
    }
    Ok(DatasetManifest { records: records.len(), frames, height, width, modalities: vec!["rgb".into(), "depth".into()] })
}

fn put_spec(out: &mut Vec<u8>, s: &SceneSpec) {
    put_u64(out, s.seed);
    put_f64(out, s.background_depth);
    put_u32(out, s.prompt.len() as u32);
    for &t in &s.prompt {
        put_u32(out, t as u32);
    }
    put_u32(out, s.objects.len() as u32);
    for o in &s.objects {
        out.push(match o.kind {
            ShapeKind::Circle => 0,
            ShapeKind::Square => 1,
        });
        for v in o.color.iter().chain(&o.start).chain(&o.velocity).chain([&o.size, &o.depth]) {
            put_f64(out, *v);
        }
    }
}

fn get_spec(r: &mut Reader<'_>) -> Result<SceneSpec> {
    let seed = r.u64()?;
    let background_depth = r.f64()?;
    let n_tok = r.u32()? as usize;
    if n_tok > r.remaining() / 4 {
        return Err(Error::Format(format!("prompt length {n_tok} exceeds the file")));
    }
    let prompt = (0..n_tok).map(|_| r.u32().map(|t| t as usize)).collect::<Result<Vec<_>>>()?;
    let n_obj = r.u32()? as usize;
    if n_obj > r.remaining() / 73 {
        return Err(Error::Format(format!("object count {n_obj} exceeds the file")));
    }
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let kind = match r.u8()? {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            k => return Err(Error::Format(format!("unknown shape kind {k}"))),
        };
        let mut v = [0.0; 9];
        for x in &mut v {
            *x = r.f64()?;
        }
        objects.push(SceneObject {
            kind,
            color: [v[0], v[1], v[2]],
            start: [v[3], v[4]],
            velocity: [v[5], v[6]],
            size: v[7],
            depth: v[8],
        });
    }
    Ok(SceneSpec { objects, background_depth, prompt, seed })
}

/// Serializes `records` into the container format.
pub fn encode_dataset(records: &[VideoRecord<f32>]) -> Result<Vec<u8>> {
    let manifest = manifest_for(records)?;
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    for r in records {
        put_spec(&mut out, &r.spec);
        put_f32s(&mut out, r.rgb.data());
        put_f32s(&mut out, r.depth.data());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses a container; any mismatch between manifest, payload and checksum is a format error.
pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetManifest, Vec<VideoRecord<f32>>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let mut r = Reader::new(&bytes[MAGIC.len()..], "dataset");
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Format("dataset file truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Format("dataset checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader::new(&body[MAGIC.len() + 4..], "dataset");
    let mlen = r.u32()? as usize;
    let manifest: DatasetManifest =
        serde_json::from_slice(r.take(mlen)?).map_err(|e| Error::Format(format!("bad dataset manifest: {e}")))?;
    if manifest.modalities != ["rgb", "depth"] {
        return Err(Error::Format(format!("unsupported stored modalities {:?}", manifest.modalities)));
    }
    let (n, h, w) = (manifest.frames, manifest.height, manifest.width);
    let mut records = Vec::with_capacity(manifest.records.min(1 << 16));
    for i in 0..manifest.records {
        let spec = get_spec(&mut r).map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        let rgb = r.f32s(n * 3 * h * w).map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        let depth = r.f32s(n * h * w).map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        records.push(VideoRecord {
            spec,
            rgb: Tensor::from_vec(&[n, 3, h, w], rgb)?,
            depth: Tensor::from_vec(&[n, 1, h, w], depth)?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} bytes after the last of {} records", r.remaining(), manifest.records)));
    }
    Ok((manifest, records))
}

pub fn write_dataset(path: &Path, records: &[VideoRecord<f32>]) -> Result<()> {
    write_file(path, &encode_dataset(records)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<VideoRecord<f32>>> {
    Ok(decode_dataset(&read_file(path)?)?.1)
}
