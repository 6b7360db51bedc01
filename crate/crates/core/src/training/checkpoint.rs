//! Binary checkpoint archive.
//!
//! Layout: `SLGANCKP` magic, little-endian `u32` format version, `u64` header
//! length, a JSON header, then the raw little-endian `f64` payload. The header
//! holds the key/value training config, the model-config hash, the step,
//! per-network Adam step counts, the tensor index and the payload SHA-256.
//! Tensor names are `<group>/<param>` with groups `live`, `ema`, `adam_m` and
//! `adam_v`; param names follow `<network>.<layer>.<w|b>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{AdamState, EmaParams, ModelBundle};
use crate::autograd::Tensor;
use crate::config::TrainConfig;
use crate::networks::{NetKind, Networks, Params};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SLGANCKP";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f64` elements from the payload start.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    config_hash: String,
    step: u64,
    adam_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptCheckpoint(msg.into())
}

fn groups(bundle: &ModelBundle) -> Vec<(String, &Params)> {
    let mut out = Vec::new();
    for kind in NetKind::ALL {
        out.push(("live".to_string(), bundle.nets.get(kind)));
    }
    for p in [&bundle.ema.se, &bundle.ema.mn, &bundle.ema.gen] {
        out.push(("ema".to_string(), p));
    }
    for st in bundle.adam.values() {
        out.push(("adam_m".to_string(), &st.m));
        out.push(("adam_v".to_string(), &st.v));
    }
    out
}

/// Serialize the whole bundle; the file is written to a temporary sibling
/// and renamed into place.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (group, params) in groups(bundle) {
        for (name, t) in params.iter() {
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            payload.extend_from_slice(&t.to_le_bytes());
        }
    }
    let header = Header {
        config: bundle.config.to_kv_string(),
        config_hash: bundle.config.model.hash(),
        step: bundle.step,
        adam_steps: bundle
            .adam
            .iter()
            .map(|(k, s)| (k.prefix().to_string(), s.t))
            .collect(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| io(std::io::Error::other(e)))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(MAGIC).map_err(io)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&header).map_err(io)?;
        f.write_all(&payload).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

/// Read a checkpoint, verifying magic, version, payload digest and that the
/// stored architecture hash matches the stored config.
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<ModelBundle, CheckpointError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch(format!(
            "format {version}, reader supports {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &body[hlen..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload digest mismatch"));
    }
    let config = TrainConfig::parse(&header.config)
        .map_err(|e| corrupt(format!("stored config: {e}")))?;
    if config.model.hash() != header.config_hash {
        return Err(CheckpointError::VersionMismatch(format!(
            "config hash {} does not match architecture {}",
            header.config_hash,
            config.model.hash()
        )));
    }

    let mut by_group: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(corrupt(format!("tensor {} out of range", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (group, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| corrupt(format!("bad tensor name {}", e.name)))?;
        if !matches!(group, "live" | "ema" | "adam_m" | "adam_v") {
            return Err(corrupt(format!("unknown group {group}")));
        }
        by_group
            .entry(group.to_string())
            .or_default()
            .insert(name.to_string(), Tensor::new(e.shape.clone(), data));
    }

    let mut take = |group: &str, kind: NetKind| -> Params {
        let prefix = format!("{}.", kind.prefix());
        let all = by_group.entry(group.to_string()).or_default();
        let names: Vec<String> = all.keys().filter(|k| k.starts_with(&prefix)).cloned().collect();
        Params(
            names
                .into_iter()
                .map(|k| {
                    let t = all.remove(&k).expect("listed key");
                    (k, t)
                })
                .collect(),
        )
    };
    let nets = Networks {
        config: config.model.clone(),
        se: take("live", NetKind::StyleEncoder),
        mn: take("live", NetKind::Mapping),
        gen: take("live", NetKind::Generator),
        disc: take("live", NetKind::Discriminator),
    };
    let ema = EmaParams {
        se: take("ema", NetKind::StyleEncoder),
        mn: take("ema", NetKind::Mapping),
        gen: take("ema", NetKind::Generator),
    };
    let mut adam = BTreeMap::new();
    for kind in NetKind::ALL {
        let t = *header
            .adam_steps
            .get(kind.prefix())
            .ok_or_else(|| corrupt(format!("no optimizer step for {}", kind.prefix())))?;
        adam.insert(
            kind,
            AdamState {
                m: take("adam_m", kind),
                v: take("adam_v", kind),
                t,
            },
        );
    }
    let fresh = Networks::init(&config.model, 0);
    for kind in NetKind::ALL {
        let p = nets.get(kind);
        if !p.same_shapes(fresh.get(kind)) {
            return Err(corrupt(format!("{} parameters do not fit the config", kind.prefix())));
        }
        let st = &adam[&kind];
        if !st.m.same_shapes(p) || !st.v.same_shapes(p) {
            return Err(corrupt(format!("{} optimizer state malformed", kind.prefix())));
        }
    }
    if !ema.se.same_shapes(&nets.se) || !ema.mn.same_shapes(&nets.mn) || !ema.gen.same_shapes(&nets.gen) {
        return Err(corrupt("EMA shadows do not match the live networks"));
    }
    Ok(ModelBundle {
        config,
        nets,
        ema,
        adam,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.model.resolution = 16;
        c.model.trunk_down_stages = 2;
        c.seed = 77;
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut b = ModelBundle::init(&tiny(), 1).unwrap();
        b.step = 42;
        b.adam.get_mut(&NetKind::Generator).unwrap().t = 7;
        b.ema.gen.iter_mut().for_each(|(_, t)| t.data_mut()[0] = 0.1 + 0.2);
        save_checkpoint(&b, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, b);
        for k in NetKind::ALL {
            assert!(back.nets.get(k).bit_eq(b.nets.get(k)));
        }
        assert!(back.ema.gen.bit_eq(&b.ema.gen));
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn altered_config_hash_is_a_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&ModelBundle::init(&tiny(), 1).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        header["config_hash"] = serde_json::Value::String("0".repeat(64));
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[20 + hlen..]);
        assert!(matches!(decode(&out), Err(CheckpointError::VersionMismatch(_))));

        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::VersionMismatch(_))));
    }

    #[test]
    fn flipped_payload_bit_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&ModelBundle::init(&tiny(), 1).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 1;
        assert!(matches!(decode(&bytes), Err(CheckpointError::CorruptCheckpoint(_))));
        assert!(matches!(decode(b"nonsense"), Err(CheckpointError::CorruptCheckpoint(_))));
    }
}
