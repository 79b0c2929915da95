//! Binary checkpoint container.
//!
//! All integers and reals are little-endian:
//!
//! ```text
//! magic        8 bytes  "GMESCKPT"
//! version      u32
//! layout       u32 tensor count, then per tensor:
//!                u32 name length, name bytes, u32 rank, u64 per dim
//! param ver    u64
//! params       u64 length, f64 * length
//! latents      u32 dim, u32 t_inner, u64 count, then per latent:
//!                u64 scenario id, f64 * dim
//! config hash  32 bytes (sha256)
//! metadata     u64 length, UTF-8 JSON
//! ```
//!
//! The file must end exactly after the metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamLayout, PolicyConfig, PolicyParams, TensorSpec};
use crate::error::{Error, Result};
use crate::mask::MaskMode;
use crate::meta::{LatentContext, LatentStore};

const MAGIC: &[u8; 8] = b"GMESCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: String,
    pub meta_enabled: bool,
    pub mask_mode: MaskMode,
    /// Iterations completed when the checkpoint was written.
    pub iteration: u64,
    pub master_seed: u64,
    pub policy: PolicyConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub latents: LatentStore,
    pub config_hash: [u8; 32],
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn config_hash_hex(&self) -> String {
        hex::encode(self.config_hash)
    }

    /// Compares against the hash of the running configuration and logs a
    /// warning on mismatch.
    pub fn verify_config_hash(&self, expected: &[u8; 32]) -> bool {
        let ok = &self.config_hash == expected;
        if !ok {
            log::warn!(
                "checkpoint config hash {} differs from current config {}",
                self.config_hash_hex(),
                hex::encode(expected)
            );
        }
        ok
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(64 + 8 * ckpt.params.flat.len());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, ckpt.params.layout.tensors.len() as u32);
    for t in &ckpt.params.layout.tensors {
        put_u32(&mut buf, t.name.len() as u32);
        buf.extend_from_slice(t.name.as_bytes());
        put_u32(&mut buf, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(&mut buf, d as u64);
        }
    }
    put_u64(&mut buf, ckpt.params.version);
    put_u64(&mut buf, ckpt.params.flat.len() as u64);
    put_f64s(&mut buf, &ckpt.params.flat);
    put_u32(&mut buf, ckpt.latents.latent_dim as u32);
    put_u32(&mut buf, ckpt.latents.t_inner as u32);
    put_u64(&mut buf, ckpt.latents.len() as u64);
    for c in ckpt.latents.iter() {
        put_u64(&mut buf, c.scenario_id);
        put_f64s(&mut buf, &c.values);
    }
    buf.extend_from_slice(&ckpt.config_hash);
    let meta = serde_json::to_vec(&ckpt.meta)?;
    put_u64(&mut buf, meta.len() as u64);
    buf.extend_from_slice(&meta);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated while reading {what}"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str, elem: usize) -> std::result::Result<usize, String> {
        let n = self.u64(what)?;
        let remaining = (self.bytes.len() - self.at) as u64;
        if n.saturating_mul(elem as u64) > remaining {
            return Err(format!("truncated: {what} claims {n} entries"));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
        Ok(self
            .take(8 * n, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        ));
    }
    let count = r.u32("layout")? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("tensor shape")? as usize);
        }
        tensors.push(TensorSpec { name, shape });
    }
    let layout = ParamLayout { tensors };
    let param_version = r.u64("parameter version")?;
    let n = r.len("parameters", 8)?;
    if n != layout.total_len() {
        return Err(format!(
            "parameter length {n} does not match layout size {}",
            layout.total_len()
        ));
    }
    let flat = r.f64s(n, "parameters")?;

    let latent_dim = r.u32("latent dim")? as usize;
    let t_inner = r.u32("t_inner")? as usize;
    let mut latents = LatentStore::new(latent_dim, t_inner).map_err(|e| e.to_string())?;
    let count = r.len("latents", 8 * (1 + latent_dim))?;
    for _ in 0..count {
        let id = r.u64("latent id")?;
        let values = r.f64s(latent_dim, "latent values")?;
        let ctx = LatentContext::new(id, values).map_err(|e| e.to_string())?;
        latents.insert(ctx).map_err(|e| e.to_string())?;
    }
    let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
    let meta_len = r.len("metadata", 1)?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| format!("metadata: {e}"))?;
    if r.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.at));
    }
    Ok(Checkpoint {
        params: PolicyParams {
            flat,
            layout,
            version: param_version,
        },
        latents,
        config_hash,
        meta,
    })
}

/// Writes through a temporary file and renames, so readers never observe a
/// partial checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyNet;

    fn sample() -> Checkpoint {
        let net = PolicyNet::new(PolicyConfig::desk(10)).unwrap();
        let mut latents = LatentStore::new(16, 10).unwrap();
        latents
            .insert(LatentContext::new(4, (0..16).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap())
            .unwrap();
        Checkpoint {
            params: net.init_params(8),
            latents,
            config_hash: [7; 32],
            meta: CheckpointMeta {
                variant: "guided-meta-tam".into(),
                meta_enabled: true,
                mask_mode: MaskMode::Tam,
                iteration: 12,
                master_seed: 3,
                policy: net.config().clone(),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params.flat), bits(&c.params.flat));
        assert!(back.verify_config_hash(&[7; 32]));
        assert!(!back.verify_config_hash(&[0; 32]));
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 5, 12, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8] = 9;
        assert!(decode(&bytes).unwrap_err().contains("version"));
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn foreign_layout_is_rejected_by_name() {
        let c = sample();
        let other = PolicyNet::new(PolicyConfig {
            hidden: vec![16, 16],
            ..PolicyConfig::desk(10)
        })
        .unwrap();
        let err = other.check_params(&c.params).unwrap_err().to_string();
        assert!(err.contains("lstm.w[128x68]") && err.contains("lstm.w[64x52]"), "{err}");
    }
}
