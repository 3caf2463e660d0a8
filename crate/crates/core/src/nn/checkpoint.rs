//! Checkpoint serialization.
//!
//! Binary layout (all integers little-endian, all floats IEEE-754 f64 LE):
//!
//! ```text
//! magic      8 bytes  b"WMLABCKP"
//! version    u32      format version, currently 1
//! arch_id    u32 len + utf8 bytes
//! layers     u32 len + utf8 bytes (JSON array of layer descriptors)
//! input      3 x u32  (C, H, W)
//! seed       u64      RNG seed recorded for the run that produced the model
//! n_params   u32
//!   per parameter: name (u32 len + utf8), rank u32, dims u32 x rank,
//!                  values f64 x numel
//! n_bn       u32
//!   per layer: key (u32 len + utf8), channels u32, momentum f64,
//!              epsilon f64, running_mean f64 x C, running_var f64 x C
//! ```
//!
//! A JSON sidecar `<file>.meta.json` carries the FNV-1a checksum of the
//! binary file plus free-form metadata (stage provenance, attack labels).
//! Round-trip load/save is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

use super::{BnStats, LayerSpec, ModelState};

const MAGIC: &[u8; 8] = b"WMLABCKP";
const FORMAT_VERSION: u32 = 1;

/// Suffix appended to the checkpoint path for the metadata sidecar.
pub const SIDECAR_SUFFIX: &str = ".meta.json";

/// Sidecar contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch_id: String,
    /// FNV-1a 64 over the binary checkpoint file, hex-encoded.
    pub checksum: String,
    pub seed: u64,
    /// Free-form provenance (producing stage, attack descriptions, ...).
    #[serde(default)]
    pub provenance: BTreeMap<String, Value>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Integrity("checkpoint contains invalid utf8".into()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn encode(model: &ModelState, seed: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_str(&mut buf, &model.arch_id);
    put_str(&mut buf, &serde_json::to_string(&model.layers)?);
    let (c, h, w) = model.input_shape;
    put_u32(&mut buf, c as u32);
    put_u32(&mut buf, h as u32);
    put_u32(&mut buf, w as u32);
    put_u64(&mut buf, seed);
    put_u32(&mut buf, model.params.len() as u32);
    for (name, t) in &model.params {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for &v in t.data() {
            put_f64(&mut buf, v);
        }
    }
    put_u32(&mut buf, model.bn_stats.len() as u32);
    for (key, st) in &model.bn_stats {
        put_str(&mut buf, key);
        put_u32(&mut buf, st.running_mean.len() as u32);
        put_f64(&mut buf, st.momentum);
        put_f64(&mut buf, st.epsilon);
        for &v in &st.running_mean {
            put_f64(&mut buf, v);
        }
        for &v in &st.running_var {
            put_f64(&mut buf, v);
        }
    }
    Ok(buf)
}

fn decode(bytes: &[u8]) -> Result<(ModelState, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let arch_id = r.string()?;
    let layers: Vec<LayerSpec> = serde_json::from_str(&r.string()?)?;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let seed = r.u64()?;
    let n_params = r.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_vec(numel)?;
        params.insert(name, Tensor::new(shape, data));
    }
    let n_bn = r.u32()? as usize;
    let mut bn_stats = BTreeMap::new();
    for _ in 0..n_bn {
        let key = r.string()?;
        let channels = r.u32()? as usize;
        let momentum = r.f64()?;
        let epsilon = r.f64()?;
        let running_mean = r.f64_vec(channels)?;
        let running_var = r.f64_vec(channels)?;
        bn_stats.insert(key, BnStats { running_mean, running_var, momentum, epsilon });
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity("trailing bytes after checkpoint payload".into()));
    }
    Ok((
        ModelState { arch_id, layers, params, bn_stats, input_shape: (c, h, w) },
        seed,
    ))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(SIDECAR_SUFFIX);
    std::path::PathBuf::from(s)
}

/// Write the checkpoint and its metadata sidecar. Returns the sidecar
/// contents (including the file checksum).
pub fn save_checkpoint(
    model: &ModelState,
    seed: u64,
    path: &Path,
    provenance: BTreeMap<String, Value>,
) -> Result<CheckpointMeta> {
    let bytes = encode(model, seed)?;
    let checksum = format!("{:016x}", fnv1a64(&bytes));
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        arch_id: model.arch_id.clone(),
        checksum,
        seed,
        provenance,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Load a checkpoint. With `verify`, the binary checksum is compared against
/// the sidecar and a mismatch refuses to load.
pub fn load_checkpoint(path: &Path, verify: bool) -> Result<(ModelState, u64, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let meta_raw = fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Integrity(format!("missing checkpoint sidecar for {}: {e}", path.display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_raw)?;
    if verify {
        let actual = format!("{:016x}", fnv1a64(&bytes));
        if actual != meta.checksum {
            return Err(Error::Integrity(format!(
                "checkpoint {} checksum {actual} does not match sidecar {}",
                path.display(),
                meta.checksum
            )));
        }
    }
    let (model, seed) = decode(&bytes)?;
    Ok((model, seed, meta))
}
