//! Versioned binary container for trained weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "EVRCKPT\0"
//! version      u32
//! config_len   u32, then config_len bytes of UTF-8 JSON
//! fp_len       u32, then fp_len bytes of UTF-8 schema fingerprint
//! n_tensors    u32
//! per tensor:  name_len u32, name bytes,
//!              ndim u32, ndim × u64 dims,
//!              prod(dims) × f32 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Architecture and model-kind description.
    pub config: serde_json::Value,
    /// Fingerprint of the feature schema the weights were trained against.
    pub fingerprint: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_params<S: Scalar>(config: serde_json::Value, fingerprint: impl Into<String>, params: &ParamStore<S>) -> Self {
        Self {
            config,
            fingerprint: fingerprint.into(),
            tensors: params.iter().map(|p| (p.name.clone(), p.value.cast())).collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("JSON value serializes");
        put_bytes(&mut out, &config);
        put_bytes(&mut out, self.fingerprint.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let config = serde_json::from_slice(r.chunk()?)
            .map_err(|e| NnError::Checkpoint(format!("config: {e}")))?;
        let fingerprint = r.string()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.take(8)?;
                shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| NnError::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, fingerprint, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| NnError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| NnError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored tensors into `params`, converting element type.
    pub fn restore_into<S: Scalar>(&self, params: &mut ParamStore<S>) -> Result<()> {
        params.load_values(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NnError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn chunk(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.chunk()?.to_vec()).map_err(|e| NnError::Checkpoint(format!("utf-8: {e}")))
    }
}
