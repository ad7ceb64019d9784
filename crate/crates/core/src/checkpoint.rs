//! Binary checkpoint: header, embedded config, named tensors, trailing
//! SHA-256.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PFDM" | version u32 | flags u32 | config_len u32 | config TOML
//! | fingerprint [32] | step u64 | seed u64 | adam_step u64 | n_tensors u32
//! | n x (name_len u16 | name | dtype u8 | rank u8 | dims u64.. | payload)
//! | sha256 of everything above [32]
//! ```
//!
//! `dtype` 0 is f64. Flag bit 0 marks a frozen codec.

use std::path::Path;

use sha2::{Digest, Sha256};
use vton_tensor::{ParamStore, Tensor};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFDM";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_FROZEN: u32 = 1;
const DTYPE_F64: u8 = 0;

pub const CODEC_PREFIX: &str = "codec/";
pub const UNET_PREFIX: &str = "unet/";
pub const ADAM_M_PREFIX: &str = "adam.m/";
pub const ADAM_V_PREFIX: &str = "adam.v/";
pub const LATENT_SCALE_KEY: &str = "codec.latent_scale";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub frozen: bool,
    pub step: u64,
    /// Seed of the per-step draw streams; with `step` it fixes every later
    /// draw.
    pub seed: u64,
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            seed: config.train.seed,
            config,
            frozen: false,
            step: 0,
            adam_step: 0,
            tensors: Vec::new(),
        }
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Tensors whose names start with `prefix`, prefix stripped, in file order.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (n, t) in &self.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                store.add(rest.to_string(), t.clone());
            }
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(if self.frozen { FLAG_FROZEN } else { 0 }).to_le_bytes());
        let toml = self.config.to_toml();
        out.extend_from_slice(&(toml.len() as u32).to_le_bytes());
        out.extend_from_slice(toml.as_bytes());
        out.extend_from_slice(&Sha256::digest(toml.as_bytes()));
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (file truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let flags = r.u32()?;
        let len = r.u32()? as usize;
        let toml = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let fp = r.take(32)?;
        if Sha256::digest(toml.as_bytes()).as_slice() != fp {
            return Err(Error::Checkpoint("config fingerprint mismatch".into()));
        }
        let config = PipelineConfig::from_toml(toml)?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let adam_step = r.u64()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let nl = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims.iter().product::<usize>();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor records".into()));
        }
        Ok(Self {
            config,
            frozen: flags & FLAG_FROZEN != 0,
            step,
            seed,
            adam_step,
            tensors,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
