//! Little-endian binary checkpoints:
//! `POPGRAPH`, u32 version, u64 fingerprint, u32 entry count, then per entry
//! u32 name length, name bytes, u32 rank, u64 dims, f64 values.
//! Optimizer moments are stored as `adam/m/<param>`, `adam/v/<param>` and `adam/t`;
//! metrics as scalar `metric/<name>` entries.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::adam::AdamState;

pub const MAGIC: &[u8; 8] = b"POPGRAPH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
    pub metrics: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(fingerprint: u64, params: ModelParams) -> Self {
        Self {
            fingerprint,
            params,
            adam: None,
            metrics: BTreeMap::new(),
        }
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(a) = &self.adam {
            out.extend(a.m.iter().map(|(k, t)| (format!("adam/m/{k}"), t)));
            out.extend(a.v.iter().map(|(k, t)| (format!("adam/v/{k}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut scalars: Vec<(String, Tensor)> = Vec::new();
        if let Some(a) = &self.adam {
            scalars.push(("adam/t".into(), Tensor::scalar(a.t as f64)));
        }
        scalars.extend(self.metrics.iter().map(|(k, &v)| (format!("metric/{k}"), Tensor::scalar(v))));
        let mut entries = self.entries();
        entries.extend(scalars.iter().map(|(k, t)| (k.clone(), t)));

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.fingerprint.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let fingerprint = r.u64()?;
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        let mut adam = AdamState::new();
        let mut has_adam = false;
        let mut metrics = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dim overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.at) / 8)
                .ok_or_else(|| Error::Format(format!("tensor '{name}' runs past the end")))?;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            if let Some(rest) = name.strip_prefix("adam/m/") {
                adam.m.insert(rest.to_string(), t);
                has_adam = true;
            } else if let Some(rest) = name.strip_prefix("adam/v/") {
                adam.v.insert(rest.to_string(), t);
                has_adam = true;
            } else if name == "adam/t" {
                adam.t = t.item() as u64;
                has_adam = true;
            } else if let Some(rest) = name.strip_prefix("metric/") {
                metrics.insert(rest.to_string(), t.item());
            } else {
                params.insert(name, t);
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self {
            fingerprint,
            params: ModelParams::from_map(params).map_err(|e| Error::Format(e.to_string()))?,
            adam: has_adam.then_some(adam),
            metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
