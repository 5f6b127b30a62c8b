//! Binary checkpoints of pretrained and variational weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "QBNNCKPT" | u32 version | u8 kind (0 = pre, 1 = svi)
//! u64 config length | config echo (UTF-8 key=value lines)
//! u32 layer count, then per layer:
//!   u32 name length | name | u64 rows | u64 cols | u8 has_rho
//!   rows*cols f64 mu | rows*cols f64 rho (if has_rho)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bnn::{Activation, BnnModel};
use crate::error::{Error, Result};
use crate::svi::Mlp;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QBNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrained,
    Posterior,
}

impl CheckpointKind {
    /// File name under a run directory.
    pub fn file_name(self) -> &'static str {
        match self {
            CheckpointKind::Pretrained => "ckpt_pre.bin",
            CheckpointKind::Posterior => "ckpt_svi.bin",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub mu: Tensor,
    pub rho: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Echo of the configuration that produced the weights.
    pub config: String,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_mlp(mlp: &Mlp, config: impl Into<String>) -> Self {
        Checkpoint {
            kind: CheckpointKind::Pretrained,
            config: config.into(),
            layers: mlp
                .weights
                .iter()
                .enumerate()
                .map(|(i, w)| LayerRecord {
                    name: format!("fc{}", i + 1),
                    mu: w.clone(),
                    rho: None,
                })
                .collect(),
        }
    }

    pub fn from_bnn(bnn: &BnnModel, config: impl Into<String>) -> Self {
        Checkpoint {
            kind: CheckpointKind::Posterior,
            config: config.into(),
            layers: bnn
                .layers
                .iter()
                .map(|l| LayerRecord {
                    name: l.name.clone(),
                    mu: l.mu.clone(),
                    rho: Some(l.rho.clone()),
                })
                .collect(),
        }
    }

    pub fn into_mlp(self, activation: Activation) -> Result<Mlp> {
        if self.kind != CheckpointKind::Pretrained {
            return Err(Error::Checkpoint("expected a pretrained checkpoint".into()));
        }
        Ok(Mlp {
            weights: self.layers.into_iter().map(|l| l.mu).collect(),
            activation,
        })
    }

    /// Loads the variational parameters into `bnn`, whose shape must match.
    pub fn apply_to(&self, bnn: &mut BnnModel) -> Result<()> {
        if self.kind != CheckpointKind::Posterior {
            return Err(Error::Checkpoint("expected a posterior checkpoint".into()));
        }
        if self.layers.len() != bnn.layers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} layers, model has {}",
                self.layers.len(),
                bnn.layers.len()
            )));
        }
        for (rec, layer) in self.layers.iter().zip(&bnn.layers) {
            if rec.mu.shape() != layer.mu.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer {}: checkpoint shape {:?}, model shape {:?}",
                    rec.name,
                    rec.mu.shape(),
                    layer.mu.shape()
                )));
            }
        }
        for (rec, layer) in self.layers.iter().zip(bnn.layers.iter_mut()) {
            layer.mu = rec.mu.clone();
            layer.rho = rec.rho.clone().expect("posterior layers carry rho");
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            CheckpointKind::Pretrained => 0,
            CheckpointKind::Posterior => 1,
        });
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.name.len() as u32).to_le_bytes());
            out.extend_from_slice(l.name.as_bytes());
            out.extend_from_slice(&(l.mu.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(l.mu.cols() as u64).to_le_bytes());
            out.push(u8::from(l.rho.is_some()));
            for t in std::iter::once(&l.mu).chain(l.rho.as_ref()) {
                for v in t.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let kind = match r.take(1, "kind")?[0] {
            0 => CheckpointKind::Pretrained,
            1 => CheckpointKind::Posterior,
            k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
        };
        let len = r.u64("config length")? as usize;
        let config = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let count = r.u32("layer count")?;
        let mut layers = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = r.u32("layer name length")? as usize;
            let name = String::from_utf8(r.take(n, "layer name")?.to_vec())
                .map_err(|_| Error::Checkpoint("layer name is not UTF-8".into()))?;
            let rows = r.u64("rows")? as usize;
            let cols = r.u64("cols")? as usize;
            let has_rho = r.take(1, "rho flag")?[0] != 0;
            let mu = r.tensor(rows, cols, &name)?;
            let rho = if has_rho {
                Some(r.tensor(rows, cols, &name)?)
            } else {
                None
            };
            if (kind == CheckpointKind::Posterior) != has_rho {
                return Err(Error::Checkpoint(format!(
                    "layer {name}: rho presence does not match kind"
                )));
            }
            layers.push(LayerRecord { name, mu, rho });
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { kind, config, layers })
    }

    /// Writes atomically and returns the content digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, rows: usize, cols: usize, name: &str) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("layer {name}: shape overflow")))?;
        let raw = self.take(n, name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
