//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FCTL" | version u32 | kind u8 | activation u8 | reserved u16
//! state_dim u32 | n_widths u32 | widths u32 * n_widths
//! n_params u64 | params f64 * n_params
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::mlp::{Activation, Mlp};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FCTL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    VectorField,
    Control,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::VectorField => 0,
            CheckpointKind::Control => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(CheckpointKind::VectorField),
            1 => Ok(CheckpointKind::Control),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other}"))),
        }
    }
}

pub fn encode(kind: CheckpointKind, net: &Mlp) -> Vec<u8> {
    let widths = net.widths();
    let mut out = Vec::with_capacity(32 + 4 * widths.len() + 8 * net.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind.tag());
    out.push(net.activation().tag());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(net.output_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        out.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.num_params() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointKind, Mlp)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("missing FCTL magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let kind = CheckpointKind::from_tag(r.u8()?)?;
    let activation = Activation::from_tag(r.u8()?)?;
    r.take(2)?;
    let dim = r.u32()? as usize;
    let n_widths = r.u32()? as usize;
    if n_widths > 64 {
        return Err(Error::Checkpoint(format!("implausible layer count {n_widths}")));
    }
    let widths = (0..n_widths).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    if widths.last() != Some(&dim) {
        return Err(Error::Checkpoint("state dimension does not match output width".into()));
    }
    let n_params = r.u64()? as usize;
    let raw = r.take(n_params.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad parameter count".into()))?)?;
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let net = Mlp::from_params(widths, activation, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((kind, net))
}

pub fn save(path: &Path, kind: CheckpointKind, net: &Mlp) -> Result<()> {
    fs::write(path, encode(kind, net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointKind, Mlp)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

/// SHA-256 over the little-endian parameter bytes, hex encoded.
pub fn params_checksum(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
