//! Binary grid cache.
//!
//! Layout: 8-byte magic `DATORUS1`, u32 version, u32 payload kind, 32-byte
//! fingerprint, three u32 grid dims, then little-endian f64 values with the
//! grid in x-fastest order and the components of each node contiguous.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"DATORUS1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 4 + 32 + 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum PayloadKind {
    /// u at grid nodes, 3 components.
    Displacement = 1,
    /// Ê^s, Ê^c, Ê^u and the invariance defect, 10 components.
    Frames = 2,
}

impl PayloadKind {
    pub fn components(self) -> usize {
        match self {
            PayloadKind::Displacement => 3,
            PayloadKind::Frames => 10,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(PayloadKind::Displacement),
            2 => Some(PayloadKind::Frames),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPayload {
    pub kind: PayloadKind,
    pub fingerprint: [u8; 32],
    pub dims: [u32; 3],
    pub data: Vec<f64>,
}

impl GridPayload {
    pub fn expected_len(&self) -> usize {
        self.dims.iter().map(|d| *d as usize).product::<usize>() * self.kind.components()
    }
}

pub fn encode(p: &GridPayload) -> Result<Vec<u8>, CliError> {
    if p.data.len() != p.expected_len() {
        return Err(CliError::Cache(format!(
            "payload has {} values, dims need {}",
            p.data.len(),
            p.expected_len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * p.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.kind as u32).to_le_bytes());
    out.extend_from_slice(&p.fingerprint);
    for d in p.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &p.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode(b: &[u8]) -> Result<GridPayload, CliError> {
    let corrupt = |m: String| CliError::CorruptCache(m);
    if b.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            b.len()
        )));
    }
    if &b[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32_at(b, 8);
    if version != VERSION {
        return Err(corrupt(format!(
            "unsupported cache version {version}, this build reads version {VERSION}"
        )));
    }
    let tag = u32_at(b, 12);
    let kind =
        PayloadKind::from_tag(tag).ok_or_else(|| corrupt(format!("unknown payload kind {tag}")))?;
    let fingerprint: [u8; 32] = b[16..48].try_into().unwrap();
    let dims = [u32_at(b, 48), u32_at(b, 52), u32_at(b, 56)];
    let p = GridPayload {
        kind,
        fingerprint,
        dims,
        data: Vec::new(),
    };
    let need = p.expected_len();
    let body = &b[HEADER_LEN..];
    if body.len() != 8 * need {
        return Err(corrupt(format!(
            "payload is {} bytes, expected {}",
            body.len(),
            8 * need
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(GridPayload { data, ..p })
}

pub fn write(path: &Path, p: &GridPayload) -> Result<(), CliError> {
    let bytes = encode(p)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<GridPayload, CliError> {
    decode(&fs::read(path)?)
}

/// Reads a cache and checks its kind and fingerprint. `Ok(None)` means the
/// file belongs to another configuration.
pub fn read_matching(
    path: &Path,
    kind: PayloadKind,
    fingerprint: &[u8; 32],
) -> Result<Option<GridPayload>, CliError> {
    let p = read(path)?;
    if p.kind != kind {
        return Err(CliError::CorruptCache(format!(
            "{} holds payload kind {}, expected {}",
            path.display(),
            p.kind as u32,
            kind as u32
        )));
    }
    if &p.fingerprint != fingerprint {
        return Ok(None);
    }
    Ok(Some(p))
}
