//! `SNFP` parameter files: magic, u16 version, u16 reserved, u32 nx, nz, nc,
//! hidden, depth, nscales, then every parameter block as little-endian f32
//! in declaration order (pixel affine first, then layer by layer).

use std::fs;
use std::path::Path;

use super::CouplingFlowParams;
use crate::error::{Error, Result};
use crate::fieldio::{write_bytes, ByteReader};

const MAGIC: &[u8; 4] = b"SNFP";
const VERSION: u16 = 1;

pub fn encode_params(p: &CouplingFlowParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + 4 * p.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for v in [p.dims[0], p.dims[1], p.nc, p.hidden, p.depth, p.nscales] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in p.to_flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_params(bytes: &[u8]) -> Result<CouplingFlowParams> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an SNFP file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SNFP version {version}")));
    }
    r.u16()?;
    let mut h = [0usize; 6];
    for v in &mut h {
        *v = r.u32()? as usize;
    }
    let [nx, nz, nc, hidden, depth, nscales] = h;
    let mut p = CouplingFlowParams::zeros([nx, nz], nc, hidden, depth, nscales)
        .map_err(|e| Error::Format(format!("bad SNFP header: {e}")))?;
    let n = p.param_count();
    if r.remaining() != 4 * n {
        return Err(Error::Format(format!("expected {} parameter bytes, got {}", 4 * n, r.remaining())));
    }
    let flat = r.f32s(n)?;
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    p.set_flat(&flat)?;
    Ok(p)
}

pub fn write_params(p: &CouplingFlowParams, path: &Path) -> Result<()> {
    write_bytes(path, &encode_params(p))
}

pub fn read_params(path: &Path) -> Result<CouplingFlowParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
