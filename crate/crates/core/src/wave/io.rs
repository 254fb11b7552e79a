//! `SSHT` shot files.
//!
//! Layout, little-endian: magic `SSHT`, u16 version, u16 reserved (0),
//! u64 source index, u64 source count, u64 receiver count, u64 nt,
//! f64 dt, f64 record length, source positions then receiver positions as
//! (x, z) f64 pairs, then the data panel (receivers-major, f64).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fieldio::{write_bytes, ByteReader};
use crate::wave::{AcquisitionGeometry, ShotRecord};

const MAGIC: &[u8; 4] = b"SSHT";
const VERSION: u16 = 1;

pub fn encode_shot(geom: &AcquisitionGeometry, shot: &ShotRecord) -> Result<Vec<u8>> {
    shot.check(geom)?;
    if let Some(i) = shot.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let npos = geom.sources.len() + geom.receivers.len();
    let mut buf = Vec::with_capacity(56 + 16 * npos + 8 * shot.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for n in [shot.source_index, geom.sources.len(), geom.receivers.len(), shot.nt] {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    let positions = geom.sources.iter().chain(&geom.receivers).flatten();
    for v in [geom.dt, geom.record_length].iter().chain(positions).chain(&shot.data) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_shot(bytes: &[u8]) -> Result<(AcquisitionGeometry, ShotRecord)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an SSHT file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    r.u16()?;
    let mut counts = [0usize; 4];
    for c in counts.iter_mut() {
        *c = usize::try_from(r.u64()?).map_err(|_| Error::Format("count overflows".into()))?;
    }
    let [source_index, ns, nr, nt] = counts;
    let hdr = r.f64s(2)?;
    let pairs = |r: &mut ByteReader, n: usize| -> Result<Vec<[f64; 2]>> {
        let n2 = n.checked_mul(2).ok_or_else(|| Error::Format("position count overflows".into()))?;
        Ok(r.f64s(n2)?.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    };
    let sources = pairs(&mut r, ns)?;
    let receivers = pairs(&mut r, nr)?;
    let n = nr
        .checked_mul(nt)
        .ok_or_else(|| Error::Format("data size overflows".into()))?;
    let expected = n.checked_mul(8).ok_or_else(|| Error::Format("data size overflows".into()))?;
    if r.remaining() != expected {
        return Err(Error::Format(format!("expected {expected} bytes, got {}", r.remaining())));
    }
    let data = r.f64s(n)?;
    let geom = AcquisitionGeometry::new(sources, receivers, hdr[1], hdr[0])?;
    let shot = ShotRecord::new(source_index, nr, nt, hdr[0], data)?;
    shot.check(&geom)?;
    Ok((geom, shot))
}

pub fn write_shot(path: &Path, geom: &AcquisitionGeometry, shot: &ShotRecord) -> Result<()> {
    write_bytes(path, &encode_shot(geom, shot)?)
}

pub fn read_shot(path: &Path) -> Result<(AcquisitionGeometry, ShotRecord)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_shot(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
