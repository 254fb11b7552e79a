//! `SFNO` weight files and on-disk pair datasets.
//!
//! SFNO layout: magic, u16 version, u16 flags (bit 0: statistics present),
//! u32 nx, nz, width, layers, k_max, proj_hidden, n_out, then n_out f64
//! snapshot times, optional statistics (f32 log-K mean and std, n_out f32
//! output means) and the weights as f32 in declaration order.
//!
//! A dataset directory holds `pairs.txt` (`# n_train N` header, then one
//! `index k_file series_dir` line per pair) next to the SGRD files.

use std::fs;
use std::path::Path;

use super::{FnoArch, FnoWeights, NormStats, PairDataset};
use crate::error::{Error, Result};
use crate::fieldio::{read_field, write_bytes, write_field, ByteReader};
use crate::flow::{read_series, write_series};

const MAGIC: &[u8; 4] = b"SFNO";
const VERSION: u16 = 1;
const PAIRS: &str = "pairs.txt";

pub fn encode_weights(w: &FnoWeights) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 4 * w.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(w.stats.is_some() as u16).to_le_bytes());
    let a = w.arch;
    for v in [w.dims[0], w.dims[1], a.width, a.layers, a.k_max, a.proj_hidden, w.n_out()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in &w.times {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    if let Some(s) = &w.stats {
        for v in [s.log_k_mean, s.log_k_std].iter().chain(&s.out_mean) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in w.to_flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_weights(bytes: &[u8]) -> Result<FnoWeights> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an SFNO file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SFNO version {version}")));
    }
    let flags = r.u16()?;
    let mut h = [0usize; 7];
    for v in &mut h {
        *v = r.u32()? as usize;
    }
    let [nx, nz, width, layers, k_max, proj_hidden, n_out] = h;
    if n_out == 0 || n_out > 4096 {
        return Err(Error::Format(format!("bad SFNO output count {n_out}")));
    }
    let times = r.f64s(n_out)?;
    let stats = if flags & 1 == 1 {
        let v = r.f32s(2 + n_out)?;
        Some(NormStats {
            log_k_mean: v[0],
            log_k_std: v[1],
            out_mean: v[2..].to_vec(),
        })
    } else {
        None
    };
    let arch = FnoArch {
        width,
        layers,
        k_max,
        proj_hidden,
    };
    let mut w = FnoWeights::zeros([nx, nz], arch, times).map_err(|e| Error::Format(format!("bad SFNO header: {e}")))?;
    w.stats = stats;
    let n = w.param_count();
    if r.remaining() != 4 * n {
        return Err(Error::Format(format!("expected {} weight bytes, got {}", 4 * n, r.remaining())));
    }
    let flat = r.f32s(n)?;
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    w.set_flat(&flat)?;
    Ok(w)
}

pub fn write_weights(w: &FnoWeights, path: &Path) -> Result<()> {
    write_bytes(path, &encode_weights(w))
}

pub fn read_weights(path: &Path) -> Result<FnoWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

pub fn write_dataset(dir: &Path, data: &PairDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("# n_train {}\n", data.n_train);
    for (i, (k, s)) in data.pairs.iter().enumerate() {
        let kname = format!("k_{i:05}.sgrd");
        let sname = format!("series_{i:05}");
        write_field(k, &dir.join(&kname))?;
        write_series(&dir.join(&sname), s)?;
        manifest.push_str(&format!("{i} {kname} {sname}\n"));
    }
    let path = dir.join(PAIRS);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(dir: &Path) -> Result<PairDataset> {
    let path = dir.join(PAIRS);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut n_train = None;
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let bad = || Error::Format(format!("{}:{}: malformed line", path.display(), ln + 1));
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("# n_train") {
            n_train = Some(rest.trim().parse::<usize>().map_err(|_| bad())?);
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        pairs.push((read_field(&dir.join(parts[1]))?, read_series(&dir.join(parts[2]))?));
    }
    let n_train = n_train.ok_or_else(|| Error::Format(format!("{}: missing n_train header", path.display())))?;
    PairDataset::new(pairs, n_train)
}
