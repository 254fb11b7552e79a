//! Regular-grid fields, seeded random streams and the `SGRD` binary format.
//!
//! Layout of an `SGRD` file (all little-endian):
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `SGRD`                     |
//! | 2            | format version (`u16`, = 1)      |
//! | 2            | ndim (`u16`)                     |
//! | 8 · ndim     | dims (`u64`)                     |
//! | 8 · ndim     | spacing (`f64`)                  |
//! | 8 · ndim     | origin (`f64`)                   |
//! | 8 · Π dims   | payload (`f64`, last axis fastest) |

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const SGRD_MAGIC: &[u8; 4] = b"SGRD";
pub const SGRD_VERSION: u16 = 1;

/// An n-dimensional regular-grid scalar array with physical spacing.
///
/// Data is row-major with the last axis fastest. For 2D models the axes are
/// `[x, z]`, so `data[ix * nz + iz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
    data: Vec<f64>,
}

impl Field {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("field needs at least one axis".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in dims {dims:?}")));
        }
        if spacing.len() != dims.len() || origin.len() != dims.len() {
            return Err(Error::Shape(format!(
                "dims {:?} with {} spacings and {} origins",
                dims,
                spacing.len(),
                origin.len()
            )));
        }
        if let Some(s) = spacing.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidInput(format!("spacing must be positive, got {s}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput("origin must be finite".into()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} hold {} values, data has {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// Unit spacing, zero origin.
    pub fn from_vec(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let nd = dims.len();
        Self::new(dims, vec![1.0; nd], vec![0.0; nd], data)
    }

    pub fn filled(dims: Vec<usize>, spacing: Vec<f64>, value: f64) -> Result<Self> {
        let n = dims.iter().product();
        let nd = dims.len();
        Self::new(dims, spacing, vec![0.0; nd], vec![value; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// A field on the same grid with new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims.clone(), self.spacing.clone(), self.origin.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            spacing: self.spacing.clone(),
            origin: self.origin.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        self.dims == other.dims
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Value at `(i, j)` of a 2D field.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Deterministic, splittable random stream backed by the ChaCha20 counter-mode generator.
///
/// Child streams are derived from the parent's seed and a label only, so they
/// do not depend on how many values the parent has drawn.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha20-splitmix-v1";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, label: &str) -> Self {
        Self::new(splitmix64(self.seed ^ fnv1a(label.as_bytes())))
    }

    /// Child stream keyed by an integer, e.g. an iteration counter.
    pub fn child_indexed(&self, label: &str, index: u64) -> Self {
        Self::new(splitmix64(splitmix64(self.seed ^ fnv1a(label.as_bytes())) ^ index))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// I.i.d. standard-normal field with unit spacing.
pub fn gaussian_field(dims: &[usize], stream: &mut RngStream) -> Result<Field> {
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("cannot draw a field with dims {dims:?}")));
    }
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| stream.normal()).collect();
    Field::from_vec(dims.to_vec(), data)
}

/// Serialize a field into the `SGRD` byte layout.
pub fn encode_field(field: &Field) -> Result<Vec<u8>> {
    if let Some(i) = field.first_non_finite() {
        return Err(Error::NonFinite(i));
    }
    let nd = field.dims.len();
    let mut buf = Vec::with_capacity(8 + 24 * nd + 8 * field.len());
    buf.extend_from_slice(SGRD_MAGIC);
    buf.extend_from_slice(&SGRD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(nd as u16).to_le_bytes());
    for &d in &field.dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in field.spacing.iter().chain(&field.origin).chain(&field.data) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != SGRD_MAGIC {
        return Err(Error::Format("not an SGRD file".into()));
    }
    let version = r.u16()?;
    if version != SGRD_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let nd = r.u16()? as usize;
    let dims = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let spacing = r.f64s(nd)?;
    let origin = r.f64s(nd)?;
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let n = n.ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let expected = n * 8;
    if r.remaining() != expected {
        return Err(Error::Format(format!(
            "expected {} bytes, got {}",
            expected,
            r.remaining()
        )));
    }
    let data = r.f64s(n)?;
    Field::new(dims, spacing, origin, data)
}

pub fn write_field(field: &Field, path: &Path) -> Result<()> {
    let bytes = encode_field(field)?;
    write_bytes(path, &bytes)
}

pub fn read_field(path: &Path) -> Result<Field> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor shared by the binary readers.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated header: expected {} more bytes, got {}",
                n,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Format(format!("length {n} overflows")))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format(format!("length {n} overflows")))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_2x2_is_88_bytes() {
        let f = Field::from_vec(vec![2, 2], vec![0.0; 4]).unwrap();
        let bytes = encode_field(&f).unwrap();
        assert_eq!(bytes.len(), 88);
        assert_eq!(decode_field(&bytes).unwrap(), f);
    }

    #[test]
    fn golden_bytes_are_little_endian() {
        let f = Field::new(vec![1, 2], vec![10.0, 5.0], vec![0.0, -1.0], vec![1.0, -2.5]).unwrap();
        let bytes = encode_field(&f).unwrap();
        let golden: Vec<u8> = [
            &b"SGRD"[..],
            &[1, 0, 2, 0],
            &[1, 0, 0, 0, 0, 0, 0, 0],
            &[2, 0, 0, 0, 0, 0, 0, 0],
            &[0, 0, 0, 0, 0, 0, 0x24, 0x40], // 10.0
            &[0, 0, 0, 0, 0, 0, 0x14, 0x40], // 5.0
            &[0, 0, 0, 0, 0, 0, 0, 0],
            &[0, 0, 0, 0, 0, 0, 0xf0, 0xbf], // -1.0
            &[0, 0, 0, 0, 0, 0, 0xf0, 0x3f], // 1.0
            &[0, 0, 0, 0, 0, 0, 0x04, 0xc0], // -2.5
        ]
        .concat();
        assert_eq!(bytes, golden);
        assert_eq!(decode_field(&golden).unwrap(), f);
    }

    #[test]
    fn nan_rejected_with_index() {
        let f = Field::from_vec(vec![3], vec![0.0, f64::NAN, 1.0]).unwrap();
        let err = encode_field(&f).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value at index 1");
    }

    #[test]
    fn bad_magic_and_version() {
        let f = Field::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_field(&f).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(decode_field(&bad).unwrap_err().to_string().contains("not an SGRD file"));
        bytes[4] = 2;
        assert!(decode_field(&bytes).unwrap_err().to_string().contains("unsupported version"));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let f = Field::from_vec(vec![4], vec![1.0; 4]).unwrap();
        let bytes = encode_field(&f).unwrap();
        let err = decode_field(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("expected 32 bytes, got 29"), "{err}");
    }

    #[test]
    fn invalid_construction() {
        assert!(Field::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Field::new(vec![2], vec![0.0], vec![0.0], vec![1.0, 2.0]).is_err());
        assert!(Field::from_vec(vec![0, 4], vec![]).is_err());
    }

    #[test]
    fn gaussian_determinism_and_errors() {
        let a = gaussian_field(&[4, 4], &mut RngStream::new(0)).unwrap();
        let b = gaussian_field(&[4, 4], &mut RngStream::new(0)).unwrap();
        assert_eq!(a, b);
        assert!(gaussian_field(&[0, 4], &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn child_streams_ignore_parent_draws() {
        let mut parent = RngStream::new(42);
        let c1 = parent.child("shots");
        for _ in 0..17 {
            parent.uniform();
        }
        let c2 = parent.child("shots");
        let (mut c1, mut c2) = (c1, c2);
        assert_eq!(c1.next_u64(), c2.next_u64());
        assert_ne!(parent.child("latent").next_u64(), parent.child("shots").next_u64());
    }
}
