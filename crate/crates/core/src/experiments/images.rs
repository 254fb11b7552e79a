//! Portable grayscale images and CSV dumps of 2D fields.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fieldio::Field;

/// Binary PGM, min-max scaled to 0..=255, depth running down the image.
pub fn write_pgm(path: &Path, f: &Field) -> Result<()> {
    if f.dims().len() != 2 {
        return Err(Error::Shape(format!("images need a 2D field, got {:?}", f.dims())));
    }
    let (nx, nz) = (f.dims()[0], f.dims()[1]);
    let (lo, hi) = (f.min(), f.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut buf = format!("P5\n{nx} {nz}\n255\n").into_bytes();
    for j in 0..nz {
        for i in 0..nx {
            buf.push((255.0 * (f.at2(i, j) - lo) / span).round().clamp(0.0, 255.0) as u8);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// `x_index,z_index,value` rows.
pub fn write_field_csv(path: &Path, f: &Field) -> Result<()> {
    let (nx, nz) = (f.dims()[0], f.dims()[1]);
    let mut s = String::from("x_index,z_index,value\n");
    for i in 0..nx {
        for j in 0..nz {
            writeln!(s, "{i},{j},{}", f.at2(i, j)).expect("string write");
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
