//! Saturation series on disk: numbered SGRD files plus `manifest.txt`.
//!
//! The manifest holds one line per snapshot, `index time_years file`, after a
//! `#` comment header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fieldio::{read_field, write_field};
use crate::flow::SaturationSeries;

const MANIFEST: &str = "manifest.txt";

pub fn write_series(dir: &Path, series: &SaturationSeries) -> Result<()> {
    if series.times.len() != series.snapshots.len() {
        return Err(Error::Shape(format!(
            "{} times for {} snapshots",
            series.times.len(),
            series.snapshots.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# index time_years file\n");
    for (i, (t, snap)) in series.times.iter().zip(&series.snapshots).enumerate() {
        let name = format!("snapshot_{i:03}.sgrd");
        write_field(snap, &dir.join(&name))?;
        manifest.push_str(&format!("{i} {t} {name}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn read_series(dir: &Path) -> Result<SaturationSeries> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut times = Vec::new();
    let mut snapshots = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("{}:{}: expected 'index time file'", path.display(), ln + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let t: f64 = parts[1].parse().map_err(|_| bad())?;
        times.push(t);
        snapshots.push(read_field(&dir.join(parts[2]))?);
    }
    Ok(SaturationSeries { times, snapshots })
}
