//! Seed-pinned synthetic training textures.
//!
//! Layered: `n` interfaces with random depth and dip, velocity increasing
//! downward. Blocky: a low background with axis-aligned high-valued blocks.
//! Both return fields with unit spacing, indexed `[x, z]`.

use crate::error::{Error, Result};
use crate::fieldio::{Field, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredSpec {
    /// Inclusive range of the number of layers.
    pub layers: (usize, usize),
    /// Top-layer value range.
    pub top: (f64, f64),
    /// Range of the increase from one layer to the next.
    pub step: (f64, f64),
    /// Largest interface dip, in cells of depth per cell of offset.
    pub max_dip: f64,
}

impl Default for LayeredSpec {
    fn default() -> Self {
        Self {
            layers: (2, 4),
            top: (1.5, 2.0),
            step: (0.3, 1.0),
            max_dip: 0.15,
        }
    }
}

fn draw(r: &mut RngStream, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * r.uniform()
}

pub fn layered_texture(dims: [usize; 2], spec: &LayeredSpec, stream: &mut RngStream) -> Result<Field> {
    let (lo, hi) = spec.layers;
    if lo == 0 || hi < lo {
        return Err(Error::InvalidInput(format!("bad layer range {:?}", spec.layers)));
    }
    let [nx, nz] = dims;
    let n = lo + stream.below(hi - lo + 1);
    let mut depths: Vec<f64> = (1..n).map(|_| (0.15 + 0.75 * stream.uniform()) * nz as f64).collect();
    depths.sort_by(f64::total_cmp);
    let dips: Vec<f64> = (1..n).map(|_| spec.max_dip * (2.0 * stream.uniform() - 1.0)).collect();
    let mut values = vec![draw(stream, spec.top)];
    for k in 1..n {
        let v = values[k - 1] + draw(stream, spec.step);
        values.push(v);
    }
    let xc = 0.5 * nx as f64;
    let mut data = vec![0.0; nx * nz];
    for i in 0..nx {
        for j in 0..nz {
            let layer = depths
                .iter()
                .zip(&dips)
                .filter(|(d, s)| j as f64 + 0.5 > **d + **s * (i as f64 + 0.5 - xc))
                .count();
            data[i * nz + j] = values[layer];
        }
    }
    Field::from_vec(dims.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockySpec {
    pub low: f64,
    pub high: f64,
    /// Inclusive range of the number of blocks.
    pub blocks: (usize, usize),
    /// Block side length as a fraction of the grid, inclusive range.
    pub size: (f64, f64),
}

impl Default for BlockySpec {
    fn default() -> Self {
        Self {
            low: 0.0,
            high: 1.0,
            blocks: (1, 3),
            size: (0.2, 0.5),
        }
    }
}

pub fn blocky_texture(dims: [usize; 2], spec: &BlockySpec, stream: &mut RngStream) -> Result<Field> {
    let (lo, hi) = spec.blocks;
    if hi < lo || !(0.0 < spec.size.0 && spec.size.0 <= spec.size.1 && spec.size.1 <= 1.0) {
        return Err(Error::InvalidInput(format!("bad blocky spec {spec:?}")));
    }
    let [nx, nz] = dims;
    let mut data = vec![spec.low; nx * nz];
    let n = lo + stream.below(hi - lo + 1);
    for _ in 0..n {
        let wx = ((draw(stream, spec.size) * nx as f64).round() as usize).clamp(1, nx);
        let wz = ((draw(stream, spec.size) * nz as f64).round() as usize).clamp(1, nz);
        let x0 = stream.below(nx - wx + 1);
        let z0 = stream.below(nz - wz + 1);
        for i in x0..x0 + wx {
            for j in z0..z0 + wz {
                data[i * nz + j] = spec.high;
            }
        }
    }
    Field::from_vec(dims.to_vec(), data)
}
