//! Leapfrog finite-difference kernels on the sponge-padded grid.
//!
//! The discrete forward recursion (`c = dt²/m`, `g` the sponge taper) is
//!
//! ```text
//! u[n+1] = g ⊙ (2 u[n] + c ⊙ (L u[n] + s[n])) − g² ⊙ u[n−1],   u[0] = u[−1] = 0
//! d[n]   = P_r u[n]
//! ```
//!
//! Born modelling is its exact tangent in `m`, and the adjoint sweep below is
//! the exact transpose of both, so dot tests hold to rounding.

use crate::error::{Error, Result};
use crate::wave::{AcquisitionGeometry, SlownessModel, WaveConfig};

/// Central second-derivative weights `[c0, c1, ..]` for a given even order.
pub(crate) fn stencil(order: usize) -> Result<Vec<f64>> {
    Ok(match order {
        2 => vec![-2.0, 1.0],
        4 => vec![-5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0],
        6 => vec![-49.0 / 18.0, 3.0 / 2.0, -3.0 / 20.0, 1.0 / 90.0],
        8 => vec![-205.0 / 72.0, 8.0 / 5.0, -1.0 / 5.0, 8.0 / 315.0, -1.0 / 560.0],
        _ => return Err(Error::InvalidInput(format!("unsupported space order {order}"))),
    })
}

/// Largest stable time step for squared slowness `m_min`, with a 0.9 safety factor.
///
/// For the 2nd-order stencil this is `0.9 · h · √m_min / √2`.
pub fn max_stable_dt(order: usize, h: f64, m_min: f64) -> Result<f64> {
    let w = stencil(order)?;
    // symbol of −D² at the Nyquist wavenumber
    let radius: f64 = w[0].abs() + 2.0 * w[1..].iter().map(|c| c.abs()).sum::<f64>();
    Ok(0.9 * 2.0 * h * m_min.sqrt() / (2.0 * radius).sqrt())
}

/// Bilinear interpolation weights of one off-grid point on the padded grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PointWeights {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

impl PointWeights {
    #[inline]
    pub fn gather(&self, u: &[f64]) -> f64 {
        (0..4).map(|k| self.w[k] * u[self.idx[k]]).sum()
    }

    #[inline]
    pub fn scatter(&self, v: f64, out: &mut [f64]) {
        for k in 0..4 {
            out[self.idx[k]] += self.w[k] * v;
        }
    }
}

/// Precomputed state for one model on one time axis.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub(crate) nx: usize,
    pub(crate) nz: usize,
    pub(crate) pad: usize,
    pub(crate) nxp: usize,
    pub(crate) nzp: usize,
    pub(crate) nt: usize,
    pub(crate) dt: f64,
    h: f64,
    origin: [f64; 2],
    weights: Vec<f64>,
    c: Vec<f64>,
    inv_m: Vec<f64>,
    g: Vec<f64>,
    g2: Vec<f64>,
    cg: Vec<f64>,
    store_stride: usize,
}

/// Per-step source term `(L u + s)/m` of the background field, kept for the
/// imaging condition.
pub(crate) struct Wavefield {
    stride: usize,
    steps: Vec<Vec<f64>>,
}

impl Propagator {
    pub fn new(model: &SlownessModel, dt: f64, nt: usize, cfg: &WaveConfig) -> Result<Self> {
        let f = &model.field;
        let (dims, sp) = (f.dims(), f.spacing());
        if dims.len() != 2 {
            return Err(Error::Shape(format!("wave models are 2D, got dims {dims:?}")));
        }
        if (sp[0] - sp[1]).abs() > 1e-12 * sp[0] {
            return Err(Error::InvalidInput(format!("wave grid must be square, got spacing {sp:?}")));
        }
        if cfg.store_stride == 0 {
            return Err(Error::InvalidInput("store_stride must be at least 1".into()));
        }
        let h = sp[0];
        let weights: Vec<f64> = stencil(cfg.space_order)?.into_iter().map(|c| c / (h * h)).collect();
        let dt_max = max_stable_dt(cfg.space_order, h, f.min())?;
        if dt > dt_max {
            return Err(Error::InvalidInput(format!(
                "CFL violated: dt = {dt:.6e} s exceeds the maximal stable dt = {dt_max:.6e} s"
            )));
        }
        let (nx, nz, pad) = (dims[0], dims[1], model.sponge_width);
        let (nxp, nzp) = (nx + 2 * pad, nz + 2 * pad);
        let mut c = vec![0.0; nxp * nzp];
        let mut inv_m = vec![0.0; nxp * nzp];
        let mut g = vec![0.0; nxp * nzp];
        let taper = |i: usize, n: usize| -> f64 {
            let d = if i < pad {
                pad - i
            } else if i >= n - pad {
                i + 1 + pad - n
            } else {
                0
            };
            0.95f64.powf(cfg.sponge_strength * (d * d) as f64)
        };
        for i in 0..nxp {
            let ix = i.saturating_sub(pad).min(nx - 1);
            for j in 0..nzp {
                let iz = j.saturating_sub(pad).min(nz - 1);
                let m = f.at2(ix, iz);
                let k = i * nzp + j;
                c[k] = dt * dt / m;
                inv_m[k] = 1.0 / m;
                g[k] = taper(i, nxp) * taper(j, nzp);
            }
        }
        let g2 = g.iter().map(|v| v * v).collect();
        let cg = c.iter().zip(&g).map(|(a, b)| a * b).collect();
        Ok(Self {
            nx,
            nz,
            pad,
            nxp,
            nzp,
            nt,
            dt,
            h,
            origin: [f.origin()[0], f.origin()[1]],
            weights,
            c,
            inv_m,
            g,
            g2,
            cg,
            store_stride: cfg.store_stride,
        })
    }

    pub fn for_geometry(model: &SlownessModel, geom: &AcquisitionGeometry, cfg: &WaveConfig) -> Result<Self> {
        Self::new(model, geom.dt, geom.nt(), cfg)
    }

    pub fn padded_shape(&self) -> [usize; 2] {
        [self.nxp, self.nzp]
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    /// Interpolation weights for a physical position `(x, z)` in meters.
    pub(crate) fn point(&self, pos: [f64; 2]) -> Result<PointWeights> {
        let gx = (pos[0] - self.origin[0]) / self.h;
        let gz = (pos[1] - self.origin[1]) / self.h;
        let eps = 1e-9;
        if !(gx >= -eps && gz >= -eps && gx <= (self.nx - 1) as f64 + eps && gz <= (self.nz - 1) as f64 + eps) {
            return Err(Error::InvalidInput(format!(
                "position ({}, {}) lies outside the {}x{} model",
                pos[0], pos[1], self.nx, self.nz
            )));
        }
        let gx = gx.clamp(0.0, (self.nx - 1) as f64) + self.pad as f64;
        let gz = gz.clamp(0.0, (self.nz - 1) as f64) + self.pad as f64;
        let i0 = (gx.floor() as usize).min(self.nxp - 2);
        let j0 = (gz.floor() as usize).min(self.nzp - 2);
        let (fx, fz) = (gx - i0 as f64, gz - j0 as f64);
        let k = |i: usize, j: usize| i * self.nzp + j;
        Ok(PointWeights {
            idx: [k(i0, j0), k(i0 + 1, j0), k(i0, j0 + 1), k(i0 + 1, j0 + 1)],
            w: [(1.0 - fx) * (1.0 - fz), fx * (1.0 - fz), (1.0 - fx) * fz, fx * fz],
        })
    }

    pub(crate) fn points(&self, positions: &[[f64; 2]]) -> Result<Vec<PointWeights>> {
        positions.iter().map(|&p| self.point(p)).collect()
    }

    /// `out = L u` with zero values outside the padded grid. `L` is symmetric.
    pub fn laplacian(&self, u: &[f64], out: &mut [f64]) {
        let (nx, nz) = (self.nxp, self.nzp);
        let w = &self.weights;
        let r = w.len() - 1;
        let c0 = 2.0 * w[0];
        for i in 0..nx {
            let interior_i = i >= r && i + r < nx;
            for j in 0..nz {
                let k = i * nz + j;
                let mut acc = c0 * u[k];
                if interior_i && j >= r && j + r < nz {
                    for (o, &wo) in w.iter().enumerate().skip(1) {
                        acc += wo * (u[k - o * nz] + u[k + o * nz] + u[k - o] + u[k + o]);
                    }
                } else {
                    for (o, &wo) in w.iter().enumerate().skip(1) {
                        if i >= o {
                            acc += wo * u[k - o * nz];
                        }
                        if i + o < nx {
                            acc += wo * u[k + o * nz];
                        }
                        if j >= o {
                            acc += wo * u[k - o];
                        }
                        if j + o < nz {
                            acc += wo * u[k + o];
                        }
                    }
                }
                out[k] = acc;
            }
        }
    }

    #[inline]
    fn step(&self, lap: &[f64], cur: &[f64], prev: &mut [f64]) {
        // prev <- u[n+1]
        for k in 0..prev.len() {
            prev[k] = self.g[k] * (2.0 * cur[k] + self.c[k] * lap[k]) - self.g2[k] * prev[k];
        }
    }

    fn check_source(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.nt {
            return Err(Error::Shape(format!("source has {} samples, time axis has {}", q.len(), self.nt)));
        }
        Ok(())
    }

    /// Forward modelling for one point source. Returns receiver data
    /// (receivers-major) and, if requested, the stored imaging terms.
    pub(crate) fn forward(
        &self,
        src: &PointWeights,
        q: &[f64],
        recs: &[PointWeights],
        store: bool,
    ) -> Result<(Vec<f64>, Option<Wavefield>)> {
        self.check_source(q)?;
        let (n, nt) = (self.nxp * self.nzp, self.nt);
        let mut prev = vec![0.0; n];
        let mut cur = vec![0.0; n];
        let mut lap = vec![0.0; n];
        let mut data = vec![0.0; recs.len() * nt];
        let mut steps = Vec::new();
        for t in 0..nt {
            for (r, p) in recs.iter().enumerate() {
                data[r * nt + t] = p.gather(&cur);
            }
            if t + 1 == nt {
                break;
            }
            self.laplacian(&cur, &mut lap);
            src.scatter(q[t], &mut lap);
            if store && t % self.store_stride == 0 {
                steps.push(lap.iter().zip(&self.inv_m).map(|(a, b)| a * b).collect());
            }
            self.step(&lap, &cur, &mut prev);
            std::mem::swap(&mut prev, &mut cur);
        }
        let wf = store.then(|| Wavefield {
            stride: self.store_stride,
            steps,
        });
        Ok((data, wf))
    }

    /// All wavefield snapshots `u[0..nt]` for one source (diagnostics and tests).
    pub fn snapshots(&self, src_pos: [f64; 2], q: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_source(q)?;
        let src = self.point(src_pos)?;
        let n = self.nxp * self.nzp;
        let mut prev = vec![0.0; n];
        let mut cur = vec![0.0; n];
        let mut lap = vec![0.0; n];
        let mut out = Vec::with_capacity(self.nt);
        for t in 0..self.nt {
            out.push(cur.clone());
            if t + 1 == self.nt {
                break;
            }
            self.laplacian(&cur, &mut lap);
            src.scatter(q[t], &mut lap);
            self.step(&lap, &cur, &mut prev);
            std::mem::swap(&mut prev, &mut cur);
        }
        Ok(out)
    }

    /// Linearized data for a padded perturbation `dm`.
    pub(crate) fn born(&self, src: &PointWeights, q: &[f64], recs: &[PointWeights], dm: &[f64]) -> Result<Vec<f64>> {
        self.check_source(q)?;
        let (n, nt) = (self.nxp * self.nzp, self.nt);
        let (mut prev, mut cur, mut lap) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let (mut dprev, mut dcur, mut dlap) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut data = vec![0.0; recs.len() * nt];
        for t in 0..nt {
            for (r, p) in recs.iter().enumerate() {
                data[r * nt + t] = p.gather(&dcur);
            }
            if t + 1 == nt {
                break;
            }
            self.laplacian(&cur, &mut lap);
            src.scatter(q[t], &mut lap);
            self.laplacian(&dcur, &mut dlap);
            for k in 0..n {
                dlap[k] -= dm[k] * lap[k] * self.inv_m[k];
            }
            self.step(&lap, &cur, &mut prev);
            self.step(&dlap, &dcur, &mut dprev);
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut dprev, &mut dcur);
        }
        Ok(data)
    }

    /// Adjoint sweep driven by receiver residuals.
    ///
    /// Returns the padded model gradient (when a wavefield is supplied) and
    /// the source-time cotangent at `src`.
    pub(crate) fn adjoint(
        &self,
        residual: &[f64],
        recs: &[PointWeights],
        src: &PointWeights,
        wavefield: Option<&Wavefield>,
    ) -> Result<(Option<Vec<f64>>, Vec<f64>)> {
        let (n, nt) = (self.nxp * self.nzp, self.nt);
        if residual.len() != recs.len() * nt {
            return Err(Error::Shape(format!(
                "residual has {} samples, expected {} receivers x {} steps",
                residual.len(),
                recs.len(),
                nt
            )));
        }
        let mut next = vec![0.0; n]; // mu[t+1]
        let mut next2 = vec![0.0; n]; // mu[t+2]
        let mut w = vec![0.0; n];
        let mut lw = vec![0.0; n];
        let mut grad = wavefield.map(|_| vec![0.0; n]);
        let mut qbar = vec![0.0; nt];
        for t in (0..nt).rev() {
            if t + 1 < nt {
                for k in 0..n {
                    w[k] = self.cg[k] * next[k];
                }
                qbar[t] = src.gather(&w);
                if let (Some(g), Some(wf)) = (grad.as_mut(), wavefield) {
                    if t % wf.stride == 0 {
                        let a = &wf.steps[t / wf.stride];
                        let s = wf.stride as f64;
                        for k in 0..n {
                            g[k] -= s * w[k] * a[k];
                        }
                    }
                }
                self.laplacian(&w, &mut lw);
            } else {
                lw.iter_mut().for_each(|v| *v = 0.0);
            }
            // mu[t] = P_r' r[t] + 2 g mu[t+1] + L(c g mu[t+1]) − g² mu[t+2], written into next2
            for k in 0..n {
                next2[k] = 2.0 * self.g[k] * next[k] + lw[k] - self.g2[k] * next2[k];
            }
            for (r, p) in recs.iter().enumerate() {
                p.scatter(residual[r * nt + t], &mut next2);
            }
            std::mem::swap(&mut next, &mut next2);
        }
        Ok((grad, qbar))
    }

    /// Edge-extension `E`: physical `[nx, nz]` values onto the padded grid.
    pub fn extend(&self, phys: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nxp * self.nzp];
        for i in 0..self.nxp {
            let ix = i.saturating_sub(self.pad).min(self.nx - 1);
            for j in 0..self.nzp {
                let iz = j.saturating_sub(self.pad).min(self.nz - 1);
                out[i * self.nzp + j] = phys[ix * self.nz + iz];
            }
        }
        out
    }

    /// Transpose of [`Propagator::extend`]: sums sponge values into the edge cells.
    pub fn restrict(&self, padded: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nx * self.nz];
        for i in 0..self.nxp {
            let ix = i.saturating_sub(self.pad).min(self.nx - 1);
            for j in 0..self.nzp {
                let iz = j.saturating_sub(self.pad).min(self.nz - 1);
                out[ix * self.nz + iz] += padded[i * self.nzp + j];
            }
        }
        out
    }

    /// Discrete energy between steps `n` and `n+1` of an undamped leapfrog field.
    pub fn energy(&self, u_n: &[f64], u_np1: &[f64]) -> f64 {
        let mut lap = vec![0.0; u_n.len()];
        self.laplacian(u_n, &mut lap);
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for k in 0..u_n.len() {
            let v = (u_np1[k] - u_n[k]) / self.dt;
            kinetic += v * v / self.inv_m[k];
            potential -= u_np1[k] * lap[k];
        }
        0.5 * (kinetic + potential)
    }
}
