//! Batched f32 primitives of the operator network, registered on a private
//! registry so training gradients flow through the tape.
//!
//! Activations are `[batch, channels, nx·nz]`.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use crate::adgraph::{Arg, Cotangent, PullbackRule, Registry, Tensor};
use crate::error::{Error, Result};

pub(super) const FEATURES: &str = "fno.features";
pub(super) const POINTWISE: &str = "fno.pointwise";
pub(super) const SPECTRAL: &str = "fno.spectral";
pub(super) const GELU: &str = "fno.gelu";
pub(super) const SIGMOID: &str = "fno.sigmoid";
pub(super) const REL_L2: &str = "fno.rel_l2";

/// Grid and retained-mode set of a spectral layer.
#[derive(Clone)]
pub struct SpectralGrid {
    pub nx: usize,
    pub nz: usize,
    pub k_max: usize,
    /// Flat indices `kx·nz + kz` of the retained modes, `|kx|, |kz| < k_max`.
    pub modes: Vec<usize>,
    fwd_x: Arc<dyn Fft<f32>>,
    inv_x: Arc<dyn Fft<f32>>,
    fwd_z: Arc<dyn Fft<f32>>,
    inv_z: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SpectralGrid({}x{}, k_max {})", self.nx, self.nz, self.k_max)
    }
}

fn axis_modes(n: usize, k: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..k).collect();
    v.extend(n + 1 - k..n);
    v
}

impl SpectralGrid {
    pub fn new(nx: usize, nz: usize, k_max: usize) -> Result<Self> {
        if k_max == 0 || 2 * k_max > nx || 2 * k_max > nz {
            return Err(Error::InvalidInput(format!(
                "retained modes k_max = {k_max} exceed the Nyquist limit of a {nx}x{nz} grid"
            )));
        }
        let mut planner = FftPlanner::<f32>::new();
        let (xs, zs) = (axis_modes(nx, k_max), axis_modes(nz, k_max));
        let modes = xs.iter().flat_map(|&kx| zs.iter().map(move |&kz| kx * nz + kz)).collect();
        Ok(Self {
            nx,
            nz,
            k_max,
            modes,
            fwd_x: planner.plan_fft_forward(nx),
            inv_x: planner.plan_fft_inverse(nx),
            fwd_z: planner.plan_fft_forward(nz),
            inv_z: planner.plan_fft_inverse(nz),
        })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    fn len(&self) -> usize {
        self.nx * self.nz
    }

    /// Unnormalized 2D transform in place (`inverse` uses `e^{+i}`).
    pub fn fft2(&self, buf: &mut [Complex32], inverse: bool) {
        let (rows, cols) = if inverse { (&self.inv_z, &self.inv_x) } else { (&self.fwd_z, &self.fwd_x) };
        rows.process(buf);
        let mut t = vec![Complex32::default(); buf.len()];
        for i in 0..self.nx {
            for j in 0..self.nz {
                t[j * self.nx + i] = buf[i * self.nz + j];
            }
        }
        cols.process(&mut t);
        for i in 0..self.nx {
            for j in 0..self.nz {
                buf[i * self.nz + j] = t[j * self.nx + i];
            }
        }
    }

    /// Retained modes of the forward transform of a real plane.
    pub fn analyze(&self, x: &[f32]) -> Vec<Complex32> {
        let mut buf: Vec<Complex32> = x.iter().map(|&v| Complex32::new(v, 0.0)).collect();
        self.fft2(&mut buf, false);
        self.modes.iter().map(|&m| buf[m]).collect()
    }

    /// `Re(inverse transform)` of a spectrum supported on the retained
    /// modes, scaled by `scale`.
    pub fn synthesize(&self, coeffs: &[Complex32], scale: f32) -> Vec<f32> {
        let mut buf = vec![Complex32::default(); self.len()];
        for (&m, &c) in self.modes.iter().zip(coeffs) {
            buf[m] = c;
        }
        self.fft2(&mut buf, true);
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// Input normalization shared with the feature rule.
#[derive(Debug, Clone, Copy)]
pub(super) struct FeatureCtx {
    pub nx: usize,
    pub nz: usize,
    pub log_k_mean: f32,
    pub log_k_std: f32,
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn dense(shape: Vec<usize>, data: Vec<f32>) -> Result<Cotangent> {
    Ok(Cotangent::Dense(Tensor::new(shape, widen(&data))?))
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, p] => Ok((b, c, p)),
        ref s => Err(Error::Shape(format!("{what} expects [batch, channels, points], got {s:?}"))),
    }
}

/// `[B, nx·nz]` permeability (mD) -> `[B, 3, nx·nz]`: normalized ln K and
/// the two grid coordinates in [0, 1].
fn features_rule() -> PullbackRule {
    PullbackRule::from_fns(
        FEATURES,
        |a| {
            let k = a[0].tensor()?;
            let ctx = a[1].aux::<FeatureCtx>()?;
            let p = ctx.nx * ctx.nz;
            let b = match *k.shape() {
                [b, q] if q == p => b,
                ref s => return Err(Error::Shape(format!("permeability batch {s:?} does not match {p} cells"))),
            };
            if let Some(i) = k.data().iter().position(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidInput(format!("permeability must be positive, index {i}")));
            }
            let mut out = vec![0f32; b * 3 * p];
            for s in 0..b {
                for c in 0..p {
                    let lk = (k.data()[s * p + c] as f32).ln();
                    out[s * 3 * p + c] = (lk - ctx.log_k_mean) / ctx.log_k_std;
                    out[s * 3 * p + p + c] = (c / ctx.nz) as f32 / (ctx.nx.max(2) - 1) as f32;
                    out[s * 3 * p + 2 * p + c] = (c % ctx.nz) as f32 / (ctx.nz.max(2) - 1) as f32;
                }
            }
            Ok(vec![Tensor::new(vec![b, 3, p], widen(&out))?])
        },
        |a, _, cot| {
            let k = a[0].tensor()?;
            let ctx = a[1].aux::<FeatureCtx>()?;
            let p = ctx.nx * ctx.nz;
            let b = k.shape()[0];
            let g = cot[0].data();
            let gk: Vec<f32> = (0..b * p)
                .map(|i| {
                    let (s, c) = (i / p, i % p);
                    g[s * 3 * p + c] as f32 / (ctx.log_k_std * k.data()[i] as f32)
                })
                .collect();
            Ok(vec![dense(k.shape().to_vec(), gk)?, Cotangent::NoTangent])
        },
    )
}

/// `y[b, o, p] = bias[o] + Σ_i w[o, i]·x[b, i, p]`.
fn pointwise_rule() -> PullbackRule {
    PullbackRule::from_fns(
        POINTWISE,
        |a| {
            let x = a[0].tensor()?;
            let (b, ci, p) = dims3(x, POINTWISE)?;
            let (w, bias) = (narrow(a[1].tensor()?.data()), narrow(a[2].tensor()?.data()));
            let co = bias.len();
            if w.len() != co * ci {
                return Err(Error::Shape(format!("pointwise weight has {} entries, expected {co}x{ci}", w.len())));
            }
            let xs = narrow(x.data());
            let mut y = vec![0f32; b * co * p];
            for s in 0..b {
                for o in 0..co {
                    let dst = &mut y[(s * co + o) * p..(s * co + o + 1) * p];
                    dst.fill(bias[o]);
                    for i in 0..ci {
                        let wv = w[o * ci + i];
                        let src = &xs[(s * ci + i) * p..(s * ci + i + 1) * p];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += wv * v);
                    }
                }
            }
            Ok(vec![Tensor::new(vec![b, co, p], widen(&y))?])
        },
        |a, _, cot| {
            let x = a[0].tensor()?;
            let (b, ci, p) = dims3(x, POINTWISE)?;
            let w = narrow(a[1].tensor()?.data());
            let co = a[2].tensor()?.len();
            let xs = narrow(x.data());
            let g = narrow(cot[0].data());
            let mut gx = vec![0f32; b * ci * p];
            let mut gw = vec![0f64; co * ci];
            let mut gb = vec![0f64; co];
            for s in 0..b {
                for o in 0..co {
                    let go = &g[(s * co + o) * p..(s * co + o + 1) * p];
                    gb[o] += go.iter().map(|v| *v as f64).sum::<f64>();
                    for i in 0..ci {
                        let src = &xs[(s * ci + i) * p..(s * ci + i + 1) * p];
                        gw[o * ci + i] += go.iter().zip(src).map(|(u, v)| (u * v) as f64).sum::<f64>();
                        let wv = w[o * ci + i];
                        let dst = &mut gx[(s * ci + i) * p..(s * ci + i + 1) * p];
                        dst.iter_mut().zip(go).for_each(|(d, u)| *d += wv * u);
                    }
                }
            }
            Ok(vec![
                dense(x.shape().to_vec(), gx)?,
                Cotangent::Dense(Tensor::new(a[1].tensor()?.shape().to_vec(), gw)?),
                Cotangent::Dense(Tensor::new(a[2].tensor()?.shape().to_vec(), gb)?),
            ])
        },
    )
}

/// Spectral convolution `y_o = Re F⁻¹(Σ_i R_oi ⊙ F x_i)` on the retained
/// modes. Args `(x, r_re, r_im, Aux(SpectralGrid))`, weights `[co, ci, modes]`.
fn spectral_rule() -> PullbackRule {
    PullbackRule::from_fns(
        SPECTRAL,
        |a| {
            let (x, grid) = (a[0].tensor()?, a[3].aux::<SpectralGrid>()?);
            let (b, ci, p) = dims3(x, SPECTRAL)?;
            let (re, im) = (narrow(a[1].tensor()?.data()), narrow(a[2].tensor()?.data()));
            let nm = grid.n_modes();
            if p != grid.len() || re.len() % (ci * nm) != 0 || re.len() != im.len() {
                return Err(Error::Shape("spectral weights do not match input channels or grid".into()));
            }
            let co = re.len() / (ci * nm);
            let xs = narrow(x.data());
            let scale = 1.0 / p as f32;
            let per: Vec<Vec<f32>> = (0..b)
                .into_par_iter()
                .map(|s| {
                    let xk: Vec<Vec<Complex32>> =
                        (0..ci).map(|i| grid.analyze(&xs[(s * ci + i) * p..(s * ci + i + 1) * p])).collect();
                    let mut out = Vec::with_capacity(co * p);
                    for o in 0..co {
                        let mut yk = vec![Complex32::default(); nm];
                        for (i, xi) in xk.iter().enumerate() {
                            let base = (o * ci + i) * nm;
                            for m in 0..nm {
                                yk[m] += Complex32::new(re[base + m], im[base + m]) * xi[m];
                            }
                        }
                        out.extend(grid.synthesize(&yk, scale));
                    }
                    out
                })
                .collect();
            Ok(vec![Tensor::new(vec![b, co, p], widen(&per.concat()))?])
        },
        |a, _, cot| {
            let (x, grid) = (a[0].tensor()?, a[3].aux::<SpectralGrid>()?);
            let (b, ci, p) = dims3(x, SPECTRAL)?;
            let (re, im) = (narrow(a[1].tensor()?.data()), narrow(a[2].tensor()?.data()));
            let nm = grid.n_modes();
            let co = re.len() / (ci * nm);
            let xs = narrow(x.data());
            let g = narrow(cot[0].data());
            let scale = 1.0 / p as f32;
            let per: Vec<(Vec<f32>, Vec<Complex32>)> = (0..b)
                .into_par_iter()
                .map(|s| {
                    let xk: Vec<Vec<Complex32>> =
                        (0..ci).map(|i| grid.analyze(&xs[(s * ci + i) * p..(s * ci + i + 1) * p])).collect();
                    let gk: Vec<Vec<Complex32>> = (0..co)
                        .map(|o| {
                            grid.analyze(&g[(s * co + o) * p..(s * co + o + 1) * p])
                                .into_iter()
                                .map(|c| c * scale)
                                .collect()
                        })
                        .collect();
                    let mut gr = vec![Complex32::default(); co * ci * nm];
                    let mut gx = Vec::with_capacity(ci * p);
                    for i in 0..ci {
                        let mut xbar = vec![Complex32::default(); nm];
                        for o in 0..co {
                            let base = (o * ci + i) * nm;
                            for m in 0..nm {
                                let r = Complex32::new(re[base + m], im[base + m]);
                                xbar[m] += r.conj() * gk[o][m];
                                gr[base + m] = gk[o][m] * xk[i][m].conj();
                            }
                        }
                        gx.extend(grid.synthesize(&xbar, 1.0));
                    }
                    (gx, gr)
                })
                .collect();
            let mut gx = Vec::with_capacity(b * ci * p);
            let mut gre = vec![0f64; co * ci * nm];
            let mut gim = vec![0f64; co * ci * nm];
            for (x_s, r_s) in &per {
                gx.extend_from_slice(x_s);
                for (k, c) in r_s.iter().enumerate() {
                    gre[k] += c.re as f64;
                    gim[k] += c.im as f64;
                }
            }
            let wshape = a[1].tensor()?.shape().to_vec();
            Ok(vec![
                dense(x.shape().to_vec(), gx)?,
                Cotangent::Dense(Tensor::new(wshape.clone(), gre)?),
                Cotangent::Dense(Tensor::new(wshape, gim)?),
                Cotangent::NoTangent,
            ])
        },
    )
}

const GELU_A: f32 = 0.797_884_6;
const GELU_B: f32 = 0.044_715;

pub(super) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

fn gelu_rule() -> PullbackRule {
    PullbackRule::from_fns(
        GELU,
        |a| {
            let x = a[0].tensor()?;
            Ok(vec![x.map(|v| gelu(v as f32) as f64)])
        },
        |a, _, cot| {
            let x = a[0].tensor()?;
            let g: Vec<f32> = x
                .data()
                .iter()
                .zip(cot[0].data())
                .map(|(v, g)| *g as f32 * gelu_grad(*v as f32))
                .collect();
            Ok(vec![dense(x.shape().to_vec(), g)?])
        },
    )
}

pub(super) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `y[b, c, p] = σ(x[b, c, p] + offset[c])`; offsets are an aux `Vec<f32>`.
fn sigmoid_rule() -> PullbackRule {
    PullbackRule::from_fns(
        SIGMOID,
        |a| {
            let x = a[0].tensor()?;
            let off = a[1].aux::<Vec<f32>>()?;
            let (_, c, p) = dims3(x, SIGMOID)?;
            if off.len() != c {
                return Err(Error::Shape(format!("{} offsets for {c} channels", off.len())));
            }
            let y: Vec<f32> = x
                .data()
                .iter()
                .enumerate()
                .map(|(k, v)| sigmoid(*v as f32 + off[(k / p) % c]))
                .collect();
            Ok(vec![Tensor::new(x.shape().to_vec(), widen(&y))?])
        },
        |a, out, cot| {
            let x = a[0].tensor()?;
            let g: Vec<f32> = out[0]
                .data()
                .iter()
                .zip(cot[0].data())
                .map(|(y, g)| {
                    let y = *y as f32;
                    *g as f32 * y * (1.0 - y)
                })
                .collect();
            Ok(vec![dense(x.shape().to_vec(), g)?, Cotangent::NoTangent])
        },
    )
}

/// Mean over the batch of `‖pred_b − target_b‖ / ‖target_b‖`; targets are an
/// aux `Vec<f32>` laid out like `pred`.
fn rel_l2_rule() -> PullbackRule {
    fn parts(a: &[Arg]) -> Result<(Vec<f32>, Vec<f32>, usize, Vec<usize>)> {
        let x = a[0].tensor()?;
        let t = a[1].aux::<Vec<f32>>()?;
        if t.len() != x.len() || x.shape().is_empty() {
            return Err(Error::Shape("targets do not match predictions".into()));
        }
        let b = x.shape()[0];
        Ok((narrow(x.data()), t.clone(), b, x.shape().to_vec()))
    }
    fn norms(x: &[f32], t: &[f32], b: usize) -> Vec<(f64, f64)> {
        let n = x.len() / b;
        (0..b)
            .map(|s| {
                let (xs, ts) = (&x[s * n..(s + 1) * n], &t[s * n..(s + 1) * n]);
                let num = xs.iter().zip(ts).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>().sqrt();
                let den = ts.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
                (num, den)
            })
            .collect()
    }
    PullbackRule::from_fns(
        REL_L2,
        |a| {
            let (x, t, b, _) = parts(a)?;
            let l = norms(&x, &t, b).iter().map(|(n, d)| n / d).sum::<f64>() / b as f64;
            Ok(vec![Tensor::scalar(l)])
        },
        |a, _, cot| {
            let (x, t, b, shape) = parts(a)?;
            let c = cot[0].data()[0];
            let n = x.len() / b;
            let nd = norms(&x, &t, b);
            let g: Vec<f32> = (0..x.len())
                .map(|k| {
                    let (num, den) = nd[k / n];
                    if num == 0.0 {
                        0.0
                    } else {
                        (c * (x[k] - t[k]) as f64 / (num * den * b as f64)) as f32
                    }
                })
                .collect();
            Ok(vec![dense(shape, g)?, Cotangent::NoTangent])
        },
    )
}

/// Registry holding the network primitives.
pub(super) fn registry() -> &'static Registry {
    static REG: OnceLock<Registry> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r = Registry::new();
        for rule in [features_rule(), pointwise_rule(), spectral_rule(), gelu_rule(), sigmoid_rule(), rel_l2_rule()] {
            r.register(rule).expect("distinct names");
        }
        r
    })
}
