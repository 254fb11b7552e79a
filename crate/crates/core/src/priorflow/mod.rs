//! Invertible affine-coupling normalizing flow used as a learned prior.
//!
//! The network runs in f32. The normalizing direction maps a model `m` to a
//! latent `z`:
//!
//! ```text
//! per scale: squeeze, then depth × (actnorm, checkerboard coupling, reverse channels)
//! ```
//!
//! followed by undoing the squeezes so `z` has the model's shape. The
//! generative direction [`nf_forward`] is the exact layer-by-layer inverse.
//! Couplings start at the identity, so a fresh network is a fixed
//! permutation with zero log-determinant.

mod io;
mod layers;
mod textures;

#[cfg(test)]
mod tests;

use std::sync::Arc;

use rayon::prelude::*;

use crate::adgraph::{Arg, Cotangent, Primitive, Pullback, PullbackRule, Registry, Tensor};
use crate::error::{Error, Result};
use crate::fieldio::{Field, RngStream};
use crate::optim::AdamState;

pub use io::{decode_params, encode_params, read_params, write_params};
use layers::{
    checkerboard, conv3, conv3_back, reverse_channels, squash, squash_grad, squeeze, unsqueeze, CondCache, Shape,
};
pub use textures::{blocky_texture, layered_texture, BlockySpec, LayeredSpec};

pub const NF_RULE: &str = "nf_forward";

/// Latent variable; same shape as the model.
pub type LatentVector = Field;

/// One actnorm + coupling block. Weights are `[out, in, 3, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLayer {
    pub log_scale: Vec<f32>,
    pub bias: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl FlowLayer {
    fn zeros(c: usize, hidden: usize) -> Self {
        Self {
            log_scale: vec![0.0; c],
            bias: vec![0.0; c],
            w1: vec![0.0; hidden * c * 9],
            b1: vec![0.0; hidden],
            w2: vec![0.0; 2 * c * hidden * 9],
            b2: vec![0.0; 2 * c],
        }
    }

    fn blocks(&self) -> [&Vec<f32>; 6] {
        [&self.log_scale, &self.bias, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f32>; 6] {
        [
            &mut self.log_scale,
            &mut self.bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Architecture plus weights of the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingFlowParams {
    dims: [usize; 2],
    nc: usize,
    hidden: usize,
    depth: usize,
    nscales: usize,
    /// Per-pixel entry affine `y = x·exp(s) + b` in model layout, so depth
    /// trends need not be learned by the translation-equivariant couplings.
    pub pixel_log_scale: Vec<f32>,
    pub pixel_bias: Vec<f32>,
    pub layers: Vec<FlowLayer>,
}

impl CouplingFlowParams {
    /// Identity-initialized flow for `dims` models. Only `nc = 1` (scalar
    /// 2D models) is supported; `dims` must be divisible by `2^nscales`.
    pub fn new(
        dims: [usize; 2],
        nc: usize,
        hidden: usize,
        depth: usize,
        nscales: usize,
        stream: &mut RngStream,
    ) -> Result<Self> {
        let mut p = Self::zeros(dims, nc, hidden, depth, nscales)?;
        let mut r = stream.child("nf-init");
        for l in 0..p.layers.len() {
            let c = p.layer_shape(l).c;
            let std = (1.0 / (9.0 * c as f64)).sqrt();
            for w in p.layers[l].w1.iter_mut() {
                *w = (std * r.normal()) as f32;
            }
        }
        Ok(p)
    }

    fn zeros(dims: [usize; 2], nc: usize, hidden: usize, depth: usize, nscales: usize) -> Result<Self> {
        if nc != 1 {
            return Err(Error::InvalidInput(format!("only single-channel models are supported, got nc = {nc}")));
        }
        if hidden == 0 || depth == 0 || nscales == 0 {
            return Err(Error::InvalidInput("hidden width, depth and nscales must be positive".into()));
        }
        let f = 1usize << nscales;
        if dims[0] == 0 || dims[1] == 0 || dims[0] % f != 0 || dims[1] % f != 0 {
            return Err(Error::Shape(format!("model dims {dims:?} are not divisible by 2^{nscales}")));
        }
        let mut p = Self {
            dims,
            nc,
            hidden,
            depth,
            nscales,
            pixel_log_scale: vec![0.0; dims[0] * dims[1]],
            pixel_bias: vec![0.0; dims[0] * dims[1]],
            layers: Vec::new(),
        };
        p.layers = (0..nscales * depth).map(|l| FlowLayer::zeros(p.layer_shape(l).c, hidden)).collect();
        Ok(p)
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    /// `(nc, hidden, depth, nscales)`.
    pub fn architecture(&self) -> (usize, usize, usize, usize) {
        (self.nc, self.hidden, self.depth, self.nscales)
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn blocks(&self) -> Vec<&Vec<f32>> {
        let mut b = vec![&self.pixel_log_scale, &self.pixel_bias];
        b.extend(self.layers.iter().flat_map(|l| l.blocks()));
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut b = vec![&mut self.pixel_log_scale, &mut self.pixel_bias];
        b.extend(self.layers.iter_mut().flat_map(|l| l.blocks_mut()));
        b
    }

    /// All parameters in declaration order: pixel log-scale, pixel bias, then
    /// per layer actnorm log-scale, actnorm bias, w1, b1, w2, b2.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.param_count());
        for b in self.blocks() {
            v.extend_from_slice(b);
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.param_count(), v.len())));
        }
        let mut k = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&v[k..k + n]);
            k += n;
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for b in g.blocks_mut() {
            b.fill(0.0);
        }
        g
    }

    /// Perturb every parameter with `N(0, scale²)` noise, for tests and
    /// diagnostics that need a non-trivial network.
    pub fn randomized(&self, scale: f32, stream: &mut RngStream) -> Self {
        let mut p = self.clone();
        let v: Vec<f32> = self.to_flat().iter().map(|w| w + scale * stream.normal() as f32).collect();
        p.set_flat(&v).expect("same length");
        p
    }

    fn layer_shape(&self, l: usize) -> Shape {
        let s = l / self.depth + 1;
        Shape {
            c: self.nc << (2 * s),
            h: self.dims[0] >> s,
            w: self.dims[1] >> s,
        }
    }

    fn model_shape(&self) -> Shape {
        Shape {
            c: self.nc,
            h: self.dims[0],
            w: self.dims[1],
        }
    }

    fn ops(&self) -> Vec<Op> {
        let mut ops = vec![Op::PixelNorm];
        let mut s = self.model_shape();
        for sc in 0..self.nscales {
            ops.push(Op::Squeeze(s));
            s = s.squeezed();
            for d in 0..self.depth {
                let l = sc * self.depth + d;
                ops.push(Op::ActNorm(l));
                ops.push(Op::Coupling(l, d % 2));
                ops.push(Op::Reverse(s));
            }
        }
        ops
    }

    fn check_field(&self, f: &Field) -> Result<()> {
        if f.dims() != self.dims {
            return Err(Error::Shape(format!(
                "field dims {:?} do not match the flow input {:?}",
                f.dims(),
                self.dims
            )));
        }
        if let Some(i) = f.first_non_finite() {
            return Err(Error::NonFinite(i));
        }
        Ok(())
    }

    /// Squeezed latent layout -> model layout, and back.
    fn to_model_layout(&self, mut x: Vec<f32>) -> Vec<f32> {
        for s in (0..self.nscales).rev() {
            x = unsqueeze(&x, self.scale_input(s));
        }
        x
    }

    fn to_latent_layout(&self, mut x: Vec<f32>) -> Vec<f32> {
        for s in 0..self.nscales {
            x = squeeze(&x, self.scale_input(s));
        }
        x
    }

    fn scale_input(&self, s: usize) -> Shape {
        Shape {
            c: self.nc << (2 * s),
            h: self.dims[0] >> s,
            w: self.dims[1] >> s,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    PixelNorm,
    Squeeze(Shape),
    ActNorm(usize),
    Coupling(usize, usize),
    Reverse(Shape),
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl CouplingFlowParams {
    fn conditioner(&self, l: usize, x: &[f32], parity: usize) -> (Vec<f32>, CondCache) {
        let s = self.layer_shape(l);
        let lay = &self.layers[l];
        let mask = checkerboard(s, parity);
        let xm: Vec<f32> = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let hs = Shape { c: self.hidden, ..s };
        let hidden: Vec<f32> = conv3(&xm, s, &lay.w1, &lay.b1, self.hidden)
            .into_iter()
            .map(f32::tanh)
            .collect();
        let mut o = conv3(&hidden, hs, &lay.w2, &lay.b2, 2 * s.c);
        let shift = o.split_off(s.len());
        (xm, CondCache { hidden, raw: o, shift })
    }

    /// Backprop through the conditioner given cotangents of the raw scale and
    /// the shift; returns the cotangent of the full coupling input (masked).
    fn conditioner_back(
        &self,
        l: usize,
        parity: usize,
        xm: &[f32],
        cache: &CondCache,
        graw: &[f32],
        gshift: &[f32],
        grads: Option<&mut FlowLayer>,
    ) -> Vec<f32> {
        let s = self.layer_shape(l);
        let lay = &self.layers[l];
        let hs = Shape { c: self.hidden, ..s };
        let mut go = graw.to_vec();
        go.extend_from_slice(gshift);
        let (g2, g1) = match grads {
            Some(FlowLayer { w1, b1, w2, b2, .. }) => (
                Some((w2.as_mut_slice(), b2.as_mut_slice())),
                Some((w1.as_mut_slice(), b1.as_mut_slice())),
            ),
            None => (None, None),
        };
        let gh = conv3_back(&cache.hidden, hs, &lay.w2, &go, 2 * s.c, g2);
        let gpre: Vec<f32> = gh.iter().zip(&cache.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();
        let gx = conv3_back(xm, s, &lay.w1, &gpre, self.hidden, g1);
        let mask = checkerboard(s, parity);
        gx.iter().zip(&mask).map(|(g, m)| g * m).collect()
    }

    /// Normalizing step `x -> y`; returns the log-determinant contribution.
    fn step_normalize(&self, op: Op, x: &[f32]) -> (Vec<f32>, f64) {
        match op {
            Op::PixelNorm => {
                let y = x
                    .iter()
                    .zip(self.pixel_log_scale.iter().zip(&self.pixel_bias))
                    .map(|(v, (s, b))| v * s.exp() + b)
                    .collect();
                (y, self.pixel_log_scale.iter().map(|v| *v as f64).sum())
            }
            Op::Squeeze(s) => (squeeze(x, s), 0.0),
            Op::Reverse(s) => (reverse_channels(x, s), 0.0),
            Op::ActNorm(l) => {
                let s = self.layer_shape(l);
                let lay = &self.layers[l];
                let p = s.plane();
                let y = x
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * lay.log_scale[k / p].exp() + lay.bias[k / p])
                    .collect();
                let ld = p as f64 * lay.log_scale.iter().map(|v| *v as f64).sum::<f64>();
                (y, ld)
            }
            Op::Coupling(l, parity) => {
                let s = self.layer_shape(l);
                let (_, c) = self.conditioner(l, x, parity);
                let mask = checkerboard(s, parity);
                let mut ld = 0f64;
                let y = (0..x.len())
                    .map(|k| {
                        if mask[k] == 1.0 {
                            x[k]
                        } else {
                            let sc = squash(c.raw[k]);
                            ld += sc as f64;
                            x[k] * sc.exp() + c.shift[k]
                        }
                    })
                    .collect();
                (y, ld)
            }
        }
    }

    /// Generative step `y -> x` (inverse of [`Self::step_normalize`]).
    fn step_generate(&self, op: Op, y: &[f32]) -> (Vec<f32>, f64) {
        match op {
            Op::PixelNorm => {
                let x = y
                    .iter()
                    .zip(self.pixel_log_scale.iter().zip(&self.pixel_bias))
                    .map(|(v, (s, b))| (v - b) * (-s).exp())
                    .collect();
                (x, -self.pixel_log_scale.iter().map(|v| *v as f64).sum::<f64>())
            }
            Op::Squeeze(s) => (unsqueeze(y, s), 0.0),
            Op::Reverse(s) => (reverse_channels(y, s), 0.0),
            Op::ActNorm(l) => {
                let s = self.layer_shape(l);
                let lay = &self.layers[l];
                let p = s.plane();
                let x = y
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (v - lay.bias[k / p]) * (-lay.log_scale[k / p]).exp())
                    .collect();
                let ld = -(p as f64) * lay.log_scale.iter().map(|v| *v as f64).sum::<f64>();
                (x, ld)
            }
            Op::Coupling(l, parity) => {
                let s = self.layer_shape(l);
                let (_, c) = self.conditioner(l, y, parity);
                let mask = checkerboard(s, parity);
                let mut ld = 0f64;
                let x = (0..y.len())
                    .map(|k| {
                        if mask[k] == 1.0 {
                            y[k]
                        } else {
                            let sc = squash(c.raw[k]);
                            ld -= sc as f64;
                            (y[k] - c.shift[k]) * (-sc).exp()
                        }
                    })
                    .collect();
                (x, ld)
            }
        }
    }

    /// VJP of a normalizing step at input `x`; accumulates parameter grads.
    fn step_normalize_back(&self, op: Op, x: &[f32], gy: &[f32], gld: f32, grads: &mut Self) -> Vec<f32> {
        match op {
            Op::PixelNorm => {
                let mut gx = vec![0f32; x.len()];
                for k in 0..x.len() {
                    let e = self.pixel_log_scale[k].exp();
                    gx[k] = gy[k] * e;
                    grads.pixel_bias[k] += gy[k];
                    grads.pixel_log_scale[k] += gy[k] * x[k] * e + gld;
                }
                gx
            }
            Op::Squeeze(s) => unsqueeze(gy, s),
            Op::Reverse(s) => reverse_channels(gy, s),
            Op::ActNorm(l) => {
                let s = self.layer_shape(l);
                let lay = &self.layers[l];
                let p = s.plane();
                let g = &mut grads.layers[l];
                let mut gx = vec![0f32; x.len()];
                for c in 0..s.c {
                    let e = lay.log_scale[c].exp();
                    let (mut gb, mut gs) = (0f64, 0f64);
                    for k in c * p..(c + 1) * p {
                        gx[k] = gy[k] * e;
                        gb += gy[k] as f64;
                        gs += (gy[k] * x[k] * e) as f64;
                    }
                    g.bias[c] += gb as f32;
                    g.log_scale[c] += gs as f32 + gld * p as f32;
                }
                gx
            }
            Op::Coupling(l, parity) => {
                let s = self.layer_shape(l);
                let (xm, c) = self.conditioner(l, x, parity);
                let mask = checkerboard(s, parity);
                let n = x.len();
                let mut gx = vec![0f32; n];
                let mut graw = vec![0f32; n];
                let mut gshift = vec![0f32; n];
                for k in 0..n {
                    if mask[k] == 1.0 {
                        gx[k] = gy[k];
                    } else {
                        let sc = squash(c.raw[k]);
                        let e = sc.exp();
                        gx[k] = gy[k] * e;
                        gshift[k] = gy[k];
                        graw[k] = (gy[k] * x[k] * e + gld) * squash_grad(c.raw[k]);
                    }
                }
                let gc = self.conditioner_back(l, parity, &xm, &c, &graw, &gshift, Some(&mut grads.layers[l]));
                gx.iter_mut().zip(gc).for_each(|(a, b)| *a += b);
                gx
            }
        }
    }

    /// VJP of a generative step at input `y` (w.r.t. `y` only).
    fn step_generate_back(&self, op: Op, y: &[f32], gx: &[f32]) -> Vec<f32> {
        match op {
            Op::PixelNorm => gx.iter().zip(&self.pixel_log_scale).map(|(g, s)| g * (-s).exp()).collect(),
            Op::Squeeze(s) => squeeze(gx, s),
            Op::Reverse(s) => reverse_channels(gx, s),
            Op::ActNorm(l) => {
                let p = self.layer_shape(l).plane();
                let lay = &self.layers[l];
                gx.iter()
                    .enumerate()
                    .map(|(k, g)| g * (-lay.log_scale[k / p]).exp())
                    .collect()
            }
            Op::Coupling(l, parity) => {
                let s = self.layer_shape(l);
                let (ym, c) = self.conditioner(l, y, parity);
                let mask = checkerboard(s, parity);
                let n = y.len();
                let mut gy = vec![0f32; n];
                let mut graw = vec![0f32; n];
                let mut gshift = vec![0f32; n];
                for k in 0..n {
                    if mask[k] == 1.0 {
                        gy[k] = gx[k];
                    } else {
                        let sc = squash(c.raw[k]);
                        let e = (-sc).exp();
                        let x = (y[k] - c.shift[k]) * e;
                        gy[k] = gx[k] * e;
                        gshift[k] = -gx[k] * e;
                        graw[k] = -gx[k] * x * squash_grad(c.raw[k]);
                    }
                }
                let gc = self.conditioner_back(l, parity, &ym, &c, &graw, &gshift, None);
                gy.iter_mut().zip(gc).for_each(|(a, b)| *a += b);
                gy
            }
        }
    }

    /// Normalizing pass on f32 data in model layout; returns the latent in
    /// squeezed layout, the log-determinant and optionally every step input.
    fn normalize(&self, m: Vec<f32>, store: bool) -> (Vec<f32>, f64, Vec<Vec<f32>>) {
        let mut x = m;
        let mut ld = 0.0;
        let mut inputs = Vec::new();
        for op in self.ops() {
            let (y, d) = self.step_normalize(op, &x);
            ld += d;
            if store {
                inputs.push(std::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        (x, ld, inputs)
    }

    /// Generative pass from a squeezed-layout latent; optionally stores
    /// every step input (in generative order).
    fn generate(&self, z: Vec<f32>, store: bool) -> (Vec<f32>, f64, Vec<Vec<f32>>) {
        let mut y = z;
        let mut ld = 0.0;
        let mut inputs = Vec::new();
        for op in self.ops().into_iter().rev() {
            let (x, d) = self.step_generate(op, &y);
            ld += d;
            if store {
                inputs.push(std::mem::replace(&mut y, x));
            } else {
                y = x;
            }
        }
        (y, ld, inputs)
    }

    /// Per-sample NLL `½‖z‖² − logdet + (n/2)·ln 2π` and its parameter gradient.
    fn nll_and_grad(&self, m: &[f32]) -> (f64, Vec<f32>) {
        let (z, ld, inputs) = self.normalize(m.to_vec(), true);
        let n = z.len() as f64;
        let nll = 0.5 * z.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() - ld
            + 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        let mut grads = self.zeros_like();
        let mut g = z;
        for (op, x) in self.ops().into_iter().zip(&inputs).rev() {
            g = self.step_normalize_back(op, x, &g, -1.0, &mut grads);
        }
        (nll, grads.to_flat())
    }

    /// Data-dependent initialization: the pixel affine and then each actnorm
    /// layer, in order, are set so their outputs over `data` have zero mean
    /// and unit variance (per pixel, resp. per channel). Couplings are
    /// untouched.
    fn init_actnorm(&mut self, data: &[Vec<f32>]) {
        let mut acts: Vec<Vec<f32>> = data.to_vec();
        for op in self.ops() {
            if let Op::PixelNorm = op {
                let count = acts.len() as f64;
                for k in 0..self.pixel_bias.len() {
                    let mean = acts.iter().map(|a| a[k] as f64).sum::<f64>() / count;
                    let var = acts.iter().map(|a| (a[k] as f64 - mean).powi(2)).sum::<f64>() / count;
                    let ls = -(var.sqrt() + 1e-3).ln();
                    self.pixel_log_scale[k] = ls as f32;
                    self.pixel_bias[k] = (-mean * ls.exp()) as f32;
                }
            }
            if let Op::ActNorm(l) = op {
                let s = self.layer_shape(l);
                let p = s.plane();
                let count = (p * acts.len()) as f64;
                for c in 0..s.c {
                    let vals = || acts.iter().flat_map(|a| a[c * p..(c + 1) * p].iter().map(|v| *v as f64));
                    let mean = vals().sum::<f64>() / count;
                    let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
                    let ls = -(var.sqrt() + 1e-6).ln();
                    self.layers[l].log_scale[c] = ls as f32;
                    self.layers[l].bias[c] = (-mean * ls.exp()) as f32;
                }
            }
            acts = acts.par_iter().map(|a| self.step_normalize(op, a).0).collect();
        }
    }

    fn nll(&self, m: &[f32]) -> f64 {
        let (z, ld, _) = self.normalize(m.to_vec(), false);
        let n = z.len() as f64;
        0.5 * z.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() - ld
            + 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}


/// Generative map `z -> m` and the log-determinant of its Jacobian.
pub fn nf_forward(z: &LatentVector, params: &CouplingFlowParams) -> Result<(Field, f64)> {
    params.check_field(z)?;
    let zl = params.to_latent_layout(narrow(z.data()));
    let (m, ld, _) = params.generate(zl, false);
    Ok((z.with_data(widen(&m))?, ld))
}

/// Normalizing map `m -> z` and the log-determinant of its Jacobian.
pub fn nf_inverse(m: &Field, params: &CouplingFlowParams) -> Result<(LatentVector, f64)> {
    params.check_field(m)?;
    let (z, ld, _) = params.normalize(narrow(m.data()), false);
    Ok((m.with_data(widen(&params.to_model_layout(z)))?, ld))
}

/// Negative log-likelihood of `m` under the flow (standard-normal latent).
pub fn nf_nll(m: &Field, params: &CouplingFlowParams) -> Result<f64> {
    params.check_field(m)?;
    Ok(params.nll(&narrow(m.data())))
}

/// Mean NLL over `samples` and its gradient w.r.t. the flat parameters.
pub fn nf_nll_grad(samples: &[Field], params: &CouplingFlowParams) -> Result<(f64, Vec<f32>)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    for s in samples {
        params.check_field(s)?;
    }
    let per: Vec<(f64, Vec<f32>)> = samples
        .par_iter()
        .map(|s| params.nll_and_grad(&narrow(s.data())))
        .collect();
    let (total, acc) = reduce_grads(&per, params.param_count());
    let k = samples.len() as f64;
    Ok((total / k, acc.iter().map(|v| (v / k) as f32).collect()))
}

/// Ordered (hence deterministic) sum of per-sample losses and gradients.
fn reduce_grads(per: &[(f64, Vec<f32>)], n: usize) -> (f64, Vec<f64>) {
    let mut acc = vec![0f64; n];
    let mut total = 0.0;
    for (l, g) in per {
        total += l;
        acc.iter_mut().zip(g).for_each(|(a, v)| *a += *v as f64);
    }
    (total, acc)
}

/// Which activations the generative pullback uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backprop {
    /// Recover each layer's input from its output by running the layer's
    /// inverse during the backward sweep; nothing is stored.
    #[default]
    Recompute,
    /// Keep every layer input from the forward pass.
    Stored,
}

/// Static context of the `nf_forward` rule.
#[derive(Debug, Clone)]
pub struct NfPrior {
    pub params: Arc<CouplingFlowParams>,
    pub backprop: Backprop,
}

impl NfPrior {
    pub fn new(params: CouplingFlowParams) -> Self {
        Self {
            params: Arc::new(params),
            backprop: Backprop::Recompute,
        }
    }

    pub fn with_backprop(mut self, backprop: Backprop) -> Self {
        self.backprop = backprop;
        self
    }
}

/// Cotangent of `z` given the cotangent `gm` of `m = G(z)`.
///
/// `m` must be the generative output for the latent in question; the
/// recompute path walks back from it through the normalizing layers.
pub fn nf_pullback_recompute(params: &CouplingFlowParams, m: &[f64], gm: &[f64]) -> Vec<f64> {
    let mut x = narrow(m);
    let mut g = narrow(gm);
    for op in params.ops() {
        let (y, _) = params.step_normalize(op, &x);
        g = params.step_generate_back(op, &y, &g);
        x = y;
    }
    widen(&params.to_model_layout(g))
}

/// Same cotangent using activations stored during the generative pass.
pub fn nf_pullback_stored(params: &CouplingFlowParams, z: &[f64], gm: &[f64]) -> Vec<f64> {
    let (_, _, inputs) = params.generate(params.to_latent_layout(narrow(z)), true);
    stored_backward(params, &inputs, gm)
}

fn stored_backward(params: &CouplingFlowParams, inputs: &[Vec<f32>], gm: &[f64]) -> Vec<f64> {
    let mut g = narrow(gm);
    for (op, y) in params.ops().into_iter().zip(inputs.iter().rev()) {
        g = params.step_generate_back(op, y, &g);
    }
    widen(&params.to_model_layout(g))
}

struct NfRule;

impl Primitive for NfRule {
    fn apply(&self, args: &[Arg], record: bool) -> Result<(Vec<Tensor>, Option<Pullback>)> {
        if args.len() != 2 {
            return Err(Error::Autodiff(format!("{NF_RULE} takes (z, prior), got {} args", args.len())));
        }
        let z = args[0].tensor()?;
        let prior = args[1].aux::<NfPrior>()?.clone();
        let p = &prior.params;
        if z.shape() != p.dims {
            return Err(Error::Shape(format!("latent shape {:?} does not match flow dims {:?}", z.shape(), p.dims)));
        }
        let store = record && prior.backprop == Backprop::Stored;
        let (m, _, inputs) = p.generate(p.to_latent_layout(narrow(z.data())), store);
        let m = Tensor::new(z.shape().to_vec(), widen(&m))?;
        if !record {
            return Ok((vec![m], None));
        }
        let shape = z.shape().to_vec();
        let m_out = m.data().to_vec();
        let pb: Pullback = Box::new(move |cot| {
            let gm = cot[0].data();
            let gz = match prior.backprop {
                Backprop::Recompute => nf_pullback_recompute(&prior.params, &m_out, gm),
                Backprop::Stored => stored_backward(&prior.params, &inputs, gm),
            };
            Ok(vec![Cotangent::Dense(Tensor::new(shape, gz)?), Cotangent::NoTangent])
        });
        Ok((vec![m], Some(pb)))
    }
}

/// Register `nf_forward(z, Aux(NfPrior)) -> m`.
pub fn register_nf_rule(registry: &mut Registry) -> Result<()> {
    registry.register(PullbackRule::new(NF_RULE, NfRule))
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NfTrainConfig {
    pub hidden: usize,
    pub depth: usize,
    pub nscales: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Std of the Gaussian jitter added to every sample, redrawn each epoch
    /// (dequantization of piecewise-constant textures).
    pub noise_std: f64,
}

impl Default for NfTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            depth: 2,
            nscales: 2,
            epochs: 50,
            batch_size: 25,
            lr: 3e-3,
            noise_std: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NfTrainResult {
    pub params: CouplingFlowParams,
    /// Mean NLL over the full set before training.
    pub initial_nll: f64,
    /// Mean NLL over the full set after training.
    pub final_nll: f64,
    /// Running mean NLL of each epoch.
    pub curve: Vec<f64>,
}

/// Maximum-likelihood training with ADAM.
pub fn nf_train(samples: &[Field], hyper: &NfTrainConfig, stream: &RngStream) -> Result<NfTrainResult> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!("training needs at least 2 samples, got {}", samples.len())));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 || !(hyper.lr > 0.0) || !(hyper.noise_std >= 0.0) {
        return Err(Error::Config("epochs, batch size and learning rate must be positive, noise std non-negative".into()));
    }
    let d = samples[0].dims();
    if d.len() != 2 {
        return Err(Error::Shape(format!("flow training expects 2D fields, got dims {d:?}")));
    }
    let mut params =
        CouplingFlowParams::new([d[0], d[1]], 1, hyper.hidden, hyper.depth, hyper.nscales, &mut stream.clone())?;
    for s in samples {
        params.check_field(s)?;
    }
    let data: Vec<Vec<f32>> = samples.iter().map(|s| narrow(s.data())).collect();
    params.init_actnorm(&data);
    let mean_nll = |p: &CouplingFlowParams| -> f64 {
        data.par_iter().map(|m| p.nll(m)).collect::<Vec<_>>().iter().sum::<f64>() / data.len() as f64
    };
    let initial = mean_nll(&params);
    log::info!("nf_train: {} samples, {} parameters, initial NLL {initial:.4}", data.len(), params.param_count());
    let mut adam = AdamState::new(params.param_count(), hyper.lr);
    let mut theta: Vec<f64> = params.to_flat().iter().map(|v| *v as f64).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut r = stream.child_indexed("nf-epoch", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, r.below(i + 1));
        }
        let mut epoch_sum = 0.0;
        let jittered: Vec<Vec<f32>> = if hyper.noise_std > 0.0 {
            data.iter()
                .map(|m| m.iter().map(|v| v + (hyper.noise_std * r.normal()) as f32).collect())
                .collect()
        } else {
            data.clone()
        };
        for batch in order.chunks(hyper.batch_size) {
            let per: Vec<(f64, Vec<f32>)> =
                batch.par_iter().map(|&i| params.nll_and_grad(&jittered[i])).collect();
            let (sum, mut g) = reduce_grads(&per, theta.len());
            epoch_sum += sum;
            let bn = batch.len() as f64;
            g.iter_mut().for_each(|v| *v /= bn);
            adam.step(&mut theta, &g)?;
            let flat: Vec<f32> = theta.iter().map(|v| *v as f32).collect();
            params.set_flat(&flat)?;
        }
        let mean = epoch_sum / data.len() as f64;
        log::debug!("nf_train epoch {epoch}: NLL {mean:.4}");
        curve.push(mean);
        if !mean.is_finite() || mean > 10.0 * initial.abs() {
            return Err(Error::Diverged(format!(
                "flow training NLL {mean:e} at epoch {epoch} exceeds 10x the initial {initial:e}"
            )));
        }
    }
    let final_nll = mean_nll(&params);
    log::info!("nf_train: final NLL {final_nll:.4}");
    Ok(NfTrainResult {
        params,
        initial_nll: initial,
        final_nll,
        curve,
    })
}

/// `n` samples `G(z)` with `z ~ N(0, I)`.
pub fn nf_sample(params: &CouplingFlowParams, n: usize, stream: &mut RngStream) -> Result<Vec<Field>> {
    let d = params.dims;
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d[0] * d[1]).map(|_| stream.normal()).collect();
            nf_forward(&Field::from_vec(vec![d[0], d[1]], z)?, params).map(|(m, _)| m)
        })
        .collect()
}
