//! Fourier neural operator surrogate `K -> saturation snapshots`.
//!
//! ```text
//! features (normalized ln K, x, z) -> lift -> L × (spectral conv + bypass, gelu) -> gelu MLP -> sigmoid
//! ```
//!
//! Snapshot times are output channels. The spectral layers keep modes with
//! `|kx|, |kz| < k_max`. Arithmetic is f32; the network is assembled from
//! tape primitives, so parameter gradients come from the reverse sweep.

mod io;
mod ops;

#[cfg(test)]
mod tests;

use std::sync::Arc;

use rayon::prelude::*;

use crate::adgraph::{gradient, Cotangent, Input, Primitive, Pullback, PullbackRule, Registry, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fieldio::{Field, RngStream};
use crate::linop::LinearOperator;
use crate::flow::{simulate, FlowSchedule, PermeabilityField, SaturationSeries};
use crate::optim::AdamState;

pub use io::{decode_weights, encode_weights, read_dataset, read_weights, write_dataset, write_weights};
pub use ops::SpectralGrid;
use ops::{FeatureCtx, FEATURES, GELU, POINTWISE, REL_L2, SIGMOID, SPECTRAL};

pub const FNO_RULE: &str = "fno";
/// Operation name under which either the simulator or the surrogate is bound.
pub const PLUME_ALIAS: &str = "S";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FnoArch {
    pub width: usize,
    pub layers: usize,
    pub k_max: usize,
    pub proj_hidden: usize,
}

impl Default for FnoArch {
    fn default() -> Self {
        Self {
            width: 16,
            layers: 4,
            k_max: 8,
            proj_hidden: 32,
        }
    }
}

/// Input statistics (ln K, training split) and per-channel output means.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub log_k_mean: f32,
    pub log_k_std: f32,
    pub out_mean: Vec<f32>,
}

impl NormStats {
    /// Output offsets `logit(mean)`, so an untrained network predicts the
    /// mean saturation of each snapshot.
    fn offsets(&self) -> Vec<f32> {
        self.out_mean
            .iter()
            .map(|m| {
                let m = m.clamp(0.01, 0.99);
                (m / (1.0 - m)).ln()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBlock {
    /// Mode weights `[width, width, modes]`, real and imaginary parts.
    pub modes_re: Vec<f32>,
    pub modes_im: Vec<f32>,
    /// Pointwise bypass `[width, width]` and bias.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnoWeights {
    pub dims: [usize; 2],
    pub arch: FnoArch,
    /// Snapshot times (years), one output channel each.
    pub times: Vec<f64>,
    pub lift_w: Vec<f32>,
    pub lift_b: Vec<f32>,
    pub blocks: Vec<SpectralBlock>,
    pub q1_w: Vec<f32>,
    pub q1_b: Vec<f32>,
    pub q2_w: Vec<f32>,
    pub q2_b: Vec<f32>,
    pub stats: Option<NormStats>,
}

const N_FEATURES: usize = 3;

impl FnoWeights {
    pub fn zeros(dims: [usize; 2], arch: FnoArch, times: Vec<f64>) -> Result<Self> {
        SpectralGrid::new(dims[0], dims[1], arch.k_max)?;
        if arch.width == 0 || arch.layers == 0 || arch.proj_hidden == 0 || times.is_empty() {
            return Err(Error::InvalidInput(format!("degenerate operator architecture {arch:?}")));
        }
        let (w, q, nm) = (arch.width, arch.proj_hidden, (2 * arch.k_max - 1).pow(2));
        let n_out = times.len();
        Ok(Self {
            dims,
            arch,
            times,
            lift_w: vec![0.0; w * N_FEATURES],
            lift_b: vec![0.0; w],
            blocks: (0..arch.layers)
                .map(|_| SpectralBlock {
                    modes_re: vec![0.0; w * w * nm],
                    modes_im: vec![0.0; w * w * nm],
                    w: vec![0.0; w * w],
                    b: vec![0.0; w],
                })
                .collect(),
            q1_w: vec![0.0; q * w],
            q1_b: vec![0.0; q],
            q2_w: vec![0.0; n_out * q],
            q2_b: vec![0.0; n_out],
            stats: None,
        })
    }

    /// Random initialization: Gaussian pointwise weights with variance
    /// 1/fan-in, mode weights uniform in `[0, 1/width²)`.
    pub fn new(dims: [usize; 2], arch: FnoArch, times: Vec<f64>, stream: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(dims, arch, times)?;
        let mut r = stream.child("fno-init");
        let mut gauss = |v: &mut [f32], fan_in: usize| {
            let s = (1.0 / fan_in as f64).sqrt();
            v.iter_mut().for_each(|x| *x = (s * r.normal()) as f32);
        };
        let w = arch.width;
        gauss(&mut p.lift_w, N_FEATURES);
        for b in &mut p.blocks {
            gauss(&mut b.w, w);
        }
        gauss(&mut p.q1_w, w);
        gauss(&mut p.q2_w, arch.proj_hidden);
        let scale = 1.0 / (w * w) as f64;
        for b in &mut p.blocks {
            for v in b.modes_re.iter_mut().chain(b.modes_im.iter_mut()) {
                *v = (scale * r.uniform()) as f32;
            }
        }
        Ok(p)
    }

    pub fn n_out(&self) -> usize {
        self.times.len()
    }

    fn n_modes(&self) -> usize {
        (2 * self.arch.k_max - 1).pow(2)
    }

    /// Parameter blocks with their tensor shapes, in declaration order.
    fn blocks_with_shapes(&self) -> Vec<(&Vec<f32>, Vec<usize>)> {
        let (w, q, nm, no) = (self.arch.width, self.arch.proj_hidden, self.n_modes(), self.n_out());
        let mut v = vec![(&self.lift_w, vec![w, N_FEATURES]), (&self.lift_b, vec![w])];
        for b in &self.blocks {
            v.push((&b.modes_re, vec![w, w, nm]));
            v.push((&b.modes_im, vec![w, w, nm]));
            v.push((&b.w, vec![w, w]));
            v.push((&b.b, vec![w]));
        }
        v.push((&self.q1_w, vec![q, w]));
        v.push((&self.q1_b, vec![q]));
        v.push((&self.q2_w, vec![no, q]));
        v.push((&self.q2_b, vec![no]));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = vec![&mut self.lift_w, &mut self.lift_b];
        for b in &mut self.blocks {
            v.extend([&mut b.modes_re, &mut b.modes_im, &mut b.w, &mut b.b]);
        }
        v.extend([&mut self.q1_w, &mut self.q1_b, &mut self.q2_w, &mut self.q2_b]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.blocks_with_shapes().iter().map(|(b, _)| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.blocks_with_shapes().into_iter().flat_map(|(b, _)| b.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} weights, got {}", self.param_count(), v.len())));
        }
        let mut k = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&v[k..k + n]);
            k += n;
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<Tensor> {
        self.blocks_with_shapes()
            .into_iter()
            .map(|(b, s)| Tensor::new(s, b.iter().map(|v| *v as f64).collect()).expect("consistent shapes"))
            .collect()
    }

    fn stats(&self) -> Result<&NormStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("operator weights carry no normalization statistics".into()))
    }

    fn check_k(&self, k: &Field) -> Result<()> {
        if k.dims() != self.dims {
            return Err(Error::Shape(format!(
                "permeability dims {:?} do not match the trained grid {:?}",
                k.dims(),
                self.dims
            )));
        }
        Ok(())
    }
}

/// Network graph on a batch `k` of shape `[B, nx·nz]`; `p` are the weight
/// variables in declaration order. Returns `[B, n_out, nx·nz]`.
fn graph(tp: &mut Tape<'_>, k: Var, p: &[Var], w: &FnoWeights, grid: &SpectralGrid) -> Result<Var> {
    let stats = w.stats()?;
    let ctx = FeatureCtx {
        nx: w.dims[0],
        nz: w.dims[1],
        log_k_mean: stats.log_k_mean,
        log_k_std: stats.log_k_std,
    };
    let x = tp.call1(FEATURES, &[k.into(), Input::aux(ctx)])?;
    let mut v = tp.call1(POINTWISE, &[x.into(), p[0].into(), p[1].into()])?;
    let grid_in = Input::aux(grid.clone());
    let nl = w.blocks.len();
    for l in 0..nl {
        let q = &p[2 + 4 * l..6 + 4 * l];
        let s = tp.call1(SPECTRAL, &[v.into(), q[0].into(), q[1].into(), grid_in.clone()])?;
        let u = tp.call1(POINTWISE, &[v.into(), q[2].into(), q[3].into()])?;
        v = tp.add(s, u)?;
        if l + 1 < nl {
            v = tp.call1(GELU, &[v.into()])?;
        }
    }
    let q = &p[2 + 4 * nl..];
    let h = tp.call1(POINTWISE, &[v.into(), q[0].into(), q[1].into()])?;
    let h = tp.call1(GELU, &[h.into()])?;
    let raw = tp.call1(POINTWISE, &[h.into(), q[2].into(), q[3].into()])?;
    tp.call1(SIGMOID, &[raw.into(), Input::aux(stats.offsets())])
}

fn k_batch(ks: &[&Field]) -> Result<Tensor> {
    let p = ks.first().map_or(0, |k| k.len());
    Tensor::new(vec![ks.len(), p], ks.iter().flat_map(|k| k.data().iter().copied()).collect())
}

/// Predictions for a batch, `[B][n_out·nx·nz]`.
fn predict(ks: &[&Field], w: &FnoWeights) -> Result<Vec<Vec<f64>>> {
    w.stats()?;
    for k in ks {
        w.check_k(k)?;
    }
    if ks.is_empty() {
        return Ok(Vec::new());
    }
    let grid = SpectralGrid::new(w.dims[0], w.dims[1], w.arch.k_max)?;
    let mut at = vec![k_batch(ks)?];
    at.extend(w.tensors());
    let mut out = None;
    crate::adgraph::value(ops::registry(), &at, |tp, v| {
        let y = graph(tp, v[0], &v[1..], w, &grid)?;
        out = Some(tp.value(y).clone());
        Ok(tp.constant(Tensor::scalar(0.0)))
    })?;
    let out = out.expect("graph evaluated");
    let n = out.len() / ks.len();
    Ok(out.data().chunks(n).map(|c| c.to_vec()).collect())
}

fn to_series(k: &Field, w: &FnoWeights, flat: Vec<f64>) -> Result<SaturationSeries> {
    let p = k.len();
    let snapshots = flat.chunks(p).map(|c| k.with_data(c.to_vec())).collect::<Result<Vec<_>>>()?;
    Ok(SaturationSeries {
        times: w.times.clone(),
        snapshots,
    })
}

/// Surrogate prediction of the saturation snapshots for permeability `k` (mD).
pub fn fno_forward(k: &Field, w: &FnoWeights) -> Result<SaturationSeries> {
    let mut out = predict(&[k], w)?;
    to_series(k, w, out.remove(0))
}

/// Batched [`fno_forward`].
pub fn fno_forward_batch(ks: &[Field], w: &FnoWeights) -> Result<Vec<SaturationSeries>> {
    let refs: Vec<&Field> = ks.iter().collect();
    predict(&refs, w)?
        .into_iter()
        .zip(ks)
        .map(|(flat, k)| to_series(k, w, flat))
        .collect()
}

fn series_flat(s: &SaturationSeries) -> Vec<f32> {
    s.snapshots.iter().flat_map(|f| f.data().iter().map(|v| *v as f32)).collect()
}

/// Mean relative L2 error over `pairs` and its gradient w.r.t. the flat weights.
pub fn fno_loss_grad(w: &FnoWeights, pairs: &[(Field, SaturationSeries)]) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let ks: Vec<&Field> = pairs.iter().map(|(k, _)| k).collect();
    for k in &ks {
        w.check_k(k)?;
    }
    let targets: Vec<f32> = pairs.iter().flat_map(|(_, s)| series_flat(s)).collect();
    let grid = SpectralGrid::new(w.dims[0], w.dims[1], w.arch.k_max)?;
    let params = w.tensors();
    let kb = k_batch(&ks)?;
    let (loss, cots) = gradient(ops::registry(), &params, |tp, p| {
        let k = tp.constant(kb);
        let y = graph(tp, k, p, w, &grid)?;
        tp.call1(REL_L2, &[y.into(), Input::aux(targets)])
    })?;
    let mut g = Vec::with_capacity(w.param_count());
    for (c, t) in cots.iter().zip(&params) {
        match c.dense() {
            Some(d) => g.extend_from_slice(d.data()),
            None => g.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    Ok((loss, g))
}

/// Mean relative L2 error of the surrogate on `pairs`.
pub fn fno_evaluate(w: &FnoWeights, pairs: &[(Field, SaturationSeries)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let ks: Vec<&Field> = pairs.iter().map(|(k, _)| k).collect();
    let pred = predict(&ks, w)?;
    let mut total = 0.0;
    for (p, (_, s)) in pred.iter().zip(pairs) {
        let t: Vec<f64> = s.snapshots.iter().flat_map(|f| f.data().iter().copied()).collect();
        let num = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = t.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
        total += num / den;
    }
    Ok(total / pairs.len() as f64)
}

/// Simulator pairs with a train/held-out split and training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<(Field, SaturationSeries)>,
    pub n_train: usize,
    pub stats: NormStats,
}

impl PairDataset {
    /// The first `n_train` pairs form the training split; statistics come
    /// from that split only.
    pub fn new(pairs: Vec<(Field, SaturationSeries)>, n_train: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty pair dataset".into()));
        }
        if n_train == 0 || n_train > pairs.len() {
            return Err(Error::InvalidInput(format!("training split {n_train} of {} pairs", pairs.len())));
        }
        let (k0, s0) = &pairs[0];
        for (i, (k, s)) in pairs.iter().enumerate() {
            if k.dims() != k0.dims() || s.times != s0.times || s.snapshots.iter().any(|f| f.dims() != k0.dims()) {
                return Err(Error::Shape(format!("pair {i} is inconsistent with pair 0")));
            }
            if let Some(c) = k.data().iter().position(|v| !(*v > 0.0)) {
                return Err(Error::InvalidInput(format!("pair {i}: non-positive permeability at cell {c}")));
            }
        }
        let train = &pairs[..n_train];
        let logs: Vec<f64> = train.iter().flat_map(|(k, _)| k.data().iter().map(|v| v.ln())).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / logs.len() as f64;
        let std = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        let out_mean = (0..s0.snapshots.len())
            .map(|c| {
                let n = (train.len() * k0.len()) as f64;
                (train.iter().map(|(_, s)| s.snapshots[c].data().iter().sum::<f64>()).sum::<f64>() / n) as f32
            })
            .collect();
        let stats = NormStats {
            log_k_mean: mean as f32,
            log_k_std: std as f32,
            out_mean,
        };
        Ok(Self { pairs, n_train, stats })
    }

    pub fn train(&self) -> &[(Field, SaturationSeries)] {
        &self.pairs[..self.n_train]
    }

    pub fn held_out(&self) -> &[(Field, SaturationSeries)] {
        &self.pairs[self.n_train..]
    }

    pub fn times(&self) -> &[f64] {
        &self.pairs[0].1.times
    }

    pub fn dims(&self) -> [usize; 2] {
        let d = self.pairs[0].0.dims();
        [d[0], d[1]]
    }
}

/// Run the simulator on every permeability model, in parallel.
pub fn simulate_pairs(ks: Vec<Field>, sched: &FlowSchedule) -> Result<Vec<(Field, SaturationSeries)>> {
    ks.into_par_iter()
        .map(|k| {
            let s = simulate(&PermeabilityField::new(k.clone())?, sched)?;
            Ok((k, s))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnoTrainConfig {
    pub arch: FnoArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Smallest admissible training split.
    pub min_pairs: usize,
}

impl Default for FnoTrainConfig {
    fn default() -> Self {
        Self {
            arch: FnoArch::default(),
            epochs: 100,
            batch_size: 10,
            lr: 3e-3,
            min_pairs: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FnoTrainResult {
    pub weights: FnoWeights,
    /// Mean training loss of each epoch.
    pub train_curve: Vec<f64>,
    /// Held-out relative L2 error after each epoch (empty without a held-out split).
    pub held_out_curve: Vec<f64>,
}

/// ADAM on the mean relative L2 error over the training split.
pub fn fno_train(data: &PairDataset, hyper: &FnoTrainConfig, stream: &RngStream) -> Result<FnoTrainResult> {
    if data.train().len() < hyper.min_pairs {
        return Err(Error::InvalidInput(format!(
            "operator training needs at least {} training pairs, got {}",
            hyper.min_pairs,
            data.train().len()
        )));
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 || !(hyper.lr > 0.0) {
        return Err(Error::Config("epochs, batch size and learning rate must be positive".into()));
    }
    let mut w = FnoWeights::new(data.dims(), hyper.arch, data.times().to_vec(), &mut stream.clone())?;
    w.stats = Some(data.stats.clone());
    let mut theta: Vec<f64> = w.to_flat().iter().map(|v| *v as f64).collect();
    let mut adam = AdamState::new(theta.len(), hyper.lr);
    let train = data.train();
    let mut train_curve = Vec::with_capacity(hyper.epochs);
    let mut held_out_curve = Vec::new();
    let mut initial = None;
    log::info!("fno_train: {} pairs, {} weights", train.len(), theta.len());
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut r = stream.child_indexed("fno-epoch", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, r.below(i + 1));
        }
        let mut sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let pairs: Vec<(Field, SaturationSeries)> = batch.iter().map(|&i| train[i].clone()).collect();
            let (loss, g) = fno_loss_grad(&w, &pairs)?;
            sum += loss * batch.len() as f64;
            adam.step(&mut theta, &g)?;
            w.set_flat(&theta.iter().map(|v| *v as f32).collect::<Vec<_>>())?;
        }
        let mean = sum / train.len() as f64;
        let init = *initial.get_or_insert(mean);
        if !mean.is_finite() || mean > 10.0 * init {
            return Err(Error::Diverged(format!(
                "operator training loss {mean:e} at epoch {epoch} exceeds 10x the first epoch's {init:e}"
            )));
        }
        train_curve.push(mean);
        if !data.held_out().is_empty() {
            held_out_curve.push(fno_evaluate(&w, data.held_out())?);
        }
        log::debug!("fno_train epoch {epoch}: loss {mean:.4} held-out {:?}", held_out_curve.last());
    }
    Ok(FnoTrainResult {
        weights: w,
        train_curve,
        held_out_curve,
    })
}

struct FnoRule;

impl Primitive for FnoRule {
    fn apply(&self, args: &[crate::adgraph::Arg], record: bool) -> Result<(Vec<Tensor>, Option<Pullback>)> {
        if args.len() != 2 {
            return Err(Error::Autodiff(format!("{FNO_RULE} takes (K, weights), got {} args", args.len())));
        }
        let kt = args[0].tensor()?;
        let w = Arc::new(args[1].aux::<FnoWeights>()?.clone());
        if kt.shape() != w.dims {
            return Err(Error::Shape(format!("K shape {:?} does not match the trained grid {:?}", kt.shape(), w.dims)));
        }
        let [nx, nz] = w.dims;
        let k = Field::from_vec(vec![nx, nz], kt.data().to_vec())?;
        let flat = predict(&[&k], &w)?.remove(0);
        let out = Tensor::new(vec![w.n_out(), nx, nz], flat)?;
        if !record {
            return Ok((vec![out], None));
        }
        let shape = kt.shape().to_vec();
        let kb = Tensor::new(vec![1, nx * nz], kt.data().to_vec())?;
        let pb: Pullback = Box::new(move |cot| {
            let c = Tensor::new(vec![1, w.n_out(), nx * nz], cot[0].data().to_vec())?;
            let grid = SpectralGrid::new(nx, nz, w.arch.k_max)?;
            let params = w.tensors();
            let (_, g) = gradient(ops::registry(), &[kb], |tp, v| {
                let p: Vec<Var> = params.iter().map(|t| tp.constant(t.clone())).collect();
                let y = graph(tp, v[0], &p, &w, &grid)?;
                let c = tp.constant(c);
                tp.inner(y, c)
            })?;
            let gk = match g.into_iter().next() {
                Some(Cotangent::Dense(t)) => t.into_data(),
                _ => vec![0.0; nx * nz],
            };
            Ok(vec![Cotangent::Dense(Tensor::new(shape, gk)?), Cotangent::NoTangent])
        });
        Ok((vec![out], Some(pb)))
    }
}

/// One single-channel spectral layer `x ↦ Re(F⁻¹(R ⊙ F x))` with fixed
/// mode weights `R = re + i·im`, as a linear operator in x. Forward and
/// adjoint both run the layer's tape rule.
pub fn spectral_operator(grid: &SpectralGrid, re: Vec<f64>, im: Vec<f64>) -> Result<LinearOperator> {
    let m = grid.n_modes();
    if re.len() != m || im.len() != m {
        return Err(Error::Shape(format!("{m} retained modes, got {} + {} weights", re.len(), im.len())));
    }
    let p = grid.nx * grid.nz;
    let weights = Arc::new((
        Tensor::new(vec![1, 1, m], re)?,
        Tensor::new(vec![1, 1, m], im)?,
        grid.clone(),
    ));
    let w = weights.clone();
    let forward = move |x: &[f64]| {
        let mut out = Vec::new();
        crate::adgraph::value(ops::registry(), &[Tensor::new(vec![1, 1, p], x.to_vec()).expect("shape")], |tp, v| {
            let (re, im) = (tp.constant(w.0.clone()), tp.constant(w.1.clone()));
            let y = tp.call1(SPECTRAL, &[v[0].into(), re.into(), im.into(), Input::aux(w.2.clone())])?;
            out = tp.value(y).data().to_vec();
            Ok(tp.constant(Tensor::scalar(0.0)))
        })
        .expect("spectral layer");
        out
    };
    let w = weights;
    let adjoint = move |ybar: &[f64]| {
        let yb = Tensor::new(vec![1, 1, p], ybar.to_vec()).expect("shape");
        let (_, g) = gradient(ops::registry(), &[Tensor::zeros(&[1, 1, p])], |tp, v| {
            let (re, im) = (tp.constant(w.0.clone()), tp.constant(w.1.clone()));
            let y = tp.call1(SPECTRAL, &[v[0].into(), re.into(), im.into(), Input::aux(w.2.clone())])?;
            let c = tp.constant(yb.clone());
            tp.inner(y, c)
        })
        .expect("spectral layer pullback");
        g[0].dense().map_or_else(|| vec![0.0; p], |t| t.data().to_vec())
    };
    Ok(LinearOperator::new("spectral layer", vec![grid.nx, grid.nz], vec![grid.nx, grid.nz], forward, adjoint))
}

/// Register `fno(K, Aux(FnoWeights)) -> [n_out, nx, nz]`.
pub fn register_fno_rule(registry: &mut Registry) -> Result<()> {
    registry.register(PullbackRule::new(FNO_RULE, FnoRule))
}

/// Registry with both plume operators and [`PLUME_ALIAS`] bound to the
/// surrogate (`surrogate = true`) or to the simulator.
pub fn plume_registry(surrogate: bool) -> Result<Registry> {
    let mut reg = Registry::new();
    crate::flow::register_flow_rule(&mut reg)?;
    register_fno_rule(&mut reg)?;
    let target = if surrogate { FNO_RULE } else { crate::flow::FLOW_RULE };
    reg.alias(PLUME_ALIAS, target)?;
    Ok(reg)
}
