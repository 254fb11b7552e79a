//! 2D acoustic time-domain modelling: forward, Born, and adjoint-state migration.

mod io;
mod propagator;

pub use io::{decode_shot, encode_shot, read_shot, write_shot};
pub use propagator::{max_stable_dt, Propagator};

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;

use crate::adgraph::{Arg, Cotangent, Pullback, Primitive, PullbackRule, Registry, Tensor};
use crate::error::{Error, Result};
use crate::fieldio::{Field, RngStream};
use crate::linop::LinearOperator;

/// Name under which the wave rule is registered.
pub const WAVE_RULE: &str = "wave_forward";

/// Squared slowness on a square 2D grid plus the sponge width wrapped around it.
#[derive(Debug, Clone, PartialEq)]
pub struct SlownessModel {
    pub field: Field,
    pub sponge_width: usize,
    /// Background (water) squared slowness, informational.
    pub background: Option<f64>,
}

impl SlownessModel {
    pub fn new(field: Field, sponge_width: usize) -> Result<Self> {
        if field.dims().len() != 2 {
            return Err(Error::Shape(format!("slowness model must be 2D, got {:?}", field.dims())));
        }
        for (i, &m) in field.data().iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::NonFinite(i));
            }
            let v = if m > 0.0 { 1.0 / m.sqrt() } else { f64::NAN };
            if !(100.0..=10_000.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "squared slowness {m:e} at index {i} implies velocity outside [100, 10000] m/s"
                )));
            }
        }
        Ok(Self {
            field,
            sponge_width,
            background: None,
        })
    }

    /// Model from a velocity field in m/s.
    pub fn from_velocity(v: &Field, sponge_width: usize) -> Result<Self> {
        Self::new(v.map(|v| 1.0 / (v * v)), sponge_width)
    }

    pub fn with_background(mut self, m: f64) -> Self {
        self.background = Some(m);
        self
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.field.dims()[0], self.field.dims()[1]]
    }
}

/// Source and receiver positions (meters, relative to the model origin) and time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionGeometry {
    pub sources: Vec<[f64; 2]>,
    pub receivers: Vec<[f64; 2]>,
    pub record_length: f64,
    pub dt: f64,
}

impl AcquisitionGeometry {
    pub fn new(sources: Vec<[f64; 2]>, receivers: Vec<[f64; 2]>, record_length: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("sample interval must be positive, got {dt}")));
        }
        if !(record_length >= dt && record_length.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "record length {record_length} shorter than one sample ({dt})"
            )));
        }
        if sources.is_empty() || receivers.is_empty() {
            return Err(Error::InvalidInput("geometry needs at least one source and one receiver".into()));
        }
        if sources.iter().chain(&receivers).flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite source or receiver position".into()));
        }
        Ok(Self {
            sources,
            receivers,
            record_length,
            dt,
        })
    }

    /// Number of time samples, including t = 0.
    pub fn nt(&self) -> usize {
        (self.record_length / self.dt + 1e-9).floor() as usize + 1
    }

    /// Check that every position lies inside a model of the given extent.
    pub fn validate_against(&self, model: &SlownessModel) -> Result<()> {
        let f = &model.field;
        let ext = [
            (f.dims()[0] - 1) as f64 * f.spacing()[0],
            (f.dims()[1] - 1) as f64 * f.spacing()[1],
        ];
        let tol = 1e-9 * ext[0].max(ext[1]).max(1.0);
        for (kind, list) in [("source", &self.sources), ("receiver", &self.receivers)] {
            for (i, p) in list.iter().enumerate() {
                let (x, z) = (p[0] - f.origin()[0], p[1] - f.origin()[1]);
                if x < -tol || z < -tol || x > ext[0] + tol || z > ext[1] + tol {
                    return Err(Error::InvalidInput(format!(
                        "{kind} {i} at ({}, {}) lies outside the model grid",
                        p[0], p[1]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same receivers, one source.
    pub fn single_source(&self, pos: [f64; 2]) -> Self {
        Self {
            sources: vec![pos],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveletKind {
    Ricker,
    Custom,
}

/// Source time function sampled at the simulation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Wavelet {
    pub samples: Vec<f64>,
    pub peak_frequency: f64,
    pub kind: WaveletKind,
}

impl Wavelet {
    /// Ricker wavelet delayed by `1.5 / f`, with its sample mean removed.
    pub fn ricker(peak_frequency: f64, dt: f64, nt: usize) -> Result<Self> {
        if !(peak_frequency > 0.0 && dt > 0.0) || nt == 0 {
            return Err(Error::InvalidInput("ricker needs positive frequency, dt and length".into()));
        }
        let t0 = 1.5 / peak_frequency;
        let mut samples: Vec<f64> = (0..nt)
            .map(|i| {
                let a = (PI * peak_frequency * (i as f64 * dt - t0)).powi(2);
                (1.0 - 2.0 * a) * (-a).exp()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / nt as f64;
        samples.iter_mut().for_each(|s| *s -= mean);
        Ok(Self {
            samples,
            peak_frequency,
            kind: WaveletKind::Ricker,
        })
    }

    pub fn custom(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            peak_frequency: 0.0,
            kind: WaveletKind::Custom,
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * alpha).collect(),
            ..self.clone()
        }
    }
}

/// Receiver-by-time panel for one source, receivers-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub source_index: usize,
    pub n_receivers: usize,
    pub nt: usize,
    pub dt: f64,
    pub data: Vec<f64>,
}

impl ShotRecord {
    pub fn new(source_index: usize, n_receivers: usize, nt: usize, dt: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_receivers * nt {
            return Err(Error::Shape(format!(
                "shot data has {} samples, expected {n_receivers} x {nt}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            source_index,
            n_receivers,
            nt,
            dt,
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn trace(&self, r: usize) -> &[f64] {
        &self.data[r * self.nt..(r + 1) * self.nt]
    }

    fn check(&self, geom: &AcquisitionGeometry) -> Result<()> {
        if self.n_receivers != geom.receivers.len() || self.nt != geom.nt() || self.data.len() != self.n_receivers * self.nt {
            return Err(Error::Shape(format!(
                "shot {} is {}x{}, geometry expects {}x{}",
                self.source_index,
                self.n_receivers,
                self.nt,
                geom.receivers.len(),
                geom.nt()
            )));
        }
        if self.source_index >= geom.sources.len() {
            return Err(Error::InvalidInput(format!("source index {} out of range", self.source_index)));
        }
        Ok(())
    }
}

/// Per-vintage shot collections of a time-lapse survey.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeLapseData {
    pub vintages: Vec<Vec<ShotRecord>>,
}

/// Numerical settings shared by all wave operations.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveConfig {
    pub space_order: usize,
    /// `c` in the per-step taper `0.95^(c · d²)`, `d` cells into the sponge.
    pub sponge_strength: f64,
    /// Keep every s-th imaging term; values above 1 make the gradient approximate.
    pub store_stride: usize,
}

impl Default for WaveConfig {
    fn default() -> Self {
        Self {
            space_order: 4,
            sponge_strength: 0.004,
            store_stride: 1,
        }
    }
}

fn wavelet_matches(w: &Wavelet, geom: &AcquisitionGeometry) -> Result<()> {
    if w.samples.len() != geom.nt() {
        return Err(Error::Shape(format!(
            "wavelet has {} samples, geometry has {} time steps",
            w.samples.len(),
            geom.nt()
        )));
    }
    Ok(())
}

fn check_shots(shots: &[usize], geom: &AcquisitionGeometry) -> Result<()> {
    if let Some(&s) = shots.iter().find(|&&s| s >= geom.sources.len()) {
        return Err(Error::InvalidInput(format!(
            "source index {s} out of range ({} sources)",
            geom.sources.len()
        )));
    }
    Ok(())
}

fn setup(model: &SlownessModel, geom: &AcquisitionGeometry, cfg: &WaveConfig) -> Result<Propagator> {
    geom.validate_against(model)?;
    Propagator::for_geometry(model, geom, cfg)
}

/// Nonlinear modelling `F(m) q` for the requested source indices.
pub fn forward_model(
    model: &SlownessModel,
    geom: &AcquisitionGeometry,
    w: &Wavelet,
    shots: &[usize],
    cfg: &WaveConfig,
) -> Result<Vec<ShotRecord>> {
    wavelet_matches(w, geom)?;
    check_shots(shots, geom)?;
    let prop = setup(model, geom, cfg)?;
    let recs = prop.points(&geom.receivers)?;
    shots
        .par_iter()
        .map(|&s| {
            let src = prop.point(geom.sources[s])?;
            let (data, _) = prop.forward(&src, &w.samples, &recs, false)?;
            Ok(ShotRecord {
                source_index: s,
                n_receivers: recs.len(),
                nt: prop.nt(),
                dt: geom.dt,
                data,
            })
        })
        .collect()
}

/// Linearized (Born) modelling `J dm` around `model`.
pub fn born(
    model: &SlownessModel,
    dm: &Field,
    geom: &AcquisitionGeometry,
    w: &Wavelet,
    shots: &[usize],
    cfg: &WaveConfig,
) -> Result<Vec<ShotRecord>> {
    if dm.dims() != model.field.dims() {
        return Err(Error::Shape(format!(
            "perturbation dims {:?} differ from model dims {:?}",
            dm.dims(),
            model.field.dims()
        )));
    }
    wavelet_matches(w, geom)?;
    check_shots(shots, geom)?;
    let prop = setup(model, geom, cfg)?;
    let recs = prop.points(&geom.receivers)?;
    let dmp = prop.extend(dm.data());
    shots
        .par_iter()
        .map(|&s| {
            let src = prop.point(geom.sources[s])?;
            let data = prop.born(&src, &w.samples, &recs, &dmp)?;
            Ok(ShotRecord {
                source_index: s,
                n_receivers: recs.len(),
                nt: prop.nt(),
                dt: geom.dt,
                data,
            })
        })
        .collect()
}

/// Adjoint-state gradient `Jᵀ r`, summed over the residual shots in order.
pub fn migrate(
    model: &SlownessModel,
    residual: &[ShotRecord],
    geom: &AcquisitionGeometry,
    w: &Wavelet,
    cfg: &WaveConfig,
) -> Result<Field> {
    wavelet_matches(w, geom)?;
    for r in residual {
        r.check(geom)?;
    }
    let prop = setup(model, geom, cfg)?;
    let recs = prop.points(&geom.receivers)?;
    let parts: Vec<Vec<f64>> = residual
        .par_iter()
        .map(|r| {
            let src = prop.point(geom.sources[r.source_index])?;
            let (_, wf) = prop.forward(&src, &w.samples, &recs, true)?;
            let (g, _) = prop.adjoint(&r.data, &recs, &src, wf.as_ref())?;
            Ok(g.expect("wavefield supplied"))
        })
        .collect::<Result<_>>()?;
    let total = ordered_sum(parts, prop.padded_shape().iter().product());
    model.field.with_data(prop.restrict(&total))
}

fn ordered_sum(parts: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut total = vec![0.0; n];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Misfit `½‖F(m)q − d‖²` and its gradient in m, by one forward and one adjoint pass per shot.
pub fn fwi_objective(
    model: &SlownessModel,
    observed: &[ShotRecord],
    geom: &AcquisitionGeometry,
    w: &Wavelet,
    cfg: &WaveConfig,
) -> Result<(f64, Field)> {
    wavelet_matches(w, geom)?;
    for d in observed {
        d.check(geom)?;
    }
    let prop = setup(model, geom, cfg)?;
    let recs = prop.points(&geom.receivers)?;
    let parts: Vec<(f64, Vec<f64>)> = observed
        .par_iter()
        .map(|d| {
            let src = prop.point(geom.sources[d.source_index])?;
            let (pred, wf) = prop.forward(&src, &w.samples, &recs, true)?;
            let res: Vec<f64> = pred.iter().zip(&d.data).map(|(p, o)| p - o).collect();
            let loss = 0.5 * res.iter().map(|r| r * r).sum::<f64>();
            let (g, _) = prop.adjoint(&res, &recs, &src, wf.as_ref())?;
            Ok((loss, g.expect("wavefield supplied")))
        })
        .collect::<Result<_>>()?;
    let loss = parts.iter().map(|p| p.0).sum();
    let total = ordered_sum(parts.into_iter().map(|p| p.1).collect(), prop.padded_shape().iter().product());
    Ok((loss, model.field.with_data(prop.restrict(&total))?))
}

/// Block-diagonal time-lapse modelling: vintage i uses its own model, geometry and wavelet.
pub fn timelapse_forward(
    models: &[SlownessModel],
    geoms: &[AcquisitionGeometry],
    wavelets: &[Wavelet],
    cfg: &WaveConfig,
) -> Result<TimeLapseData> {
    if models.len() != geoms.len() || models.len() != wavelets.len() {
        return Err(Error::Shape(format!(
            "time-lapse inputs disagree: {} models, {} geometries, {} wavelets",
            models.len(),
            geoms.len(),
            wavelets.len()
        )));
    }
    if let Some(g0) = geoms.first() {
        if geoms.iter().any(|g| g.receivers != g0.receivers) {
            return Err(Error::InvalidInput("all vintages must share the receiver geometry".into()));
        }
    }
    let vintages = models
        .iter()
        .zip(geoms)
        .zip(wavelets)
        .map(|((m, g), w)| {
            let shots: Vec<usize> = (0..g.sources.len()).collect();
            forward_model(m, g, w, &shots, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(TimeLapseData { vintages })
}

/// Add Gaussian noise shaped by the wavelet spectrum at the requested SNR
/// (`20·log10(‖d‖/‖n‖)`, measured over all shots).
pub fn add_colored_noise(
    records: &[ShotRecord],
    w: &Wavelet,
    snr_db: f64,
    stream: &mut RngStream,
) -> Result<Vec<ShotRecord>> {
    let mut noise: Vec<Vec<f64>> = Vec::with_capacity(records.len());
    for r in records {
        let white: Vec<f64> = (0..r.data.len()).map(|_| stream.normal()).collect();
        let mut shaped = vec![0.0; r.data.len()];
        for rec in 0..r.n_receivers {
            let (src, dst) = (&white[rec * r.nt..(rec + 1) * r.nt], &mut shaped[rec * r.nt..(rec + 1) * r.nt]);
            for (t, out) in dst.iter_mut().enumerate() {
                *out = (0..=t.min(w.samples.len() - 1)).map(|k| w.samples[k] * src[t - k]).sum();
            }
        }
        noise.push(shaped);
    }
    let signal: f64 = records.iter().flat_map(|r| &r.data).map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = noise.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if nn == 0.0 {
        return Ok(records.to_vec());
    }
    let scale = signal / nn / 10f64.powf(snr_db / 20.0);
    Ok(records
        .iter()
        .zip(noise)
        .map(|(r, n)| ShotRecord {
            data: r.data.iter().zip(n).map(|(d, e)| d + scale * e).collect(),
            ..r.clone()
        })
        .collect())
}

/// Receiver restriction `P_r` on the padded grid of `prop`, as a linear operator.
pub fn receiver_operator(prop: &Propagator, receivers: &[[f64; 2]]) -> Result<LinearOperator> {
    let pts = Arc::new(prop.points(receivers)?);
    let n = prop.padded_shape().iter().product::<usize>();
    let (a, b) = (Arc::clone(&pts), pts);
    Ok(LinearOperator::new(
        "P_r",
        prop.padded_shape().to_vec(),
        vec![receivers.len()],
        move |u| a.iter().map(|p| p.gather(u)).collect(),
        move |v| {
            let mut out = vec![0.0; n];
            for (p, &x) in b.iter().zip(v) {
                p.scatter(x, &mut out);
            }
            out
        },
    ))
}

/// Source-time function to receiver data for one source, `q ↦ P_r A(m)⁻¹ P_sᵀ q`.
pub fn source_operator(
    model: &SlownessModel,
    geom: &AcquisitionGeometry,
    shot: usize,
    cfg: &WaveConfig,
) -> Result<LinearOperator> {
    check_shots(&[shot], geom)?;
    let prop = Arc::new(setup(model, geom, cfg)?);
    let recs = Arc::new(prop.points(&geom.receivers)?);
    let src = prop.point(geom.sources[shot])?;
    let (nt, nr) = (prop.nt(), recs.len());
    let (p2, r2) = (Arc::clone(&prop), Arc::clone(&recs));
    Ok(LinearOperator::new(
        "F(m)",
        vec![nt],
        vec![nr, nt],
        move |q| prop.forward(&src, q, &recs, false).expect("shapes checked").0,
        move |d| p2.adjoint(d, &r2, &src, None).expect("shapes checked").1,
    ))
}

/// Born operator `J` for one source as a matrix-free operator on physical-grid perturbations.
pub fn born_operator(
    model: &SlownessModel,
    geom: &AcquisitionGeometry,
    w: &Wavelet,
    shot: usize,
    cfg: &WaveConfig,
) -> Result<LinearOperator> {
    wavelet_matches(w, geom)?;
    check_shots(&[shot], geom)?;
    let prop = Arc::new(setup(model, geom, cfg)?);
    let recs = Arc::new(prop.points(&geom.receivers)?);
    let src = prop.point(geom.sources[shot])?;
    let q = Arc::new(w.samples.clone());
    let (_, wf) = prop.forward(&src, &q, &recs, true)?;
    let wf = Arc::new(wf.expect("stored"));
    let (nt, nr) = (prop.nt(), recs.len());
    let (p2, r2) = (Arc::clone(&prop), Arc::clone(&recs));
    Ok(LinearOperator::new(
        "J",
        model.dims().to_vec(),
        vec![nr, nt],
        move |dm| prop.born(&src, &q, &recs, &prop.extend(dm)).expect("shapes checked"),
        move |d| {
            let (g, _) = p2.adjoint(d, &r2, &src, Some(&wf)).expect("shapes checked");
            p2.restrict(&g.expect("wavefield supplied"))
        },
    ))
}

/// Static context for the wave rule: everything except m and q.
#[derive(Debug, Clone)]
pub struct WaveOperator {
    pub geometry: AcquisitionGeometry,
    pub shots: Vec<usize>,
    pub spacing: [f64; 2],
    pub origin: [f64; 2],
    pub sponge_width: usize,
    pub config: WaveConfig,
}

impl WaveOperator {
    pub fn for_model(model: &SlownessModel, geometry: AcquisitionGeometry, shots: Vec<usize>, config: WaveConfig) -> Self {
        let (s, o) = (model.field.spacing(), model.field.origin());
        Self {
            geometry,
            shots,
            spacing: [s[0], s[1]],
            origin: [o[0], o[1]],
            sponge_width: model.sponge_width,
            config,
        }
    }

    fn model(&self, m: &Tensor) -> Result<SlownessModel> {
        if m.shape().len() != 2 {
            return Err(Error::Shape(format!("wave rule expects a 2D model, got {:?}", m.shape())));
        }
        let f = Field::new(m.shape().to_vec(), self.spacing.to_vec(), self.origin.to_vec(), m.data().to_vec())?;
        SlownessModel::new(f, self.sponge_width)
    }
}

struct WaveRule;

impl Primitive for WaveRule {
    fn apply(&self, args: &[Arg], record: bool) -> Result<(Vec<Tensor>, Option<Pullback>)> {
        if args.len() != 3 {
            return Err(Error::Autodiff(format!("{WAVE_RULE} takes (operator, m, q), got {} args", args.len())));
        }
        let op = args[0].aux::<WaveOperator>()?.clone();
        let m = args[1].tensor()?;
        let q = args[2].tensor()?.data().to_vec();
        let model = op.model(m)?;
        let geom = &op.geometry;
        check_shots(&op.shots, geom)?;
        let prop = Arc::new(setup(&model, geom, &op.config)?);
        if q.len() != prop.nt() {
            return Err(Error::Shape(format!("q has {} samples, geometry has {} steps", q.len(), prop.nt())));
        }
        let recs = Arc::new(prop.points(&geom.receivers)?);
        let srcs = op
            .shots
            .iter()
            .map(|&s| prop.point(geom.sources[s]))
            .collect::<Result<Vec<_>>>()?;
        let runs = srcs
            .par_iter()
            .map(|src| prop.forward(src, &q, &recs, record))
            .collect::<Result<Vec<_>>>()?;
        let (nt, nr, ns) = (prop.nt(), recs.len(), op.shots.len());
        let mut data = Vec::with_capacity(ns * nr * nt);
        let mut fields = Vec::with_capacity(ns);
        for (d, wf) in runs {
            data.extend(d);
            fields.push(wf);
        }
        let out = Tensor::new(vec![ns, nr, nt], data)?;
        if !record {
            return Ok((vec![out], None));
        }
        let m_shape = m.shape().to_vec();
        let pb: Pullback = Box::new(move |cot| {
            let dy = cot[0].data();
            let parts = srcs
                .par_iter()
                .zip(fields.par_iter())
                .enumerate()
                .map(|(i, (src, wf))| prop.adjoint(&dy[i * nr * nt..(i + 1) * nr * nt], &recs, src, wf.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let n = prop.padded_shape().iter().product();
            let mut qbar = vec![0.0; nt];
            let mut grads = Vec::with_capacity(ns);
            for (g, qb) in parts {
                grads.push(g.expect("wavefield stored"));
                for (a, b) in qbar.iter_mut().zip(qb) {
                    *a += b;
                }
            }
            let gm = prop.restrict(&ordered_sum(grads, n));
            Ok(vec![
                Cotangent::NoTangent,
                Cotangent::Dense(Tensor::new(m_shape.clone(), gm)?),
                Cotangent::Dense(Tensor::new(vec![nt], qbar)?),
            ])
        });
        Ok((vec![out], Some(pb)))
    }
}

/// Register `wave_forward(op: WaveOperator, m, q) -> [shots, receivers, nt]`.
pub fn register_wave_rules(registry: &mut Registry) -> Result<()> {
    registry.register(PullbackRule::new(WAVE_RULE, WaveRule))
}

#[cfg(test)]
mod tests;
