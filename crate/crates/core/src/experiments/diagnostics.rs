//! Dot-test and finite-difference batteries behind `dot-test` and `grad-test`.

use std::fmt;

use crate::adgraph::{gradient, Input, Registry, Tensor};
use crate::error::Result;
use crate::fieldio::{Field, RngStream};
use crate::flow::{simulate, simulate_adjoint, FlowSchedule, PermeabilityField};
use crate::linop::dot_test;
use crate::priorflow::{layered_texture, register_nf_rule, CouplingFlowParams, LayeredSpec, NfPrior, NF_RULE};
use crate::rock::{register_patchy_rule, PatchyConstants, PATCHY_RULE};
use crate::surrogate::{plume_registry, FnoArch, FnoWeights, NormStats, PLUME_ALIAS};
use crate::wave::{
    born_operator, fwi_objective, forward_model, receiver_operator, source_operator, AcquisitionGeometry, Propagator,
    SlownessModel, WaveConfig, Wavelet,
};

/// One line of a pass/fail table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            error,
            tolerance,
            passed: error < tolerance,
        }
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} rel_err={:.3e} tol={:.0e} {}",
            self.name,
            self.error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Smooth layered model of `n × n` cells (10 m) with crosswell geometry.
fn crosswell(n: usize, seed: u64, n_src: usize, n_rec: usize) -> Result<(SlownessModel, AcquisitionGeometry, Wavelet)> {
    let h = 10.0;
    let tex = layered_texture([n, n], &LayeredSpec::default(), &mut RngStream::new(seed))?;
    let v = Field::new(vec![n, n], vec![h, h], vec![0.0, 0.0], tex.data().iter().map(|v| 1000.0 * v).collect())?;
    let model = SlownessModel::from_velocity(&v, 20)?;
    let ext = (n - 1) as f64 * h;
    let spread = |k: usize, i: usize| ext * (i as f64 + 0.5) / k as f64;
    let sources = (0..n_src).map(|i| [0.0, spread(n_src, i)]).collect();
    let receivers = (0..n_rec).map(|i| [ext, spread(n_rec, i)]).collect();
    let vmax = v.max();
    let dt = crate::wave::max_stable_dt(4, h, 1.0 / (vmax * vmax))?;
    let geom = AcquisitionGeometry::new(sources, receivers, 1.5 * ext / 1500.0 + 0.1, dt)?;
    let w = Wavelet::ricker(15.0, geom.dt, geom.nt())?;
    Ok((model, geom, w))
}

/// Dot tests of the receiver restriction `P_r`, source injection `P_sᵀ`
/// (as the adjoint of sampling at the source positions), modelling in `q`
/// and Born modelling in `dm`, one row per operator and seed.
pub fn dot_battery(n: usize, seeds: &[u64], tol: f64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let (model, geom, w) = crosswell(n, 1, 2, 8)?;
    let cfg = WaveConfig::default();
    let prop = Propagator::for_geometry(&model, &geom, &cfg)?;
    let p_r = receiver_operator(&prop, &geom.receivers)?;
    let p_s = receiver_operator(&prop, &geom.sources)?;
    let fq = source_operator(&model, &geom, 0, &cfg)?;
    let j = born_operator(&model, &geom, &w, 1, &cfg)?;
    for &seed in seeds {
        for (name, op) in [("P_r", &p_r), ("P_s", &p_s), ("F(m) in q", &fq), ("J (Born) in dm", &j)] {
            let rep = dot_test(op, &mut RngStream::new(seed), tol);
            rows.push(CheckRow::new(format!("{name} seed {seed}"), rep.relative_error, tol));
        }
    }
    Ok(rows)
}

fn rel(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-300)
}

/// Indices of `k` coordinates drawn among entries carrying at least 10% of
/// the largest gradient magnitude, so relative errors are meaningful.
fn probe_coords(g: &[f64], k: usize, stream: &mut RngStream) -> Vec<usize> {
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let strong: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= 0.1 * gmax).collect();
    (0..k).map(|_| strong[stream.below(strong.len())]).collect()
}

fn worst<F: FnMut(usize) -> Result<f64>>(coords: &[usize], g: &[f64], mut fd: F) -> Result<f64> {
    let mut e = 0.0f64;
    for &c in coords {
        e = e.max(rel(fd(c)?, g[c]));
    }
    Ok(e)
}

fn wave_row(seed: u64, n_coords: usize) -> Result<CheckRow> {
    let n = 24;
    let (truth, geom, w) = crosswell(n, seed, 2, 8)?;
    let cfg = WaveConfig::default();
    let obs = forward_model(&truth, &geom, &w, &[0, 1], &cfg)?;
    let m0: Vec<f64> = truth.field.data().iter().map(|m| m * 1.02).collect();
    let model = SlownessModel::new(truth.field.with_data(m0.clone())?, 20)?;
    let (_, g) = fwi_objective(&model, &obs, &geom, &w, &cfg)?;
    let coords = probe_coords(g.data(), n_coords, &mut RngStream::new(seed + 100));
    let e = worst(&coords, g.data(), |c| {
        let h = 1e-3 * m0[c];
        let at = |d: f64| -> Result<f64> {
            let mut v = m0.clone();
            v[c] += d;
            Ok(fwi_objective(&SlownessModel::new(truth.field.with_data(v)?, 20)?, &obs, &geom, &w, &cfg)?.0)
        };
        Ok((at(h)? - at(-h)?) / (2.0 * h))
    })?;
    Ok(CheckRow::new("wave: FWI adjoint-state", e, 1e-4))
}

fn flow_schedule(n: usize) -> Result<FlowSchedule> {
    let phi = Field::filled(vec![n, n], vec![10.0, 10.0], 0.25)?;
    Ok(FlowSchedule {
        total_years: 3.0,
        snapshot_years: vec![1.0, 2.0, 3.0],
        injection_rate: 0.05,
        ..FlowSchedule::new(phi, [n / 2 - 1, n / 2 + 1])
    })
}

fn lognormal(n: usize, seed: u64, median: f64) -> Result<Field> {
    let mut s = RngStream::new(seed);
    let v = (0..n * n).map(|_| median * (0.5 * s.normal()).exp()).collect();
    Field::new(vec![n, n], vec![10.0, 10.0], vec![0.0, 0.0], v)
}

fn flow_row(seed: u64, n_coords: usize) -> Result<CheckRow> {
    let n = 8;
    let sched = flow_schedule(n)?;
    let obs = simulate(&PermeabilityField::new(lognormal(n, seed, 120.0)?)?, &sched)?;
    let k = lognormal(n, seed + 1, 100.0)?;
    let misfit = |k: &Field| -> Result<(f64, Vec<Field>)> {
        let s = simulate(&PermeabilityField::new(k.clone())?, &sched)?;
        let mut loss = 0.0;
        let mut cot = Vec::new();
        for (a, b) in s.snapshots.iter().zip(&obs.snapshots) {
            let r: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            loss += 0.5 * r.iter().map(|v| v * v).sum::<f64>();
            cot.push(a.with_data(r)?);
        }
        Ok((loss, cot))
    };
    let (_, cot) = misfit(&k)?;
    let g = simulate_adjoint(&PermeabilityField::new(k.clone())?, &sched, &cot)?;
    let coords = probe_coords(g.data(), n_coords, &mut RngStream::new(seed + 200));
    let e = worst(&coords, g.data(), |c| {
        let h = 1e-5 * k.data()[c];
        let at = |d: f64| -> Result<f64> {
            let mut v = k.data().to_vec();
            v[c] += d;
            Ok(misfit(&k.with_data(v)?)?.0)
        };
        Ok((at(h)? - at(-h)?) / (2.0 * h))
    })?;
    Ok(CheckRow::new("flow: discrete adjoint", e, 1e-4))
}

fn patchy_row(seed: u64, n_coords: usize) -> Result<CheckRow> {
    let n = 16;
    let mut s = RngStream::new(seed);
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| lo + (hi - lo) * s.uniform()).collect() };
    let (sw, vp, rho, phi) = (draw(0.05, 0.9), draw(2800.0, 3600.0), draw(2100.0, 2500.0), draw(0.2, 0.3));
    let wv = draw(-1.0, 1.0);
    let mut reg = Registry::new();
    register_patchy_rule(&mut reg)?;
    let t = |v: &[f64]| Tensor::new(vec![n], v.to_vec());
    let (phi_t, wv_t) = (t(&phi)?, t(&wv)?);
    let loss = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, g) = gradient(&reg, &[t(x)?], |tp, v| {
            let vp_c = tp.constant(t(&vp)?);
            let rho_c = tp.constant(t(&rho)?);
            let phi_c = tp.constant(phi_t.clone());
            let out = tp.call(
                PATCHY_RULE,
                &[v[0].into(), vp_c.into(), rho_c.into(), phi_c.into(), Input::aux(PatchyConstants::default())],
            )?;
            let w = tp.constant(wv_t.clone());
            tp.inner(out[0], w)
        })?;
        Ok((l, g[0].dense().map(|d| d.data().to_vec()).unwrap_or_default()))
    };
    let (_, g) = loss(&sw)?;
    let coords = probe_coords(&g, n_coords, &mut RngStream::new(seed + 300));
    let e = worst(&coords, &g, |c| {
        let h = 1e-6;
        let at = |d: f64| -> Result<f64> {
            let mut v = sw.clone();
            v[c] += d;
            Ok(loss(&v)?.0)
        };
        Ok((at(h)? - at(-h)?) / (2.0 * h))
    })?;
    Ok(CheckRow::new("rock: patchy pullback", e, 1e-4))
}

fn normal(n: usize, stream: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| stream.normal()).collect()
}

fn nf_row(seed: u64, n_coords: usize) -> Result<CheckRow> {
    let dims = [8, 8];
    let mut s = RngStream::new(seed);
    let p = CouplingFlowParams::new(dims, 1, 4, 2, 1, &mut s)?.randomized(0.1, &mut s);
    let prior = NfPrior::new(p);
    let mut reg = Registry::new();
    register_nf_rule(&mut reg)?;
    let target = Tensor::new(vec![8, 8], normal(64, &mut s))?;
    let loss = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, g) = gradient(&reg, &[Tensor::new(vec![8, 8], z.to_vec())?], |tp, v| {
            let m = tp.call1(NF_RULE, &[v[0].into(), Input::aux(prior.clone())])?;
            let d = tp.constant(target.clone());
            let r = tp.sub(m, d)?;
            let r2 = tp.sum_sq(r);
            Ok(tp.scale(r2, 0.5))
        })?;
        Ok((l, g[0].dense().map(|d| d.data().to_vec()).unwrap_or_default()))
    };
    let z = normal(64, &mut s);
    let (_, g) = loss(&z)?;
    let coords = probe_coords(&g, n_coords, &mut RngStream::new(seed + 400));
    let e = worst(&coords, &g, |c| {
        let h = 1e-2;
        let at = |d: f64| -> Result<f64> {
            let mut v = z.clone();
            v[c] += d;
            Ok(loss(&v)?.0)
        };
        Ok((at(h)? - at(-h)?) / (2.0 * h))
    })?;
    Ok(CheckRow::new("priorflow: NF pullback (f32)", e, 1e-2))
}

fn fno_row(seed: u64, n_coords: usize) -> Result<CheckRow> {
    let n = 8;
    let arch = FnoArch {
        width: 4,
        layers: 2,
        k_max: 3,
        proj_hidden: 8,
    };
    let mut s = RngStream::new(seed);
    let mut w = FnoWeights::new([n, n], arch, vec![1.0, 2.0], &mut s)?;
    let flat: Vec<f32> = w.to_flat().iter().map(|v| v + (0.05 * s.normal()) as f32).collect();
    w.set_flat(&flat)?;
    w.stats = Some(NormStats {
        log_k_mean: 4.5,
        log_k_std: 0.6,
        out_mean: vec![0.1, 0.2],
    });
    let reg = plume_registry(true)?;
    let k = lognormal(n, seed + 1, 100.0)?;
    let cot = Tensor::new(vec![2, n, n], normal(2 * n * n, &mut s))?;
    let loss = |kv: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, g) = gradient(&reg, &[Tensor::new(vec![n, n], kv.to_vec())?], |tp, v| {
            let y = tp.call1(PLUME_ALIAS, &[v[0].into(), Input::aux(w.clone())])?;
            let c = tp.constant(cot.clone());
            tp.inner(y, c)
        })?;
        Ok((l, g[0].dense().map(|d| d.data().to_vec()).unwrap_or_default()))
    };
    let (_, g) = loss(k.data())?;
    let coords = probe_coords(&g, n_coords, &mut RngStream::new(seed + 500));
    let e = worst(&coords, &g, |c| {
        let h = 1e-2 * k.data()[c];
        let at = |d: f64| -> Result<f64> {
            let mut v = k.data().to_vec();
            v[c] += d;
            Ok(loss(&v)?.0)
        };
        Ok((at(h)? - at(-h)?) / (2.0 * h))
    })?;
    Ok(CheckRow::new("surrogate: FNO K-pullback (f32)", e, 1e-2))
}

/// Central-difference checks of every pullback on `n_coords` coordinates:
/// tolerance 1e-4 for the f64 physics, 1e-2 for the f32 networks.
pub fn gradient_battery(seed: u64, n_coords: usize) -> Result<Vec<CheckRow>> {
    Ok(vec![
        wave_row(seed, n_coords)?,
        flow_row(seed, n_coords)?,
        patchy_row(seed, n_coords)?,
        nf_row(seed, n_coords)?,
        fno_row(seed, n_coords)?,
    ])
}
