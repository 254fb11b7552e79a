//! Config-driven pipelines: plain FWI, FWI with a learned prior, flow-only
//! permeability inversion and end-to-end inversion through
//! `wave ∘ rock ∘ S ∘ prior`, plus the synthetic cases and training sets
//! they run on.

mod case;
mod config;
pub mod diagnostics;
mod images;


use std::fs;
use std::path::Path;

use serde_json::json;

use crate::adgraph::{gradient, value, Input, PullbackRule, Registry, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fieldio::{write_field, Field, RngStream};
use crate::flow::{simulate, write_series, PermeabilityField, SaturationSeries};
use crate::optim::{run_inversion, subsample_shots, Driver, GdConfig, InversionConfig, Trajectory};
use crate::priorflow::{
    nf_forward, nf_inverse, nf_train, register_nf_rule, CouplingFlowParams, NfPrior, NfTrainConfig, NfTrainResult,
    NF_RULE,
};
use crate::rock::{register_patchy_rule, PatchyConstants, PATCHY_RULE};
use crate::surrogate::{
    fno_train, plume_registry, simulate_pairs, FnoArch, FnoTrainConfig, FnoTrainResult, FnoWeights, PairDataset,
    PLUME_ALIAS,
};
use crate::wave::{fwi_objective, register_wave_rules, ShotRecord, SlownessModel, WaveOperator, WAVE_RULE};

pub use case::{make_synthetic_case, read_case, smooth, true_permeability, write_case, Case, FlowCase};
pub use config::{
    parse_override, AcquisitionConfig, ExperimentConfig, FlowSettings, GridConfig, OptimizerConfig, OptimizerKind,
    PathsConfig, PermeabilityConfig, PriorConfig, RockSettings, Scenario, SurrogateConfig, VelocityConfig,
    WaveSettings,
};
pub use images::{write_field_csv, write_pgm};

pub use case::schedule as flow_schedule;
use case::{grid_field, perm_from_unit, permeability_sample, schedule, unit_from_perm, velocity_sample, wave_config};

/// Saturation above which a cell counts as reached by CO₂.
pub const PLUME_THRESHOLD: f64 = 0.01;
const VINTAGE_RULE: &str = "vintage";

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: Scenario,
    pub seed: u64,
    pub trajectory: Trajectory,
    /// Squared slowness for wave scenarios, permeability (mD) otherwise.
    pub model: Field,
    pub latent: Option<Field>,
    /// Plume predicted from the estimate at every snapshot time, forecast included.
    pub forecast: Option<SaturationSeries>,
    pub metrics: Vec<(String, f64)>,
}

impl RunResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn iterations(&self) -> usize {
        self.trajectory.records.len().saturating_sub(1)
    }

    pub fn result_line(&self) -> String {
        format!(
            "RESULT scenario={} loss_final={:e} iters={} seed={}",
            self.scenario.tag(),
            self.trajectory.final_loss(),
            self.iterations(),
            self.seed
        )
    }

    /// Resolved config, logs, metrics, fields and images into `dir`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.write_resolved(dir)?;
        let put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        let mut files = vec!["resolved_config.json", "trajectory.csv", "timing.csv", "metrics.csv", "model.sgrd", "model.pgm"];
        put("trajectory.csv", self.trajectory.to_csv())?;
        put("timing.csv", self.trajectory.timing_csv())?;
        let mut m = String::from("name,value\n");
        for (k, v) in &self.metrics {
            m.push_str(&format!("{k},{v:e}\n"));
        }
        put("metrics.csv", m)?;
        write_field(&self.model, &dir.join("model.sgrd"))?;
        write_pgm(&dir.join("model.pgm"), &self.model)?;
        if let Some(z) = &self.latent {
            write_field(z, &dir.join("latent.sgrd"))?;
            files.push("latent.sgrd");
        }
        let mut extra = Vec::new();
        if let Some(f) = &self.forecast {
            write_series(&dir.join("forecast"), f)?;
            files.push("forecast/");
            for (i, s) in f.snapshots.iter().enumerate() {
                let name = format!("forecast/snapshot_{i:03}.pgm");
                write_pgm(&dir.join(&name), s)?;
                extra.push(name);
            }
        }
        let manifest = json!({
            "scenario": self.scenario.tag(),
            "seed": self.seed,
            "iterations": self.iterations(),
            "loss_initial": self.trajectory.initial_loss(),
            "loss_final": self.trajectory.final_loss(),
            "aborted": self.trajectory.aborted,
            "metrics": self.metrics.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<serde_json::Map<_, _>>(),
            "files": files.iter().map(|s| s.to_string()).chain(extra).collect::<Vec<_>>(),
        });
        put("manifest.json", serde_json::to_string_pretty(&manifest).expect("json") + "\n")
    }
}

fn rel_error(x: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Cells reached by CO₂ in any snapshot of the true plume.
pub fn plume_mask(series: &SaturationSeries) -> Vec<bool> {
    let n = series.snapshots.first().map_or(0, |s| s.len());
    (0..n)
        .map(|i| series.snapshots.iter().any(|s| s.data()[i] > PLUME_THRESHOLD))
        .collect()
}

/// Pearson correlation over the cells where `mask` is set.
pub fn masked_correlation(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let idx: Vec<usize> = (0..a.len()).filter(|&i| mask[i]).collect();
    let n = idx.len() as f64;
    if idx.len() < 2 {
        return f64::NAN;
    }
    let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt()
}

fn need_wave(case: &Case) -> Result<()> {
    if !case.is_wave() {
        return Err(Error::Config("this scenario needs a velocity (wave) case bundle".into()));
    }
    Ok(())
}

fn need_flow(case: &Case) -> Result<&FlowCase> {
    case.flow
        .as_ref()
        .ok_or_else(|| Error::Config("this scenario needs a permeability (flow) case bundle".into()))
}

fn need_lambda(cfg: &ExperimentConfig) -> Result<f64> {
    cfg.lambda
        .ok_or_else(|| Error::Config(format!("scenario {} requires 'lambda'", cfg.scenario.tag())))
}

fn check_prior(nf: &CouplingFlowParams, case: &Case) -> Result<()> {
    if nf.dims() != case.dims() {
        return Err(Error::Shape(format!(
            "prior trained on {:?} cannot parameterize a {:?} model",
            nf.dims(),
            case.dims()
        )));
    }
    Ok(())
}

/// Shot indices used at `iteration`: all, or a seeded draw with replacement.
fn shots_at(cfg: &ExperimentConfig, n: usize, iteration: usize) -> Result<Vec<usize>> {
    match cfg.acquisition.shots_per_iter {
        Some(b) => subsample_shots(n, b, &mut RngStream::new(cfg.seed).child_indexed("shots", iteration as u64)),
        None => Ok((0..n).collect()),
    }
}

fn pick(shots: &[ShotRecord], idx: &[usize]) -> Vec<ShotRecord> {
    idx.iter().map(|&i| shots[i].clone()).collect()
}

fn data_tensor(shots: &[ShotRecord]) -> Result<Tensor> {
    let (nr, nt) = (shots[0].n_receivers, shots[0].nt);
    Tensor::new(vec![shots.len(), nr, nt], shots.iter().flat_map(|s| s.data.iter().copied()).collect())
}

fn adam(cfg: &ExperimentConfig) -> InversionConfig {
    InversionConfig {
        snapshot_every: cfg.optimizer.snapshot_every,
        ..InversionConfig::new(Driver::Adam {
            lr: cfg.optimizer.step,
            maxiter: cfg.optimizer.maxiter,
        })
    }
}

fn finish(result: RunResult, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunResult> {
    if let Some(dir) = out {
        result.write(dir, cfg)?;
    }
    Ok(result)
}

/// Model-space FWI: minimize `½‖F(m)q − d‖²` from the initial model.
///
/// GD steps are fixed at `step · max|m₀| / max|∇₀|`, optionally with
/// backtracking; velocity bounds become a box on m.
pub fn run_fwi(cfg: &ExperimentConfig, case: &Case, out: Option<&Path>) -> Result<RunResult> {
    need_wave(case)?;
    let wcfg = wave_config(cfg);
    let sponge = cfg.wave.sponge_width;
    let obs = &case.observed[0];
    let eval = |it: usize, x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let model = SlownessModel::new(case.truth.with_data(x.to_vec())?, sponge)?;
        let d = pick(obs, &shots_at(cfg, obs.len(), it)?);
        let (l, g) = fwi_objective(&model, &d, &case.geometry, &case.wavelet, &wcfg)?;
        Ok((l, g.into_data()))
    };
    let x0 = case.initial.data().to_vec();
    let first = eval(0, &x0)?;
    let mut inv = match cfg.optimizer.kind {
        OptimizerKind::Gd => {
            let gmax = first.1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let xmax = x0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let step = if gmax > 0.0 { cfg.optimizer.step * xmax / gmax } else { cfg.optimizer.step };
            InversionConfig::new(Driver::Gd(GdConfig {
                backtracking: cfg.optimizer.backtracking,
                ..GdConfig::new(step, cfg.optimizer.maxiter)
            }))
        }
        OptimizerKind::Adam => adam(cfg),
    };
    inv.snapshot_every = cfg.optimizer.snapshot_every;
    if let Some([lo, hi]) = cfg.optimizer.velocity_bounds {
        inv.bounds = Some((vec![1.0 / (hi * hi); x0.len()], vec![1.0 / (lo * lo); x0.len()]));
    }
    let mut first = Some(first);
    let traj = run_inversion(
        |it, x| match (it, first.take()) {
            (0, Some(f)) => Ok(f),
            _ => eval(it, x),
        },
        &x0,
        &inv,
    )?;
    let model = case.truth.with_data(traj.x.clone())?;
    let metrics = vec![
        ("misfit_initial".into(), traj.initial_loss()),
        ("misfit_final".into(), traj.final_loss()),
        ("misfit_reduction".into(), 1.0 - traj.final_loss() / traj.initial_loss()),
        ("model_error_initial".into(), rel_error(&x0, case.truth.data())),
        ("model_error_final".into(), rel_error(model.data(), case.truth.data())),
    ];
    finish(
        RunResult {
            scenario: cfg.scenario,
            seed: cfg.seed,
            trajectory: traj,
            model,
            latent: None,
            forecast: None,
            metrics,
        },
        cfg,
        out,
    )
}

/// Squared slowness from velocity in km/s, on the tape.
fn slowness_from_kms(tp: &mut Tape<'_>, v: Var) -> Var {
    let inv = tp.powf(v, -2.0);
    tp.scale(inv, 1e-6)
}

/// FWI through the prior: minimize `½‖F(G(z))q − d‖² + ½λ‖z‖²` over z with
/// ADAM, starting from `z₀ = G⁻¹(m₀)`. The prior models velocity in km/s.
pub fn run_fwi_prior(
    cfg: &ExperimentConfig,
    case: &Case,
    nf: &CouplingFlowParams,
    out: Option<&Path>,
) -> Result<RunResult> {
    need_wave(case)?;
    check_prior(nf, case)?;
    let lambda = need_lambda(cfg)?;
    let mut reg = Registry::new();
    register_wave_rules(&mut reg)?;
    register_nf_rule(&mut reg)?;
    let prior = NfPrior::new(nf.clone());
    let wcfg = wave_config(cfg);
    let template = SlownessModel::new(case.initial.clone(), cfg.wave.sponge_width)?;
    let q = Tensor::new(vec![case.wavelet.samples.len()], case.wavelet.samples.clone())?;
    let obs = &case.observed[0];
    let dims = case.dims().to_vec();
    let eval = |it: usize, z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let idx = shots_at(cfg, obs.len(), it)?;
        let d = data_tensor(&pick(obs, &idx))?;
        let op = WaveOperator::for_model(&template, case.geometry.clone(), idx, wcfg.clone());
        let (l, g) = gradient(&reg, &[Tensor::new(dims.clone(), z.to_vec())?], |tp, v| {
            let vel = tp.call1(NF_RULE, &[v[0].into(), Input::aux(prior.clone())])?;
            let m = slowness_from_kms(tp, vel);
            let qc = tp.constant(q.clone());
            let pred = tp.call1(WAVE_RULE, &[Input::aux(op), m.into(), qc.into()])?;
            let dc = tp.constant(d);
            let r = tp.sub(pred, dc)?;
            let r2 = tp.sum_sq(r);
            let misfit = tp.scale(r2, 0.5);
            let z2 = tp.sum_sq(v[0]);
            let pen = tp.scale(z2, 0.5 * lambda);
            tp.add(misfit, pen)
        })?;
        Ok((l, g[0].dense().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; z.len()])))
    };
    let v0 = case.initial.map(|m| 1e-3 / m.sqrt());
    let (z0, _) = nf_inverse(&v0, nf)?;
    let traj = run_inversion(eval, z0.data(), &adam(cfg))?;
    let z = case.initial.with_data(traj.x.clone())?;
    let (vel, _) = nf_forward(&z, nf)?;
    let model = case.initial.with_data(vel.data().iter().map(|v| 1e-6 / (v * v)).collect())?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let metrics = vec![
        ("loss_initial".into(), traj.initial_loss()),
        ("loss_final".into(), traj.final_loss()),
        ("model_error_initial".into(), rel_error(case.initial.data(), case.truth.data())),
        ("model_error_final".into(), rel_error(model.data(), case.truth.data())),
        ("latent_norm_initial".into(), norm(z0.data())),
        ("latent_norm_final".into(), norm(z.data())),
    ];
    finish(
        RunResult {
            scenario: cfg.scenario,
            seed: cfg.seed,
            trajectory: traj,
            model,
            latent: Some(z),
            forecast: None,
            metrics,
        },
        cfg,
        out,
    )
}

/// Registry for the permeability scenarios: both plume operators (alias
/// `S` bound per `surrogate`), wave, patchy, prior and vintage selection.
pub fn e2e_registry(surrogate: bool) -> Result<Registry> {
    let mut reg = plume_registry(surrogate)?;
    register_wave_rules(&mut reg)?;
    register_patchy_rule(&mut reg)?;
    register_nf_rule(&mut reg)?;
    reg.register(vintage_rule())?;
    Ok(reg)
}

/// `vintage(x [n, ...], Aux(i)) -> x[i]`.
fn vintage_rule() -> PullbackRule {
    fn parts(a: &[crate::adgraph::Arg]) -> Result<(&Tensor, usize, usize)> {
        let x = a[0].tensor()?;
        let i = *a[1].aux::<usize>()?;
        let n = *x.shape().first().unwrap_or(&0);
        if i >= n {
            return Err(Error::Shape(format!("vintage {i} of {n}")));
        }
        Ok((x, i, x.len() / n))
    }
    PullbackRule::from_fns(
        VINTAGE_RULE,
        |a| {
            let (x, i, per) = parts(a)?;
            Ok(vec![Tensor::new(x.shape()[1..].to_vec(), x.data()[i * per..(i + 1) * per].to_vec())?])
        },
        |a, _, cot| {
            let (x, i, per) = parts(a)?;
            let mut g = vec![0.0; x.len()];
            g[i * per..(i + 1) * per].copy_from_slice(cot[0].data());
            Ok(vec![
                crate::adgraph::Cotangent::Dense(Tensor::new(x.shape().to_vec(), g)?),
                crate::adgraph::Cotangent::NoTangent,
            ])
        },
    )
}

/// Flow-only inversion: fit the observed saturation snapshots directly,
/// optimizing ln K with ADAM.
pub fn run_flow_invert(cfg: &ExperimentConfig, case: &Case, out: Option<&Path>) -> Result<RunResult> {
    let fc = need_flow(case)?;
    let reg = e2e_registry(false)?;
    let n_obs = cfg.flow.observed_vintages;
    let dims = case.dims();
    let p = dims[0] * dims[1];
    let nv = fc.true_series.snapshots.len();
    let mut obs = vec![0.0; nv * p];
    let mut weight = vec![0.0; nv * p];
    for (i, s) in fc.true_series.snapshots.iter().take(n_obs).enumerate() {
        obs[i * p..(i + 1) * p].copy_from_slice(s.data());
        weight[i * p..(i + 1) * p].iter_mut().for_each(|w| *w = 1.0);
    }
    let shape = vec![nv, dims[0], dims[1]];
    let (obs, weight) = (Tensor::new(shape.clone(), obs)?, Tensor::new(shape, weight)?);
    let ctx = Input::aux(fc.schedule.clone());
    let eval = |_: usize, x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, g) = gradient(&reg, &[Tensor::new(dims.to_vec(), x.to_vec())?], |tp, v| {
            let k = tp.exp(v[0]);
            let s = tp.call1(PLUME_ALIAS, &[k.into(), ctx.clone()])?;
            let o = tp.constant(obs.clone());
            let w = tp.constant(weight.clone());
            let r = tp.sub(s, o)?;
            let r = tp.mul(r, w)?;
            let r2 = tp.sum_sq(r);
            Ok(tp.scale(r2, 0.5))
        })?;
        Ok((l, g[0].dense().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()])))
    };
    let x0: Vec<f64> = case.initial.data().iter().map(|k| k.ln()).collect();
    let mut inv = adam(cfg);
    inv.bounds = Some((vec![(1e-2f64).ln(); p], vec![(1e4f64).ln(); p]));
    let traj = run_inversion(eval, &x0, &inv)?;
    let k = case.initial.with_data(traj.x.iter().map(|v| v.exp()).collect())?;
    let forecast = simulate(&PermeabilityField::new(k.clone())?, &fc.schedule)?;
    let metrics = flow_metrics(case, fc, &traj, &k, &forecast);
    finish(
        RunResult {
            scenario: cfg.scenario,
            seed: cfg.seed,
            trajectory: traj,
            model: k,
            latent: None,
            forecast: Some(forecast),
            metrics,
        },
        cfg,
        out,
    )
}

fn flow_metrics(
    case: &Case,
    fc: &FlowCase,
    traj: &Trajectory,
    k: &Field,
    forecast: &SaturationSeries,
) -> Vec<(String, f64)> {
    let mask = plume_mask(&fc.true_series);
    let n_obs = case.config.flow.observed_vintages;
    let flat = |s: &[Field]| s.iter().flat_map(|f| f.data().to_vec()).collect::<Vec<_>>();
    let mut m = vec![
        ("loss_initial".to_string(), traj.initial_loss()),
        ("loss_final".into(), traj.final_loss()),
        ("plume_correlation".into(), masked_correlation(case.truth.data(), k.data(), &mask)),
        ("plume_cells".into(), mask.iter().filter(|m| **m).count() as f64),
        (
            "monitoring_plume_error".into(),
            rel_error(&flat(&forecast.snapshots[..n_obs]), &flat(&fc.true_series.snapshots[..n_obs])),
        ),
    ];
    if n_obs < forecast.snapshots.len() {
        m.push((
            "forecast_plume_error".into(),
            rel_error(&flat(&forecast.snapshots[n_obs..]), &flat(&fc.true_series.snapshots[n_obs..])),
        ));
    }
    m
}

/// The traced end-to-end objective. The plume operator is reached only
/// through the alias, so the same expression serves the simulator and the
/// surrogate; `s_ctx` is whichever static context the bound rule expects.
#[allow(clippy::too_many_arguments)]
fn e2e_loss(
    tp: &mut Tape<'_>,
    z: Var,
    prior: &NfPrior,
    s_ctx: &Input,
    rock: &[Tensor; 3],
    ops: &[WaveOperator],
    q: &Tensor,
    data: &[Tensor],
    ln_k: (f64, f64),
    lambda: f64,
) -> Result<Var> {
    let g = tp.call1(NF_RULE, &[z.into(), Input::aux(prior.clone())])?;
    let lnk = tp.scale(g, ln_k.1);
    let lnk = tp.shift(lnk, ln_k.0);
    let k = tp.exp(lnk);
    let sat = tp.call1(PLUME_ALIAS, &[k.into(), s_ctx.clone()])?;
    let z2 = tp.sum_sq(z);
    let mut loss = tp.scale(z2, 0.5 * lambda);
    let [vp0, rho0, phi] = rock.clone().map(|t| tp.constant(t));
    let qc = tp.constant(q.clone());
    for (i, (op, d)) in ops.iter().zip(data).enumerate() {
        let sw = tp.call1(VINTAGE_RULE, &[sat.into(), Input::aux(i)])?;
        let out = tp.call(
            PATCHY_RULE,
            &[sw.into(), vp0.into(), rho0.into(), phi.into(), Input::aux(PatchyConstants::default())],
        )?;
        let m = tp.powf(out[0], -2.0);
        let pred = tp.call1(WAVE_RULE, &[Input::aux(op.clone()), m.into(), qc.into()])?;
        let dc = tp.constant(d.clone());
        let r = tp.sub(pred, dc)?;
        let r2 = tp.sum_sq(r);
        let misfit = tp.scale(r2, 0.5);
        loss = tp.add(loss, misfit)?;
    }
    Ok(loss)
}

/// End-to-end inversion `min ½Σᵢ‖F(R(S(G(z)))ᵢ) − dᵢ‖² + ½λ‖z‖²` over the
/// observed vintages, with `K = low·(high/low)^G(z)`. The e2e scenario binds
/// `S` to the simulator, e2e_surrogate to the trained operator.
pub fn run_e2e(
    cfg: &ExperimentConfig,
    case: &Case,
    nf: &CouplingFlowParams,
    fno: Option<&FnoWeights>,
    out: Option<&Path>,
) -> Result<RunResult> {
    let fc = need_flow(case)?;
    check_prior(nf, case)?;
    let lambda = need_lambda(cfg)?;
    let surrogate = cfg.scenario == Scenario::E2eSurrogate;
    let s_ctx = if surrogate {
        let w = fno.ok_or_else(|| {
            Error::Config("scenario e2e_surrogate needs trained surrogate weights (paths.fno_weights)".into())
        })?;
        if w.dims != case.dims() || w.times != fc.schedule.snapshot_years {
            return Err(Error::Shape(format!(
                "surrogate trained for {:?} at years {:?}, case is {:?} at {:?}",
                w.dims,
                w.times,
                case.dims(),
                fc.schedule.snapshot_years
            )));
        }
        Input::aux(w.clone())
    } else {
        Input::aux(fc.schedule.clone())
    };
    let reg = e2e_registry(surrogate)?;
    let prior = NfPrior::new(nf.clone());
    let dims = case.dims();
    let rock = [
        Tensor::new(dims.to_vec(), fc.baseline_vp.data().to_vec())?,
        Tensor::new(dims.to_vec(), fc.baseline_rho.data().to_vec())?,
        Tensor::new(dims.to_vec(), fc.schedule.porosity.data().to_vec())?,
    ];
    let template = SlownessModel::from_velocity(&fc.baseline_vp, cfg.wave.sponge_width)?;
    let q = Tensor::new(vec![case.wavelet.samples.len()], case.wavelet.samples.clone())?;
    let kc = &cfg.permeability;
    let ln_k = (kc.low.ln(), (kc.high / kc.low).ln());
    let n_src = case.geometry.sources.len();
    let wcfg = wave_config(cfg);
    let eval = |it: usize, z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let idx = shots_at(cfg, n_src, it)?;
        let op = WaveOperator::for_model(&template, case.geometry.clone(), idx.clone(), wcfg.clone());
        let ops = vec![op; case.observed.len()];
        let data = case
            .observed
            .iter()
            .map(|v| data_tensor(&pick(v, &idx)))
            .collect::<Result<Vec<_>>>()?;
        let (l, g) = gradient(&reg, &[Tensor::new(dims.to_vec(), z.to_vec())?], |tp, v| {
            e2e_loss(tp, v[0], &prior, &s_ctx, &rock, &ops, &q, &data, ln_k, lambda)
        })?;
        Ok((l, g[0].dense().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; z.len()])))
    };
    let g0 = case.initial.map(|k| unit_from_perm(cfg, k));
    let (z0, _) = nf_inverse(&g0, nf)?;
    let traj = run_inversion(eval, z0.data(), &adam(cfg))?;
    let z = case.initial.with_data(traj.x.clone())?;
    let (g, _) = nf_forward(&z, nf)?;
    let k = case.initial.with_data(g.data().iter().map(|v| perm_from_unit(cfg, *v)).collect())?;

    // Forecast with the bound operator, through the same alias.
    let mut sat = Vec::new();
    value(&reg, &[Tensor::new(dims.to_vec(), k.data().to_vec())?], |tp, v| {
        let s = tp.call1(PLUME_ALIAS, &[v[0].into(), s_ctx.clone()])?;
        sat = tp.value(s).data().to_vec();
        Ok(tp.constant(Tensor::scalar(0.0)))
    })?;
    let p = dims[0] * dims[1];
    let forecast = SaturationSeries {
        times: fc.schedule.snapshot_years.clone(),
        snapshots: sat.chunks(p).map(|c| k.with_data(c.to_vec())).collect::<Result<_>>()?,
    };
    let mut metrics = flow_metrics(case, fc, &traj, &k, &forecast);
    metrics.push(("latent_norm_final".into(), z.data().iter().map(|v| v * v).sum::<f64>().sqrt()));
    finish(
        RunResult {
            scenario: cfg.scenario,
            seed: cfg.seed,
            trajectory: traj,
            model: k,
            latent: Some(z),
            forecast: Some(forecast),
            metrics,
        },
        cfg,
        out,
    )
}

/// Training set of the prior: layered velocities (km/s) for wave scenarios,
/// blocky normalized log-permeabilities otherwise. Independent of the truth.
pub fn prior_corpus(cfg: &ExperimentConfig) -> Result<Vec<Field>> {
    let root = RngStream::new(cfg.seed).child("prior-corpus");
    (0..cfg.prior.n_train as u64)
        .map(|i| {
            let mut s = root.child_indexed("sample", i);
            if cfg.scenario.is_wave() {
                velocity_sample(cfg, &mut s)
            } else {
                let k = permeability_sample(cfg, &mut s)?;
                grid_field(cfg, k.data().iter().map(|v| unit_from_perm(cfg, *v)).collect())
            }
        })
        .collect()
}

pub fn train_prior(cfg: &ExperimentConfig) -> Result<NfTrainResult> {
    let p = &cfg.prior;
    let hyper = NfTrainConfig {
        hidden: p.hidden,
        depth: p.depth,
        nscales: p.nscales,
        epochs: p.epochs,
        batch_size: p.batch_size,
        lr: p.lr,
        noise_std: p.noise_std,
    };
    nf_train(&prior_corpus(cfg)?, &hyper, &RngStream::new(cfg.seed).child("prior-train"))
}

/// Simulator pairs `(K, plume)` with K drawn from the permeability generator.
pub fn surrogate_dataset(cfg: &ExperimentConfig) -> Result<PairDataset> {
    let root = RngStream::new(cfg.seed).child("surrogate-k");
    let ks = (0..cfg.surrogate.n_pairs as u64)
        .map(|i| permeability_sample(cfg, &mut root.child_indexed("sample", i)))
        .collect::<Result<Vec<_>>>()?;
    PairDataset::new(simulate_pairs(ks, &schedule(cfg)?)?, cfg.surrogate.n_train)
}

pub fn train_surrogate(cfg: &ExperimentConfig, data: &PairDataset) -> Result<FnoTrainResult> {
    let s = &cfg.surrogate;
    let hyper = FnoTrainConfig {
        arch: FnoArch {
            width: s.width,
            layers: s.layers,
            k_max: s.k_max,
            proj_hidden: s.proj_hidden,
        },
        epochs: s.epochs,
        batch_size: s.batch_size,
        lr: s.lr,
        ..FnoTrainConfig::default()
    };
    fno_train(data, &hyper, &RngStream::new(cfg.seed).child("surrogate-train"))
}
