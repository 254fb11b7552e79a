//! Synthetic case bundles: true and initial models, acquisition, observed data.
//!
//! Bundle layout:
//!
//! ```text
//! resolved_config.json  manifest.json
//! truth.sgrd  initial.sgrd  wavelet.sgrd  truth.pgm  initial.pgm
//! observed/vintage_<v>/shot_<s>.ssht
//! porosity.sgrd  vp0.sgrd  rho0.sgrd  true_series/      (flow cases)
//! ```

use std::fs;
use std::path::Path;

use serde_json::json;

use super::config::ExperimentConfig;
use super::images::write_pgm;
use crate::error::{Error, Result};
use crate::fieldio::{read_field, write_field, Field, RngStream};
use crate::flow::{read_series, simulate, write_series, FlowSchedule, PermeabilityField, SaturationSeries};
use crate::priorflow::{blocky_texture, layered_texture, BlockySpec, LayeredSpec};
use crate::rock::{patchy, PatchyConstants, RockState};
use crate::wave::{
    add_colored_noise, forward_model, max_stable_dt, read_shot, write_shot, AcquisitionGeometry, ShotRecord,
    SlownessModel, WaveConfig, Wavelet,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowCase {
    pub schedule: FlowSchedule,
    pub baseline_vp: Field,
    pub baseline_rho: Field,
    /// Simulated plume of the true permeability at every snapshot time.
    pub true_series: SaturationSeries,
}

/// A synthetic experiment. `truth` and `initial` hold squared slowness
/// (s²/m²) for wave cases and permeability (mD) for flow cases.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub config: ExperimentConfig,
    pub truth: Field,
    pub initial: Field,
    pub geometry: AcquisitionGeometry,
    pub wavelet: Wavelet,
    /// One shot list per observed vintage; wave cases have a single vintage.
    pub observed: Vec<Vec<ShotRecord>>,
    pub flow: Option<FlowCase>,
}

impl Case {
    pub fn is_wave(&self) -> bool {
        self.flow.is_none()
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.truth.dims()[0], self.truth.dims()[1]]
    }
}

pub(crate) fn grid_field(cfg: &ExperimentConfig, data: Vec<f64>) -> Result<Field> {
    let g = &cfg.grid;
    Field::new(vec![g.nx, g.nz], vec![g.spacing, g.spacing], vec![0.0, 0.0], data)
}

pub(crate) fn wave_config(cfg: &ExperimentConfig) -> WaveConfig {
    WaveConfig {
        space_order: cfg.wave.space_order,
        sponge_strength: cfg.wave.sponge_strength,
        ..WaveConfig::default()
    }
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<FlowSchedule> {
    let f = &cfg.flow;
    let g = &cfg.grid;
    let phi = Field::filled(vec![g.nx, g.nz], vec![g.spacing, g.spacing], f.porosity)?;
    let s = FlowSchedule {
        total_years: f.years,
        step_days: f.step_days,
        snapshot_years: f.snapshot_years.clone(),
        injection_rate: f.injection_rate,
        gravity: f.gravity,
        ..FlowSchedule::new(phi, f.injection_cell)
    };
    s.validate()?;
    Ok(s)
}

pub(crate) fn layered_spec(cfg: &ExperimentConfig) -> LayeredSpec {
    let v = &cfg.velocity;
    LayeredSpec {
        layers: (v.layers[0], v.layers[1]),
        top: (v.top[0], v.top[1]),
        step: (v.step[0], v.step[1]),
        max_dip: v.max_dip,
    }
}

/// Blocky textures in normalized log-permeability: 0 is `low`, 1 is `high`.
pub(crate) fn blocky_spec(cfg: &ExperimentConfig) -> BlockySpec {
    let k = &cfg.permeability;
    BlockySpec {
        low: 0.0,
        high: 1.0,
        blocks: (k.blocks[0], k.blocks[1]),
        size: (k.size[0], k.size[1]),
    }
}

/// Normalized log-permeability to mD: `low · (high/low)^g`.
pub(crate) fn perm_from_unit(cfg: &ExperimentConfig, g: f64) -> f64 {
    let k = &cfg.permeability;
    k.low * (g * (k.high / k.low).ln()).exp()
}

pub(crate) fn unit_from_perm(cfg: &ExperimentConfig, perm: f64) -> f64 {
    let k = &cfg.permeability;
    (perm / k.low).ln() / (k.high / k.low).ln()
}

/// Velocity in km/s on the config grid, drawn from the layered generator.
pub(crate) fn velocity_sample(cfg: &ExperimentConfig, stream: &mut RngStream) -> Result<Field> {
    let t = layered_texture([cfg.grid.nx, cfg.grid.nz], &layered_spec(cfg), stream)?;
    grid_field(cfg, t.into_data())
}

/// Permeability (mD) on the config grid, drawn from the blocky generator.
pub(crate) fn permeability_sample(cfg: &ExperimentConfig, stream: &mut RngStream) -> Result<Field> {
    let t = blocky_texture([cfg.grid.nx, cfg.grid.nz], &blocky_spec(cfg), stream)?;
    grid_field(cfg, t.data().iter().map(|g| perm_from_unit(cfg, *g)).collect())
}

/// Separable Gaussian smoothing with clamped edges; `sigma` in cells.
pub fn smooth(f: &Field, sigma: f64) -> Result<Field> {
    if sigma <= 0.0 {
        return Ok(f.clone());
    }
    let (nx, nz) = (f.dims()[0], f.dims()[1]);
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = w.iter().sum();
    let pass = |d: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; d.len()];
        for i in 0..nx {
            for j in 0..nz {
                let mut acc = 0.0;
                for (t, wk) in w.iter().enumerate() {
                    let k = t as i64 - r;
                    let (a, b) = if along_x {
                        ((i as i64 + k).clamp(0, nx as i64 - 1) as usize, j)
                    } else {
                        (i, (j as i64 + k).clamp(0, nz as i64 - 1) as usize)
                    };
                    acc += wk * d[a * nz + b];
                }
                out[i * nz + j] = acc / norm;
            }
        }
        out
    };
    let d = pass(&pass(f.data(), true), false);
    f.with_data(d)
}

/// Crosswell geometry: sources spread down the left edge, receivers down the
/// right edge. `v_max` (m/s) bounds the time step when `dt` is unset.
pub(crate) fn crosswell_geometry(cfg: &ExperimentConfig, v_max: f64) -> Result<(AcquisitionGeometry, Wavelet)> {
    let a = &cfg.acquisition;
    let g = &cfg.grid;
    let ext = [(g.nx - 1) as f64 * g.spacing, (g.nz - 1) as f64 * g.spacing];
    let spread = |n: usize, i: usize| ext[1] * (i as f64 + 0.5) / n as f64;
    let sources = (0..a.n_sources).map(|i| [0.0, spread(a.n_sources, i)]).collect();
    let receivers = (0..a.n_receivers).map(|i| [ext[0], spread(a.n_receivers, i)]).collect();
    let dt = match a.dt {
        Some(dt) => dt,
        None => max_stable_dt(cfg.wave.space_order, g.spacing, 1.0 / (v_max * v_max))?,
    };
    let geom = AcquisitionGeometry::new(sources, receivers, a.record_length, dt)?;
    let w = Wavelet::ricker(a.peak_frequency, geom.dt, geom.nt())?;
    Ok((geom, w))
}

/// Largest velocity the inversion may reach, for the stability limit.
fn velocity_ceiling(cfg: &ExperimentConfig, truth_vmax: f64) -> f64 {
    let b = cfg.optimizer.velocity_bounds.map_or(0.0, |b| b[1]);
    (1.25 * truth_vmax).max(b)
}

fn model_data(
    cfg: &ExperimentConfig,
    m: &Field,
    geom: &AcquisitionGeometry,
    w: &Wavelet,
    stream: &mut RngStream,
) -> Result<Vec<ShotRecord>> {
    let model = SlownessModel::new(m.clone(), cfg.wave.sponge_width)?;
    let shots: Vec<usize> = (0..geom.sources.len()).collect();
    let d = forward_model(&model, geom, w, &shots, &wave_config(cfg))?;
    match cfg.acquisition.snr_db {
        Some(snr) => add_colored_noise(&d, w, snr, stream),
        None => Ok(d),
    }
}

/// Velocity (m/s) after CO₂ substitution of saturation `sw`.
pub(crate) fn substituted_velocity(cfg: &ExperimentConfig, sched: &FlowSchedule, sw: &Field) -> Result<Field> {
    let vp0 = sw.with_data(vec![cfg.rock.vp; sw.len()])?;
    let rho0 = sw.with_data(vec![cfg.rock.rho; sw.len()])?;
    let state = RockState::new(sw.clone(), vp0, rho0, sched.porosity.clone())?;
    Ok(patchy(&state, &PatchyConstants::default())?.0)
}

/// Generate a case from `cfg` and its seed. Wave scenarios draw a layered
/// velocity model and start from its smoothed version; the others draw a
/// blocky permeability, start from a uniform fill and observe the
/// time-lapse seismic response of the leading snapshots.
pub fn make_synthetic_case(cfg: &ExperimentConfig) -> Result<Case> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let mut noise = root.child("noise");
    if cfg.scenario.is_wave() {
        let v = velocity_sample(cfg, &mut root.child("truth"))?.map(|v| 1000.0 * v);
        let v0 = smooth(&v, cfg.velocity.smoothing)?;
        let (geom, w) = crosswell_geometry(cfg, velocity_ceiling(cfg, v.max()))?;
        let truth = v.map(|v| 1.0 / (v * v));
        let initial = v0.map(|v| 1.0 / (v * v));
        let d = model_data(cfg, &truth, &geom, &w, &mut noise)?;
        return Ok(Case {
            config: cfg.clone(),
            truth,
            initial,
            geometry: geom,
            wavelet: w,
            observed: vec![d],
            flow: None,
        });
    }
    let sched = schedule(cfg)?;
    let truth = true_permeability(cfg)?;
    let initial = truth.with_data(vec![cfg.permeability.initial; truth.len()])?;
    let series = simulate(&PermeabilityField::new(truth.clone())?, &sched)?;
    let (geom, w) = crosswell_geometry(cfg, 1.2 * cfg.rock.vp)?;
    let observed = series.snapshots[..cfg.flow.observed_vintages]
        .iter()
        .map(|sw| {
            let v = substituted_velocity(cfg, &sched, sw)?;
            model_data(cfg, &v.map(|v| 1.0 / (v * v)), &geom, &w, &mut noise)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Case {
        config: cfg.clone(),
        initial,
        geometry: geom,
        wavelet: w,
        observed,
        flow: Some(FlowCase {
            baseline_vp: truth.with_data(vec![cfg.rock.vp; truth.len()])?,
            baseline_rho: truth.with_data(vec![cfg.rock.rho; truth.len()])?,
            schedule: sched,
            true_series: series,
        }),
        truth,
    })
}

/// The true permeability (mD) a flow case of `cfg` is built on.
pub fn true_permeability(cfg: &ExperimentConfig) -> Result<Field> {
    permeability_sample(cfg, &mut RngStream::new(cfg.seed).child("truth"))
}

/// Write a bundle; the same case always produces the same bytes.
pub fn write_case(dir: &Path, case: &Case) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    case.config.write_resolved(dir)?;
    let mut files = vec!["resolved_config.json".to_string()];
    let mut put = |name: &str, f: &Field| -> Result<()> {
        write_field(f, &dir.join(name))?;
        files.push(name.to_string());
        Ok(())
    };
    put("truth.sgrd", &case.truth)?;
    put("initial.sgrd", &case.initial)?;
    let w = Field::new(vec![case.wavelet.samples.len()], vec![case.geometry.dt], vec![0.0], case.wavelet.samples.clone())?;
    put("wavelet.sgrd", &w)?;
    if let Some(fc) = &case.flow {
        put("porosity.sgrd", &fc.schedule.porosity)?;
        put("vp0.sgrd", &fc.baseline_vp)?;
        put("rho0.sgrd", &fc.baseline_rho)?;
        write_series(&dir.join("true_series"), &fc.true_series)?;
        files.push("true_series/".into());
    }
    for (v, shots) in case.observed.iter().enumerate() {
        for s in shots {
            let name = format!("observed/vintage_{v}/shot_{:03}.ssht", s.source_index);
            write_shot(&dir.join(&name), &case.geometry, s)?;
            files.push(name);
        }
    }
    write_pgm(&dir.join("truth.pgm"), &case.truth)?;
    write_pgm(&dir.join("initial.pgm"), &case.initial)?;
    files.extend(["truth.pgm".to_string(), "initial.pgm".to_string()]);
    let manifest = json!({
        "kind": if case.is_wave() { "wave" } else { "flow" },
        "scenario": case.config.scenario.tag(),
        "seed": case.config.seed,
        "dims": case.dims(),
        "vintages": case.observed.len(),
        "shots": case.geometry.sources.len(),
        "files": files,
    });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json") + "\n").map_err(|e| Error::io(path, e))
}

/// Read a bundle written by [`write_case`].
pub fn read_case(dir: &Path) -> Result<Case> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::Config(format!("{} is not a case bundle (no manifest.json)", dir.display())));
    }
    let config = ExperimentConfig::load(&dir.join("resolved_config.json"), &[], None)?;
    let truth = read_field(&dir.join("truth.sgrd"))?;
    let initial = read_field(&dir.join("initial.sgrd"))?;
    let wavelet = Wavelet::custom(read_field(&dir.join("wavelet.sgrd"))?.into_data())?;
    let mut observed = Vec::new();
    let mut geometry = None;
    for v in 0.. {
        let vdir = dir.join(format!("observed/vintage_{v}"));
        if !vdir.exists() {
            break;
        }
        let mut names: Vec<_> = fs::read_dir(&vdir)
            .map_err(|e| Error::io(&vdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ssht"))
            .collect();
        names.sort();
        let mut shots = Vec::with_capacity(names.len());
        for p in names {
            let (g, s) = read_shot(&p)?;
            geometry.get_or_insert(g);
            shots.push(s);
        }
        observed.push(shots);
    }
    let geometry = geometry.ok_or_else(|| Error::Format(format!("{}: no observed shots", dir.display())))?;
    let flow = if config.scenario.is_wave() {
        None
    } else {
        let mut schedule = schedule(&config)?;
        schedule.porosity = read_field(&dir.join("porosity.sgrd"))?;
        Some(FlowCase {
            schedule,
            baseline_vp: read_field(&dir.join("vp0.sgrd"))?,
            baseline_rho: read_field(&dir.join("rho0.sgrd"))?,
            true_series: read_series(&dir.join("true_series"))?,
        })
    };
    Ok(Case {
        config,
        truth,
        initial,
        geometry,
        wavelet,
        observed,
        flow,
    })
}
