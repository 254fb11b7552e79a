//! JSON experiment configuration.
//!
//! A config file is merged onto the preset of its scenario, then dotted
//! `key=value` overrides are applied; keys absent from the preset are
//! rejected and the result is type-checked by deserialization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Fwi,
    FwiPrior,
    FlowInvert,
    E2e,
    E2eSurrogate,
}

impl Scenario {
    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Fwi => "fwi",
            Scenario::FwiPrior => "fwi_prior",
            Scenario::FlowInvert => "flow_invert",
            Scenario::E2e => "e2e",
            Scenario::E2eSurrogate => "e2e_surrogate",
        }
    }

    /// Wave-only scenarios invert a velocity model; the others a permeability model.
    pub fn is_wave(self) -> bool {
        matches!(self, Scenario::Fwi | Scenario::FwiPrior)
    }

    pub fn needs_lambda(self) -> bool {
        matches!(self, Scenario::FwiPrior | Scenario::E2e | Scenario::E2eSurrogate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub nz: usize,
    /// Cell size in meters, both directions.
    pub spacing: f64,
}

/// Layered velocity generator, km/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityConfig {
    pub layers: [usize; 2],
    pub top: [f64; 2],
    pub step: [f64; 2],
    pub max_dip: f64,
    /// Gaussian smoothing radius (cells) producing the initial model.
    pub smoothing: f64,
}

/// Blocky two-valued permeability generator, mD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermeabilityConfig {
    pub low: f64,
    pub high: f64,
    pub blocks: [usize; 2],
    pub size: [f64; 2],
    /// Uniform fill of the initial model.
    pub initial: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub n_sources: usize,
    pub n_receivers: usize,
    pub peak_frequency: f64,
    /// Seconds.
    pub record_length: f64,
    /// Sample interval; `null` picks 90% of the stability limit.
    pub dt: Option<f64>,
    /// Colored noise level; `null` for noise-free data.
    pub snr_db: Option<f64>,
    /// Shots drawn (with replacement) per iteration; `null` uses every shot.
    pub shots_per_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveSettings {
    pub space_order: usize,
    pub sponge_width: usize,
    pub sponge_strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSettings {
    pub years: f64,
    pub step_days: f64,
    pub snapshot_years: Vec<f64>,
    /// Leading snapshots inside the monitoring window.
    pub observed_vintages: usize,
    /// Pore volumes per year.
    pub injection_rate: f64,
    pub injection_cell: [usize; 2],
    pub porosity: f64,
    pub gravity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RockSettings {
    /// Baseline velocity (m/s) and density (kg/m³) before injection.
    pub vp: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// GD: largest first-iteration update as a fraction of the largest
    /// initial parameter. ADAM: learning rate.
    pub step: f64,
    pub maxiter: usize,
    pub backtracking: bool,
    /// Velocity bounds (m/s) for model-space FWI.
    pub velocity_bounds: Option<[f64; 2]>,
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub hidden: usize,
    pub depth: usize,
    pub nscales: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub noise_std: f64,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub width: usize,
    pub layers: usize,
    pub k_max: usize,
    pub proj_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_pairs: usize,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub case: Option<PathBuf>,
    pub output: PathBuf,
    pub nf_params: Option<PathBuf>,
    pub fno_weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub grid: GridConfig,
    pub velocity: VelocityConfig,
    pub permeability: PermeabilityConfig,
    pub acquisition: AcquisitionConfig,
    pub wave: WaveSettings,
    pub flow: FlowSettings,
    pub rock: RockSettings,
    /// Weight of `½‖z‖²`; required by the prior-based scenarios.
    pub lambda: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub prior: PriorConfig,
    pub surrogate: SurrogateConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    /// Defaults of a scenario: 60×60 crosswell FWI or the 16×16 CO₂ case.
    pub fn preset(scenario: Scenario) -> Self {
        let wave_case = scenario.is_wave();
        let n = if wave_case { 60 } else { 16 };
        Self {
            scenario,
            seed: 0,
            grid: GridConfig {
                nx: n,
                nz: n,
                spacing: 10.0,
            },
            velocity: VelocityConfig {
                layers: [2, 2],
                top: [1.8, 2.2],
                step: [0.4, 0.8],
                max_dip: 0.1,
                smoothing: 8.0,
            },
            permeability: PermeabilityConfig {
                low: 20.0,
                high: 200.0,
                blocks: [1, 3],
                size: [0.2, 0.5],
                initial: 60.0,
            },
            acquisition: if wave_case {
                AcquisitionConfig {
                    n_sources: 8,
                    n_receivers: 30,
                    peak_frequency: 15.0,
                    record_length: 0.6,
                    dt: None,
                    snr_db: None,
                    shots_per_iter: None,
                }
            } else {
                AcquisitionConfig {
                    n_sources: 4,
                    n_receivers: 16,
                    peak_frequency: 40.0,
                    record_length: 0.15,
                    dt: None,
                    snr_db: None,
                    shots_per_iter: None,
                }
            },
            wave: WaveSettings {
                space_order: 4,
                sponge_width: 20,
                sponge_strength: 0.004,
            },
            flow: FlowSettings {
                years: 18.0,
                step_days: 30.0,
                snapshot_years: vec![10.0, 15.0, 16.0, 17.0, 18.0],
                observed_vintages: 2,
                injection_rate: 0.02,
                injection_cell: [n / 2, 3 * n / 4],
                porosity: 0.25,
                gravity: true,
            },
            rock: RockSettings { vp: 3000.0, rho: 2300.0 },
            lambda: None,
            optimizer: match scenario {
                Scenario::Fwi => OptimizerConfig {
                    kind: OptimizerKind::Gd,
                    step: 0.05,
                    maxiter: 50,
                    backtracking: true,
                    velocity_bounds: Some([1200.0, 4500.0]),
                    snapshot_every: None,
                },
                Scenario::FwiPrior => OptimizerConfig {
                    kind: OptimizerKind::Adam,
                    step: 0.05,
                    maxiter: 50,
                    backtracking: false,
                    velocity_bounds: None,
                    snapshot_every: None,
                },
                _ => OptimizerConfig {
                    kind: OptimizerKind::Adam,
                    step: 0.05,
                    maxiter: 100,
                    backtracking: false,
                    velocity_bounds: None,
                    snapshot_every: None,
                },
            },
            prior: PriorConfig {
                hidden: 8,
                depth: 2,
                nscales: 2,
                epochs: 30,
                batch_size: 25,
                lr: 1e-2,
                noise_std: 0.05,
                n_train: 200,
            },
            surrogate: SurrogateConfig {
                width: 16,
                layers: 4,
                k_max: n.min(16) / 2,
                proj_hidden: 32,
                epochs: 40,
                batch_size: 10,
                lr: 3e-3,
                n_pairs: 350,
                n_train: 300,
            },
            paths: PathsConfig {
                case: None,
                output: PathBuf::from("out"),
                nf_params: None,
                fno_weights: None,
            },
        }
    }

    /// Merge `user` onto the preset of its scenario (`fallback` when the
    /// config names none), apply dotted overrides and validate.
    pub fn resolve(user: &Value, overrides: &[(String, String)], fallback: Option<Scenario>) -> Result<Self> {
        let scenario: Scenario = match user.get("scenario") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("scenario: {e}")))?,
            None => fallback.ok_or_else(|| Error::Config("config lacks a 'scenario' field".into()))?,
        };
        let mut base = serde_json::to_value(Self::preset(scenario)).expect("config serializes");
        merge(&mut base, user, "")?;
        for (key, raw) in overrides {
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut base, key, v)?;
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The preset of `scenario` with overrides applied.
    pub fn defaults(scenario: Scenario, overrides: &[(String, String)]) -> Result<Self> {
        Self::resolve(&Value::Object(Default::default()), overrides, Some(scenario))
    }

    /// Read and resolve a config file.
    pub fn load(path: &Path, overrides: &[(String, String)], fallback: Option<Scenario>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let user: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(&user, overrides, fallback)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Write the resolved config as `resolved_config.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.json");
        fs::write(&path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda must be a finite non-negative number, got {l}"));
            }
        } else if self.scenario.needs_lambda() {
            return bad(format!("scenario {} requires 'lambda'", self.scenario.tag()));
        }
        let g = &self.grid;
        if g.nx < 4 || g.nz < 4 || !(g.spacing > 0.0) {
            return bad(format!("grid {}x{} with spacing {} is too small", g.nx, g.nz, g.spacing));
        }
        let a = &self.acquisition;
        if a.n_sources == 0 || a.n_receivers == 0 || !(a.peak_frequency > 0.0) || !(a.record_length > 0.0) {
            return bad("acquisition needs sources, receivers, a positive frequency and record length".into());
        }
        if a.shots_per_iter == Some(0) {
            return bad("shots_per_iter must be positive".into());
        }
        let f = &self.flow;
        if f.observed_vintages == 0 || f.observed_vintages > f.snapshot_years.len() {
            return bad(format!(
                "observed_vintages {} must lie in 1..={}",
                f.observed_vintages,
                f.snapshot_years.len()
            ));
        }
        if !self.scenario.is_wave() && (f.injection_cell[0] >= g.nx || f.injection_cell[1] >= g.nz) {
            return bad(format!("injection cell {:?} outside the grid", f.injection_cell));
        }
        let k = &self.permeability;
        if !(k.low > 0.0 && k.high > k.low && k.initial > 0.0) {
            return bad("permeability needs 0 < low < high and a positive initial value".into());
        }
        if self.optimizer.maxiter == 0 || !(self.optimizer.step > 0.0) {
            return bad("optimizer needs maxiter >= 1 and a positive step".into());
        }
        if let Some([lo, hi]) = self.optimizer.velocity_bounds {
            if !(lo > 0.0 && hi > lo) {
                return bad(format!("velocity bounds [{lo}, {hi}] are not an interval"));
            }
        }
        let s = &self.surrogate;
        if s.n_train == 0 || s.n_train > s.n_pairs {
            return bad(format!("surrogate split {} of {} pairs", s.n_train, s.n_pairs));
        }
        Ok(())
    }

    /// Every input file the config names must exist.
    pub fn check_inputs(&self) -> Result<()> {
        for p in [&self.paths.case, &self.paths.nf_params, &self.paths.fno_weights]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: &Value, at: &str) -> Result<()> {
    let Value::Object(o) = over else {
        *base = over.clone();
        return Ok(());
    };
    let Value::Object(b) = base else {
        return Err(Error::Config(format!("'{at}' is not a section")));
    };
    for (k, v) in o {
        let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match b.get_mut(k) {
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &key)?,
            Some(slot) => *slot = v.clone(),
            None => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }
    Ok(())
}

fn set_path(base: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut slot = base;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    }
    *slot = v;
    Ok(())
}

/// Parse `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override '{s}' is not key=value"))),
    }
}
