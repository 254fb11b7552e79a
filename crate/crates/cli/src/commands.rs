use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use plumeinv::experiments::{
    self, diagnostics, make_synthetic_case, parse_override, read_case, true_permeability, write_case, write_pgm,
    Case, ExperimentConfig, Scenario,
};
use plumeinv::flow::{simulate, write_series, PermeabilityField};
use plumeinv::priorflow::{read_params, write_params};
use plumeinv::surrogate::{read_weights, write_dataset, write_weights};
use plumeinv::{CouplingFlowParams, FnoWeights};

use crate::{Command, Common};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] plumeinv::Error),
    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::MakeCase(c) => make_case(c),
        Command::Fwi(c) => invert(c, &[Scenario::Fwi]),
        Command::FwiPrior(c) => invert(c, &[Scenario::FwiPrior]),
        Command::FlowInvert(c) => invert(c, &[Scenario::FlowInvert]),
        Command::E2e(c) => invert(c, &[Scenario::E2e, Scenario::E2eSurrogate]),
        Command::FlowSim(c) => flow_sim(c),
        Command::TrainNf(c) => train_nf(c),
        Command::TrainFno(c) => train_fno(c),
        Command::DotTest(c) => dot_test(c),
        Command::GradTest(c) => grad_test(c),
    }
}

/// Resolve the config (or the preset of `fallback` without one), with
/// `--set`, `--seed` and `--out` applied.
fn config(c: &Common, fallback: Scenario) -> Result<ExperimentConfig> {
    let overrides = c
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<plumeinv::Result<Vec<_>>>()?;
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p, &overrides, Some(fallback))?,
        None => ExperimentConfig::defaults(fallback, &overrides)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.output = o.clone();
    }
    cfg.check_inputs()?;
    Ok(cfg)
}

/// The output directory, which must not lie inside the input case bundle.
fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.paths.output.clone();
    if let Some(case) = &cfg.paths.case {
        let abs = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
        let case = abs(case);
        let mut probe = out.clone();
        while !probe.exists() {
            match probe.parent() {
                Some(p) if !p.as_os_str().is_empty() => probe = p.to_path_buf(),
                _ => break,
            }
        }
        if probe.exists() && abs(&probe).starts_with(&case) {
            return Err(CliError::Usage(format!(
                "output {} lies inside the input case bundle {}",
                out.display(),
                case.display()
            )));
        }
    }
    fs::create_dir_all(&out).map_err(|e| plumeinv::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    Ok(out)
}

fn load_case(cfg: &ExperimentConfig) -> Result<Case> {
    let case = match &cfg.paths.case {
        Some(p) => {
            info!("reading case bundle {}", p.display());
            read_case(p)?
        }
        None => {
            info!("generating a synthetic {} case", cfg.scenario.tag());
            make_synthetic_case(cfg)?
        }
    };
    if case.is_wave() != cfg.scenario.is_wave() {
        return Err(CliError::Usage(format!(
            "scenario {} needs a {} case, the bundle holds a {} case",
            cfg.scenario.tag(),
            kind(cfg.scenario.is_wave()),
            kind(case.is_wave())
        )));
    }
    if case.dims() != [cfg.grid.nx, cfg.grid.nz] {
        return Err(plumeinv::Error::Shape(format!(
            "case grid {:?} differs from the configured {}x{}",
            case.dims(),
            cfg.grid.nx,
            cfg.grid.nz
        ))
        .into());
    }
    Ok(case)
}

fn kind(wave: bool) -> &'static str {
    if wave {
        "velocity"
    } else {
        "permeability"
    }
}

fn write_text(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        plumeinv::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn curve_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn make_case(c: &Common) -> Result<()> {
    let cfg = config(c, Scenario::Fwi)?;
    let out = output_dir(&cfg)?;
    let case = make_synthetic_case(&cfg)?;
    write_case(&out, &case)?;
    println!(
        "CASE scenario={} kind={} vintages={} shots={} dir={}",
        cfg.scenario.tag(),
        kind(case.is_wave()),
        case.observed.len(),
        case.geometry.sources.len(),
        out.display()
    );
    Ok(())
}

fn prior(cfg: &ExperimentConfig, out: &Path) -> Result<CouplingFlowParams> {
    match &cfg.paths.nf_params {
        Some(p) => Ok(read_params(p)?),
        None => {
            info!("no paths.nf_params given, training a prior on {} samples", cfg.prior.n_train);
            let r = experiments::train_prior(cfg)?;
            write_params(&r.params, &out.join("nf_params.snf"))?;
            Ok(r.params)
        }
    }
}

fn surrogate(cfg: &ExperimentConfig) -> Result<Option<FnoWeights>> {
    Ok(match (&cfg.paths.fno_weights, cfg.scenario) {
        (Some(p), Scenario::E2eSurrogate) => Some(read_weights(p)?),
        (None, Scenario::E2eSurrogate) => {
            return Err(CliError::Usage(
                "scenario e2e_surrogate needs paths.fno_weights (train them with train-fno)".into(),
            ))
        }
        _ => None,
    })
}

fn invert(c: &Common, allowed: &[Scenario]) -> Result<()> {
    let cfg = config(c, allowed[0])?;
    if !allowed.contains(&cfg.scenario) {
        let tags: Vec<_> = allowed.iter().map(|s| s.tag()).collect();
        return Err(CliError::Usage(format!(
            "config scenario {} does not match this command (expects {})",
            cfg.scenario.tag(),
            tags.join(" or ")
        )));
    }
    let out = output_dir(&cfg)?;
    cfg.write_resolved(&out)?;
    let fno = surrogate(&cfg)?;
    let case = load_case(&cfg)?;
    let dir = Some(out.as_path());
    let result = match cfg.scenario {
        Scenario::Fwi => experiments::run_fwi(&cfg, &case, dir)?,
        Scenario::FwiPrior => experiments::run_fwi_prior(&cfg, &case, &prior(&cfg, &out)?, dir)?,
        Scenario::FlowInvert => experiments::run_flow_invert(&cfg, &case, dir)?,
        Scenario::E2e | Scenario::E2eSurrogate => {
            experiments::run_e2e(&cfg, &case, &prior(&cfg, &out)?, fno.as_ref(), dir)?
        }
    };
    for (k, v) in &result.metrics {
        info!("{k} = {v:e}");
    }
    println!("{}", result.result_line());
    Ok(())
}

fn flow_sim(c: &Common) -> Result<()> {
    let cfg = config(c, Scenario::FlowInvert)?;
    let out = output_dir(&cfg)?;
    cfg.write_resolved(&out)?;
    let (k, sched) = match &cfg.paths.case {
        Some(_) => {
            let case = load_case(&cfg)?;
            let fc = case.flow.ok_or_else(|| CliError::Usage("flow-sim needs a permeability case".into()))?;
            (case.truth, fc.schedule)
        }
        None => (true_permeability(&cfg)?, experiments::flow_schedule(&cfg)?),
    };
    let series = simulate(&PermeabilityField::new(k.clone())?, &sched)?;
    write_series(&out.join("series"), &series)?;
    write_pgm(&out.join("permeability.pgm"), &k)?;
    for (t, s) in series.times.iter().zip(&series.snapshots) {
        write_pgm(&out.join(format!("series/saturation_{t}yr.pgm")), s)?;
    }
    let last = series.snapshots.last().map_or(0.0, |s| s.data().iter().sum::<f64>());
    println!(
        "RESULT scenario=flow_sim loss_final={:e} iters={} seed={}",
        last,
        series.snapshots.len(),
        cfg.seed
    );
    Ok(())
}

fn train_nf(c: &Common) -> Result<()> {
    let cfg = config(c, Scenario::FwiPrior)?;
    let out = output_dir(&cfg)?;
    cfg.write_resolved(&out)?;
    let r = experiments::train_prior(&cfg)?;
    write_params(&r.params, &out.join("nf_params.snf"))?;
    write_text(
        &out.join("nll.csv"),
        curve_csv("epoch,nll", r.curve.iter().enumerate().map(|(i, v)| format!("{i},{v:e}"))),
    )?;
    info!("nll {} -> {}", r.initial_nll, r.final_nll);
    println!(
        "RESULT scenario=train_nf loss_final={:e} iters={} seed={}",
        r.final_nll,
        r.curve.len(),
        cfg.seed
    );
    Ok(())
}

fn train_fno(c: &Common) -> Result<()> {
    let cfg = config(c, Scenario::E2eSurrogate)?;
    let out = output_dir(&cfg)?;
    cfg.write_resolved(&out)?;
    info!("simulating {} training pairs", cfg.surrogate.n_pairs);
    let data = experiments::surrogate_dataset(&cfg)?;
    write_dataset(&out.join("dataset"), &data)?;
    let r = experiments::train_surrogate(&cfg, &data)?;
    write_weights(&r.weights, &out.join("fno_weights.sfno"))?;
    write_text(
        &out.join("training.csv"),
        curve_csv(
            "epoch,train_loss,held_out_rel_l2",
            r.train_curve
                .iter()
                .zip(&r.held_out_curve)
                .enumerate()
                .map(|(i, (a, b))| format!("{i},{a:e},{b:e}")),
        ),
    )?;
    println!(
        "RESULT scenario=train_fno loss_final={:e} iters={} seed={}",
        r.held_out_curve.last().copied().unwrap_or(f64::NAN),
        r.train_curve.len(),
        cfg.seed
    );
    Ok(())
}

fn report(out: &Path, name: &str, rows: &[diagnostics::CheckRow]) -> Result<()> {
    let mut csv = String::from("check,rel_err,tol,passed\n");
    for r in rows {
        println!("{r}");
        csv.push_str(&format!("{},{:e},{:e},{}\n", r.name, r.error, r.tolerance, r.passed));
    }
    write_text(&out.join(name), csv)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed(format!("{failed} of {} checks failed", rows.len())));
    }
    Ok(())
}

fn dot_test(c: &Common) -> Result<()> {
    let cfg = config(c, Scenario::Fwi)?;
    let out = output_dir(&cfg)?;
    cfg.write_resolved(&out)?;
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let rows = diagnostics::dot_battery(cfg.grid.nx, &seeds, 1e-5)?;
    report(&out, "dot_test.csv", &rows)
}

fn grad_test(c: &Common) -> Result<()> {
    let cfg = config(c, Scenario::Fwi)?;
    let out = output_dir(&cfg)?;
    cfg.write_resolved(&out)?;
    let rows = diagnostics::gradient_battery(cfg.seed, 5)?;
    report(&out, "grad_test.csv", &rows)
}
