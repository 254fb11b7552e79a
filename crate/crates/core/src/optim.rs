//! Optimization drivers: fixed-step gradient descent, ADAM, shot
//! subsampling and box projection.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fieldio::{write_bytes, RngStream};

/// Bias-corrected ADAM state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    /// Fresh state with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// In-place step.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state has {} entries, params {}, grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::step`].
pub fn adam_update(state: &AdamState, params: &[f64], grad: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut s = state.clone();
    let mut p = params.to_vec();
    s.step(&mut p, grad)?;
    Ok((s, p))
}

/// Fixed-step gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdConfig {
    pub step: f64,
    pub maxiter: usize,
    /// Halve the step (up to 20 times) until the loss decreases.
    pub backtracking: bool,
}

impl GdConfig {
    pub fn new(step: f64, maxiter: usize) -> Self {
        Self {
            step,
            maxiter,
            backtracking: false,
        }
    }
}

/// `n_batch` i.i.d. uniform draws from `0..n_total`, with replacement.
pub fn subsample_shots(n_total: usize, n_batch: usize, stream: &mut RngStream) -> Result<Vec<usize>> {
    if n_total == 0 || n_batch == 0 {
        return Err(Error::InvalidInput(format!(
            "shot subsampling needs n_total >= 1 and n_batch >= 1 (got {n_total}, {n_batch})"
        )));
    }
    Ok((0..n_batch).map(|_| stream.below(n_total)).collect())
}

/// Element-wise clamp of `x` to `[lower, upper]`.
pub fn project_box(x: &[f64], lower: &[f64], upper: &[f64]) -> Result<Vec<f64>> {
    if lower.len() != x.len() || upper.len() != x.len() {
        return Err(Error::Shape("box bounds must match the parameter length".into()));
    }
    if let Some(i) = (0..x.len()).find(|&i| !(lower[i] <= upper[i])) {
        return Err(Error::InvalidInput(format!(
            "box bound violation at {i}: lower {} > upper {}",
            lower[i], upper[i]
        )));
    }
    Ok(x.iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Driver {
    Gd(GdConfig),
    Adam { lr: f64, maxiter: usize },
}

impl Driver {
    pub fn maxiter(&self) -> usize {
        match self {
            Driver::Gd(c) => c.maxiter,
            Driver::Adam { maxiter, .. } => *maxiter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub driver: Driver,
    /// Keep a copy of the iterate every `n` iterations.
    pub snapshot_every: Option<usize>,
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl InversionConfig {
    pub fn new(driver: Driver) -> Self {
        Self {
            driver,
            snapshot_every: None,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Rows 0..=maxiter; row `i` is evaluated at the i-th iterate.
    pub records: Vec<IterRecord>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub x: Vec<f64>,
    /// Set when the run stopped early on a non-finite loss.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// `iteration,loss,grad_norm` rows. Deterministic for a deterministic run.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,grad_norm\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e}", r.iteration, r.loss, r.grad_norm);
        }
        s
    }

    /// `iteration,wall_ms` rows.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("iteration,wall_ms\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.3}", r.iteration, r.wall_ms);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_csv().as_bytes())
    }
}

/// Run `driver.maxiter()` updates of `x0`.
///
/// `eval(iteration, x)` returns the loss and gradient; it may re-draw shots
/// per iteration. The final iterate is evaluated once more so the last row
/// reports the loss reached.
pub fn run_inversion<F>(mut eval: F, x0: &[f64], cfg: &InversionConfig) -> Result<Trajectory>
where
    F: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    let maxiter = cfg.driver.maxiter();
    if maxiter == 0 {
        return Err(Error::Config("maxiter must be at least 1".into()));
    }
    if let Driver::Gd(g) = cfg.driver {
        if !(g.step > 0.0) {
            return Err(Error::Config(format!("gradient-descent step must be positive, got {}", g.step)));
        }
    }
    let project = |x: &mut Vec<f64>| -> Result<()> {
        if let Some((lo, hi)) = &cfg.bounds {
            *x = project_box(x, lo, hi)?;
        }
        Ok(())
    };
    let start = Instant::now();
    let mut x = x0.to_vec();
    let mut adam = match cfg.driver {
        Driver::Adam { lr, .. } => Some(AdamState::new(x.len(), lr)),
        Driver::Gd(_) => None,
    };
    let mut traj = Trajectory {
        records: Vec::with_capacity(maxiter + 1),
        snapshots: Vec::new(),
        x: x.clone(),
        aborted: None,
    };
    let mut current = eval(0, &x)?;
    if !current.0.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    for it in 0..=maxiter {
        let (loss, grad) = &current;
        if grad.len() != x.len() {
            return Err(Error::Shape(format!("gradient has {} entries, parameters {}", grad.len(), x.len())));
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        traj.records.push(IterRecord {
            iteration: it,
            loss: *loss,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(n) = cfg.snapshot_every {
            if n > 0 && it % n == 0 {
                traj.snapshots.push((it, x.clone()));
            }
        }
        log::debug!("iter {it}: loss {loss:e}, |g| {grad_norm:e}");
        if it == maxiter {
            break;
        }
        let (next_x, evaluated) = match (&cfg.driver, adam.as_mut()) {
            (Driver::Adam { .. }, Some(state)) => {
                let mut nx = x.clone();
                state.step(&mut nx, grad)?;
                project(&mut nx)?;
                (nx, None)
            }
            (Driver::Gd(g), _) => {
                let mut t = g.step;
                let mut tries = 0;
                loop {
                    let mut nx: Vec<f64> = x.iter().zip(grad).map(|(a, b)| a - t * b).collect();
                    project(&mut nx)?;
                    if !g.backtracking {
                        break (nx, None);
                    }
                    // The accepted trial doubles as the next iterate's evaluation.
                    let trial = eval(it + 1, &nx)?;
                    if trial.0 < *loss || tries == 20 {
                        break (nx, Some(trial));
                    }
                    t *= 0.5;
                    tries += 1;
                }
            }
            _ => unreachable!("adam state exists for the adam driver"),
        };
        x = next_x;
        let next = match evaluated {
            Some(e) => e,
            None => eval(it + 1, &x)?,
        };
        if !next.0.is_finite() {
            traj.aborted = Some(format!("non-finite loss at iteration {}", it + 1));
            log::warn!("inversion aborted: non-finite loss at iteration {}", it + 1);
            break;
        }
        if next.1.iter().any(|g| !g.is_finite()) {
            traj.aborted = Some(format!("non-finite gradient at iteration {}", it + 1));
            break;
        }
        current = next;
        traj.x = x.clone();
    }
    Ok(traj)
}
