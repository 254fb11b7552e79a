//! Incompressible two-phase (brine/CO₂) Darcy flow with a discrete adjoint.
//!
//! Each report step solves one pressure system with viscous total mobility,
//! then advances CO₂ saturation explicitly (upwind fractional flow plus a
//! counter-current buoyancy flux) in as many sub-steps as the CFL bound needs.
//! The adjoint reverses exactly this recursion; the sub-step count is treated
//! as a constant of the trajectory.

mod banded;
mod io;

pub use io::{read_series, write_series};

use banded::BandMatrix;

use crate::adgraph::{Cotangent, Pullback, Primitive, PullbackRule, Registry, Tensor};
use crate::error::{Error, Result};
use crate::fieldio::Field;

pub const FLOW_RULE: &str = "flow_sim";
/// One millidarcy in m².
pub const MILLIDARCY: f64 = 9.869233e-16;
pub const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;
const GRAVITY: f64 = 9.81;

/// Cell-centred isotropic permeability in millidarcy.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    pub k: Field,
}

impl PermeabilityField {
    pub fn new(k: Field) -> Result<Self> {
        if k.dims().len() != 2 {
            return Err(Error::Shape(format!("permeability must be 2D, got {:?}", k.dims())));
        }
        if let Some(i) = k.data().iter().position(|v| !(1e-3..=1e5).contains(v)) {
            return Err(Error::InvalidInput(format!(
                "permeability {} mD at cell {i} outside [1e-3, 1e5]",
                k.data()[i]
            )));
        }
        Ok(Self { k })
    }
}

/// Injection scenario and fluid properties.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSchedule {
    pub total_years: f64,
    pub step_days: f64,
    pub injection_cell: [usize; 2],
    /// Pore volumes of the whole grid per year.
    pub injection_rate: f64,
    pub snapshot_years: Vec<f64>,
    pub porosity: Field,
    /// (brine, CO₂) in Pa·s.
    pub viscosity: [f64; 2],
    /// (S_wr, S_gr).
    pub residual: [f64; 2],
    /// Corey exponents (brine, CO₂).
    pub corey: [f64; 2],
    pub gravity: bool,
    /// Brine minus CO₂ density, kg/m³.
    pub density_contrast: f64,
    /// Fixed-pressure outlet cell; defaults to the bottom-centre cell.
    pub reference_cell: Option<[usize; 2]>,
}

impl FlowSchedule {
    pub fn new(porosity: Field, injection_cell: [usize; 2]) -> Self {
        Self {
            total_years: 18.0,
            step_days: 30.0,
            injection_cell,
            injection_rate: 0.01,
            snapshot_years: vec![10.0, 15.0, 16.0, 17.0, 18.0],
            porosity,
            viscosity: [8.9e-4, 6e-5],
            residual: [0.1, 0.1],
            corey: [2.0, 2.0],
            gravity: true,
            density_contrast: 300.0,
            reference_cell: None,
        }
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.porosity.dims()[0], self.porosity.dims()[1]]
    }

    pub fn reference(&self) -> [usize; 2] {
        let [nx, nz] = self.dims();
        self.reference_cell.unwrap_or([nx / 2, nz - 1])
    }

    pub fn n_steps(&self) -> usize {
        (self.total_years * 365.25 / self.step_days).round() as usize
    }

    /// Completed report steps at which each snapshot is taken (nearest step).
    pub fn snapshot_steps(&self) -> Vec<usize> {
        let n = self.n_steps();
        self.snapshot_years
            .iter()
            .map(|t| ((t * 365.25 / self.step_days).round() as usize).min(n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.porosity.dims().len() != 2 {
            return Err(Error::Shape(format!("porosity must be 2D, got {:?}", self.porosity.dims())));
        }
        let [nx, nz] = self.dims();
        if nx < 2 || nz < 2 {
            return bad(format!("flow grid must be at least 2x2, got {nx}x{nz}"));
        }
        if !(self.total_years > 0.0 && self.step_days > 0.0) {
            return bad("total time and step length must be positive".into());
        }
        if !(self.injection_rate >= 0.0 && self.injection_rate.is_finite()) {
            return bad(format!("injection rate must be non-negative, got {}", self.injection_rate));
        }
        if self.snapshot_years.is_empty() {
            return bad("at least one snapshot time is required".into());
        }
        if self.snapshot_years.windows(2).any(|w| w[1] < w[0]) {
            return bad("snapshot times must be sorted".into());
        }
        if self.snapshot_years.iter().any(|&t| !(0.0..=self.total_years + 1e-12).contains(&t)) {
            return bad("snapshot times must lie within the simulated period".into());
        }
        if let Some(i) = self.porosity.data().iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad(format!("porosity outside (0, 1) at cell {i}"));
        }
        let [swr, sgr] = self.residual;
        if !(swr >= 0.0 && sgr >= 0.0 && swr + sgr < 1.0) {
            return bad(format!("residual saturations ({swr}, {sgr}) must be >= 0 with sum < 1"));
        }
        if self.viscosity.iter().chain(&self.corey).any(|v| !(*v > 0.0)) {
            return bad("viscosities and Corey exponents must be positive".into());
        }
        if self.corey.iter().any(|&e| e < 1.0) {
            return bad("Corey exponents below 1 have unbounded derivatives".into());
        }
        for (name, c) in [("injection", self.injection_cell), ("reference", self.reference())] {
            if c[0] >= nx || c[1] >= nz {
                return bad(format!("{name} cell {c:?} outside the {nx}x{nz} grid"));
            }
        }
        if self.injection_cell == self.reference() {
            return bad("injection and reference cells coincide".into());
        }
        if !(self.density_contrast >= 0.0) {
            return bad("density contrast must be non-negative".into());
        }
        Ok(())
    }
}

/// CO₂ saturation snapshots at the scheduled times.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationSeries {
    pub times: Vec<f64>,
    pub snapshots: Vec<Field>,
}

impl SaturationSeries {
    /// Total CO₂ volume `Σ φ·c·V` of each snapshot (m³ per unit thickness).
    pub fn co2_volumes(&self, porosity: &Field) -> Vec<f64> {
        let cell = porosity.spacing().iter().product::<f64>();
        self.snapshots
            .iter()
            .map(|s| s.data().iter().zip(porosity.data()).map(|(c, p)| c * p * cell).sum())
            .collect()
    }
}

/// Corey relative permeability over viscosity, with derivatives in S (CO₂ saturation).
#[derive(Debug, Clone, Copy)]
struct Mobility {
    swr: f64,
    sgr: f64,
    nw: f64,
    ng: f64,
    mu_w: f64,
    mu_g: f64,
}

impl Mobility {
    fn from(s: &FlowSchedule) -> Self {
        Self {
            swr: s.residual[0],
            sgr: s.residual[1],
            nw: s.corey[0],
            ng: s.corey[1],
            mu_w: s.viscosity[0],
            mu_g: s.viscosity[1],
        }
    }

    fn span(&self) -> f64 {
        1.0 - self.swr - self.sgr
    }

    fn gas(&self, s: f64) -> (f64, f64) {
        let se = (s - self.sgr) / self.span();
        if se <= 0.0 {
            (0.0, 0.0)
        } else if se >= 1.0 {
            (1.0 / self.mu_g, 0.0)
        } else {
            (se.powf(self.ng) / self.mu_g, self.ng * se.powf(self.ng - 1.0) / self.span() / self.mu_g)
        }
    }

    fn brine(&self, s: f64) -> (f64, f64) {
        let se = (1.0 - s - self.swr) / self.span();
        if se <= 0.0 {
            (0.0, 0.0)
        } else if se >= 1.0 {
            (1.0 / self.mu_w, 0.0)
        } else {
            (se.powf(self.nw) / self.mu_w, -self.nw * se.powf(self.nw - 1.0) / self.span() / self.mu_w)
        }
    }

    fn total(&self, s: f64) -> (f64, f64) {
        let (g, dg) = self.gas(s);
        let (w, dw) = self.brine(s);
        (g + w, dg + dw)
    }

    /// Fractional flow of CO₂.
    fn frac(&self, s: f64) -> (f64, f64) {
        let (g, dg) = self.gas(s);
        let (t, dt) = self.total(s);
        (g / t, (dg * t - g * dt) / (t * t))
    }

    /// Sampled upper bounds of |f'|, |λ_g'| and |λ_w'| with a safety margin.
    fn bounds(&self) -> (f64, f64) {
        let mut fmax = 0.0f64;
        let mut lmax = 0.0f64;
        for i in 0..=20_000 {
            let s = i as f64 / 20_000.0;
            fmax = fmax.max(self.frac(s).1.abs());
            lmax = lmax.max(self.gas(s).1.abs()).max(self.brine(s).1.abs());
        }
        (1.25 * fmax, 1.25 * lmax)
    }
}

/// `ab/(a+b)` and its partials; zero when both mobilities vanish.
fn harmonic_mob(a: f64, b: f64) -> (f64, f64, f64) {
    let s = a + b;
    if s <= 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        (a * b / s, b * b / (s * s), a * a / (s * s))
    }
}

#[derive(Debug, Clone, Copy)]
struct Face {
    a: usize,
    /// For vertical faces `b` is the deeper cell.
    b: usize,
    /// Face area over centre distance.
    geom: f64,
    vertical: bool,
}

/// Grid, fluid and time constants derived from a schedule.
#[derive(Debug, Clone)]
struct Setup {
    nx: usize,
    nz: usize,
    faces: Vec<Face>,
    pore: Vec<f64>,
    inj: usize,
    reference: usize,
    q: f64,
    dt: f64,
    snaps: Vec<usize>,
    mob: Mobility,
    fmax: f64,
    lmax: f64,
    /// `Δρ g Δz` driving the buoyancy flux (0 when gravity is off).
    buoyancy: f64,
}

impl Setup {
    fn new(sched: &FlowSchedule) -> Result<Self> {
        sched.validate()?;
        let [nx, nz] = sched.dims();
        let (hx, hz) = (sched.porosity.spacing()[0], sched.porosity.spacing()[1]);
        let cell = |i: usize, j: usize| i * nz + j;
        let mut faces = Vec::with_capacity(2 * nx * nz);
        for i in 0..nx {
            for j in 0..nz {
                if i + 1 < nx {
                    faces.push(Face {
                        a: cell(i, j),
                        b: cell(i + 1, j),
                        geom: hz / hx,
                        vertical: false,
                    });
                }
                if j + 1 < nz {
                    faces.push(Face {
                        a: cell(i, j),
                        b: cell(i, j + 1),
                        geom: hx / hz,
                        vertical: true,
                    });
                }
            }
        }
        let pore: Vec<f64> = sched.porosity.data().iter().map(|p| p * hx * hz).collect();
        let q = sched.injection_rate * pore.iter().sum::<f64>() / SECONDS_PER_YEAR;
        let mob = Mobility::from(sched);
        let (fmax, lmax) = mob.bounds();
        let r = sched.reference();
        Ok(Self {
            nx,
            nz,
            faces,
            pore,
            inj: cell(sched.injection_cell[0], sched.injection_cell[1]),
            reference: cell(r[0], r[1]),
            q,
            dt: sched.step_days * 86_400.0,
            snaps: sched.snapshot_steps(),
            mob,
            fmax,
            lmax,
            buoyancy: if sched.gravity {
                sched.density_contrast * GRAVITY * hz
            } else {
                0.0
            },
        })
    }

    fn n(&self) -> usize {
        self.nx * self.nz
    }

    /// Harmonic face permeability times geometry (m²), for the buoyancy term.
    fn face_perm(&self, k: &[f64], f: &Face) -> f64 {
        f.geom * MILLIDARCY * 2.0 / (1.0 / k[f.a] + 1.0 / k[f.b])
    }
}

/// Everything the adjoint needs from one report step.
#[derive(Debug, Clone)]
struct StepRecord {
    lam_t: Vec<f64>,
    trans: Vec<f64>,
    p: Vec<f64>,
    flux: Vec<f64>,
    /// Saturation before each sub-step.
    states: Vec<Vec<f64>>,
    dt_sub: f64,
}

/// Forward trajectory kept for the reverse sweep.
#[derive(Debug, Clone)]
pub(crate) struct Trajectory {
    setup: Setup,
    k: Vec<f64>,
    steps: Vec<StepRecord>,
}

fn pressure_matrix(setup: &Setup, trans: &[f64]) -> BandMatrix {
    let mut a = BandMatrix::zeros(setup.n(), setup.nz);
    let r = setup.reference;
    for (f, &t) in setup.faces.iter().zip(trans) {
        if f.a != r {
            a.add(f.a, f.a, t);
        }
        if f.b != r {
            a.add(f.b, f.b, t);
        }
        if f.a != r && f.b != r {
            a.add(f.b, f.a, -t);
        }
    }
    a.add(r, r, 1.0);
    a
}

/// Saturation residual `R(S)` for fixed face fluxes.
fn residual(setup: &Setup, k: &[f64], s: &[f64], flux: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let m = &setup.mob;
    for (f, &fl) in setup.faces.iter().zip(flux) {
        let up = if fl >= 0.0 { f.a } else { f.b };
        let adv = fl * m.frac(s[up]).0;
        out[f.a] -= adv;
        out[f.b] += adv;
        if f.vertical && setup.buoyancy > 0.0 {
            // CO₂ rises out of the deeper cell b, brine sinks out of a
            let (h, _, _) = harmonic_mob(m.gas(s[f.b]).0, m.brine(s[f.a]).0);
            let g = setup.face_perm(k, f) * setup.buoyancy * h;
            out[f.b] -= g;
            out[f.a] += g;
        }
    }
    out[setup.inj] += setup.q;
    out[setup.reference] -= setup.q * m.frac(s[setup.reference]).0;
}

/// Largest sub-step that keeps the explicit update monotone.
fn stable_substep(setup: &Setup, k: &[f64], flux: &[f64]) -> f64 {
    let mut rate = vec![0.0; setup.n()];
    for (f, &fl) in setup.faces.iter().zip(flux) {
        let a = fl.abs() * setup.fmax;
        rate[f.a] += a;
        rate[f.b] += a;
        if f.vertical && setup.buoyancy > 0.0 {
            let g = setup.face_perm(k, f) * setup.buoyancy * setup.lmax;
            rate[f.a] += g;
            rate[f.b] += g;
        }
    }
    rate[setup.reference] += setup.q * setup.fmax;
    rate.iter()
        .zip(&setup.pore)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, p)| 0.9 * p / r)
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn check_bounds(s: &[f64], step: usize) -> Result<()> {
    if let Some(i) = s.iter().position(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
        return Err(Error::Numerical(format!(
            "CFL/upwind violation: saturation {} at cell {i} after step {step}",
            s[i]
        )));
    }
    Ok(())
}

fn check_perm(k: &Field, sched: &FlowSchedule) -> Result<()> {
    if k.dims() != sched.porosity.dims() {
        return Err(Error::Shape(format!(
            "permeability dims {:?} differ from porosity dims {:?}",
            k.dims(),
            sched.porosity.dims()
        )));
    }
    Ok(())
}

fn run(k: &PermeabilityField, sched: &FlowSchedule, store: bool) -> Result<(SaturationSeries, Option<Trajectory>)> {
    check_perm(&k.k, sched)?;
    let setup = Setup::new(sched)?;
    let kd = k.k.data().to_vec();
    let n = setup.n();
    let mut s = vec![0.0; n];
    let mut snaps: Vec<Vec<f64>> = Vec::with_capacity(setup.snaps.len());
    let mut steps = Vec::new();
    let mut r = vec![0.0; n];
    let take = |step: usize, s: &[f64], snaps: &mut Vec<Vec<f64>>| {
        for &t in setup.snaps.iter().skip(snaps.len()) {
            if t == step {
                snaps.push(s.to_vec());
            } else {
                break;
            }
        }
    };
    take(0, &s, &mut snaps);
    let last = setup.snaps.last().copied().unwrap_or(0);
    for step in 0..last {
        let lam_t: Vec<f64> = s.iter().map(|&v| setup.mob.total(v).0).collect();
        let trans: Vec<f64> = setup
            .faces
            .iter()
            .map(|f| {
                let (ka, kb) = (kd[f.a] * MILLIDARCY * lam_t[f.a], kd[f.b] * MILLIDARCY * lam_t[f.b]);
                f.geom * 2.0 / (1.0 / ka + 1.0 / kb)
            })
            .collect();
        let mut b = vec![0.0; n];
        b[setup.inj] = setup.q;
        let p = pressure_matrix(&setup, &trans).cholesky()?.solve(&b);
        let flux: Vec<f64> = setup.faces.iter().zip(&trans).map(|(f, t)| t * (p[f.a] - p[f.b])).collect();
        let dt_cfl = stable_substep(&setup, &kd, &flux);
        let nsub = ((setup.dt / dt_cfl).ceil() as usize).max(1);
        let dt_sub = setup.dt / nsub as f64;
        let mut states = Vec::with_capacity(if store { nsub } else { 0 });
        for _ in 0..nsub {
            if store {
                states.push(s.clone());
            }
            residual(&setup, &kd, &s, &flux, &mut r);
            for i in 0..n {
                s[i] += dt_sub / setup.pore[i] * r[i];
            }
            check_bounds(&s, step + 1)?;
        }
        if store {
            steps.push(StepRecord {
                lam_t,
                trans,
                p,
                flux,
                states,
                dt_sub,
            });
        }
        take(step + 1, &s, &mut snaps);
    }
    let snapshots = snaps
        .into_iter()
        .map(|d| sched.porosity.with_data(d))
        .collect::<Result<_>>()?;
    let series = SaturationSeries {
        times: sched.snapshot_years.clone(),
        snapshots,
    };
    let traj = store.then(|| Trajectory { setup, k: kd, steps });
    Ok((series, traj))
}

/// Run the forward model `S(K)`.
pub fn simulate(k: &PermeabilityField, sched: &FlowSchedule) -> Result<SaturationSeries> {
    run(k, sched, false).map(|r| r.0)
}

/// Gradient of `Σ_i ⟨cotangents[i], c_i⟩` with respect to K (per millidarcy).
pub fn simulate_adjoint(k: &PermeabilityField, sched: &FlowSchedule, cotangents: &[Field]) -> Result<Field> {
    let (_, traj) = run(k, sched, true)?;
    let cot: Vec<&[f64]> = cotangents.iter().map(|c| c.data()).collect();
    let g = traj.expect("stored").adjoint(&cot)?;
    k.k.with_data(g)
}

impl Trajectory {
    pub(crate) fn adjoint(&self, cot: &[&[f64]]) -> Result<Vec<f64>> {
        let st = &self.setup;
        let n = st.n();
        if cot.len() != st.snaps.len() || cot.iter().any(|c| c.len() != n) {
            return Err(Error::Shape(format!(
                "expected {} cotangent snapshots of {n} cells",
                st.snaps.len()
            )));
        }
        let k = &self.k;
        let m = &st.mob;
        let mut kbar = vec![0.0; n];
        let mut sbar = vec![0.0; n];
        let add_snaps = |step: usize, sbar: &mut [f64]| {
            for (c, &t) in cot.iter().zip(&st.snaps) {
                if t == step {
                    for (a, b) in sbar.iter_mut().zip(c.iter()) {
                        *a += b;
                    }
                }
            }
        };
        let mut rbar = vec![0.0; n];
        for step in (0..self.steps.len()).rev() {
            add_snaps(step + 1, &mut sbar);
            let rec = &self.steps[step];
            let mut fbar = vec![0.0; st.faces.len()];
            for s in rec.states.iter().rev() {
                // S' = S + α R(S, F, K)
                for i in 0..n {
                    rbar[i] = rec.dt_sub / st.pore[i] * sbar[i];
                }
                for (fi, f) in st.faces.iter().enumerate() {
                    let fl = rec.flux[fi];
                    let up = if fl >= 0.0 { f.a } else { f.b };
                    let w = rbar[f.b] - rbar[f.a];
                    let (fr, dfr) = m.frac(s[up]);
                    fbar[fi] += w * fr;
                    sbar[up] += w * fl * dfr;
                    if f.vertical && st.buoyancy > 0.0 {
                        let (lg, dlg) = m.gas(s[f.b]);
                        let (lw, dlw) = m.brine(s[f.a]);
                        let (h, dha, dhb) = harmonic_mob(lg, lw);
                        let kf = st.face_perm(k, f);
                        let wg = (rbar[f.a] - rbar[f.b]) * st.buoyancy;
                        sbar[f.b] += wg * kf * dha * dlg;
                        sbar[f.a] += wg * kf * dhb * dlw;
                        // kf = geom·md·2/(1/ka + 1/kb)
                        let dk = wg * h * kf * kf / (2.0 * f.geom * MILLIDARCY);
                        kbar[f.a] += dk / (k[f.a] * k[f.a]);
                        kbar[f.b] += dk / (k[f.b] * k[f.b]);
                    }
                }
                let r = st.reference;
                sbar[r] -= rbar[r] * st.q * m.frac(s[r]).1;
            }
            // F = T ⊙ (p_a − p_b)
            let mut tbar = vec![0.0; st.faces.len()];
            let mut pbar = vec![0.0; n];
            for (fi, f) in st.faces.iter().enumerate() {
                let dp = rec.p[f.a] - rec.p[f.b];
                tbar[fi] += fbar[fi] * dp;
                pbar[f.a] += fbar[fi] * rec.trans[fi];
                pbar[f.b] -= fbar[fi] * rec.trans[fi];
            }
            // p = A(T)⁻¹ b
            let mut mu = pressure_matrix(st, &rec.trans).cholesky()?.solve(&pbar);
            mu[st.reference] = 0.0;
            for (fi, f) in st.faces.iter().enumerate() {
                tbar[fi] -= (mu[f.a] - mu[f.b]) * (rec.p[f.a] - rec.p[f.b]);
            }
            // T = geom·2/(1/a + 1/b), a = K·md·λ_t
            let s0 = &rec.states[0];
            let mut abar = vec![0.0; n];
            for (fi, f) in st.faces.iter().enumerate() {
                let t = rec.trans[fi];
                let c = tbar[fi] * t * t / (2.0 * f.geom);
                for c_idx in [f.a, f.b] {
                    let a = k[c_idx] * MILLIDARCY * rec.lam_t[c_idx];
                    abar[c_idx] += c / (a * a);
                }
            }
            for i in 0..n {
                kbar[i] += abar[i] * MILLIDARCY * rec.lam_t[i];
                sbar[i] += abar[i] * k[i] * MILLIDARCY * m.total(s0[i]).1;
            }
        }
        Ok(kbar)
    }
}

struct FlowRule;

impl Primitive for FlowRule {
    fn apply(&self, args: &[crate::adgraph::Arg], record: bool) -> Result<(Vec<Tensor>, Option<Pullback>)> {
        if args.len() != 2 {
            return Err(Error::Autodiff(format!("{FLOW_RULE} takes (K, schedule), got {} args", args.len())));
        }
        let kt = args[0].tensor()?;
        let sched = args[1].aux::<FlowSchedule>()?;
        if kt.shape() != sched.porosity.dims() {
            return Err(Error::Shape(format!(
                "K shape {:?} does not match the schedule grid {:?}",
                kt.shape(),
                sched.porosity.dims()
            )));
        }
        let field = sched.porosity.with_data(kt.data().to_vec())?;
        let (series, traj) = run(&PermeabilityField::new(field)?, sched, record)?;
        let [nx, nz] = sched.dims();
        let nv = series.snapshots.len();
        let data = series.snapshots.iter().flat_map(|s| s.data().iter().copied()).collect();
        let out = Tensor::new(vec![nv, nx, nz], data)?;
        let pb: Option<Pullback> = traj.map(|traj| {
            let shape = kt.shape().to_vec();
            Box::new(move |cot: &[Tensor]| {
                let d = cot[0].data();
                let per: Vec<&[f64]> = d.chunks(nx * nz).collect();
                let g = traj.adjoint(&per)?;
                Ok(vec![Cotangent::Dense(Tensor::new(shape, g)?), Cotangent::NoTangent])
            }) as Pullback
        });
        Ok((vec![out], pb))
    }
}

/// Register `flow_sim(K, schedule) -> [n_v, nx, nz]`; the schedule is an aux argument.
pub fn register_flow_rule(registry: &mut Registry) -> Result<()> {
    registry.register(PullbackRule::new(FLOW_RULE, FlowRule))
}
