//! Patchy-saturation rock physics: CO₂ saturation to (vp, ρ).

use crate::adgraph::{Arg, Cotangent, PullbackRule, Registry, Tensor};
use crate::error::{Error, Result};
use crate::fieldio::Field;

pub const PATCHY_RULE: &str = "patchy";

/// Moduli (Pa) and fluid densities (kg/m³).
///
/// `rhow` is the density of the fluid moving in (CO₂ side, 700) and `rhoo` the
/// density of the brine it displaces (1000), so density drops as CO₂ enters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchyConstants {
    pub bulk_min: f64,
    pub bulk_fl1: f64,
    pub bulk_fl2: f64,
    pub rhow: f64,
    pub rhoo: f64,
}

impl Default for PatchyConstants {
    fn default() -> Self {
        Self {
            bulk_min: 36.6e9,
            bulk_fl1: 2.735e9,
            bulk_fl2: 0.125e9,
            rhow: 700.0,
            rhoo: 1000.0,
        }
    }
}

impl PatchyConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.bulk_min, self.bulk_fl1, self.bulk_fl2, self.rhow, self.rhoo];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput(format!("patchy constants must be positive: {self:?}")));
        }
        if !(self.bulk_fl2 < self.bulk_fl1 && self.bulk_fl1 < self.bulk_min) {
            return Err(Error::InvalidInput(
                "patchy constants must satisfy bulk_fl2 < bulk_fl1 < bulk_min".into(),
            ));
        }
        Ok(())
    }
}

/// Saturation, velocity (m/s), density (kg/m³) and porosity on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RockState {
    pub sw: Field,
    pub vp: Field,
    pub rho: Field,
    pub phi: Field,
}

impl RockState {
    pub fn new(sw: Field, vp: Field, rho: Field, phi: Field) -> Result<Self> {
        for (name, f) in [("vp", &vp), ("rho", &rho), ("phi", &phi)] {
            if f.dims() != sw.dims() {
                return Err(Error::Shape(format!("{name} dims {:?} differ from sw dims {:?}", f.dims(), sw.dims())));
            }
        }
        if let Some(i) = sw.data().iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidInput(format!("saturation outside [0, 1] at cell {i}")));
        }
        if let Some(i) = phi.data().iter().position(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::InvalidInput(format!("porosity outside (0, 1) at cell {i}")));
        }
        for (name, f) in [("vp", &vp), ("rho", &rho)] {
            if let Some(i) = f.data().iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidInput(format!("{name} must be positive, cell {i}")));
            }
        }
        Ok(Self { sw, vp, rho, phi })
    }
}

/// Cell outputs and their partial derivatives.
#[derive(Debug, Clone, Copy)]
struct CellEval {
    vp: f64,
    rho: f64,
    /// d vp_new / d(sw, vp, rho)
    dvp: [f64; 3],
    /// d rho_new / d(sw, vp, rho)
    drho: [f64; 3],
}

fn cell(sw: f64, vp: f64, rho: f64, phi: f64, k: &PatchyConstants, idx: usize) -> Result<CellEval> {
    let vs = vp / 3f64.sqrt();
    let bulk_sat1 = rho * (vp.powi(2) - 4.0 / 3.0 * vs.powi(2));
    let shear_sat1 = rho * vs.powi(2);
    if bulk_sat1 >= k.bulk_min {
        return Err(Error::Numerical(format!(
            "patchy model outside validity range at cell {idx}: saturated bulk modulus exceeds the mineral modulus"
        )));
    }
    let patch_temp = bulk_sat1 / (k.bulk_min - bulk_sat1) - k.bulk_fl1 / phi / (k.bulk_min - k.bulk_fl1)
        + k.bulk_fl2 / phi / (k.bulk_min - k.bulk_fl2);
    if patch_temp <= 0.0 {
        return Err(Error::Numerical(format!("patchy model outside validity range at cell {idx}")));
    }
    let bulk_sat2 = k.bulk_min / (1.0 / patch_temp + 1.0);
    let m1 = bulk_sat1 + 4.0 / 3.0 * shear_sat1;
    let m2 = bulk_sat2 + 4.0 / 3.0 * shear_sat1;
    let denom = (1.0 - sw) / m1 + sw / m2;
    let bulk_new = 1.0 / denom - 4.0 / 3.0 * shear_sat1;
    let rho_new = rho + phi * sw * (k.rhow - k.rhoo);
    let arg = (bulk_new + 4.0 / 3.0 * shear_sat1) / rho_new;
    if !(arg >= 0.0) {
        return Err(Error::Numerical(format!("negative argument under square root at cell {idx}")));
    }
    let vp_new = arg.sqrt();

    // chain rule, in the order the quantities were formed
    let d_b1 = [0.0, 10.0 / 9.0 * rho * vp, 5.0 / 9.0 * vp * vp];
    let d_mu = [0.0, 2.0 / 3.0 * rho * vp, vp * vp / 3.0];
    let dp_db1 = k.bulk_min / (k.bulk_min - bulk_sat1).powi(2);
    let db2_dp = k.bulk_min / (1.0 + patch_temp).powi(2);
    let mut dvp = [0.0; 3];
    let drho = [phi * (k.rhow - k.rhoo), 0.0, 1.0];
    let h = 1.0 / denom;
    for j in 0..3 {
        let dm1 = d_b1[j] + 4.0 / 3.0 * d_mu[j];
        let dm2 = db2_dp * dp_db1 * d_b1[j] + 4.0 / 3.0 * d_mu[j];
        let mut dden = -(1.0 - sw) / (m1 * m1) * dm1 - sw / (m2 * m2) * dm2;
        if j == 0 {
            dden += 1.0 / m2 - 1.0 / m1;
        }
        let dh = -h * h * dden;
        dvp[j] = (dh / rho_new - h * drho[j] / (rho_new * rho_new)) / (2.0 * vp_new);
    }
    Ok(CellEval {
        vp: vp_new,
        rho: rho_new,
        dvp,
        drho,
    })
}

fn eval_all(sw: &[f64], vp: &[f64], rho: &[f64], phi: &[f64], k: &PatchyConstants) -> Result<Vec<CellEval>> {
    k.validate()?;
    let n = sw.len();
    if vp.len() != n || rho.len() != n || phi.len() != n {
        return Err(Error::Shape(format!(
            "patchy inputs differ in length: {n}, {}, {}, {}",
            vp.len(),
            rho.len(),
            phi.len()
        )));
    }
    (0..n).map(|i| cell(sw[i], vp[i], rho[i], phi[i], k, i)).collect()
}

/// New velocity and density after CO₂ substitution, cell by cell.
pub fn patchy(state: &RockState, consts: &PatchyConstants) -> Result<(Field, Field)> {
    let cells = eval_all(state.sw.data(), state.vp.data(), state.rho.data(), state.phi.data(), consts)?;
    let vp = state.vp.with_data(cells.iter().map(|c| c.vp).collect())?;
    let rho = state.rho.with_data(cells.iter().map(|c| c.rho).collect())?;
    Ok((vp, rho))
}

/// Register `patchy(sw, vp, rho, phi, consts) -> [vp_new, rho_new]`.
///
/// `phi` (a tensor) and `consts` (aux [`PatchyConstants`]) always receive no tangent.
pub fn register_patchy_rule(registry: &mut Registry) -> Result<()> {
    registry.register(PullbackRule::from_fns(
        PATCHY_RULE,
        |args| {
            let (cells, shape) = eval_args(args)?;
            Ok(vec![
                Tensor::new(shape.clone(), cells.iter().map(|c| c.vp).collect())?,
                Tensor::new(shape, cells.iter().map(|c| c.rho).collect())?,
            ])
        },
        |args, _, cot| {
            let (cells, shape) = eval_args(args)?;
            let (gv, gr) = (cot[0].data(), cot[1].data());
            let slot = |j: usize| -> Result<Cotangent> {
                let d = cells
                    .iter()
                    .enumerate()
                    .map(|(i, c)| gv[i] * c.dvp[j] + gr[i] * c.drho[j])
                    .collect();
                Ok(Cotangent::Dense(Tensor::new(shape.clone(), d)?))
            };
            Ok(vec![slot(0)?, slot(1)?, slot(2)?, Cotangent::NoTangent, Cotangent::NoTangent])
        },
    ))
}

fn eval_args(args: &[Arg]) -> Result<(Vec<CellEval>, Vec<usize>)> {
    if args.len() != 5 {
        return Err(Error::Autodiff(format!(
            "{PATCHY_RULE} takes (sw, vp, rho, phi, consts), got {} args",
            args.len()
        )));
    }
    let sw = args[0].tensor()?;
    let consts = args[4].aux::<PatchyConstants>()?;
    let cells = eval_all(
        sw.data(),
        args[1].tensor()?.data(),
        args[2].tensor()?.data(),
        args[3].tensor()?.data(),
        consts,
    )?;
    Ok((cells, sw.shape().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adgraph::{gradient, Input};
    use crate::fieldio::RngStream;
    use proptest::prelude::*;

    fn state(sw: Vec<f64>, vp: Vec<f64>, rho: Vec<f64>, phi: Vec<f64>) -> RockState {
        let n = sw.len();
        let f = |d| Field::from_vec(vec![n], d).unwrap();
        RockState::new(f(sw), f(vp), f(rho), f(phi)).unwrap()
    }

    fn random_state(n: usize, seed: u64) -> RockState {
        let mut s = RngStream::new(seed);
        let mut draw = |lo: f64, hi: f64| (0..n).map(|_| lo + (hi - lo) * s.uniform()).collect::<Vec<_>>();
        let (sw, vp, rho, phi) = (draw(0.0, 1.0), draw(3200.0, 4500.0), draw(2100.0, 2600.0), draw(0.2, 0.35));
        state(sw, vp, rho, phi)
    }

    #[test]
    fn zero_saturation_is_identity() {
        let st = random_state(50, 1);
        let st = RockState {
            sw: st.sw.map(|_| 0.0),
            ..st
        };
        let (vp, rho) = patchy(&st, &PatchyConstants::default()).unwrap();
        for (a, b) in vp.data().iter().zip(st.vp.data()) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
        assert_eq!(rho.data(), st.rho.data());
    }

    #[test]
    fn density_arithmetic() {
        let st = state(vec![0.5], vec![3500.0], vec![2200.0], vec![0.25]);
        let (_, rho) = patchy(&st, &PatchyConstants::default()).unwrap();
        assert!((rho.data()[0] - 2162.5).abs() < 1e-12);
    }

    #[test]
    fn velocity_decreases_with_saturation() {
        let sw: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let st = state(sw, vec![3500.0; 101], vec![2200.0; 101], vec![0.25; 101]);
        let (vp, _) = patchy(&st, &PatchyConstants::default()).unwrap();
        for w in vp.data().windows(2) {
            assert!(w[1] < w[0], "{} !< {}", w[1], w[0]);
        }
    }

    #[test]
    fn invalid_inputs() {
        // low velocity and low porosity make the CO2 patch modulus negative
        let st = state(vec![0.5], vec![1500.0], vec![1800.0], vec![0.05]);
        let err = patchy(&st, &PatchyConstants::default()).unwrap_err();
        assert!(err.to_string().contains("outside validity range at cell 0"), "{err}");
        let f = |d: Vec<f64>| Field::from_vec(vec![1], d).unwrap();
        assert!(RockState::new(f(vec![1.5]), f(vec![3000.0]), f(vec![2000.0]), f(vec![0.2])).is_err());
        let bad = PatchyConstants {
            bulk_fl2: 5e9,
            ..Default::default()
        };
        assert!(patchy(&random_state(3, 2), &bad).is_err());
    }

    fn rule_grads(st: &RockState, gv: Vec<f64>, gr: Vec<f64>) -> Vec<Cotangent> {
        let mut reg = Registry::new();
        register_patchy_rule(&mut reg).unwrap();
        assert!(register_patchy_rule(&mut reg).is_err());
        let n = st.sw.len();
        let at = [&st.sw, &st.vp, &st.rho, &st.phi].map(Tensor::from);
        let (_, g) = gradient(&reg, &at, |tp, x| {
            let outs = tp.call(
                PATCHY_RULE,
                &[x[0].into(), x[1].into(), x[2].into(), x[3].into(), Input::aux(PatchyConstants::default())],
            )?;
            let cv = tp.constant(Tensor::new(vec![n], gv)?);
            let cr = tp.constant(Tensor::new(vec![n], gr)?);
            let a = tp.inner(outs[0], cv)?;
            let b = tp.inner(outs[1], cr)?;
            tp.add(a, b)
        })
        .unwrap();
        g
    }

    #[test]
    fn pullback_matches_central_differences() {
        let st = random_state(5, 7);
        let k = PatchyConstants::default();
        let mut s = RngStream::new(8);
        let gv: Vec<f64> = (0..5).map(|_| s.normal()).collect();
        let gr: Vec<f64> = (0..5).map(|_| s.normal()).collect();
        let g = rule_grads(&st, gv.clone(), gr.clone());
        assert!(g[3].is_no_tangent());
        let inputs = [st.sw.data(), st.vp.data(), st.rho.data()];
        for slot in 0..3 {
            let gs = g[slot].dense().unwrap().data();
            for i in 0..5 {
                let h = 1e-6 * inputs[slot][i].abs().max(1e-3);
                let mut vals = [st.sw.data()[i], st.vp.data()[i], st.rho.data()[i]];
                let mut f = |x: f64| {
                    vals[slot] = x;
                    let c = cell(vals[0], vals[1], vals[2], st.phi.data()[i], &k, i).unwrap();
                    gv[i] * c.vp + gr[i] * c.rho
                };
                let x0 = inputs[slot][i];
                let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
                assert!((fd - gs[i]).abs() <= 1e-6 * fd.abs().max(1e-12), "slot {slot} cell {i}: {fd} vs {}", gs[i]);
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero() {
        let st = random_state(4, 3);
        let g = rule_grads(&st, vec![0.0; 4], vec![0.0; 4]);
        for slot in 0..3 {
            assert!(g[slot].dense().unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stiff_rock_velocity_can_rise_with_saturation() {
        // the density drop outweighs the small modulus drop when the dry frame is stiff
        let k = PatchyConstants::default();
        let a = cell(0.0, 4251.6, 2396.3, 0.293, &k, 0).unwrap();
        let b = cell(1.0, 4251.6, 2396.3, 0.293, &k, 0).unwrap();
        assert!(b.vp > a.vp);
    }

    proptest! {
        #[test]
        fn monotone_on_physical_range(
            vp in 1500.0f64..3800.0,
            rho in 1800.0f64..2600.0,
            phi in 0.05f64..0.35,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let k = PatchyConstants::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            // states where the patch modulus is non-positive are outside the model
            if let (Ok(x), Ok(y)) = (cell(lo, vp, rho, phi, &k, 0), cell(hi, vp, rho, phi, &k, 0)) {
                prop_assert!(y.vp <= x.vp * (1.0 + 1e-14));
            }
        }

        #[test]
        fn element_wise_locality(idx in 0usize..6, dv in 1.0f64..200.0) {
            let st = random_state(6, 11);
            let k = PatchyConstants::default();
            let (v0, r0) = patchy(&st, &k).unwrap();
            let mut vp = st.vp.data().to_vec();
            vp[idx] += dv;
            let st2 = RockState { vp: st.vp.with_data(vp).unwrap(), ..st.clone() };
            let (v1, r1) = patchy(&st2, &k).unwrap();
            for i in 0..6 {
                if i != idx {
                    prop_assert_eq!(v0.data()[i], v1.data()[i]);
                    prop_assert_eq!(r0.data()[i], r1.data()[i]);
                }
            }
        }

        #[test]
        fn identity_at_zero_saturation(seed in 0u64..1000) {
            let st = random_state(8, seed);
            let st = RockState { sw: st.sw.map(|_| 0.0), ..st };
            let (vp, _) = patchy(&st, &PatchyConstants::default()).unwrap();
            for (a, b) in vp.data().iter().zip(st.vp.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * b);
            }
        }
    }
}
