use super::*;
use crate::adgraph::{gradient, Input};
use crate::fieldio::gaussian_field;
use crate::linop::{dot, dot_test};

const V0: f64 = 2000.0;

fn homogeneous(n: usize, h: f64, v: f64) -> SlownessModel {
    let f = Field::filled(vec![n, n], vec![h, h], 1.0 / (v * v)).unwrap();
    SlownessModel::new(f, 20).unwrap()
}

fn with_blob(n: usize, h: f64, dv: f64) -> SlownessModel {
    let mut data = vec![0.0; n * n];
    let c = n as f64 / 2.0;
    for i in 0..n {
        for j in 0..n {
            let r2 = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (0.1 * n as f64).powi(2);
            let v = V0 + dv * (-r2).exp();
            data[i * n + j] = 1.0 / (v * v);
        }
    }
    SlownessModel::new(Field::new(vec![n, n], vec![h, h], vec![0.0, 0.0], data).unwrap(), 20).unwrap()
}

fn small_setup(n: usize) -> (SlownessModel, AcquisitionGeometry, Wavelet) {
    let h = 10.0;
    let ext = (n - 1) as f64 * h;
    let sources = vec![[0.2 * ext, 0.1 * ext], [0.7 * ext, 0.13 * ext]];
    let receivers = (0..12).map(|i| [ext * (0.05 + 0.9 * i as f64 / 11.0), 0.9 * ext]).collect();
    let geom = AcquisitionGeometry::new(sources, receivers, 0.36, 0.002).unwrap();
    let w = Wavelet::ricker(15.0, geom.dt, geom.nt()).unwrap();
    (homogeneous(n, h, V0), geom, w)
}

fn smooth_random(dims: &[usize], seed: u64, scale: f64) -> Field {
    let mut s = RngStream::new(seed);
    let g = gaussian_field(dims, &mut s).unwrap();
    let (nx, nz) = (dims[0], dims[1]);
    // two passes of a 3x3 box filter
    let mut d = g.data().to_vec();
    for _ in 0..2 {
        let mut out = vec![0.0; d.len()];
        for i in 0..nx {
            for j in 0..nz {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a >= 0 && b >= 0 && (a as usize) < nx && (b as usize) < nz {
                            acc += d[a as usize * nz + b as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[i * nz + j] = acc / cnt;
            }
        }
        d = out;
    }
    Field::from_vec(dims.to_vec(), d.into_iter().map(|v| v * scale).collect()).unwrap()
}

fn flat(recs: &[ShotRecord]) -> Vec<f64> {
    recs.iter().flat_map(|r| r.data.iter().copied()).collect()
}

/// Continuous Ricker with the same delay as [`Wavelet::ricker`].
fn ricker_at(f: f64, t: f64) -> f64 {
    let a = (PI * f * (t - 1.5 / f)).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

/// Homogeneous 2D response `∫ q(t − (r/c) cosh s) ds` up to a constant factor.
fn analytic_trace(f: f64, r: f64, c: f64, dt: f64, nt: usize) -> Vec<f64> {
    (0..nt)
        .map(|n| {
            let t = n as f64 * dt;
            if t * c <= r {
                return 0.0;
            }
            let smax = (t * c / r).acosh();
            let k = 4000;
            let ds = smax / k as f64;
            (0..k).map(|i| ricker_at(f, t - r / c * ((i as f64 + 0.5) * ds).cosh()) * ds).sum()
        })
        .collect()
}

fn argmax_abs(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap()
}

#[test]
fn first_arrival_matches_travel_time() {
    let (n, h) = (121, 5.0);
    let model = homogeneous(n, h, V0);
    let centre = 60.0 * h;
    let r = 200.0;
    let geom = AcquisitionGeometry::new(vec![[centre, centre]], vec![[centre + r, centre]], 0.3, 0.0005).unwrap();
    let w = Wavelet::ricker(15.0, geom.dt, geom.nt()).unwrap();
    let rec = &forward_model(&model, &geom, &w, &[0], &WaveConfig::default()).unwrap()[0];
    let analytic = analytic_trace(15.0, r, V0, geom.dt, geom.nt());
    let (pn, pa) = (argmax_abs(rec.trace(0)), argmax_abs(&analytic));
    // travel time = numerical peak minus the wavelet-shape lag of the analytic peak
    let lag = pa as f64 * geom.dt - r / V0;
    let travel = pn as f64 * geom.dt - lag;
    let expected = r * model.field.data()[0].sqrt();
    assert!((travel - expected).abs() <= geom.dt, "travel {travel} vs {expected}");
}

#[test]
fn zero_and_doubled_wavelet() {
    let (model, geom, w) = small_setup(30);
    let cfg = WaveConfig::default();
    let zero = forward_model(&model, &geom, &w.scaled(0.0), &[0, 1], &cfg).unwrap();
    assert!(flat(&zero).iter().all(|&v| v == 0.0));
    let d1 = forward_model(&model, &geom, &w, &[0, 1], &cfg).unwrap();
    let d2 = forward_model(&model, &geom, &w.scaled(2.0), &[0, 1], &cfg).unwrap();
    for (a, b) in flat(&d1).iter().zip(flat(&d2)) {
        assert_eq!(2.0 * a, b);
    }
}

#[test]
fn doubling_m_does_not_double_records() {
    let (model, geom, w) = small_setup(30);
    let cfg = WaveConfig::default();
    let m2 = SlownessModel::new(model.field.map(|m| 2.0 * m), 20).unwrap();
    let d1 = flat(&forward_model(&model, &geom, &w, &[0], &cfg).unwrap());
    let d2 = flat(&forward_model(&m2, &geom, &w, &[0], &cfg).unwrap());
    let diff: f64 = d1.iter().zip(&d2).map(|(a, b)| (2.0 * a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = d1.iter().map(|a| (2.0 * a).powi(2)).sum::<f64>().sqrt();
    assert!(diff > 0.1 * norm);
}

#[test]
fn cfl_violation_reports_max_dt() {
    let model = homogeneous(30, 10.0, V0);
    let geom = AcquisitionGeometry::new(vec![[100.0, 100.0]], vec![[200.0, 100.0]], 0.1, 0.01).unwrap();
    let w = Wavelet::ricker(15.0, geom.dt, geom.nt()).unwrap();
    let err = forward_model(&model, &geom, &w, &[0], &WaveConfig::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("maximal stable dt"), "{msg}");
    // second-order stencil bound is 0.9 h sqrt(m) / sqrt(2)
    let bound = max_stable_dt(2, 10.0, 1.0 / (V0 * V0)).unwrap();
    assert!((bound - 0.9 * 10.0 / V0 / 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn source_outside_grid_is_rejected() {
    let (model, mut geom, w) = small_setup(30);
    geom.sources[0] = [-5.0, 10.0];
    assert!(forward_model(&model, &geom, &w, &[0], &WaveConfig::default()).is_err());
    assert!(forward_model(&model, &small_setup(30).1, &w, &[7], &WaveConfig::default()).is_err());
}

#[test]
fn born_linearity_and_zero() {
    let (_, geom, w) = small_setup(30);
    let model = with_blob(30, 10.0, 200.0);
    let cfg = WaveConfig::default();
    let zero = Field::filled(vec![30, 30], vec![10.0, 10.0], 0.0).unwrap();
    assert!(flat(&born(&model, &zero, &geom, &w, &[0], &cfg).unwrap()).iter().all(|&v| v == 0.0));
    let dm = smooth_random(&[30, 30], 3, 1e-8);
    let d1 = flat(&born(&model, &dm, &geom, &w, &[0, 1], &cfg).unwrap());
    let d2 = flat(&born(&model, &dm.map(|v| 2.0 * v), &geom, &w, &[0, 1], &cfg).unwrap());
    let scale = d1.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for (a, b) in d1.iter().zip(&d2) {
        assert!((2.0 * a - b).abs() <= 1e-12 * scale);
    }
    let bad = Field::filled(vec![29, 30], vec![10.0, 10.0], 0.0).unwrap();
    assert!(born(&model, &bad, &geom, &w, &[0], &cfg).is_err());
}

#[test]
fn born_dot_test_three_seeds() {
    let (_, geom, w) = small_setup(50);
    let model = with_blob(50, 10.0, 300.0);
    let op = born_operator(&model, &geom, &w, 0, &WaveConfig::default()).unwrap();
    for seed in [1, 2, 3] {
        let rep = dot_test(&op, &mut RngStream::new(seed), 1e-5);
        assert!(rep.passed, "{rep}");
    }
}

#[test]
fn source_dot_test_three_seeds() {
    let (model, geom, _) = small_setup(40);
    let op = source_operator(&model, &geom, 1, &WaveConfig::default()).unwrap();
    for seed in [4, 5, 6] {
        let rep = dot_test(&op, &mut RngStream::new(seed), 1e-5);
        assert!(rep.passed, "{rep}");
    }
}

#[test]
fn receiver_restriction_dot_test() {
    let (model, geom, _) = small_setup(30);
    let prop = Propagator::for_geometry(&model, &geom, &WaveConfig::default()).unwrap();
    let op = receiver_operator(&prop, &geom.receivers).unwrap();
    let rep = dot_test(&op, &mut RngStream::new(9), 1e-12);
    assert!(rep.passed, "{rep}");
}

#[test]
fn migrate_matches_born_adjoint_and_is_additive() {
    let (_, geom, w) = small_setup(40);
    let model = with_blob(40, 10.0, 300.0);
    let cfg = WaveConfig::default();
    let mut s = RngStream::new(11);
    let res: Vec<ShotRecord> = (0..2)
        .map(|i| {
            let data = (0..geom.receivers.len() * geom.nt()).map(|_| s.normal()).collect();
            ShotRecord::new(i, geom.receivers.len(), geom.nt(), geom.dt, data).unwrap()
        })
        .collect();
    let joint = migrate(&model, &res, &geom, &w, &cfg).unwrap();
    let a = migrate(&model, &res[..1], &geom, &w, &cfg).unwrap();
    let b = migrate(&model, &res[1..], &geom, &w, &cfg).unwrap();
    let scale = joint.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for ((j, x), y) in joint.data().iter().zip(a.data()).zip(b.data()) {
        assert!((j - (x + y)).abs() <= 1e-12 * scale);
    }
    let zero: Vec<ShotRecord> = res.iter().map(ShotRecord::zeros_like).collect();
    assert!(migrate(&model, &zero, &geom, &w, &cfg).unwrap().data().iter().all(|&v| v == 0.0));

    let dm = smooth_random(&[40, 40], 12, 1e-8);
    let jd = born(&model, &dm, &geom, &w, &[0, 1], &cfg).unwrap();
    let lhs = dot(&flat(&jd), &flat(&res));
    let rhs = dot(dm.data(), joint.data());
    assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-5);
}

#[test]
fn gradient_matches_finite_difference() {
    let (_, geom, w) = small_setup(40);
    let cfg = WaveConfig::default();
    let truth = with_blob(40, 10.0, 250.0);
    let model = homogeneous(40, 10.0, V0);
    let obs = forward_model(&truth, &geom, &w, &[0, 1], &cfg).unwrap();
    let (_, g) = fwi_objective(&model, &obs, &geom, &w, &cfg).unwrap();
    let dir = smooth_random(&[40, 40], 21, 1.0);
    let dir_scale = 1e-3 * model.field.data()[0] / dir.data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let eval = |eps: f64| {
        let f = model
            .field
            .with_data(model.field.data().iter().zip(dir.data()).map(|(m, d)| m + eps * dir_scale * d).collect())
            .unwrap();
        fwi_objective(&SlownessModel::new(f, 20).unwrap(), &obs, &geom, &w, &cfg).unwrap().0
    };
    let fd = (eval(1.0) - eval(-1.0)) / 2.0;
    let an: f64 = g.data().iter().zip(dir.data()).map(|(g, d)| g * d * dir_scale).sum();
    assert!((fd - an).abs() / an.abs() < 1e-4, "fd {fd} analytic {an}");
}

#[test]
fn rule_gradient_is_bitwise_migrate() {
    let (_, geom, w) = small_setup(30);
    let cfg = WaveConfig::default();
    let model = homogeneous(30, 10.0, V0);
    let truth = with_blob(30, 10.0, 200.0);
    let obs = forward_model(&truth, &geom, &w, &[0, 1], &cfg).unwrap();
    let mut reg = Registry::new();
    register_wave_rules(&mut reg).unwrap();
    assert!(register_wave_rules(&mut reg).is_err());
    let op = WaveOperator::for_model(&model, geom.clone(), vec![0, 1], cfg.clone());
    let d = Tensor::new(vec![2, geom.receivers.len(), geom.nt()], flat(&obs)).unwrap();
    let m = Tensor::from(&model.field);
    let q = Tensor::new(vec![geom.nt()], w.samples.clone()).unwrap();
    let (loss, grads) = gradient(&reg, &[m, q], |tp, x| {
        let pred = tp.call1(WAVE_RULE, &[Input::aux(op), x[0].into(), x[1].into()])?;
        let dd = tp.constant(d);
        let r = tp.sub(pred, dd)?;
        let s = tp.sum_sq(r);
        Ok(tp.scale(s, 0.5))
    })
    .unwrap();
    let pred = forward_model(&model, &geom, &w, &[0, 1], &cfg).unwrap();
    let res: Vec<ShotRecord> = pred
        .iter()
        .zip(&obs)
        .map(|(p, o)| ShotRecord {
            data: p.data.iter().zip(&o.data).map(|(a, b)| a - b).collect(),
            ..p.clone()
        })
        .collect();
    let direct = migrate(&model, &res, &geom, &w, &cfg).unwrap();
    assert_eq!(grads[0].dense().unwrap().data(), direct.data());
    let (l2, _) = fwi_objective(&model, &obs, &geom, &w, &cfg).unwrap();
    assert!((loss - l2).abs() <= 1e-12 * l2);
}

#[test]
fn rule_slots_and_q_adjoint() {
    let (model, geom, w) = small_setup(30);
    let cfg = WaveConfig::default();
    let mut reg = Registry::new();
    register_wave_rules(&mut reg).unwrap();
    let op = WaveOperator::for_model(&model, geom.clone(), vec![1], cfg.clone());
    let mut s = RngStream::new(5);
    let dy: Vec<f64> = (0..geom.receivers.len() * geom.nt()).map(|_| s.normal()).collect();
    let dq: Vec<f64> = (0..geom.nt()).map(|_| s.normal()).collect();
    let dyt = Tensor::new(vec![1, geom.receivers.len(), geom.nt()], dy.clone()).unwrap();
    let m = Tensor::from(&model.field);
    let q = Tensor::new(vec![geom.nt()], w.samples.clone()).unwrap();
    let mut tape_ops: Vec<Input> = Vec::new();
    tape_ops.push(Input::aux(op));
    let (_, grads) = gradient(&reg, &[m, q], |tp, x| {
        tape_ops.push(x[0].into());
        tape_ops.push(x[1].into());
        let pred = tp.call1(WAVE_RULE, &tape_ops)?;
        let c = tp.constant(dyt);
        tp.inner(pred, c)
    })
    .unwrap();
    let qbar = grads[1].dense().unwrap().data().to_vec();
    // F dq against the q cotangent
    let fq = forward_model(&model, &geom, &Wavelet::custom(dq.clone()).unwrap(), &[1], &cfg).unwrap();
    let lhs = dot(&fq[0].data, &dy);
    let rhs = dot(&dq, &qbar);
    assert!((lhs - rhs).abs() / lhs.abs() < 1e-5);

    // the operator slot is not a traced input, so the rule itself reports NoTangent for it
    let args = vec![
        Arg::Aux(Arc::new(WaveOperator::for_model(&model, geom.clone(), vec![1], cfg))),
        Arg::Tensor(Tensor::from(&model.field)),
        Arg::Tensor(Tensor::new(vec![geom.nt()], w.samples.clone()).unwrap()),
    ];
    let (_, pb) = WaveRule.apply(&args, true).unwrap();
    let cot = pb.unwrap()(&[Tensor::new(vec![1, geom.receivers.len(), geom.nt()], dy).unwrap()]).unwrap();
    assert!(cot[0].is_no_tangent());
}

#[test]
fn timelapse_blocks_are_independent() {
    let (model, geom, w) = small_setup(30);
    let cfg = WaveConfig::default();
    let single = timelapse_forward(std::slice::from_ref(&model), std::slice::from_ref(&geom), std::slice::from_ref(&w), &cfg).unwrap();
    let direct = forward_model(&model, &geom, &w, &[0, 1], &cfg).unwrap();
    assert_eq!(single.vintages[0], direct);
    let models = vec![model.clone(); 5];
    let tl = timelapse_forward(&models, &vec![geom.clone(); 5], &vec![w.clone(); 5], &cfg).unwrap();
    assert_eq!(tl.vintages.len(), 5);
    assert!(tl.vintages.iter().all(|v| *v == direct));
    assert!(timelapse_forward(&models, &[geom], &[w], &cfg).is_err());
}

#[test]
fn energy_decays_after_source_cutoff() {
    let n = 60;
    let model = homogeneous(n, 10.0, V0);
    let geom = AcquisitionGeometry::new(vec![[300.0, 300.0]], vec![[310.0, 300.0]], 1.2, 0.002).unwrap();
    let w = Wavelet::ricker(15.0, geom.dt, geom.nt()).unwrap();
    let prop = Propagator::for_geometry(&model, &geom, &WaveConfig::default()).unwrap();
    let snaps = prop.snapshots(geom.sources[0], &w.samples).unwrap();
    let cutoff = (0.25 / geom.dt) as usize;
    let e: Vec<f64> = (cutoff..snaps.len() - 1).map(|t| prop.energy(&snaps[t], &snaps[t + 1])).collect();
    for k in 0..e.len().saturating_sub(100) {
        assert!(e[k + 100] <= 1.01 * e[k], "step {}: {} -> {}", k + cutoff, e[k], e[k + 100]);
    }
    assert!(e[e.len() - 1] < 0.1 * e[0]);
}

#[test]
fn reciprocity_in_homogeneous_medium() {
    let model = homogeneous(50, 10.0, V0);
    let (a, b) = ([120.0, 150.0], [330.0, 260.0]);
    let ga = AcquisitionGeometry::new(vec![a], vec![b], 0.4, 0.002).unwrap();
    let gb = AcquisitionGeometry::new(vec![b], vec![a], 0.4, 0.002).unwrap();
    let w = Wavelet::ricker(15.0, ga.dt, ga.nt()).unwrap();
    let cfg = WaveConfig::default();
    let da = &forward_model(&model, &ga, &w, &[0], &cfg).unwrap()[0].data;
    let db = &forward_model(&model, &gb, &w, &[0], &cfg).unwrap()[0].data;
    let diff: f64 = da.iter().zip(db).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = da.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-6, "{}", diff / norm);
}

#[test]
fn shot_file_round_trip() {
    let (model, geom, w) = small_setup(30);
    let rec = &forward_model(&model, &geom, &w, &[1], &WaveConfig::default()).unwrap()[0];
    let bytes = encode_shot(&geom, rec).unwrap();
    let (g2, r2) = decode_shot(&bytes).unwrap();
    assert_eq!(g2, geom);
    assert_eq!(&r2, rec);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_shot(&bad).unwrap_err().to_string().contains("not an SSHT file"));
    assert!(decode_shot(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn colored_noise_hits_target_snr() {
    let (model, geom, w) = small_setup(30);
    let recs = forward_model(&model, &geom, &w, &[0, 1], &WaveConfig::default()).unwrap();
    let noisy = add_colored_noise(&recs, &w, 8.0, &mut RngStream::new(2)).unwrap();
    let sig: f64 = flat(&recs).iter().map(|v| v * v).sum::<f64>().sqrt();
    let err: f64 = flat(&noisy).iter().zip(flat(&recs)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!((20.0 * (sig / err).log10() - 8.0).abs() < 1e-9);
}
