use super::*;
use crate::adgraph::value;
use crate::fieldio::RngStream;
use rustfft::num_complex::Complex32;

fn small_arch() -> FnoArch {
    FnoArch {
        width: 4,
        layers: 2,
        k_max: 3,
        proj_hidden: 6,
    }
}

fn stats(n_out: usize) -> NormStats {
    NormStats {
        log_k_mean: 4.5,
        log_k_std: 0.7,
        out_mean: (0..n_out).map(|c| 0.1 + 0.05 * c as f32).collect(),
    }
}

fn weights(dims: [usize; 2], seed: u64) -> FnoWeights {
    let mut w = FnoWeights::new(dims, small_arch(), vec![1.0, 2.0], &mut RngStream::new(seed)).unwrap();
    w.stats = Some(stats(2));
    // Nudge every block off its initial value so no gradient is trivially zero.
    let mut r = RngStream::new(seed + 1);
    let flat: Vec<f32> = w.to_flat().iter().map(|v| v + (0.05 * r.normal()) as f32).collect();
    w.set_flat(&flat).unwrap();
    w
}

fn random_k(dims: [usize; 2], seed: u64) -> Field {
    let mut s = RngStream::new(seed);
    let v = (0..dims[0] * dims[1]).map(|_| 90.0 * (0.6 * s.normal()).exp()).collect();
    Field::new(dims.to_vec(), vec![10.0, 10.0], vec![0.0, 0.0], v).unwrap()
}

fn random_plane(n: usize, seed: u64) -> Vec<f32> {
    let mut s = RngStream::new(seed);
    (0..n).map(|_| s.normal() as f32).collect()
}

/// `y = Re(F⁻¹(R ⊙ F x))` through the tape, single channel in and out.
fn spectral_apply(grid: &SpectralGrid, r: &[Complex32], x: &[f32]) -> Vec<f64> {
    let p = x.len();
    let at = [
        Tensor::new(vec![1, 1, p], x.iter().map(|v| *v as f64).collect()).unwrap(),
        Tensor::new(vec![1, 1, r.len()], r.iter().map(|c| c.re as f64).collect()).unwrap(),
        Tensor::new(vec![1, 1, r.len()], r.iter().map(|c| c.im as f64).collect()).unwrap(),
    ];
    let mut out = Vec::new();
    value(ops::registry(), &at, |tp, v| {
        let y = tp.call1(SPECTRAL, &[v[0].into(), v[1].into(), v[2].into(), Input::aux(grid.clone())])?;
        out = tp.value(y).data().to_vec();
        Ok(tp.constant(Tensor::scalar(0.0)))
    })
    .unwrap();
    out
}

fn spectral_transpose(grid: &SpectralGrid, r: &[Complex32], x: &[f32], ybar: &[f64]) -> Vec<f64> {
    let p = x.len();
    let at = [Tensor::new(vec![1, 1, p], x.iter().map(|v| *v as f64).collect()).unwrap()];
    let rr = Tensor::new(vec![1, 1, r.len()], r.iter().map(|c| c.re as f64).collect()).unwrap();
    let ri = Tensor::new(vec![1, 1, r.len()], r.iter().map(|c| c.im as f64).collect()).unwrap();
    let yb = Tensor::new(vec![1, 1, p], ybar.to_vec()).unwrap();
    let (_, g) = gradient(ops::registry(), &at, |tp, v| {
        let (rr, ri) = (tp.constant(rr), tp.constant(ri));
        let y = tp.call1(SPECTRAL, &[v[0].into(), rr.into(), ri.into(), Input::aux(grid.clone())])?;
        let c = tp.constant(yb);
        tp.inner(y, c)
    })
    .unwrap();
    g[0].dense().unwrap().data().to_vec()
}

fn random_modes(n: usize, seed: u64) -> Vec<Complex32> {
    let mut s = RngStream::new(seed);
    (0..n).map(|_| Complex32::new(s.normal() as f32, s.normal() as f32)).collect()
}

#[test]
fn spectral_layer_passes_the_dot_test() {
    let grid = SpectralGrid::new(16, 12, 4).unwrap();
    for seed in 0..5 {
        let r = random_modes(grid.n_modes(), seed);
        let x = random_plane(16 * 12, 100 + seed);
        let ybar: Vec<f64> = random_plane(16 * 12, 200 + seed).iter().map(|v| *v as f64).collect();
        let ax = spectral_apply(&grid, &r, &x);
        let aty = spectral_transpose(&grid, &r, &x, &ybar);
        let lhs: f64 = ax.iter().zip(&ybar).map(|(a, b)| a * b).sum();
        let rhs: f64 = aty.iter().zip(&x).map(|(a, b)| a * *b as f64).sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
        assert!(rel < 1e-5, "seed {seed}: <Ax,y> {lhs} vs <x,A'y> {rhs} (rel {rel:e})");
    }
}

#[test]
fn spectral_layer_is_linear() {
    let grid = SpectralGrid::new(12, 12, 3).unwrap();
    let r = random_modes(grid.n_modes(), 7);
    let (x1, x2) = (random_plane(144, 1), random_plane(144, 2));
    let (a, b) = (0.7f32, -1.3f32);
    let comb: Vec<f32> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
    let (y1, y2, y) = (spectral_apply(&grid, &r, &x1), spectral_apply(&grid, &r, &x2), spectral_apply(&grid, &r, &comb));
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 0..y.len() {
        let lin = a as f64 * y1[i] + b as f64 * y2[i];
        assert!((y[i] - lin).abs() < 1e-5 * scale, "cell {i}: {} vs {lin}", y[i]);
    }
}

#[test]
fn unit_modes_are_a_low_pass_filter() {
    // Independent oracle: naive f64 DFT, truncate to |kx|, |kz| < k_max, invert.
    let (nx, nz, k) = (10, 8, 3);
    let grid = SpectralGrid::new(nx, nz, k).unwrap();
    let r = vec![Complex32::new(1.0, 0.0); grid.n_modes()];
    let x = random_plane(nx * nz, 3);
    let got = spectral_apply(&grid, &r, &x);
    let keep = |f: usize, n: usize| f < k || f + k > n;
    let tau = std::f64::consts::TAU;
    for i in 0..nx {
        for j in 0..nz {
            let mut acc = 0.0;
            for kx in (0..nx).filter(|&f| keep(f, nx)) {
                for kz in (0..nz).filter(|&f| keep(f, nz)) {
                    let (mut re, mut im) = (0.0, 0.0);
                    for a in 0..nx {
                        for b in 0..nz {
                            let ph = -tau * (kx * a) as f64 / nx as f64 - tau * (kz * b) as f64 / nz as f64;
                            re += x[a * nz + b] as f64 * ph.cos();
                            im += x[a * nz + b] as f64 * ph.sin();
                        }
                    }
                    let ph = tau * (kx * i) as f64 / nx as f64 + tau * (kz * j) as f64 / nz as f64;
                    acc += re * ph.cos() - im * ph.sin();
                }
            }
            let want = acc / (nx * nz) as f64;
            assert!((got[i * nz + j] - want).abs() < 1e-4, "({i},{j}): {} vs {want}", got[i * nz + j]);
        }
    }
}

#[test]
fn mode_limit_is_checked() {
    assert!(SpectralGrid::new(8, 8, 0).is_err());
    assert!(SpectralGrid::new(8, 8, 5).is_err());
    assert!(SpectralGrid::new(8, 16, 4).is_ok());
    assert!(FnoWeights::zeros([8, 8], FnoArch::default(), vec![1.0]).is_err());
}

#[test]
fn zero_weights_predict_the_training_mean() {
    let mut w = FnoWeights::zeros([8, 8], small_arch(), vec![1.0, 2.0]).unwrap();
    w.stats = Some(stats(2));
    let s = fno_forward(&random_k([8, 8], 1), &w).unwrap();
    for (c, snap) in s.snapshots.iter().enumerate() {
        let want = stats(2).out_mean[c] as f64;
        assert!(snap.data().iter().all(|v| (v - want).abs() < 1e-6), "channel {c}");
    }
    assert_eq!(s.times, vec![1.0, 2.0]);
    assert_eq!(s.snapshots[0].spacing(), &[10.0, 10.0]);
}

#[test]
fn missing_statistics_and_wrong_grid_are_rejected() {
    let mut w = weights([8, 8], 1);
    assert!(fno_forward(&random_k([8, 12], 1), &w).is_err());
    w.stats = None;
    assert!(fno_forward(&random_k([8, 8], 1), &w).is_err());
}

#[test]
fn predictions_lie_in_the_unit_interval_and_batch_matches_single() {
    let w = weights([8, 8], 2);
    let ks: Vec<Field> = (0..3).map(|s| random_k([8, 8], 10 + s)).collect();
    let batch = fno_forward_batch(&ks, &w).unwrap();
    for (k, b) in ks.iter().zip(&batch) {
        let one = fno_forward(k, &w).unwrap();
        for (x, y) in one.snapshots.iter().zip(&b.snapshots) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((0.0..=1.0).contains(u));
                assert!((u - v).abs() < 1e-6);
            }
        }
    }
}

fn pairs(dims: [usize; 2], n: usize, seed: u64) -> Vec<(Field, SaturationSeries)> {
    let w = weights(dims, seed);
    (0..n)
        .map(|i| {
            let k = random_k(dims, seed * 100 + i as u64);
            // Targets from a different network so the loss is not zero.
            let s = fno_forward(&random_k(dims, seed * 100 + 50 + i as u64), &w).unwrap();
            let s = SaturationSeries {
                times: s.times,
                snapshots: s.snapshots.iter().map(|f| k.with_data(f.data().to_vec()).unwrap()).collect(),
            };
            (k, s)
        })
        .collect()
}

#[test]
fn weight_gradient_matches_central_differences() {
    let w = weights([8, 8], 3);
    let data = pairs([8, 8], 3, 4);
    let (_, g) = fno_loss_grad(&w, &data).unwrap();
    let flat = w.to_flat();
    // One coordinate from each parameter block, plus the largest gradient.
    let mut idx = Vec::new();
    let mut start = 0;
    for (b, _) in w.blocks_with_shapes() {
        idx.push(start + b.len() / 2);
        start += b.len();
    }
    let big = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
    idx.push(big);
    let gmax = g[big].abs();
    for i in idx {
        let h = 1e-2f32;
        let eval = |d: f32| {
            let mut p = flat.clone();
            p[i] += d;
            let mut ww = w.clone();
            ww.set_flat(&p).unwrap();
            fno_loss_grad(&ww, &data).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
        let err = (fd - g[i]).abs();
        assert!(err < 1e-2 * g[i].abs().max(1e-1 * gmax), "weight {i}: tape {} vs fd {fd}", g[i]);
    }
}

fn k_loss(reg: &Registry, w: &FnoWeights, k: &Field, cot: &Tensor) -> (f64, Vec<f64>) {
    let at = [Tensor::new(vec![8, 8], k.data().to_vec()).unwrap()];
    let (l, g) = gradient(reg, &at, |tp, v| {
        let y = tp.call1(PLUME_ALIAS, &[v[0].into(), Input::aux(w.clone())])?;
        let c = tp.constant(cot.clone());
        tp.inner(y, c)
    })
    .unwrap();
    (l, g[0].dense().map(|t| t.data().to_vec()).unwrap_or_default())
}

#[test]
fn permeability_gradient_matches_central_differences() {
    let reg = plume_registry(true).unwrap();
    let w = weights([8, 8], 5);
    let k = random_k([8, 8], 6);
    let cot = Tensor::new(vec![2, 8, 8], random_plane(128, 7).iter().map(|v| *v as f64).collect()).unwrap();
    let (_, g) = k_loss(&reg, &w, &k, &cot);
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in [0, 9, 27, 36, 63] {
        // Relative step in ln K keeps the probe inside the f32 resolution.
        let h = 1e-2 * k.data()[i];
        let eval = |d: f64| {
            let mut v = k.data().to_vec();
            v[i] += d;
            k_loss(&reg, &w, &k.with_data(v).unwrap(), &cot).0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-3 * gmax.max(1e-12) + 2e-2 * g[i].abs(), "cell {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn zero_cotangent_gives_zero_gradient() {
    let reg = plume_registry(true).unwrap();
    let w = weights([8, 8], 5);
    let (_, g) = k_loss(&reg, &w, &random_k([8, 8], 1), &Tensor::zeros(&[2, 8, 8]));
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn alias_resolves_to_the_bound_operator() {
    let sim = plume_registry(false).unwrap();
    let sur = plume_registry(true).unwrap();
    assert_eq!(sim.resolve(PLUME_ALIAS), Some(crate::flow::FLOW_RULE));
    assert_eq!(sur.resolve(PLUME_ALIAS), Some(FNO_RULE));
    let mut reg = plume_registry(true).unwrap();
    assert!(reg.alias(PLUME_ALIAS, crate::flow::FLOW_RULE).is_err());
    assert!(register_fno_rule(&mut reg).is_err());

    // Through the alias the surrogate gives exactly what the direct call gives.
    let w = weights([8, 8], 8);
    let k = random_k([8, 8], 9);
    let direct = fno_forward(&k, &w).unwrap();
    let at = [Tensor::new(vec![8, 8], k.data().to_vec()).unwrap()];
    let mut via = Vec::new();
    value(&sur, &at, |tp, v| {
        let y = tp.call1(PLUME_ALIAS, &[v[0].into(), Input::aux(w.clone())])?;
        via = tp.value(y).data().to_vec();
        Ok(tp.constant(Tensor::scalar(0.0)))
    })
    .unwrap();
    let flat: Vec<f64> = direct.snapshots.iter().flat_map(|s| s.data().to_vec()).collect();
    assert_eq!(via, flat);

    // The simulator-bound registry refuses surrogate weights as its aux.
    let err = value(&sim, &at, |tp, v| tp.call1(PLUME_ALIAS, &[v[0].into(), Input::aux(w.clone())]));
    assert!(err.is_err());
}

#[test]
fn dataset_split_and_statistics() {
    let data = pairs([8, 8], 6, 11);
    assert!(PairDataset::new(Vec::new(), 0).is_err());
    assert!(PairDataset::new(data.clone(), 0).is_err());
    assert!(PairDataset::new(data.clone(), 7).is_err());
    let ds = PairDataset::new(data.clone(), 4).unwrap();
    assert_eq!((ds.train().len(), ds.held_out().len()), (4, 2));
    let logs: Vec<f64> = data[..4].iter().flat_map(|(k, _)| k.data().iter().map(|v| v.ln())).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    assert!((ds.stats.log_k_mean as f64 - mean).abs() < 1e-5);
    let mut bad = data;
    bad[2].1.times = vec![9.0, 9.5];
    assert!(PairDataset::new(bad, 4).is_err());
}

#[test]
fn weights_and_dataset_round_trip() {
    let w = weights([8, 8], 12);
    let back = decode_weights(&encode_weights(&w)).unwrap();
    assert_eq!(back, w);
    let mut bare = w.clone();
    bare.stats = None;
    assert_eq!(decode_weights(&encode_weights(&bare)).unwrap(), bare);
    let mut bytes = encode_weights(&w);
    bytes.pop();
    assert!(decode_weights(&bytes).is_err());
    assert!(decode_weights(b"SNFP\x01\x00").is_err());

    let dir = tempfile::tempdir().unwrap();
    write_weights(&w, &dir.path().join("w.sfno")).unwrap();
    assert_eq!(read_weights(&dir.path().join("w.sfno")).unwrap(), w);
    let ds = PairDataset::new(pairs([8, 8], 3, 13), 2).unwrap();
    write_dataset(&dir.path().join("pairs"), &ds).unwrap();
    assert_eq!(read_dataset(&dir.path().join("pairs")).unwrap(), ds);
}

#[test]
fn training_needs_enough_pairs() {
    let ds = PairDataset::new(pairs([8, 8], 5, 14), 5).unwrap();
    let err = fno_train(&ds, &FnoTrainConfig::default(), &RngStream::new(1)).unwrap_err();
    assert!(err.to_string().contains("50"), "{err}");
}

#[test]
fn short_training_reduces_loss_and_is_deterministic() {
    let dims = [8, 8];
    let ds = PairDataset::new(pairs(dims, 12, 15), 10).unwrap();
    let hyper = FnoTrainConfig {
        arch: small_arch(),
        epochs: 15,
        batch_size: 5,
        lr: 1e-2,
        min_pairs: 1,
    };
    let a = fno_train(&ds, &hyper, &RngStream::new(3)).unwrap();
    let b = fno_train(&ds, &hyper, &RngStream::new(3)).unwrap();
    assert_eq!(a.train_curve, b.train_curve);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.held_out_curve.len(), 15);
    let (first, last) = (a.train_curve[0], *a.train_curve.last().unwrap());
    assert!(last < first, "loss {first} -> {last}");
}
