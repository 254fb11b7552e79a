use super::*;
use crate::adgraph::gradient;

fn flow(dims: [usize; 2], hidden: usize, depth: usize, nscales: usize, seed: u64) -> CouplingFlowParams {
    CouplingFlowParams::new(dims, 1, hidden, depth, nscales, &mut RngStream::new(seed)).unwrap()
}

fn random_flow(dims: [usize; 2], seed: u64) -> CouplingFlowParams {
    flow(dims, 8, 3, 2, seed).randomized(0.1, &mut RngStream::new(seed + 1000))
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn normal_field(dims: [usize; 2], seed: u64) -> Field {
    crate::fieldio::gaussian_field(&dims, &mut RngStream::new(seed)).unwrap()
}

#[test]
fn identity_init_is_block_flip_permutation() {
    // One scale, one coupling: squeeze, reverse the four sub-pixel channels,
    // unsqueeze. That swaps (i, j) with (i^1, j^1) inside every 2x2 block.
    let p = flow([6, 8], 4, 1, 1, 3);
    let m = normal_field([6, 8], 9);
    let (z, ld) = nf_inverse(&m, &p).unwrap();
    assert_eq!(ld, 0.0);
    for i in 0..6 {
        for j in 0..8 {
            assert_eq!(z.at2(i ^ 1, j ^ 1), m.at2(i, j) as f32 as f64);
        }
    }
    let (back, ld) = nf_forward(&z, &p).unwrap();
    assert_eq!(ld, 0.0);
    assert_eq!(back.data(), z.with_data(narrow(m.data()).iter().map(|v| *v as f64).collect()).unwrap().data());

    // Two couplings per scale reverse twice, giving the identity.
    let p2 = flow([8, 8], 4, 2, 2, 3);
    let m = normal_field([8, 8], 10);
    let (z, _) = nf_inverse(&m, &p2).unwrap();
    assert_eq!(z.data(), widen(&narrow(m.data())).as_slice());
}

#[test]
fn param_count_is_a_function_of_architecture() {
    let p = flow([16, 16], 8, 3, 2, 0);
    let per = |c: usize, h: usize| 2 * c + h * c * 9 + h + 2 * c * h * 9 + 2 * c;
    assert_eq!(p.param_count(), 2 * 256 + 3 * per(4, 8) + 3 * per(16, 8));
    assert_eq!(p.param_count(), flow([16, 16], 8, 3, 2, 99).param_count());
    assert!(CouplingFlowParams::new([10, 16], 1, 8, 3, 2, &mut RngStream::new(0)).is_err());
    assert!(CouplingFlowParams::new([16, 16], 2, 8, 3, 2, &mut RngStream::new(0)).is_err());
}

#[test]
fn round_trip_over_ten_seeds() {
    for seed in 0..10 {
        let p = random_flow([16, 16], seed);
        let m = normal_field([16, 16], 100 + seed);
        let (z, ld_inv) = nf_inverse(&m, &p).unwrap();
        let (back, ld_fwd) = nf_forward(&z, &p).unwrap();
        let e = rel(back.data(), m.data());
        assert!(e < 1e-4, "seed {seed}: round trip {e}");
        assert!(ld_inv.abs() > 1e-2, "flow is not trivially volume preserving");
        assert!((ld_fwd + ld_inv).abs() < 1e-3, "seed {seed}: logdets {ld_fwd} {ld_inv}");

        let z2 = normal_field([16, 16], 200 + seed);
        let (m2, ld_f) = nf_forward(&z2, &p).unwrap();
        let (zb, ld_i) = nf_inverse(&m2, &p).unwrap();
        assert!(rel(zb.data(), z2.data()) < 1e-4);
        assert!((ld_f + ld_i).abs() < 1e-3);
    }
}

#[test]
fn distinct_models_map_to_distinct_latents() {
    let p = random_flow([8, 8], 4);
    let a = normal_field([8, 8], 1);
    let mut bd = a.data().to_vec();
    bd[17] += 0.01;
    let b = a.with_data(bd).unwrap();
    let (za, _) = nf_inverse(&a, &p).unwrap();
    let (zb, _) = nf_inverse(&b, &p).unwrap();
    assert!(za.data() != zb.data());
}

#[test]
fn logdet_matches_brute_force_jacobian() {
    // Jacobian of the normalizing map by central differences in f64 of the
    // f32 network, then log|det| via LU with partial pivoting.
    let p = random_flow([4, 4], 12);
    let m = normal_field([4, 4], 13);
    let (_, ld) = nf_inverse(&m, &p).unwrap();
    let n = 16;
    let h = 1e-2;
    let mut jac = vec![vec![0.0; n]; n];
    for k in 0..n {
        let shifted = |d: f64| {
            let mut v = m.data().to_vec();
            v[k] += d;
            nf_inverse(&m.with_data(v).unwrap(), &p).unwrap().0.into_data()
        };
        let (zp, zm) = (shifted(h), shifted(-h));
        for r in 0..n {
            jac[r][k] = (zp[r] - zm[r]) / (2.0 * h);
        }
    }
    let mut logdet = 0.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&a, &b| jac[a][c].abs().total_cmp(&jac[b][c].abs())).unwrap();
        jac.swap(c, piv);
        logdet += jac[c][c].abs().ln();
        for r in c + 1..n {
            let f = jac[r][c] / jac[c][c];
            for k in c..n {
                jac[r][k] -= f * jac[c][k];
            }
        }
    }
    assert!((logdet - ld).abs() < 1e-2, "brute force {logdet} vs {ld}");
}

#[test]
fn scale_is_bounded() {
    for raw in [-1e6f32, -10.0, 0.0, 10.0, 1e6] {
        let s = layers::squash(raw);
        assert!((-3.0..=3.0).contains(&s));
    }
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let p = random_flow([8, 8], 21);
    let samples: Vec<Field> = (0..3).map(|k| normal_field([8, 8], 30 + k)).collect();
    let (_, g) = nf_nll_grad(&samples, &p).unwrap();
    let gmax = g.iter().fold(0f32, |a, v| a.max(v.abs()));
    let mut r = RngStream::new(5);
    let theta = p.to_flat();
    let mut checked = 0;
    while checked < 5 {
        let k = r.below(theta.len());
        if g[k].abs() < 1e-2 * gmax {
            continue;
        }
        let h = 1e-2f32;
        let eval = |d: f32| {
            let mut t = theta.clone();
            t[k] += d;
            let mut q = p.clone();
            q.set_flat(&t).unwrap();
            nf_nll_grad(&samples, &q).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
        let e = (fd - g[k] as f64).abs() / fd.abs().max(1e-12);
        assert!(e < 1e-2, "param {k}: fd {fd} vs {}", g[k]);
        checked += 1;
    }
}

#[test]
fn recompute_and_stored_pullbacks_agree() {
    for seed in 0..3 {
        let p = random_flow([16, 16], 40 + seed);
        let z = normal_field([16, 16], 50 + seed);
        let gm = normal_field([16, 16], 60 + seed);
        let (m, _) = nf_forward(&z, &p).unwrap();
        let a = nf_pullback_recompute(&p, m.data(), gm.data());
        let b = nf_pullback_stored(&p, z.data(), gm.data());
        let e = rel(&a, &b);
        assert!(e < 1e-5, "seed {seed}: {e}");
        assert!(a.iter().any(|v| *v != 0.0));
    }
}

fn eq2_loss(reg: &Registry, prior: NfPrior, a: Tensor, d: Tensor, lambda: f64, z: &Tensor) -> (f64, Vec<f64>) {
    let (l, g) = gradient(reg, &[z.clone()], move |tp, x| {
        let m = tp.call1(NF_RULE, &[x[0].into(), Input::aux(prior)])?;
        let a = tp.constant(a);
        let d = tp.constant(d);
        let am = tp.mul(a, m)?;
        let r = tp.sub(am, d)?;
        let misfit = tp.sum_sq(r);
        let misfit = tp.scale(misfit, 0.5);
        let reg = tp.sum_sq(x[0]);
        let reg = tp.scale(reg, 0.5 * lambda);
        tp.add(misfit, reg)
    })
    .unwrap();
    (l, g[0].dense().unwrap().data().to_vec())
}

use crate::adgraph::Input;

#[test]
fn reparameterized_loss_gradient_matches_finite_differences() {
    let mut reg = Registry::new();
    register_nf_rule(&mut reg).unwrap();
    let p = random_flow([8, 8], 70);
    let shape = vec![8, 8];
    let t = |f: Field| Tensor::new(shape.clone(), f.into_data()).unwrap();
    let a = t(normal_field([8, 8], 71));
    let d = t(normal_field([8, 8], 72));
    let z = t(normal_field([8, 8], 73));
    let lambda = 0.3;
    for backprop in [Backprop::Recompute, Backprop::Stored] {
        let prior = NfPrior::new(p.clone()).with_backprop(backprop);
        let (_, g) = eq2_loss(&reg, prior.clone(), a.clone(), d.clone(), lambda, &z);
        let mut r = RngStream::new(74);
        for _ in 0..5 {
            let k = r.below(64);
            let h = 1e-2;
            let eval = |dz: f64| {
                let mut zz = z.clone();
                zz.data_mut()[k] += dz;
                eq2_loss(&reg, prior.clone(), a.clone(), d.clone(), lambda, &zz).0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let e = (fd - g[k]).abs() / fd.abs().max(1e-6);
            assert!(e < 1e-2, "{backprop:?} coord {k}: fd {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn zero_cotangent_gives_zero_latent_cotangent() {
    let p = random_flow([8, 8], 80);
    let z = normal_field([8, 8], 81);
    let (m, _) = nf_forward(&z, &p).unwrap();
    let g = nf_pullback_recompute(&p, m.data(), &[0.0; 64]);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn rule_registration_and_shape_errors() {
    let mut reg = Registry::new();
    register_nf_rule(&mut reg).unwrap();
    assert!(register_nf_rule(&mut reg).is_err());
    let p = flow([8, 8], 4, 2, 1, 0);
    assert!(nf_forward(&normal_field([8, 6], 0), &p).is_err());
    assert!(nf_inverse(&normal_field([6, 8], 0), &p).is_err());
}

fn toy_corpus(n: usize, dims: [usize; 2], seed: u64) -> Vec<Field> {
    let root = RngStream::new(seed);
    (0..n)
        .map(|i| layered_texture(dims, &LayeredSpec::default(), &mut root.child_indexed("texture", i as u64)).unwrap())
        .collect()
}

#[test]
fn training_needs_two_samples() {
    let data = toy_corpus(1, [8, 8], 0);
    let err = nf_train(&data, &NfTrainConfig::default(), &RngStream::new(0)).unwrap_err();
    assert!(err.to_string().contains("at least 2"));
}

#[test]
fn short_training_reduces_nll_and_is_deterministic() {
    let data = toy_corpus(60, [8, 8], 1);
    let cfg = NfTrainConfig {
        hidden: 8,
        depth: 2,
        nscales: 1,
        epochs: 8,
        batch_size: 10,
        lr: 5e-3,
        noise_std: 0.0,
    };
    let a = nf_train(&data, &cfg, &RngStream::new(2)).unwrap();
    let b = nf_train(&data, &cfg, &RngStream::new(2)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.curve.len(), 8);
    assert!(a.final_nll < 0.8 * a.initial_nll, "{} -> {}", a.initial_nll, a.final_nll);
}

#[test]
fn samples_reproduce_per_pixel_means() {
    let dims = [8, 8];
    let data = toy_corpus(200, dims, 3);
    let cfg = NfTrainConfig {
        hidden: 8,
        depth: 2,
        nscales: 2,
        epochs: 30,
        batch_size: 20,
        lr: 1e-2,
        noise_std: 0.05,
    };
    let trained = nf_train(&data, &cfg, &RngStream::new(4)).unwrap();
    let n = 100;
    let samples = nf_sample(&trained.params, n, &mut RngStream::new(5)).unwrap();
    assert_eq!(samples.len(), n);
    let again = nf_sample(&trained.params, 3, &mut RngStream::new(5)).unwrap();
    assert_eq!(again[..], samples[..3]);
    assert!(nf_sample(&trained.params, 0, &mut RngStream::new(5)).unwrap().is_empty());
    for k in 0..64 {
        let dm = data.iter().map(|f| f.data()[k]).sum::<f64>() / data.len() as f64;
        let dsd = (data.iter().map(|f| (f.data()[k] - dm).powi(2)).sum::<f64>() / data.len() as f64).sqrt();
        let sm = samples.iter().map(|f| f.data()[k]).sum::<f64>() / n as f64;
        assert!((sm - dm).abs() <= 3.0 * dsd / (n as f64).sqrt(), "pixel {k}: sample mean {sm}, data {dm} ± {dsd}");
    }
}

#[test]
fn snfp_round_trip_and_rejects_garbage() {
    let p = random_flow([8, 8], 90);
    let bytes = encode_params(&p);
    assert_eq!(&bytes[..4], b"SNFP");
    assert_eq!(bytes.len(), 32 + 4 * p.param_count());
    assert_eq!(decode_params(&bytes).unwrap(), p);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.snfp");
    write_params(&p, &path).unwrap();
    assert_eq!(read_params(&path).unwrap(), p);
    assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_params(&bad).is_err());
}

#[test]
fn textures_are_seed_pinned() {
    let a = toy_corpus(3, [16, 16], 7);
    let b = toy_corpus(3, [16, 16], 7);
    assert_eq!(a, b);
    for f in &a {
        // Velocity increases with depth in every column.
        for i in 0..16 {
            for j in 1..16 {
                assert!(f.at2(i, j) >= f.at2(i, j - 1));
            }
        }
    }
    let blk = blocky_texture([16, 16], &BlockySpec::default(), &mut RngStream::new(1)).unwrap();
    assert!(blk.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    assert!(blk.data().iter().any(|v| *v == 1.0));
}
