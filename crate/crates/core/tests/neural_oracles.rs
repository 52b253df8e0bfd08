use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsc_core::network::NetworkSpec;
use tsc_core::neural::gradcheck::check_gradients;
use tsc_core::neural::{dcl_forward, softmax_rows, Head, MixingMode, NetConfig, NlTsc};

fn randomize(model: &mut NlTsc, rng: &mut ChaCha8Rng, scale: f64) {
    for v in model.params_mut().values.iter_mut() {
        v.mapv_inplace(|_| rng.random_range(-scale..scale));
    }
}

fn random_input(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Feature-major reference: each sample is a `features × intersections`
/// matrix and every layer is written out with explicit loops.
fn reference_forward(model: &NlTsc, x: &Array2<f64>, net: Option<&tsc_core::network::RoadNetwork>) -> Array2<f64> {
    let p = |name: &str| model.params().values[model.param_index(name).unwrap_or_else(|| panic!("{name}"))].clone();
    let n = model.config().n_intersections;
    type M = Vec<Vec<f64>>; // [feature][intersection]
    let dense = |w: &Array2<f64>, b: &Array2<f64>, s: &M, relu: bool| -> M {
        (0..w.nrows())
            .map(|o| {
                (0..n)
                    .map(|i| {
                        let mut acc = b[[0, o]];
                        for f in 0..w.ncols() {
                            acc += w[[o, f]] * s[f][i];
                        }
                        if relu { acc.max(0.0) } else { acc }
                    })
                    .collect()
            })
            .collect()
    };
    let mixing: Vec<Option<Array2<f64>>> = (0..2)
        .map(|r| match model.config().mixing {
            MixingMode::Disabled => None,
            MixingMode::FixedHop { hops } => Some(tsc_core::neural::fixed_hop_weights(net.unwrap(), hops).unwrap()),
            mode => {
                let (wa, wb) = (p(&format!("mix{r}.wa")), p(&format!("mix{r}.wb")));
                let mut w = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..wa.ncols() {
                            w[[i, j]] += wa[[i, k]] * wb[[k, j]];
                        }
                    }
                }
                if mode == MixingMode::LearnedSoftmax {
                    for i in 0..n {
                        let z: f64 = (0..n).map(|j| w[[i, j]].exp()).sum();
                        for j in 0..n {
                            w[[i, j]] = w[[i, j]].exp() / z;
                        }
                    }
                }
                Some(w)
            }
        })
        .collect();
    let out_dim = model.head().out_dim();
    let mut out = Array2::zeros((x.nrows(), out_dim));
    for b in 0..x.nrows() / n {
        let s: M = (0..x.ncols()).map(|f| (0..n).map(|i| x[[b * n + i, f]]).collect()).collect();
        let mut h = dense(&p("embed.weight"), &p("embed.bias"), &s, true);
        for (r, w) in mixing.iter().enumerate() {
            let hp: M = match w {
                Some(w) => h
                    .iter()
                    .map(|row| (0..n).map(|i| row[i] + (0..n).map(|j| w[[i, j]] * row[j]).sum::<f64>()).collect())
                    .collect(),
                None => h.clone(),
            };
            let a = dense(&p(&format!("process{r}.0.weight")), &p(&format!("process{r}.0.bias")), &hp, true);
            let c = dense(&p(&format!("process{r}.1.weight")), &p(&format!("process{r}.1.bias")), &a, false);
            h = hp.iter().zip(&c).map(|(u, v)| u.iter().zip(v).map(|(x, y)| x + y).collect()).collect();
        }
        let l = dense(&p("local.0.weight"), &p("local.0.bias"), &s, true);
        let l = dense(&p("local.1.weight"), &p("local.1.bias"), &l, true);
        let fused: M = h.into_iter().chain(l).collect();
        let o = dense(&p("output.weight"), &p("output.bias"), &fused, false);
        for k in 0..out_dim {
            for i in 0..n {
                out[[b * n + i, k]] = o[k][i];
            }
        }
    }
    out
}

#[test]
fn forward_matches_reference() {
    let net = NetworkSpec { rows: 2, cols: 2, lane_length_m: 100.0 }.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let modes = [MixingMode::Learned, MixingMode::LearnedSoftmax, MixingMode::FixedHop { hops: 1 }, MixingMode::Disabled];
    for mode in modes {
        for head in [Head::Policy, Head::Value] {
            let config = NetConfig { mixing: mode, rank: Some(3), ..NetConfig::new(4) };
            let mut model = NlTsc::new(config, head, Some(&net), 4).unwrap();
            randomize(&mut model, &mut rng, 0.3);
            let x = random_input(12, 72, &mut rng);
            let got = model.forward(x.clone()).unwrap();
            let want = reference_forward(&model, &x, Some(&net));
            let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "{mode:?} {head:?}: {err}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let net = NetworkSpec { rows: 2, cols: 2, lane_length_m: 100.0 }.build().unwrap();
    for (seed, mode) in [(1, MixingMode::Learned), (2, MixingMode::LearnedSoftmax), (3, MixingMode::FixedHop { hops: 2 })] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = NetConfig { mixing: mode, ..NetConfig::new(4) };
        let mut model = NlTsc::new(config, Head::Policy, Some(&net), seed).unwrap();
        randomize(&mut model, &mut rng, 0.2);
        let x = random_input(8, 72, &mut rng);
        let w = random_input(8, 4, &mut rng);
        for g in check_gradients(&model, &x, &w, 1e-5, 12, &mut rng).unwrap() {
            assert!(g.rel_error <= 1e-4, "{mode:?} {}: {}", g.name, g.rel_error);
            assert!(g.skipped * 2 < g.probes, "{}: {} of {} skipped", g.name, g.skipped, g.probes);
        }
    }
}

#[test]
fn factorized_mixing_equals_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..100 {
        let n = 1 + trial % 8;
        let wa = random_input(n, n, &mut rng);
        let wb = random_input(n, n, &mut rng);
        let h = random_input(3 * n, 5, &mut rng);
        let got = dcl_forward(h.view(), wa.view(), wb.view()).unwrap();
        for b in 0..3 {
            for i in 0..n {
                for f in 0..5 {
                    let mut want = h[[b * n + i, f]];
                    for j in 0..n {
                        let wij: f64 = (0..n).map(|k| wa[[i, k]] * wb[[k, j]]).sum();
                        want += wij * h[[b * n + j, f]];
                    }
                    assert!((got[[b * n + i, f]] - want).abs() <= 1e-12);
                }
            }
        }
    }
    let zero = Array2::zeros((2, 2));
    let h = random_input(2, 3, &mut rng);
    assert_eq!(dcl_forward(h.view(), zero.view(), zero.view()).unwrap(), h);
    assert!(dcl_forward(h.view(), zero.view(), Array2::<f64>::zeros((2, 3)).view()).is_err());
}

#[test]
fn zero_mixing_is_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = NlTsc::new(NetConfig::new(4), Head::Value, None, 2).unwrap();
    randomize(&mut model, &mut rng, 0.2);
    for r in 0..2 {
        let k = model.param_index(&format!("mix{r}.wa")).unwrap();
        model.params_mut().values[k].fill(0.0);
    }
    let x = random_input(4, 72, &mut rng);
    let base = model.forward(x.clone()).unwrap();
    let mut y = x.clone();
    for f in 0..72 {
        y[[2, f]] += 0.5;
    }
    let moved = model.forward(y).unwrap();
    for i in [0, 1, 3] {
        assert_eq!(base[[i, 0]], moved[[i, 0]]);
    }
    assert_ne!(base[[2, 0]], moved[[2, 0]]);
}

#[test]
fn local_layers_commute_with_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = NetConfig { mixing: MixingMode::Disabled, ..NetConfig::new(3) };
    let mut model = NlTsc::new(config, Head::Policy, None, 2).unwrap();
    randomize(&mut model, &mut rng, 0.2);
    let x = random_input(3, 72, &mut rng);
    let perm = [2, 0, 1];
    let px = Array2::from_shape_fn((3, 72), |(i, f)| x[[perm[i], f]]);
    let out = model.forward(x).unwrap();
    let pout = model.forward(px).unwrap();
    for i in 0..3 {
        assert_eq!(pout.row(i), out.row(perm[i]));
    }
}

#[test]
fn softmax_mode_and_policy_distribution() {
    let config = NetConfig { mixing: MixingMode::LearnedSoftmax, ..NetConfig::new(5) };
    let model = NlTsc::new(config, Head::Policy, None, 3).unwrap();
    for w in model.mixing_matrices() {
        assert!(w.unwrap().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = model;
    randomize(&mut model, &mut rng, 0.5);
    for w in model.mixing_matrices() {
        for row in w.unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
    let logits = model.forward(random_input(10, 72, &mut rng)).unwrap();
    for row in softmax_rows(logits.view()).rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}
