//! Kernel checks against explicit-loop and DFT-matrix oracles, plus
//! finite-difference gradient checks for every differentiable op.

use std::f64::consts::PI;

use cape_core::tensor::{grad_check, Modes, Tape, Tensor, Var, FD_STEP};
use cape_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn run1(x: &Tensor, f: impl Fn(&mut Tape, Var) -> cape_core::Result<Var>) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = f(&mut t, v).unwrap();
    t.value(y).clone()
}

// ---- oracles -------------------------------------------------------------

fn conv1x1_oracle(x: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (ci, sites) = (x.shape()[0], x.site_count());
    let co = w.shape()[0];
    let mut y = vec![0.0; co * sites];
    for s in 0..sites {
        for o in 0..co {
            let mut acc = b[o];
            for i in 0..ci {
                acc += w.data()[o * ci + i] * x.data()[i * sites + s];
            }
            y[o * sites + s] = acc;
        }
    }
    y
}

fn depthwise_oracle_1d(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let (ci, n) = (x.shape()[0], x.shape()[1]);
    let (co, taps) = (k.shape()[0], k.shape()[1]);
    let r = (taps / 2) as isize;
    let mult = co / ci;
    let mut y = vec![0.0; co * n];
    for o in 0..co {
        for j in 0..n {
            for t in 0..taps {
                let src = (j as isize + t as isize - r).rem_euclid(n as isize) as usize;
                y[o * n + j] += k.data()[o * taps + t] * x.data()[(o / mult) * n + src];
            }
        }
    }
    y
}

fn spectral_oracle_1d(x: &Tensor, w: &Tensor, modes: usize) -> Vec<f64> {
    let (ci, n) = (x.shape()[0], x.shape()[1]);
    let co = w.shape()[1];
    let mut y = vec![0.0; co * n];
    for o in 0..co {
        for k in 0..modes {
            let (mut yr, mut yi) = (0.0, 0.0);
            for i in 0..ci {
                let (mut xr, mut xi) = (0.0, 0.0);
                for j in 0..n {
                    let th = -2.0 * PI * (j * k) as f64 / n as f64;
                    xr += x.data()[i * n + j] * th.cos();
                    xi += x.data()[i * n + j] * th.sin();
                }
                let base = ((k * co + o) * ci + i) * 2;
                let (wr, wi) = (w.data()[base], w.data()[base + 1]);
                yr += wr * xr - wi * xi;
                yi += wr * xi + wi * xr;
            }
            let mult = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
            for j in 0..n {
                let th = 2.0 * PI * (j * k) as f64 / n as f64;
                y[o * n + j] += mult * (yr * th.cos() - yi * th.sin()) / n as f64;
            }
        }
    }
    y
}

/// 2-D oracle: kept rows `0..m1` and `h-m1..h`, columns `0..m2`.
fn spectral_oracle_2d(x: &Tensor, w: &Tensor, m1: usize, m2: usize) -> Vec<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[1];
    let rows: Vec<usize> = (0..m1).chain(h - m1..h).collect();
    let mut y = vec![0.0; co * h * wd];
    let mut m = 0;
    for &k1 in &rows {
        for k2 in 0..m2 {
            for o in 0..co {
                let (mut yr, mut yi) = (0.0, 0.0);
                for i in 0..ci {
                    let (mut xr, mut xi) = (0.0, 0.0);
                    for r in 0..h {
                        for c in 0..wd {
                            let th = -2.0
                                * PI
                                * ((r * k1) as f64 / h as f64 + (c * k2) as f64 / wd as f64);
                            let v = x.data()[(i * h + r) * wd + c];
                            xr += v * th.cos();
                            xi += v * th.sin();
                        }
                    }
                    let base = ((m * co + o) * ci + i) * 2;
                    let (wr, wi) = (w.data()[base], w.data()[base + 1]);
                    yr += wr * xr - wi * xi;
                    yi += wr * xi + wi * xr;
                }
                let mult = if k2 == 0 || 2 * k2 == wd { 1.0 } else { 2.0 };
                for r in 0..h {
                    for c in 0..wd {
                        let th =
                            2.0 * PI * ((r * k1) as f64 / h as f64 + (c * k2) as f64 / wd as f64);
                        y[(o * h + r) * wd + c] +=
                            mult * (yr * th.cos() - yi * th.sin()) / (h * wd) as f64;
                    }
                }
            }
            m += 1;
        }
    }
    y
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (j, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {j}: {x} vs {y}");
    }
}

// ---- conv1x1 -------------------------------------------------------------

#[test]
fn conv1x1_identity() {
    let x = random(&[3, 8], 1);
    let y = run1(&x, |t, x| {
        let w = t.constant(Tensor::from_fn(
            &[3, 3],
            |i| if i % 4 == 0 { 1.0 } else { 0.0 },
        ));
        let b = t.constant(Tensor::zeros(&[3]));
        t.conv1x1(x, w, Some(b))
    });
    assert_eq!(y, x);
}

#[test]
fn conv1x1_hand_example() {
    let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = run1(&x, |t, x| {
        let w = t.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        t.conv1x1(x, w, None)
    });
    assert_eq!(y.data(), &[4.0, 6.0]);
}

#[test]
fn conv1x1_matches_per_site_loop() {
    for seed in 0..3 {
        let x = random(&[4, 16], seed);
        let w = random(&[5, 4], seed + 100);
        let b = random(&[5], seed + 200);
        let y = run1(&x, |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            t.conv1x1(x, wv, Some(bv))
        });
        assert_close(y.data(), &conv1x1_oracle(&x, &w, b.data()), 1e-12);
    }
}

#[test]
fn conv1x1_channel_mismatch() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3, 8]));
    let w = t.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.conv1x1(x, w, None), Err(Error::Shape(_))));
}

// ---- depthwise -----------------------------------------------------------

#[test]
fn depthwise_delta_is_identity() {
    let x = random(&[2, 8], 4);
    let y = run1(&x, |t, x| {
        let k = t.constant(Tensor::from_fn(
            &[2, 5],
            |i| if i % 5 == 2 { 1.0 } else { 0.0 },
        ));
        t.depthwise(x, k)
    });
    assert_eq!(y, x);
}

#[test]
fn depthwise_box_filter_hand_example() {
    let x = Tensor::new(&[1, 4], vec![0.0, 3.0, 0.0, 0.0]).unwrap();
    let y = run1(&x, |t, x| {
        let k = t.constant(Tensor::full(&[1, 3], 1.0 / 3.0));
        t.depthwise(x, k)
    });
    assert_close(y.data(), &[1.0, 1.0, 1.0, 0.0], 1e-15);
}

#[test]
fn depthwise_matches_loop_with_multiplier() {
    for seed in 0..3 {
        let x = random(&[2, 16], seed);
        let k = random(&[6, 5], seed + 7);
        let y = run1(&x, |t, x| {
            let kv = t.constant(k.clone());
            t.depthwise(x, kv)
        });
        assert_close(y.data(), &depthwise_oracle_1d(&x, &k), 1e-12);
    }
}

#[test]
fn depthwise_even_kernel_is_config_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 8]));
    let k = t.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(t.depthwise(x, k), Err(Error::Config(_))));
}

// ---- dense conv ----------------------------------------------------------

#[test]
fn conv_matches_loop() {
    let x = random(&[3, 16], 9);
    let w = random(&[2, 3, 5], 10);
    let y = run1(&x, |t, x| {
        let wv = t.constant(w.clone());
        t.conv(x, wv, None)
    });
    let mut expect = vec![0.0; 2 * 16];
    for o in 0..2 {
        for j in 0..16 {
            for i in 0..3 {
                for tap in 0..5 {
                    let src = (j as isize + tap as isize - 2).rem_euclid(16) as usize;
                    expect[o * 16 + j] += w.data()[(o * 3 + i) * 5 + tap] * x.data()[i * 16 + src];
                }
            }
        }
    }
    assert_close(y.data(), &expect, 1e-12);
}

// ---- spectral ------------------------------------------------------------

#[test]
fn spectral_identity_on_band_limited_input() {
    let n = 16;
    let modes = 6;
    let x = Tensor::from_fn(&[1, n], |j| {
        let t = 2.0 * PI * j as f64 / n as f64;
        0.5 + t.sin() - 0.3 * (3.0 * t).cos() + 0.2 * (5.0 * t).sin()
    });
    let y = run1(&x, |t, x| {
        let w = t.constant(Tensor::from_fn(&[modes, 1, 1, 2], |i| {
            if i % 2 == 0 {
                1.0
            } else {
                0.0
            }
        }));
        t.spectral(x, w, Modes::one_d(modes))
    });
    assert_close(y.data(), x.data(), 1e-10);
}

#[test]
fn spectral_truncated_frequency_vanishes() {
    let n = 16;
    let x = Tensor::from_fn(&[1, n], |j| (2.0 * PI * 7.0 * j as f64 / n as f64).sin());
    let w = random(&[4, 2, 1, 2], 3);
    let y = run1(&x, |t, x| {
        let wv = t.constant(w.clone());
        t.spectral(x, wv, Modes::one_d(4))
    });
    assert!(y.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn spectral_matches_dft_oracle() {
    for (seed, n) in [(0u64, 8usize), (1, 16), (2, 32)] {
        let modes = n / 2 + 1;
        for m in [1, 3, modes] {
            let x = random(&[3, n], seed);
            let w = random(&[m, 2, 3, 2], seed + 50);
            let y = run1(&x, |t, x| {
                let wv = t.constant(w.clone());
                t.spectral(x, wv, Modes::one_d(m))
            });
            assert_close(y.data(), &spectral_oracle_1d(&x, &w, m), 1e-10);
        }
    }
}

#[test]
fn spectral_2d_matches_dft_oracle() {
    let x = random(&[2, 8, 8], 21);
    let modes = Modes::two_d(2, 3);
    let w = random(&[modes.count(), 3, 2, 2], 22);
    let y = run1(&x, |t, x| {
        let wv = t.constant(w.clone());
        t.spectral(x, wv, modes)
    });
    assert_close(y.data(), &spectral_oracle_2d(&x, &w, 2, 3), 1e-10);
}

#[test]
fn spectral_too_many_modes() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 8]));
    let w = t.constant(Tensor::zeros(&[6, 1, 1, 2]));
    assert!(matches!(
        t.spectral(x, w, Modes::one_d(6)),
        Err(Error::Config(_))
    ));
}

// ---- layer norm ----------------------------------------------------------

#[test]
fn layer_norm_constant_input_is_zero() {
    let x = Tensor::full(&[2, 4], 3.5);
    let y = run1(&x, |t, x| {
        let g = t.constant(Tensor::full(&[2], 1.0));
        let b = t.constant(Tensor::zeros(&[2]));
        t.layer_norm(x, g, b)
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_two_points() {
    let x = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
    let y = run1(&x, |t, x| {
        let g = t.constant(Tensor::full(&[1], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        t.layer_norm(x, g, b)
    });
    let s = 1.0 / (1.0 + 1e-5f64).sqrt();
    assert_close(y.data(), &[-s, s], 1e-15);
}

#[test]
fn layer_norm_moments() {
    let x = random(&[3, 16], 5);
    let y = run1(&x, |t, x| {
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        t.layer_norm(x, g, b)
    });
    let n = y.numel() as f64;
    let mean = y.data().iter().sum::<f64>() / n;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-3);
}

// ---- gradients -----------------------------------------------------------

fn check(seed: u64, shape: &[usize], f: impl Fn(&mut Tape, Var) -> cape_core::Result<Var>) {
    let x = random(shape, seed);
    let err = grad_check(f, &x, FD_STEP).unwrap();
    assert!(err < 1e-6, "seed {seed}: relative error {err}");
}

/// Weighted sum so that every output entry has a distinct cotangent.
fn probe(t: &mut Tape, y: Var, seed: u64) -> cape_core::Result<Var> {
    let p = t.constant(random(t.shape(y), seed + 999));
    let prod = t.mul(y, p)?;
    t.sum(prod)
}

#[test]
fn gradients_of_elementwise_ops() {
    for seed in 0..3 {
        check(seed, &[2, 8], |t, x| {
            let g = t.gelu(x)?;
            let h = t.tanh(g)?;
            let m = t.constant(random(&[2], seed + 1));
            let k = t.mul(h, m)?;
            let s = t.scale(k, 1.7)?;
            let b = t.constant(random(&[2, 8], seed + 2));
            let d = t.sub(s, b)?;
            let sq = t.mul(d, d)?;
            probe(t, sq, seed)
        });
    }
}

#[test]
fn gradients_wrt_channel_mask_and_bias() {
    for seed in 0..3 {
        let x = random(&[3, 8], seed);
        check(seed, &[3], |t, m| {
            let xv = t.constant(x.clone());
            let y = t.mul(xv, m)?;
            let z = t.add(y, m)?;
            let g = t.gelu(z)?;
            probe(t, g, seed)
        });
    }
}

#[test]
fn gradients_of_conv1x1() {
    for seed in 0..3 {
        let w = random(&[4, 3], seed + 10);
        check(seed, &[3, 8], |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv1x1(x, wv, None)?;
            probe(t, y, seed)
        });
        let x = random(&[3, 8], seed + 20);
        check(seed, &[4, 3], |t, w| {
            let xv = t.constant(x.clone());
            let b = t.constant(random(&[4], seed));
            let y = t.conv1x1(xv, w, Some(b))?;
            let g = t.gelu(y)?;
            probe(t, g, seed)
        });
    }
}

#[test]
fn gradients_of_depthwise() {
    for seed in 0..3 {
        let k = random(&[2, 5], seed + 3);
        check(seed, &[1, 8], |t, x| {
            let kv = t.constant(k.clone());
            let y = t.depthwise(x, kv)?;
            probe(t, y, seed)
        });
        let x = random(&[1, 8], seed + 4);
        check(seed, &[2, 5], |t, k| {
            let xv = t.constant(x.clone());
            let y = t.depthwise(xv, k)?;
            probe(t, y, seed)
        });
    }
}

#[test]
fn gradients_of_dense_conv() {
    for seed in 0..3 {
        let w = random(&[2, 2, 3], seed + 3);
        check(seed, &[2, 8], |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv(x, wv, None)?;
            probe(t, y, seed)
        });
        let x = random(&[2, 8], seed + 4);
        check(seed, &[2, 2, 3], |t, w| {
            let xv = t.constant(x.clone());
            let y = t.conv(xv, w, None)?;
            probe(t, y, seed)
        });
    }
}

#[test]
fn gradients_of_spectral() {
    for seed in 0..3 {
        let w = random(&[5, 2, 2, 2], seed + 3);
        check(seed, &[2, 8], |t, x| {
            let wv = t.constant(w.clone());
            let y = t.spectral(x, wv, Modes::one_d(5))?;
            probe(t, y, seed)
        });
        let x = random(&[2, 8], seed + 4);
        check(seed, &[3, 2, 2, 2], |t, w| {
            let xv = t.constant(x.clone());
            let y = t.spectral(xv, w, Modes::one_d(3))?;
            probe(t, y, seed)
        });
    }
}

#[test]
fn gradients_of_spectral_2d() {
    for seed in 0..3 {
        let modes = Modes::two_d(2, 2);
        let w = random(&[modes.count(), 1, 2, 2], seed + 3);
        check(seed, &[2, 4, 4], |t, x| {
            let wv = t.constant(w.clone());
            let y = t.spectral(x, wv, modes)?;
            probe(t, y, seed)
        });
        let x = random(&[2, 4, 4], seed + 4);
        check(seed, &[modes.count(), 1, 2, 2], |t, w| {
            let xv = t.constant(x.clone());
            let y = t.spectral(xv, w, modes)?;
            probe(t, y, seed)
        });
    }
}

#[test]
fn gradients_of_layer_norm() {
    for seed in 0..3 {
        let g = random(&[2], seed + 1);
        check(seed, &[2, 8], |t, x| {
            let gv = t.constant(g.clone());
            let b = t.constant(random(&[2], seed + 2));
            let y = t.layer_norm(x, gv, b)?;
            probe(t, y, seed)
        });
        let x = random(&[2, 8], seed + 5);
        check(seed, &[2], |t, g| {
            let xv = t.constant(x.clone());
            let y = t.layer_norm(xv, g, g)?;
            probe(t, y, seed)
        });
    }
}

#[test]
fn gradients_of_structural_ops() {
    for seed in 0..3 {
        check(seed, &[4, 4], |t, x| {
            let a = t.slice(x, 1, 2)?;
            let b = t.slice(x, 0, 1)?;
            let c = t.concat(&[a, b, a])?;
            let r = t.reshape(c, &[20])?;
            let n = t.norm(r)?;
            let s = t.sum(x)?;
            let q = t.div(n, s)?;
            t.mul(q, q)
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spectral_agrees_with_dft_up_to_32(p in 1u32..=5, seed in 0u64..1000, ci in 1usize..3, co in 1usize..3) {
        let n = 1usize << p;
        let m = (seed as usize % (n / 2 + 1)) + 1;
        let x = random(&[ci, n], seed);
        let w = random(&[m, co, ci, 2], seed + 1);
        let y = run1(&x, |t, x| {
            let wv = t.constant(w.clone());
            t.spectral(x, wv, Modes::one_d(m))
        });
        let expect = spectral_oracle_1d(&x, &w, m);
        for (a, b) in y.data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn depthwise_agrees_with_loop(seed in 0u64..1000, taps in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let x = random(&[2, 16], seed);
        let k = random(&[4, taps], seed + 1);
        let y = run1(&x, |t, x| {
            let kv = t.constant(k.clone());
            t.depthwise(x, kv)
        });
        let expect = depthwise_oracle_1d(&x, &k);
        for (a, b) in y.data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
