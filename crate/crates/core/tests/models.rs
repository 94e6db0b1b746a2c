use cape_core::cape::{ablate, assemble_base_input, cape_loss, CapeConfig, HeadVariant};
use cape_core::metrics::{nrmse, nrmse_var};
use cape_core::models::*;
use cape_core::tensor::fft::rfft;
use cape_core::tensor::{grad_check_params, kernels::gelu, ParamSet, Tape, Tensor, FD_STEP};
use cape_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(seed: u64, c: usize, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[c, n], |_| rng.random_range(-1.0..1.0))
}

fn small_fno() -> FnoConfig {
    FnoConfig {
        width: 4,
        modes: 3,
        n_layers: 2,
    }
}

fn small_cape(ell: usize) -> CapeConfig {
    CapeConfig {
        d: 4,
        ell,
        modes: 3,
        ..CapeConfig::default()
    }
}

fn model(kind: BaseKind, cond: Conditioning) -> ModelConfig {
    let mut m = ModelConfig::new(kind, cond);
    m.fno = Some(small_fno());
    m.cnn = CnnConfig {
        channels: vec![3, 3],
        kernel: 3,
    };
    m
}

fn run_step(s: &Surrogate, u: &Tensor, prev: Option<&Tensor>, lam: f64) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let bound = s.params.bind_frozen(&mut tape);
    let uv = tape.constant(u.clone());
    let pv = prev.map(|p| tape.constant(p.clone()));
    let out = s.step(&mut tape, &bound, uv, pv, lam).unwrap();
    let inter = out
        .intermediates
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    (tape.value(out.next).clone(), inter)
}

fn zero(params: &mut ParamSet, name: &str) {
    let id = params
        .find(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    params
        .get_mut(id)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
}

#[test]
fn zero_projection_gives_zero_output() {
    let mut s = Surrogate::new(&model(BaseKind::Fno, Conditioning::Vanilla), None, 1).unwrap();
    zero(&mut s.params, "base.proj.w");
    zero(&mut s.params, "base.proj.b");
    let (y, _) = run_step(&s, &field(0, 1, 16), None, 1.0);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fno_output_shape() {
    let mut m = ModelConfig::new(BaseKind::Fno, Conditioning::Prev2);
    m.fno = Some(FnoConfig::default());
    let s = Surrogate::new(&m, None, 2).unwrap();
    let u = field(1, 1, 128);
    let (y, _) = run_step(&s, &u, Some(&u), 1.0);
    assert_eq!(y.shape(), &[1, 128]);
}

#[test]
fn spectral_path_alone_is_band_limited() {
    let mut s = Surrogate::new(&model(BaseKind::Fno, Conditioning::Vanilla), None, 3).unwrap();
    zero(&mut s.params, "base.layer1.pointwise.w");
    zero(&mut s.params, "base.layer1.pointwise.b");
    let (y, _) = run_step(&s, &field(2, 1, 32), None, 1.0);
    let spec = rfft(y.data()).unwrap();
    for (k, z) in spec.iter().enumerate().skip(3) {
        assert!(z.norm() < 1e-12, "bin {k}: {}", z.norm());
    }
    // with the pointwise path the high bins are populated
    let s = Surrogate::new(&model(BaseKind::Fno, Conditioning::Vanilla), None, 3).unwrap();
    let (y, _) = run_step(&s, &field(2, 1, 32), None, 1.0);
    let spec = rfft(y.data()).unwrap();
    assert!(spec[3..].iter().any(|z| z.norm() > 1e-6));
}

#[test]
fn cnn_is_shift_equivariant() {
    let s = Surrogate::new(&model(BaseKind::Cnn, Conditioning::Vanilla), None, 4).unwrap();
    let u = field(3, 1, 16);
    let shifted = Tensor::from_fn(&[1, 16], |j| u.data()[(j + 16 - 5) % 16]);
    let (y, _) = run_step(&s, &u, None, 1.0);
    let (ys, _) = run_step(&s, &shifted, None, 1.0);
    for j in 0..16 {
        assert!((ys.data()[j] - y.data()[(j + 16 - 5) % 16]).abs() < 1e-12);
    }
    assert_eq!(y.shape(), &[1, 16]);
}

fn composite_grad_error(s: &Surrogate, seed: u64) -> f64 {
    let u = field(seed, 1, 8);
    let target = field(seed + 100, 1, 8);
    let future = field(seed + 200, 1, 8);
    grad_check_params(
        |tape, bound| {
            let uv = tape.constant(u.clone());
            let tv = tape.constant(target.clone());
            let out = s.step(tape, bound, uv, Some(uv), 0.3)?;
            let mut loss = nrmse_var(tape, out.next, tv)?;
            let fv = tape.constant(future.clone());
            if let Some(extra) = cape_loss(tape, &out.intermediates, &[fv])? {
                loss = tape.add(loss, extra)?;
            }
            Ok(loss)
        },
        &s.params,
        FD_STEP,
    )
    .unwrap()
}

#[test]
fn model_gradients_match_finite_differences() {
    for seed in 0..3 {
        for (kind, cond) in [
            (BaseKind::Fno, Conditioning::Vanilla),
            (BaseKind::Fno, Conditioning::Conditional),
            (BaseKind::Cnn, Conditioning::Prev2),
        ] {
            let s = Surrogate::new(&model(kind, cond), None, seed).unwrap();
            let err = composite_grad_error(&s, seed);
            assert!(err < 1e-4, "{kind:?}/{cond:?} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn cape_gradients_match_finite_differences() {
    for seed in 0..3 {
        for variant in [
            HeadVariant::Layernorm,
            HeadVariant::NoLayernorm,
            HeadVariant::Multiplicative,
        ] {
            let cape = CapeConfig {
                variant: Some(variant),
                ..small_cape(1)
            };
            let s = Surrogate::new(&model(BaseKind::Fno, Conditioning::Cape), Some(&cape), seed)
                .unwrap();
            let err = composite_grad_error(&s, seed);
            assert!(err < 1e-4, "{variant:?} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn conditional_and_prev2_inputs() {
    let u = field(5, 1, 8);
    let z = make_conditional_input(&u, 0.0).unwrap();
    assert_eq!(z.channels(), 2);
    assert!(z.data()[8..].iter().all(|&v| v == 0.0));
    let c = make_conditional_input(&u, 0.7).unwrap();
    assert!(c.data()[8..].iter().all(|&v| v == 0.7));
    let c = make_conditional_input(&u, 0.375).unwrap();
    let mean = c.data()[8..].iter().sum::<f64>() / 8.0;
    assert_eq!(mean, 0.375);

    let p = make_prev2_input(&u, &u).unwrap();
    assert_eq!(p.channels(), 2);
    assert_eq!(p.data()[..8], p.data()[8..]);
    let v = field(6, 1, 8);
    let q = make_prev2_input(&u, &v).unwrap();
    assert_eq!(q.channel_slice(0, 1).unwrap(), u);
    assert_eq!(q.channel_slice(1, 1).unwrap(), v);
    assert!(matches!(
        make_prev2_input(&u, &field(7, 1, 16)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn default_parameter_counts() {
    let vanilla = Surrogate::new(
        &ModelConfig::new(BaseKind::Fno, Conditioning::Vanilla),
        None,
        0,
    )
    .unwrap();
    let cape_cfg = CapeConfig::default();
    let with_cape = Surrogate::new(
        &ModelConfig::new(BaseKind::Fno, Conditioning::Cape),
        Some(&cape_cfg),
        0,
    )
    .unwrap();
    let v = vanilla.params.scalar_count();
    let (b, c) = with_cape.param_counts();
    // 4 x (12*36*36*2 + 36*36 + 36) + (36 + 36) + (36 + 1)
    assert_eq!(v, 4 * (12 * 36 * 36 * 2 + 36 * 36 + 36) + 72 + 37);
    assert!(b + c <= v, "cape {c} + base {b} vs vanilla {v}");
    let again = Surrogate::new(
        &ModelConfig::new(BaseKind::Fno, Conditioning::Cape),
        Some(&cape_cfg),
        9,
    )
    .unwrap();
    assert_eq!(again.param_counts(), (b, c));
}

fn cape_model(cape: &CapeConfig, seed: u64) -> Surrogate {
    Surrogate::new(&model(BaseKind::Fno, Conditioning::Cape), Some(cape), seed).unwrap()
}

#[test]
fn zero_head_is_identity_for_every_variant() {
    for variant in [
        HeadVariant::Layernorm,
        HeadVariant::NoLayernorm,
        HeadVariant::Multiplicative,
    ] {
        let cfg = CapeConfig {
            variant: Some(variant),
            ..small_cape(2)
        };
        let mut s = cape_model(&cfg, 1);
        zero(&mut s.params, "cape.head.w");
        zero(&mut s.params, "cape.head.b");
        let u = field(8, 1, 16);
        let (_, inter) = run_step(&s, &u, None, 0.02);
        assert_eq!(inter.len(), 2);
        for t in inter {
            assert_eq!(t, u, "{variant:?}");
        }
    }
}

#[test]
fn intermediate_shape_with_two_steps() {
    let cfg = CapeConfig {
        ell: 2,
        ..CapeConfig::default()
    };
    let s = Surrogate::new(
        &ModelConfig::new(BaseKind::Fno, Conditioning::Cape),
        Some(&cfg),
        0,
    )
    .unwrap();
    let (y, inter) = run_step(&s, &field(1, 1, 128), None, 0.1);
    assert_eq!(inter.len(), 2);
    assert!(inter.iter().all(|t| t.shape() == [1, 128]));
    assert_eq!(y.shape(), &[1, 128]);
}

#[test]
fn masks_depend_on_parameter_and_vanish_with_zero_output_layer() {
    let mut s = cape_model(&small_cape(1), 2);
    let cape = s.cape().unwrap().clone();
    let a = cape.attention_masks(&s.params, 0.01).unwrap();
    let b = cape.attention_masks(&s.params, 1.0).unwrap();
    assert_eq!(a[0].shape(), &[4]);
    for i in 0..3 {
        assert!(a[i].max_abs_diff(&b[i]) > 1e-6);
    }
    for m in ["mask1", "mask2", "mask3"] {
        zero(&mut s.params, &format!("cape.{m}.w2"));
        zero(&mut s.params, &format!("cape.{m}.b2"));
    }
    for m in cape.attention_masks(&s.params, 0.3).unwrap() {
        assert!(m.data().iter().all(|&v| v == 0.0));
    }
    // zero masks remove every branch: only the lift path remains
    let mut dropped = s.clone();
    let cfg = ablate(
        &ablate(&ablate(&small_cape(1), "spectral").unwrap(), "conv1x1").unwrap(),
        "depthwise",
    )
    .unwrap();
    let ablated = cape_model(&cfg, 2);
    dropped.params.load_from(&s.params).unwrap();
    let u = field(3, 1, 8);
    let (_, gated) = run_step(&dropped, &u, None, 0.3);
    let mut abl = ablated.clone();
    abl.params.load_from(&s.params).unwrap();
    let (_, removed) = run_step(&abl, &u, None, 0.3);
    assert!(gated[0].max_abs_diff(&removed[0]) < 1e-15);
}

#[test]
fn dropping_every_branch_leaves_lift_and_head() {
    let mut cfg = small_cape(1);
    for flag in ["spectral", "conv1x1", "depthwise"] {
        cfg = ablate(&cfg, flag).unwrap();
    }
    let s = cape_model(&cfg, 5);
    let u = field(4, 1, 8);
    let (_, inter) = run_step(&s, &u, None, 0.5);
    let p = |n: &str| s.params.get(s.params.find(n).unwrap()).data().to_vec();
    let (lw, lb, hw, hb) = (
        p("cape.lift.w"),
        p("cape.lift.b"),
        p("cape.head.w"),
        p("cape.head.b"),
    );
    for j in 0..8 {
        let hidden: Vec<f64> = (0..4).map(|o| gelu(lw[o] * u.data()[j] + lb[o])).collect();
        let y = hb[0] + (0..4).map(|o| hw[o] * hidden[o]).sum::<f64>();
        assert!((inter[0].data()[j] - (u.data()[j] + y)).abs() < 1e-14);
    }
}

#[test]
fn ablation_flags() {
    let base = CapeConfig {
        variant: Some(HeadVariant::Layernorm),
        ..small_cape(1)
    };
    let no_ln = CapeConfig {
        variant: Some(HeadVariant::NoLayernorm),
        ..small_cape(1)
    };
    let dropped = ablate(&base, "layernorm").unwrap();
    let a = cape_model(&dropped, 6);
    let b = cape_model(&no_ln, 6);
    let u = field(9, 1, 8);
    assert_eq!(run_step(&a, &u, None, 0.2), run_step(&b, &u, None, 0.2));

    // dropping the spectral branch equals zeroing its weights
    let mut zeroed = cape_model(&base, 7);
    zero(&mut zeroed.params, "cape.g3");
    let gone = cape_model(&ablate(&base, "spectral").unwrap(), 7);
    assert_eq!(
        run_step(&zeroed, &u, None, 0.2),
        run_step(&gone, &u, None, 0.2)
    );

    assert!(matches!(ablate(&base, "attention"), Err(Error::Config(_))));
}

#[test]
fn hidden_channel_permutation_leaves_output_unchanged() {
    let cfg = CapeConfig {
        d: 6,
        modes: 3,
        variant: Some(HeadVariant::Layernorm),
        ..CapeConfig::default()
    };
    let s = cape_model(&cfg, 8);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut p = s.params.clone();
    let rows = |p: &mut ParamSet, name: &str| {
        let id = p.find(name).unwrap();
        let t = p.get(id).clone();
        let per = t.numel() / 6;
        let new = Tensor::from_fn(t.shape(), |j| t.data()[perm[j / per] * per + j % per]);
        *p.get_mut(id) = new;
    };
    for name in ["cape.g1", "cape.g2", "cape.lift.w", "cape.lift.b"] {
        rows(&mut p, name);
    }
    for m in ["mask1", "mask2", "mask3"] {
        rows(&mut p, &format!("cape.{m}.w2"));
        rows(&mut p, &format!("cape.{m}.b2"));
    }
    // spectral weights are [modes, d, c, 2]: permute the second axis
    let id = p.find("cape.g3").unwrap();
    let t = p.get(id).clone();
    *p.get_mut(id) = Tensor::from_fn(t.shape(), |j| {
        let (m, rest) = (j / 12, j % 12);
        t.data()[m * 12 + perm[rest / 2] * 2 + rest % 2]
    });
    // head weights are [c*ell, d]: permute columns
    let id = p.find("cape.head.w").unwrap();
    let t = p.get(id).clone();
    *p.get_mut(id) = Tensor::from_fn(t.shape(), |j| t.data()[(j / 6) * 6 + perm[j % 6]]);

    let mut q = s.clone();
    q.params = p;
    let u = field(10, 1, 16);
    let (ya, ia) = run_step(&s, &u, None, 0.04);
    let (yb, ib) = run_step(&q, &u, None, 0.04);
    assert!(ia[0].max_abs_diff(&ib[0]) < 1e-12);
    assert!(ya.max_abs_diff(&yb) < 1e-12);
}

#[test]
fn cape_loss_truncates_at_trajectory_end() {
    let mut tape = Tape::new();
    let a = tape.constant(field(1, 1, 8));
    let b = tape.constant(field(2, 1, 8));
    let t1 = tape.constant(field(3, 1, 8));
    let same = cape_loss(&mut tape, &[a, b], &[a, b]).unwrap().unwrap();
    assert_eq!(tape.value(same).item(), 0.0);
    let one = cape_loss(&mut tape, &[a, b], &[t1]).unwrap().unwrap();
    let want = nrmse(&field(1, 1, 8), &field(3, 1, 8)).unwrap();
    assert_eq!(tape.value(one).item(), want);
    assert!(cape_loss(&mut tape, &[a, b], &[]).unwrap().is_none());
}

#[test]
fn base_input_carries_state_and_estimates() {
    let mut s = cape_model(&small_cape(1), 3);
    zero(&mut s.params, "cape.head.w");
    zero(&mut s.params, "cape.head.b");
    let u = field(11, 1, 8);
    let mut tape = Tape::new();
    let bound = s.params.bind_frozen(&mut tape);
    let uv = tape.constant(u.clone());
    let out = s
        .cape()
        .unwrap()
        .forward(&mut tape, &bound, uv, 0.1)
        .unwrap();
    let x = assemble_base_input(&mut tape, uv, &out).unwrap();
    let x = tape.value(x).clone();
    assert_eq!(x.channels(), 2);
    assert_eq!(x.channel_slice(0, 1).unwrap(), u);
    assert_eq!(x.channel_slice(1, 1).unwrap(), u);
}

#[test]
fn gated_kernel_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = cape_model(&small_cape(1), 4);
    let cape = s.cape().unwrap().clone();
    let path = dir.path().join("k.csv");
    cape.dump_gated_kernels(&s.params, 0.02, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let masks = cape.attention_masks(&s.params, 0.02).unwrap();
    let k = s.params.get(s.params.find("cape.g2").unwrap()).clone();
    for (ch, row) in rows.iter().enumerate() {
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], ch as f64);
        for t in 0..5 {
            assert_eq!(cells[1 + t], masks[1].data()[ch] * k.data()[ch * 5 + t]);
        }
    }
    zero(&mut s.params, "cape.mask2.w2");
    zero(&mut s.params, "cape.mask2.b2");
    cape.dump_gated_kernels(&s.params, 0.02, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    for row in text.lines().skip(1) {
        assert!(row
            .split(',')
            .skip(1)
            .all(|c| c.parse::<f64>().unwrap() == 0.0));
    }
}

#[test]
fn output_is_sensitive_to_parameter() {
    let s = cape_model(&small_cape(1), 5);
    let u = field(12, 1, 16);
    let h = 1e-4;
    let (_, a) = run_step(&s, &u, None, 0.1 + h);
    let (_, b) = run_step(&s, &u, None, 0.1 - h);
    let d = a[0].max_abs_diff(&b[0]) / (2.0 * h);
    assert!(d > 1e-6, "d output / d lambda = {d:e}");
}

#[test]
fn conditioning_mismatch_is_rejected() {
    let cfg = small_cape(1);
    assert!(Surrogate::new(&model(BaseKind::Fno, Conditioning::Vanilla), Some(&cfg), 0).is_err());
    assert!(Surrogate::new(&model(BaseKind::Fno, Conditioning::Cape), None, 0).is_err());
}
