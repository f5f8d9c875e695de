mod common;

use common::*;
use delta_core::encoder::encode_images;
use delta_core::vcp::{cea_layer, diff_embedding, diff_features, vcp_forward, CeaWeights};
use delta_core::{Ctx, Mechanisms, ModelConfig, ModelError, ParamStore};
use numcore::Tensor;
use proptest::prelude::*;

fn cea_store(d: usize, seed: u64, zero_values: bool) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, m) in ["wq1", "wq2", "wk1", "wk2", "wv1", "wv2"].iter().enumerate() {
        let w = if zero_values && m.starts_with("wv") {
            Tensor::zeros(&[d, d])
        } else {
            random(&[d, d], 0.8, seed + i as u64)
        };
        s.insert(format!("vcp.s2.cea1.{m}"), w);
    }
    s.insert("vcp.s2.cea1.w_ein", random(&[d, 1], 0.5, seed + 10));
    s.insert("vcp.s2.cea1.w_eout", random(&[1, d], 0.5, seed + 11));
    s
}

#[test]
fn diff_features_example() {
    let store = ParamStore::new();
    let mut ctx = Ctx::inference(&store);
    let a = ctx.g.constant(t(&[&[1.0, -2.0]]));
    let b = ctx.g.constant(t(&[&[3.0, 1.0]]));
    let d = diff_features(&mut ctx, a, b).unwrap();
    assert_eq!(ctx.g.value(d).data(), &[2.0, 3.0]);
}

#[test]
fn diff_features_rejects_mismatched_shapes() {
    let store = ParamStore::new();
    let mut ctx = Ctx::inference(&store);
    let a = ctx.g.constant(Tensor::zeros(&[2, 3]));
    let b = ctx.g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(
        diff_features(&mut ctx, a, b),
        Err(ModelError::Tensor(numcore::TensorError::Dimension { .. }))
    ));
}

proptest! {
    #[test]
    fn diff_features_is_symmetric(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..6) {
        let store = ParamStore::new();
        let mut ctx = Ctx::inference(&store);
        let a = ctx.g.constant(random(&[rows, cols], 3.0, seed));
        let b = ctx.g.constant(random(&[rows, cols], 3.0, seed + 1));
        let ab = diff_features(&mut ctx, a, b).unwrap();
        let ba = diff_features(&mut ctx, b, a).unwrap();
        prop_assert_eq!(ctx.g.value(ab), ctx.g.value(ba));
    }

    #[test]
    fn diff_embedding_keeps_shape(seed in 0u64..1000, side in 1usize..9) {
        let cfg = ModelConfig { d_f: 4, ..tiny_cfg() };
        let store = tiny_store(&cfg, seed);
        let mut ctx = Ctx::inference(&store);
        let x = ctx.g.constant(random(&[side * side, 4], 1.0, seed));
        let e = diff_embedding(&mut ctx, x, 3).unwrap();
        prop_assert_eq!(ctx.g.shape(e), &[side * side, 4]);
    }
}

#[test]
fn diff_embedding_hand_oracle() {
    let mut store = ParamStore::new();
    store.insert("vcp.s2.mlp.w1", t(&[&[1.0, -1.0], &[0.5, 2.0]]));
    store.insert("vcp.s2.mlp.b1", Tensor::from_vec(vec![0.0, -4.0]));
    store.insert("vcp.s2.mlp.w2", t(&[&[2.0, 0.0], &[1.0, 3.0]]));
    store.insert("vcp.s2.mlp.b2", Tensor::from_vec(vec![0.5, -0.5]));
    let mut ctx = Ctx::inference(&store);
    let x = ctx.g.constant(t(&[&[1.0, 2.0]]));
    let e = diff_embedding(&mut ctx, x, 2).unwrap();
    // hidden: relu([1 + 1, -1 + 4 - 4]) = [2, 0]; out: [4 + 0.5, 0 - 0.5]
    assert_eq!(ctx.g.value(e).data(), &[4.5, -0.5]);
}

#[test]
fn zero_difference_gives_zero_embedding() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 3);
    let mut ctx = Ctx::inference(&store);
    let x = ctx.g.constant(Tensor::zeros(&[16, cfg.d_f]));
    let e = diff_embedding(&mut ctx, x, 2).unwrap();
    assert!(ctx.g.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_shares_weights_across_phases() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 5);
    let mut ctx = Ctx::inference(&store);
    let img = image(16, 9);
    let stack = encode_images(&mut ctx, &[img.clone(), img], &cfg).unwrap();
    for s in 1..=4 {
        let (a, b) = (stack.stage(0, s), stack.stage(1, s));
        assert_eq!(ctx.g.value(a.var), ctx.g.value(b.var));
        assert_eq!(a.side, 16 >> (s - 1));
    }
}

#[test]
fn encoder_zero_image_is_finite_and_rejects_bad_input() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 5);
    let mut ctx = Ctx::inference(&store);
    let stack = encode_images(&mut ctx, &[Tensor::zeros(&[16, 16, 3])], &cfg).unwrap();
    for s in 1..=4 {
        assert!(ctx.g.value(stack.stage(0, s).var).all_finite());
    }
    let small = Tensor::zeros(&[8, 8, 3]);
    assert!(matches!(
        encode_images(&mut ctx, &[image(16, 1), small], &cfg),
        Err(ModelError::Input(_))
    ));
    let bright = Tensor::full(&[16, 16, 3], 1.5);
    assert!(encode_images(&mut ctx, &[bright], &cfg).is_err());
}

#[test]
fn encoder_is_reproducible_on_fixed_input() {
    let cfg = ModelConfig {
        image_size: 8,
        ..tiny_cfg()
    };
    let run = || {
        let store = tiny_store(&cfg, 42);
        let mut ctx = Ctx::inference(&store);
        let stack = encode_images(&mut ctx, &[image(8, 7)], &cfg).unwrap();
        ctx.g.value(stack.stage(0, 4).var).to_bytes().unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    assert_eq!(first.len(), 1 + 2 * 4 + cfg.d_f * 8);
}

#[test]
fn cea_zero_values_is_identity() {
    let store = cea_store(3, 1, true);
    let mut ctx = Ctx::inference(&store);
    let fi = ctx.g.constant(random(&[4, 3], 1.0, 20));
    let fj = ctx.g.constant(random(&[4, 3], 1.0, 21));
    let e = ctx.g.constant(random(&[4, 3], 1.0, 22));
    for sym in [false, true] {
        let out = cea_layer(&mut ctx, fi, fj, e, &CeaWeights::new(2, 1), sym).unwrap();
        assert_eq!(ctx.g.value(out.f_i), ctx.g.value(fi));
        assert_eq!(ctx.g.value(out.f_j), ctx.g.value(fj));
    }
}

#[test]
fn cea_maps_are_distributions_and_embedding_update_is_residual() {
    let store = cea_store(3, 2, false);
    let mut ctx = Ctx::inference(&store);
    let fi = ctx.g.constant(random(&[9, 3], 2.0, 30));
    let fj = ctx.g.constant(random(&[9, 3], 2.0, 31));
    let e = ctx.g.constant(random(&[9, 3], 2.0, 32));
    let out = cea_layer(&mut ctx, fi, fj, e, &CeaWeights::new(2, 1), false).unwrap();
    for a in [out.a1, out.a2] {
        let v = ctx.g.value(a);
        assert_eq!(v.shape(), &[9, 1]);
        assert!(v.data().iter().all(|&x| x >= 0.0));
        assert!((v.sum() - 1.0).abs() <= 1e-12);
    }
    let (a1, a2) = (ctx.g.value(out.a1).clone(), ctx.g.value(out.a2).clone());
    let w = store.get("vcp.s2.cea1.w_eout").unwrap();
    let e0 = ctx.g.value(e).clone();
    let e1 = ctx.g.value(out.e_diff);
    for p in 0..9 {
        let m = (a1.data()[p] + a2.data()[p]) * 0.5;
        for c in 0..3 {
            assert_eq!(e1.at(&[p, c]), e0.at(&[p, c]) + m * w.data()[c]);
        }
    }
}

fn matvec(x: &[f64], w: &[[f64; 2]; 2]) -> [f64; 2] {
    [
        x[0] * w[0][0] + x[1] * w[1][0],
        x[0] * w[0][1] + x[1] * w[1][1],
    ]
}

#[test]
fn cea_hand_oracle_on_two_pixels() {
    let wq1 = [[1.0, 0.0], [0.0, 1.0]];
    let wq2 = [[0.0, 1.0], [1.0, 0.0]];
    let wk1 = [[1.0, 1.0], [0.0, 1.0]];
    let wk2 = [[0.5, 0.0], [0.0, 0.5]];
    let wv1 = [[1.0, 0.0], [0.0, -1.0]];
    let wv2 = [[0.0, 2.0], [1.0, 0.0]];
    let w_ein = [1.0, 2.0];
    let w_eout = [0.5, -1.0];
    let fi = [[1.0, 0.0], [0.0, 2.0]];
    let fj = [[0.5, 1.0], [1.0, -1.0]];
    let e = [[0.2, 0.1], [0.3, -0.4]];

    let mut store = ParamStore::new();
    for (n, w) in [
        ("wq1", wq1),
        ("wq2", wq2),
        ("wk1", wk1),
        ("wk2", wk2),
        ("wv1", wv1),
        ("wv2", wv2),
    ] {
        store.insert(format!("vcp.s2.cea1.{n}"), t(&[&w[0], &w[1]]));
    }
    store.insert("vcp.s2.cea1.w_ein", t(&[&[w_ein[0]], &[w_ein[1]]]));
    store.insert("vcp.s2.cea1.w_eout", t(&[&w_eout]));
    let mut ctx = Ctx::inference(&store);
    let vi = ctx.g.constant(t(&[&fi[0], &fi[1]]));
    let vj = ctx.g.constant(t(&[&fj[0], &fj[1]]));
    let ve = ctx.g.constant(t(&[&e[0], &e[1]]));
    let out = cea_layer(&mut ctx, vi, vj, ve, &CeaWeights::new(2, 1), false).unwrap();

    // straight-line oracle
    let s = 2f64.sqrt();
    let bias: Vec<f64> = (0..2).map(|p| e[p][0] * w_ein[0] + e[p][1] * w_ein[1]).collect();
    let logit = |q: &[[f64; 2]; 2], k: &[[f64; 2]; 2], wq, wk, p: usize| {
        let a = matvec(&q[p], wq);
        let b = matvec(&k[p], wk);
        (a[0] * b[0] + a[1] * b[1]) / s + bias[p]
    };
    let soft = |l: [f64; 2]| {
        let m = l[0].max(l[1]);
        let z = (l[0] - m).exp() + (l[1] - m).exp();
        [(l[0] - m).exp() / z, (l[1] - m).exp() / z]
    };
    let a1 = soft([logit(&fi, &fj, &wq1, &wk2, 0), logit(&fi, &fj, &wq1, &wk2, 1)]);
    let a2 = soft([logit(&fi, &fj, &wq2, &wk1, 0), logit(&fi, &fj, &wq2, &wk1, 1)]);
    for p in 0..2 {
        let v2 = matvec(&fj[p], &wv2);
        let v1 = matvec(&fi[p], &wv1);
        let m = (a1[p] + a2[p]) / 2.0;
        for c in 0..2 {
            let ni = fi[p][c] + a1[p] * v2[c];
            let nj = fj[p][c] + a2[p] * v1[c];
            let ne = e[p][c] + m * w_eout[c];
            assert!((ctx.g.value(out.f_i).at(&[p, c]) - ni).abs() < 1e-14);
            assert!((ctx.g.value(out.f_j).at(&[p, c]) - nj).abs() < 1e-14);
            assert!((ctx.g.value(out.e_diff).at(&[p, c]) - ne).abs() < 1e-14);
        }
        assert!((ctx.g.value(out.a1).data()[p] - a1[p]).abs() < 1e-14);
        assert!((ctx.g.value(out.a2).data()[p] - a2[p]).abs() < 1e-14);
    }
}

#[test]
fn symmetric_queries_switch_changes_second_map_only() {
    let store = cea_store(3, 4, false);
    let mut ctx = Ctx::inference(&store);
    let fi = ctx.g.constant(random(&[4, 3], 1.0, 40));
    let fj = ctx.g.constant(random(&[4, 3], 1.0, 41));
    let e = ctx.g.constant(random(&[4, 3], 1.0, 42));
    let w = CeaWeights::new(2, 1);
    let a = cea_layer(&mut ctx, fi, fj, e, &w, false).unwrap();
    let b = cea_layer(&mut ctx, fi, fj, e, &w, true).unwrap();
    assert_eq!(ctx.g.value(a.a1), ctx.g.value(b.a1));
    assert_ne!(ctx.g.value(a.a2), ctx.g.value(b.a2));
}

#[test]
fn cea_rejects_width_mismatch() {
    let store = cea_store(3, 4, false);
    let mut ctx = Ctx::inference(&store);
    let f = ctx.g.constant(random(&[4, 2], 1.0, 40));
    assert!(matches!(
        cea_layer(&mut ctx, f, f, f, &CeaWeights::new(2, 1), false),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn cea_gradients_match_finite_differences() {
    let mut store = cea_store(3, 5, false);
    store.insert("f.i", random(&[4, 3], 1.0, 50));
    store.insert("f.j", random(&[4, 3], 1.0, 51));
    store.insert("f.e", random(&[4, 3], 1.0, 52));
    let names = [
        "f.i",
        "f.j",
        "f.e",
        "vcp.s2.cea1.wq1",
        "vcp.s2.cea1.wq2",
        "vcp.s2.cea1.wk1",
        "vcp.s2.cea1.wk2",
        "vcp.s2.cea1.wv1",
        "vcp.s2.cea1.wv2",
        "vcp.s2.cea1.w_ein",
        "vcp.s2.cea1.w_eout",
    ];
    for sym in [false, true] {
        let err = check_grads(&store, &names, |ctx| {
            let (fi, fj, e) = (ctx.p("f.i")?, ctx.p("f.j")?, ctx.p("f.e")?);
            let out = cea_layer(ctx, fi, fj, e, &CeaWeights::new(2, 1), sym)?;
            let a = scalarize(ctx, out.f_i, 1)?;
            let b = scalarize(ctx, out.f_j, 2)?;
            let c = scalarize(ctx, out.e_diff, 3)?;
            let ab = ctx.g.add(a, b)?;
            Ok(ctx.g.add(ab, c)?)
        });
        assert!(err <= 1e-4, "symmetric={sym}: {err}");
    }
}

#[test]
fn identical_images_give_zero_differences() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 6);
    let mut ctx = Ctx::inference(&store);
    let img = image(16, 3);
    let stack = encode_images(&mut ctx, &[img.clone(), img], &cfg).unwrap();
    let out = vcp_forward(&mut ctx, &stack, &Mechanisms::default()).unwrap();
    assert_eq!(out.pairs.len(), 1);
    for d in &out.pairs[0].f_diff {
        assert!(ctx.g.value(*d).data().iter().all(|&v| v == 0.0));
    }
    // zero-initialized output projection keeps E_diff at the zero-bias MLP output
    for e in &out.pairs[0].e_diff {
        assert!(ctx.g.value(*e).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn vcp_forward_handles_phase_counts() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 6);
    let mut ctx = Ctx::inference(&store);
    let one = encode_images(&mut ctx, &[image(16, 1)], &cfg).unwrap();
    assert!(matches!(
        vcp_forward(&mut ctx, &one, &Mechanisms::default()),
        Err(ModelError::Input(_))
    ));
    let three = encode_images(&mut ctx, &[image(16, 1), image(16, 2), image(16, 3)], &cfg).unwrap();
    let out = vcp_forward(&mut ctx, &three, &Mechanisms::default()).unwrap();
    let pairs: Vec<_> = out.pairs.iter().map(|p| p.pair).collect();
    assert_eq!(pairs, vec![(0, 1), (1, 2)]);
    for k in 0..3 {
        for s in 1..=4 {
            assert!(ctx.g.value(out.enhanced.stage(k, s).var).all_finite());
        }
    }
    // stage 1 is never enhanced
    assert_eq!(
        ctx.g.value(out.enhanced.stage(1, 1).var),
        ctx.g.value(three.stage(1, 1).var)
    );
    let off = Mechanisms {
        cea: false,
        ..Mechanisms::default()
    };
    let plain = vcp_forward(&mut ctx, &three, &off).unwrap();
    assert!(plain.pairs[0].e_diff.is_empty());
    assert_eq!(plain.pairs[0].f_diff.len(), 3);
    assert_eq!(
        ctx.g.value(plain.enhanced.stage(1, 3).var),
        ctx.g.value(three.stage(1, 3).var)
    );
}

#[test]
fn vcp_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        image_size: 8,
        d_f: 4,
        ..tiny_cfg()
    };
    let mut store = tiny_store(&cfg, 8);
    // nonzero embedding projections so every weight is exercised
    for s in [2, 3] {
        for l in [1, 2] {
            store.insert(format!("vcp.s{s}.cea{l}.w_ein"), random(&[4, 1], 0.5, 60 + s as u64 + l as u64));
            store.insert(format!("vcp.s{s}.cea{l}.w_eout"), random(&[1, 4], 0.5, 70 + s as u64 + l as u64));
        }
    }
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("vcp.s2.") || n.starts_with("vcp.s3."))
        .map(str::to_string)
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let images = [image(8, 1), image(8, 2)];
    let err = check_grads(&store, &names, |ctx| {
        let stack = encode_images(ctx, &images, &cfg)?;
        let out = vcp_forward(ctx, &stack, &Mechanisms::default())?;
        let mut acc = scalarize(ctx, out.enhanced.stage(0, 2).var, 1)?;
        for (i, v) in [
            out.enhanced.stage(1, 2).var,
            out.enhanced.stage(0, 3).var,
            out.enhanced.stage(1, 3).var,
            out.pairs[0].e_diff[0],
            out.pairs[0].e_diff[1],
        ]
        .into_iter()
        .enumerate()
        {
            let s = scalarize(ctx, v, 2 + i as u64)?;
            acc = ctx.g.add(acc, s)?;
        }
        Ok(acc)
    });
    assert!(err <= 1e-4, "{err}");
}
