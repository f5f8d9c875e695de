mod common;

use common::*;
use delta_core::changeseg::*;
use delta_core::encoder::{encode_images, FeatureMap, TemporalFeatureStack};
use delta_core::model::{change_tokens, perceive};
use delta_core::vcp::{PairDiff, VcpOutput};
use delta_core::{Ctx, Mechanisms, ModelConfig, ModelError, ParamStore};
use numcore::{Tensor, Var};

fn fused_const(ctx: &mut Ctx, t: Tensor, side: usize, phases: usize) -> FusedFeatures {
    FusedFeatures {
        var: ctx.g.constant(t),
        side,
        phases,
        phase_of_column: (0..side * phases).map(|c| c / side + 1).collect(),
    }
}

fn zero_decoder(store: &mut ParamStore, cfg: &ModelConfig, branch: &str) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(&format!("changeseg.{branch}.dec")))
        .map(str::to_string)
        .collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, Tensor::zeros(&shape));
    }
    assert!(cfg.decoder_layers > 0);
}

#[test]
fn fusion_concatenates_phases_along_columns() {
    for k in [2usize, 3] {
        let cfg = ModelConfig {
            image_size: 128,
            phases: k,
            ..tiny_cfg()
        };
        let store = tiny_store(&cfg, 1);
        let mut ctx = Ctx::inference(&store);
        let imgs: Vec<Tensor> = (0..k as u64).map(|s| image(128, s)).collect();
        let stack = encode_images(&mut ctx, &imgs, &cfg).unwrap();
        let f = fuse_multiscale(&mut ctx, &stack).unwrap();
        assert_eq!(f.side, 16);
        assert_eq!(f.columns(), 16 * k);
        assert_eq!(ctx.g.shape(f.var), &[16 * 16 * k, cfg.d_f]);
        for c in 0..16 * k {
            assert_eq!(f.phase_of_column[c], c / 16 + 1);
        }
    }
}

fn const_stack(ctx: &mut Ctx, k: usize, d: usize, value: f64, stages: usize) -> TemporalFeatureStack {
    TemporalFeatureStack {
        phases: (0..k)
            .map(|_| {
                (1..=stages)
                    .map(|s| {
                        let side = 8 >> (s - 1);
                        FeatureMap {
                            var: ctx.g.constant(Tensor::full(&[side * side, d], value)),
                            side,
                        }
                    })
                    .collect()
            })
            .collect(),
    }
}

#[test]
fn fusion_of_zero_features_is_zero_and_stages_are_required() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 1);
    let mut ctx = Ctx::inference(&store);
    let stack = const_stack(&mut ctx, 2, cfg.d_f, 0.0, 4);
    let f = fuse_multiscale(&mut ctx, &stack).unwrap();
    assert!(ctx.g.value(f.var).data().iter().all(|&v| v == 0.0));
    let short = const_stack(&mut ctx, 2, cfg.d_f, 0.0, 3);
    assert!(matches!(
        fuse_multiscale(&mut ctx, &short),
        Err(ModelError::Input(_))
    ));
}

#[test]
fn fused_token_layout_matches_phase_blocks() {
    // each phase filled with its own constant; every fused token must carry its column's phase
    let cfg = tiny_cfg();
    let mut store = tiny_store(&cfg, 1);
    for s in [2, 3, 4] {
        let mut w = Tensor::zeros(&[4, 4]);
        if s == 4 {
            w = Tensor::eye(4);
        }
        store.insert(format!("changeseg.fuse.s{s}.w"), w);
    }
    let mut ctx = Ctx::inference(&store);
    let mut stack = const_stack(&mut ctx, 3, 4, 0.0, 4);
    for k in 0..3 {
        stack.phases[k][3].var = ctx.g.constant(Tensor::full(&[1, 4], (k + 1) as f64));
    }
    let f = fuse_multiscale(&mut ctx, &stack).unwrap();
    let v = ctx.g.value(f.var);
    assert_eq!(v.shape(), &[3, 4]);
    for (tok, want) in [1.0, 2.0, 3.0].iter().enumerate() {
        assert_eq!(v.at(&[tok, 0]), *want);
    }
}

#[test]
fn zero_decoder_returns_queries_unchanged() {
    let cfg = tiny_cfg();
    let mut store = tiny_store(&cfg, 2);
    zero_decoder(&mut store, &cfg, "train");
    let mut ctx = Ctx::inference(&store);
    let f = fused_const(&mut ctx, random(&[8, 4], 1.0, 3), 2, 2);
    let out = decode_queries(&mut ctx, "train", &f, &PromptGeometry::None, &cfg).unwrap();
    assert_eq!(
        ctx.g.value(out.queries),
        store.get("changeseg.train.queries").unwrap()
    );
}

#[test]
fn point_prompt_admits_collocated_tokens_only() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 2);
    let mut ctx = Ctx::inference(&store);
    for k in [2usize, 3] {
        let f = fused_const(&mut ctx, Tensor::zeros(&[4 * k, 4]), 2, k);
        // pixel (x=11, y=3) of a 16 px image lies in cell (row 0, col 1)
        let p = PromptGeometry::Point { x: 11, y: 3 };
        let support = prompt_support(&p, &f, 16);
        let want: Vec<usize> = (0..k).map(|ph| f.index(0, ph, 1)).collect();
        assert_eq!(support, want);
        let mask = prompt_attention_mask(&p, &f, 2, 16);
        let open = mask.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(open, 2 * k);
    }
}

#[test]
fn prompt_attention_is_confined_to_support() {
    let cfg = ModelConfig {
        image_size: 32,
        ..tiny_cfg()
    };
    let store = tiny_store(&cfg, 2);
    let mut ctx = Ctx::inference(&store);
    let f = fused_const(&mut ctx, random(&[32, 4], 1.0, 4), 4, 2);
    for p in [
        PromptGeometry::Point { x: 5, y: 30 },
        PromptGeometry::Box {
            x1: 3,
            y1: 9,
            x2: 17,
            y2: 20,
        },
    ] {
        let out = decode_queries(&mut ctx, "train", &f, &p, &cfg).unwrap();
        assert!(out.prompt_query.is_some());
        let a = ctx.g.value(out.attention.unwrap()).clone();
        let support = prompt_support(&p, &f, 32);
        for r in 0..a.shape()[0] {
            for tok in 0..32 {
                if !support.contains(&tok) {
                    assert_eq!(a.at(&[r, tok]), 0.0);
                }
            }
        }
    }
}

#[test]
fn prompt_outside_image_is_a_geometry_error() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 2);
    let mut ctx = Ctx::inference(&store);
    let f = fused_const(&mut ctx, Tensor::zeros(&[8, 4]), 2, 2);
    let p = PromptGeometry::Box {
        x1: 0,
        y1: 0,
        x2: 16,
        y2: 3,
    };
    assert!(matches!(
        decode_queries(&mut ctx, "train", &f, &p, &cfg),
        Err(ModelError::Geometry(_))
    ));
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|j| r.iter().zip(b).map(|(x, row)| x * row[j]).sum())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

#[test]
fn decoder_layer_matches_attention_oracle() {
    let cfg = ModelConfig {
        d_f: 4,
        n_queries: 2,
        decoder_layers: 1,
        ..tiny_cfg()
    };
    let store = tiny_store(&cfg, 9);
    let mut ctx = Ctx::inference(&store);
    let ft = random(&[4, 4], 1.0, 10);
    let f = fused_const(&mut ctx, ft.clone(), 1, 4);
    let out = decode_queries(&mut ctx, "train", &f, &PromptGeometry::None, &cfg).unwrap();

    let get = |n: &str| rows(store.get(&format!("changeseg.train.{n}")).unwrap());
    let q = get("queries");
    let fr = rows(&ft);
    let qp = mm(&q, &get("dec1.wq"));
    let kp = mm(&fr, &get("dec1.wk"));
    let vp = mm(&fr, &get("dec1.wv"));
    let mut q1 = q.clone();
    for i in 0..2 {
        let s: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / 2.0)
            .collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        let a: Vec<f64> = s.iter().map(|v| (v - m).exp() / z).collect();
        let ctxv: Vec<f64> = (0..4).map(|c| (0..4).map(|j| a[j] * vp[j][c]).sum()).collect();
        let o = mm(&[ctxv], &get("dec1.wo"));
        for c in 0..4 {
            q1[i][c] += o[0][c];
        }
    }
    let b1 = store.get("changeseg.train.dec1.ffn.b1").unwrap().data().to_vec();
    let b2 = store.get("changeseg.train.dec1.ffn.b2").unwrap().data().to_vec();
    let h = mm(&q1, &get("dec1.ffn.w1"));
    let h: Vec<Vec<f64>> = h
        .iter()
        .map(|r| r.iter().zip(&b1).map(|(x, b)| (x + b).max(0.0)).collect())
        .collect();
    let h2 = mm(&h, &get("dec1.ffn.w2"));
    let got = ctx.g.value(out.queries);
    for i in 0..2 {
        for c in 0..4 {
            let want = q1[i][c] + h2[i][c] + b2[c];
            assert!((got.at(&[i, c]) - want).abs() < 1e-13);
        }
    }
}

#[test]
fn change_prior_examples() {
    let cfg = tiny_cfg();
    let mut store = tiny_store(&cfg, 3);
    store.insert("changeseg.train.score.b", Tensor::from_vec(vec![0.25]));
    let mut ctx = Ctx::inference(&store);
    let q0 = ctx.g.constant(Tensor::zeros(&[3, 4]));
    for k in [2usize, 3] {
        let s1 = ctx.g.constant(random(&[4 * k, 4], 1.0, k as u64));
        let p = change_prior(&mut ctx, "train", q0, s1).unwrap();
        assert_eq!(ctx.g.shape(p.m), &[4 * k, 3]);
        assert!(ctx.g.value(p.m).data().iter().all(|&v| v == 0.0));
        assert_eq!(ctx.g.value(p.s).data(), &[0.25, 0.25, 0.25]);
    }
    // single query, 1x2 grid
    let q = ctx.g.constant(t(&[&[1.0, -1.0, 0.5, 2.0]]));
    let s1 = ctx.g.constant(t(&[&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0, -1.0]]));
    let p = change_prior(&mut ctx, "train", q, s1).unwrap();
    assert_eq!(ctx.g.value(p.m).data(), &[1.0 - 2.0 + 1.5 + 8.0, -1.0 - 2.0]);
    let ws = store.get("changeseg.train.score.w").unwrap().data().to_vec();
    let want = ws[0] - ws[1] + 0.5 * ws[2] + 2.0 * ws[3] + 0.25;
    assert!((ctx.g.value(p.s).data()[0] - want).abs() < 1e-15);
}

#[test]
fn cpe_examples() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 3);
    let mut ctx = Ctx::inference(&store);
    // zero queries return the fused grid bitwise
    let f = ctx.g.constant(random(&[8, 4], 2.0, 1));
    let zq = ctx.g.constant(Tensor::zeros(&[3, 4]));
    let s1 = ctx.g.constant(random(&[8, 4], 1.0, 2));
    let prior = change_prior(&mut ctx, "train", zq, s1).unwrap();
    let tv = cpe_modulate(&mut ctx, &prior, zq, f).unwrap();
    assert_eq!(ctx.g.value(tv), ctx.g.value(f));

    // per-pixel weights sum to one over the queries
    let q = ctx.g.constant(random(&[3, 4], 1.0, 3));
    let prior = change_prior(&mut ctx, "train", q, s1).unwrap();
    let ms = ctx.g.mul(prior.m, prior.s).unwrap();
    let w = ctx.g.softmax(ms, 1, None).unwrap();
    for r in 0..8 {
        let s: f64 = (0..3).map(|n| ctx.g.value(w).at(&[r, n])).sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    // N_d = 2, one pixel, hand values
    let m = ctx.g.constant(t(&[&[1.0, 2.0]]));
    let s = ctx.g.constant(t(&[&[0.5, -1.0]]));
    let qd = ctx.g.constant(t(&[&[1.0, 0.0, 2.0, 0.0], &[0.0, 3.0, 0.0, 1.0]]));
    let ff = ctx.g.constant(t(&[&[0.1, 0.2, 0.3, 0.4]]));
    let prior = ChangePrior {
        m,
        s,
        class_logits: m,
    };
    let tv = cpe_modulate(&mut ctx, &prior, qd, ff).unwrap();
    let (l0, l1) = (0.5f64, -2.0f64);
    let w0 = l0.exp() / (l0.exp() + l1.exp());
    let w1 = 1.0 - w0;
    let want = [0.1 + w0, 0.2 + 3.0 * w1, 0.3 + 2.0 * w0, 0.4 + w1];
    for (g, w) in ctx.g.value(tv).data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }

    let bad = ChangePrior {
        m: ctx.g.constant(Tensor::zeros(&[1, 3])),
        s: ctx.g.constant(Tensor::zeros(&[1, 3])),
        class_logits: m,
    };
    assert!(matches!(
        cpe_modulate(&mut ctx, &bad, qd, ff),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn branches_start_identical_and_frozen_branch_has_no_gradient() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 4);
    let mut ctx = Ctx::new(&store, &delta_core::params::GROUPS);
    let p = perceive(&mut ctx, &[image(16, 1), image(16, 2)], &cfg).unwrap();
    let ct = change_tokens(&mut ctx, &p, &PromptGeometry::Point { x: 4, y: 9 }, &cfg).unwrap();
    let (fr, tr) = (&ct.dual.frozen, &ct.dual.train);
    assert_eq!(ctx.g.value(fr.t_v), ctx.g.value(tr.t_v));
    assert_eq!(ctx.g.value(fr.t_p), ctx.g.value(tr.t_p));
    let a = scalarize(&mut ctx, fr.t_v, 1).unwrap();
    let b = scalarize(&mut ctx, fr.t_p, 2).unwrap();
    let c = scalarize(&mut ctx, ct.bundle.visual, 3).unwrap();
    let ab = ctx.g.add(a, b).unwrap();
    let root = ctx.g.add(ab, c).unwrap();
    ctx.g.backward(root).unwrap();
    let grads = ctx.grads();
    assert!(grads.keys().any(|k| k.starts_with("changeseg.train.")));
    for (k, g) in &grads {
        if k.starts_with("changeseg.frozen.") {
            assert_eq!(g.sq_norm(), 0.0, "{k}");
        }
    }
}

#[test]
fn branch_shape_divergence_is_a_config_error() {
    let cfg = tiny_cfg();
    let mut store = tiny_store(&cfg, 4);
    store.insert("changeseg.frozen.queries", Tensor::zeros(&[5, 4]));
    let mut ctx = Ctx::inference(&store);
    let p = perceive(&mut ctx, &[image(16, 1), image(16, 2)], &cfg).unwrap();
    assert!(matches!(
        change_tokens(&mut ctx, &p, &PromptGeometry::None, &cfg),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn projector_examples() {
    let cfg = tiny_cfg();
    let mut store = tiny_store(&cfg, 5);
    let mut ctx = Ctx::inference(&store);
    let f = fused_const(&mut ctx, random(&[8, 4], 1.0, 1), 2, 2);
    let tp = ctx.g.constant(random(&[3, 4], 1.0, 2));
    let pt = ctx.g.constant(random(&[1, 4], 1.0, 3));
    let b = project_tokens(&mut ctx, &f, f.var, tp, Some(pt)).unwrap();
    assert_eq!(b.len(&ctx), 8 + 3 + 1);
    assert_eq!(b.phase_tags, vec![1, 1, 2, 2, 1, 1, 2, 2]);
    assert_eq!(ctx.g.shape(b.visual), &[8, cfg.lm_width]);

    // hand two-layer case: h = relu(x W1 + b1), y = h W2 + b2
    let w1 = rows(store.get("projector.pv.w1").unwrap());
    let w2 = rows(store.get("projector.pv.w2").unwrap());
    store.insert("projector.pv.b1", Tensor::full(&[8], 0.1));
    store.insert("projector.pv.b2", Tensor::full(&[8], -0.2));
    let mut ctx = Ctx::inference(&store);
    let x = vec![vec![0.5, -1.0, 2.0, 0.25]];
    let xv = ctx.g.constant(t(&[&x[0]]));
    let y = p_v(&mut ctx, xv).unwrap();
    let h: Vec<Vec<f64>> = mm(&x, &w1)
        .iter()
        .map(|r| r.iter().map(|v| (v + 0.1).max(0.0)).collect())
        .collect();
    let want = mm(&h, &w2);
    for c in 0..8 {
        assert!((ctx.g.value(y).data()[c] - (want[0][c] - 0.2)).abs() < 1e-14);
    }

    // zero weights leave only the output bias
    for n in ["projector.pv.w1", "projector.pv.w2"] {
        let s = store.get(n).unwrap().shape().to_vec();
        store.insert(n, Tensor::zeros(&s));
    }
    let mut ctx = Ctx::inference(&store);
    let xv = ctx.g.constant(random(&[5, 4], 1.0, 4));
    let y = p_v(&mut ctx, xv).unwrap();
    assert!(ctx.g.value(y).data().iter().all(|&v| v == -0.2));
}

/// Stage 1 at 2x2, stages 2..4 at 1x1, two phases.
fn seg_fixture(ctx: &mut Ctx, d: usize) -> (TemporalFeatureStack, VcpOutput, FusedFeatures, Var) {
    let mut phases = Vec::new();
    for k in 0..2u64 {
        let mut maps = vec![FeatureMap {
            var: ctx.g.constant(random(&[4, d], 1.0, 100 + k)),
            side: 2,
        }];
        for s in 2..=4u64 {
            maps.push(FeatureMap {
                var: ctx.g.constant(random(&[1, d], 1.0, 110 + 10 * k + s)),
                side: 1,
            });
        }
        phases.push(maps);
    }
    let stack = TemporalFeatureStack { phases };
    let f_diff: Vec<Var> = (0..3)
        .map(|s| ctx.g.constant(random(&[1, d], 1.0, 130 + s)))
        .collect();
    let vcp = VcpOutput {
        enhanced: stack.clone(),
        pairs: vec![PairDiff {
            pair: (0, 1),
            f_diff,
            e_diff: vec![],
            attention: vec![],
        }],
    };
    let f = fused_const(ctx, random(&[2, d], 1.0, 140), 1, 2);
    let tv = ctx.g.constant(random(&[2, d], 1.0, 141));
    (stack, vcp, f, tv)
}

#[test]
fn seg_mask_matches_dot_product_oracle() {
    let cfg = ModelConfig {
        image_size: 2,
        d_f: 4,
        lm_width: 4,
        ..tiny_cfg()
    };
    let mut store = ParamStore::new();
    store.insert("projector.pt.w1", Tensor::eye(4));
    store.insert("projector.pt.b1", Tensor::zeros(&[4]));
    store.insert("projector.pt.w2", random(&[4, 4], 1.0, 7));
    store.insert("projector.pt.b2", Tensor::zeros(&[4]));
    let mut ctx = Ctx::inference(&store);
    let (stack, vcp, f, tv) = seg_fixture(&mut ctx, 4);
    let h = [0.3, 1.2, 0.7, 0.1];
    let hv = ctx.g.constant(t(&[&h]));
    let m = decode_seg_mask(&mut ctx, hv, (1, 2), &stack, &vcp, &f, tv, &cfg).unwrap();
    assert_eq!(ctx.g.shape(m.logits), &[4, 1]);

    let v = mm(&[h.to_vec()], &rows(store.get("projector.pt.w2").unwrap()))[0].clone();
    let dot = |x: &[f64]| x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    let s1 = rows(ctx.g.value(stack.stage(1, 1).var));
    let extra: f64 = vcp.pairs[0]
        .f_diff
        .iter()
        .map(|d| dot(ctx.g.value(*d).data()))
        .sum::<f64>()
        + dot(&rows(ctx.g.value(tv))[1]);
    for p in 0..4 {
        let want = dot(&s1[p]) + extra;
        assert!((ctx.g.value(m.logits).data()[p] - want).abs() < 1e-13);
    }
    assert_eq!(
        m.binary(&ctx),
        ctx.g.value(m.logits).data().iter().map(|&x| x > 0.0).collect::<Vec<_>>()
    );

    assert!(matches!(
        decode_seg_mask(&mut ctx, hv, (2, 3), &stack, &vcp, &f, tv, &cfg),
        Err(ModelError::Input(_))
    ));
    assert!(matches!(
        decode_seg_mask(&mut ctx, hv, (0, 1), &stack, &vcp, &f, tv, &cfg),
        Err(ModelError::Input(_))
    ));
}

#[test]
fn zero_seg_hidden_gives_empty_full_size_mask() {
    let cfg = tiny_cfg();
    let store = tiny_store(&cfg, 6);
    let mut ctx = Ctx::inference(&store);
    let p = perceive(&mut ctx, &[image(16, 1), image(16, 2)], &cfg).unwrap();
    let ct = change_tokens(&mut ctx, &p, &PromptGeometry::None, &cfg).unwrap();
    let h = ctx.g.constant(Tensor::zeros(&[1, cfg.lm_width]));
    let m = decode_seg_mask(&mut ctx, h, (1, 2), &p.stack, &p.vcp, &p.fused, ct.dual.train.t_v, &cfg)
        .unwrap();
    let mask = m.binary(&ctx);
    assert_eq!(mask.len(), 16 * 16);
    assert!(ctx.g.value(m.logits).data().iter().all(|&v| v == 0.0));
    assert!(mask.iter().all(|&b| !b));
}

#[test]
fn trainable_path_gradients_match_finite_differences() {
    // 4x4 token grid: 32 px images
    let cfg = ModelConfig {
        image_size: 32,
        ..tiny_cfg()
    };
    let store = tiny_store(&cfg, 7);
    let images = [image(32, 1), image(32, 2)];
    let names: Vec<String> = store
        .names()
        .filter(|n| {
            n.starts_with("changeseg.train.")
                || n.starts_with("changeseg.fuse.")
                || n.starts_with("projector.")
        })
        .map(str::to_string)
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let prompt = PromptGeometry::Box {
        x1: 2,
        y1: 3,
        x2: 20,
        y2: 25,
    };
    let err = check_grads(&store, &names, |ctx| {
        let p = perceive(ctx, &images, &cfg)?;
        let ct = change_tokens(ctx, &p, &prompt, &cfg)?;
        let a = scalarize(ctx, ct.bundle.visual, 1)?;
        let b = scalarize(ctx, ct.bundle.change, 2)?;
        let c = scalarize(ctx, ct.bundle.prompt.unwrap(), 3)?;
        let d = scalarize(ctx, ct.dual.train.prior.class_logits, 4)?;
        let h = ctx.g.constant(random(&[1, cfg.lm_width], 1.0, 5));
        let m = decode_seg_mask(ctx, h, (1, 2), &p.stack, &p.vcp, &p.fused, ct.dual.train.t_v, &cfg)?;
        let e = scalarize(ctx, m.logits, 6)?;
        let mut acc = ctx.g.add(a, b)?;
        for x in [c, d, e] {
            acc = ctx.g.add(acc, x)?;
        }
        Ok(acc)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn decode_queries_and_cpe_gradients() {
    let cfg = tiny_cfg();
    let mut store = tiny_store(&cfg, 8);
    store.insert("x.f", random(&[8, 4], 1.0, 1));
    store.insert("x.s1", random(&[8, 4], 1.0, 2));
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("changeseg.train.") || n.starts_with("x."))
        .map(str::to_string)
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = check_grads(&store, &names, |ctx| {
        let f = FusedFeatures {
            var: ctx.p("x.f")?,
            side: 2,
            phases: 2,
            phase_of_column: vec![1, 1, 2, 2],
        };
        let s1 = ctx.p("x.s1")?;
        let q = decode_queries(ctx, "train", &f, &PromptGeometry::Point { x: 3, y: 12 }, &cfg)?;
        let prior = change_prior(ctx, "train", q.queries, s1)?;
        let tv = cpe_modulate(ctx, &prior, q.queries, f.var)?;
        let a = scalarize(ctx, tv, 1)?;
        let b = scalarize(ctx, q.prompt_query.unwrap(), 2)?;
        Ok(ctx.g.add(a, b)?)
    });
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn mechanisms_switch_cpe() {
    let cfg = ModelConfig {
        mechanisms: Mechanisms {
            cpe: false,
            ..Mechanisms::default()
        },
        ..tiny_cfg()
    };
    let store = tiny_store(&cfg, 9);
    let mut ctx = Ctx::inference(&store);
    let p = perceive(&mut ctx, &[image(16, 1), image(16, 2)], &cfg).unwrap();
    let ct = change_tokens(&mut ctx, &p, &PromptGeometry::None, &cfg).unwrap();
    assert_eq!(ctx.g.value(ct.dual.train.t_v), ctx.g.value(p.fused.var));
}
