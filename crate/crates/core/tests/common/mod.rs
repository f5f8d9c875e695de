#![allow(dead_code)]

use delta_core::model::init_params;
use delta_core::{Ctx, ModelConfig, ParamStore};
use numcore::{grad_check, Graph, SeedStream, Tensor, TensorError, Var};

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        stem_stride: 1,
        d_f: 4,
        n_queries: 3,
        decoder_layers: 2,
        n_categories: 3,
        lm_width: 8,
        lm_layers: 2,
        lm_ffn: 16,
        max_seq: 64,
        vocab_size: 16,
        lora_rank: 2,
        ..ModelConfig::default()
    }
}

pub fn tiny_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
    init_params(cfg, SeedStream::new(seed)).unwrap()
}

pub fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

pub fn random(shape: &[usize], bound: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, bound, &mut SeedStream::new(seed).rng())
}

/// Image with values in [0, 1].
pub fn image(side: usize, seed: u64) -> Tensor {
    random(&[side, side, 3], 0.5, seed).map(|v| v + 0.5)
}

/// Runs `f` under `numcore::grad_check` with the named parameters as probes.
pub fn check_grads<F>(store: &ParamStore, names: &[&str], f: F) -> f64
where
    F: Fn(&mut Ctx) -> delta_core::Result<Var>,
{
    let params: Vec<Tensor> = names
        .iter()
        .map(|n| store.get(n).unwrap().clone())
        .collect();
    grad_check(
        |g: &mut Graph, vars: &[Var]| {
            let mut ctx = Ctx::from_graph(std::mem::take(g), store, &[]);
            for (n, &v) in names.iter().zip(vars) {
                ctx.bind(n, v);
            }
            let out = f(&mut ctx);
            *g = ctx.into_graph();
            out.map_err(|e| TensorError::Contract(e.to_string()))
        },
        &params,
        1e-5,
    )
    .unwrap()
}

/// Sum of `x * w` for a fixed pseudo-random `w`, a generic scalarization.
pub fn scalarize(ctx: &mut Ctx, x: Var, seed: u64) -> delta_core::Result<Var> {
    let w = random(ctx.g.shape(x), 1.0, seed);
    let w = ctx.g.constant(w);
    let p = ctx.g.mul(x, w)?;
    Ok(ctx.g.sum(p)?)
}
