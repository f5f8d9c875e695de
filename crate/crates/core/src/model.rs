//! End-to-end assembly: images to features, change tokens, LM input and
//! answer plus masks.

use std::collections::BTreeMap;
use std::time::Instant;

use numcore::{SeedStream, Tensor, Var};

use crate::changeseg::{
    self, check_branch_shapes, decode_seg_mask, frozen_branch_forward, fuse_multiscale,
    project_tokens, stage1_on_fused_grid, train_branch_forward, DualBranchOutput, FusedFeatures,
    PromptGeometry, TokenBundle,
};
use crate::config::ModelConfig;
use crate::encoder::{self, encode_images, TemporalFeatureStack};
use crate::error::{ModelError, Result};
use crate::lm::{self, generate, hidden_row, InputPart, LmInput, A, Q};
use crate::params::{Ctx, ParamSpec, ParamStore};
use crate::vcp::{self, vcp_forward, VcpOutput};

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = encoder::param_specs(cfg);
    specs.extend(vcp::param_specs(cfg));
    specs.extend(changeseg::param_specs(cfg));
    specs.extend(lm::param_specs(cfg));
    specs.extend(lm::lora_specs(cfg));
    specs
}

pub fn init_params(cfg: &ModelConfig, seeds: SeedStream) -> Result<ParamStore> {
    cfg.validate()?;
    ParamStore::from_specs(&param_specs(cfg), seeds.split("params"))
}

/// Scene-level features shared by every question about the same images.
#[derive(Clone, Debug)]
pub struct Perception {
    pub stack: TemporalFeatureStack,
    pub vcp: VcpOutput,
    pub fused: FusedFeatures,
    pub stage1: Var,
}

pub fn perceive(ctx: &mut Ctx, images: &[Tensor], cfg: &ModelConfig) -> Result<Perception> {
    if images.len() != cfg.phases {
        return Err(ModelError::Input(format!(
            "model expects {} images, got {}",
            cfg.phases,
            images.len()
        )));
    }
    let stack = encode_images(ctx, images, cfg)?;
    let vcp = vcp_forward(ctx, &stack, &cfg.mechanisms)?;
    let fused = fuse_multiscale(ctx, &vcp.enhanced)?;
    let stage1 = stage1_on_fused_grid(ctx, &stack)?;
    Ok(Perception {
        stack,
        vcp,
        fused,
        stage1,
    })
}

#[derive(Clone, Debug)]
pub struct ChangeTokens {
    pub dual: DualBranchOutput,
    pub bundle: TokenBundle,
}

pub fn change_tokens(
    ctx: &mut Ctx,
    p: &Perception,
    prompt: &PromptGeometry,
    cfg: &ModelConfig,
) -> Result<ChangeTokens> {
    let dual = changeseg::dual_branch_forward(
        ctx,
        &p.fused,
        p.stage1,
        prompt,
        cfg,
        &cfg.mechanisms,
    )?;
    let t = &dual.train;
    let bundle = project_tokens(ctx, &p.fused, t.t_v, t.t_p, t.prompt_token)?;
    Ok(ChangeTokens { dual, bundle })
}

/// `<q> question <a> answer`, the text part of every LM input.
pub fn text_ids(question: &[usize], answer: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(question.len() + answer.len() + 2);
    ids.push(Q);
    ids.extend_from_slice(question);
    ids.push(A);
    ids.extend_from_slice(answer);
    ids
}

/// Visual tokens, then the prompt token, then change tokens, then text.
pub fn lm_input(bundle: &TokenBundle, text: Vec<usize>) -> LmInput {
    let mut parts = vec![InputPart::Visual(bundle.visual, bundle.phase_tags.clone())];
    if let Some(p) = bundle.prompt {
        parts.push(InputPart::Prompt(p));
    }
    parts.push(InputPart::Change(bundle.change));
    parts.push(InputPart::Text(text));
    LmInput { parts }
}

#[derive(Clone, Debug)]
pub struct SegOutput {
    pub pair: (usize, usize),
    pub mask: Vec<bool>,
    /// Per-pixel mask logits; `mask` is `logits > 0`.
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub tokens: Vec<usize>,
    pub segs: Vec<SegOutput>,
    pub truncated: bool,
    /// Seconds per component.
    pub timing: BTreeMap<String, f64>,
}

/// Full pipeline for one question with per-component wall-clock timing.
pub fn infer(
    store: &ParamStore,
    cfg: &ModelConfig,
    images: &[Tensor],
    question: &[usize],
    prompt: &PromptGeometry,
    max_new: usize,
) -> Result<Inference> {
    let mut ctx = Ctx::inference(store);
    let mut timing = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timing: &mut BTreeMap<String, f64>| {
        let now = Instant::now();
        *timing.entry(name.to_string()).or_insert(0.0) += (now - clock).as_secs_f64();
        clock = now;
    };
    if images.len() != cfg.phases {
        return Err(ModelError::Input(format!(
            "model expects {} images, got {}",
            cfg.phases,
            images.len()
        )));
    }
    let stack = encode_images(&mut ctx, images, cfg)?;
    lap("encoder", &mut timing);
    let vcp = vcp_forward(&mut ctx, &stack, &cfg.mechanisms)?;
    lap("cea", &mut timing);
    let fused = fuse_multiscale(&mut ctx, &vcp.enhanced)?;
    let stage1 = stage1_on_fused_grid(&mut ctx, &stack)?;
    check_branch_shapes(&ctx)?;
    lap("changeseg_train", &mut timing);
    let _frozen = frozen_branch_forward(&mut ctx, &fused, stage1, prompt, cfg, &cfg.mechanisms)?;
    lap("changeseg_frozen", &mut timing);
    let t = train_branch_forward(&mut ctx, &fused, stage1, prompt, cfg, &cfg.mechanisms)?;
    lap("changeseg_train", &mut timing);
    let bundle = project_tokens(&mut ctx, &fused, t.t_v, t.t_p, t.prompt_token)?;
    lap("projectors", &mut timing);
    let prefix = lm_input(&bundle, text_ids(question, &[]));
    let gen = generate(&mut ctx, &prefix, max_new, cfg, cfg.mechanisms.lca)?;
    lap("lm", &mut timing);
    let mut segs = Vec::with_capacity(gen.seg_events.len());
    for ev in &gen.seg_events {
        let h = hidden_row(&mut ctx, gen.hidden, ev.position)?;
        let m = decode_seg_mask(&mut ctx, h, ev.pair, &stack, &vcp, &fused, t.t_v, cfg)?;
        segs.push(SegOutput {
            pair: ev.pair,
            mask: m.binary(&ctx),
            logits: ctx.g.value(m.logits).data().to_vec(),
        });
    }
    lap("mask_decode", &mut timing);
    Ok(Inference {
        tokens: gen.tokens,
        segs,
        truncated: gen.truncated,
        timing,
    })
}
