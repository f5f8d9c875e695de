//! Training stages, the optimizer and the freezing contract.
//!
//! Stage 0 (LM warm-up) trains the language model on text alone and stands
//! in for pretrained LM weights. Stage 1 aligns the visual side with the LM
//! frozen (`L_text + L_reg`). Stage 2 adds low-rank adapters and the
//! segmentation terms (`L_text + L_mask + L_cls`).

use std::collections::BTreeMap;

use numcore::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::changeseg::{decode_seg_mask, p_t, p_v, PromptGeometry};
use crate::config::ModelConfig;
use crate::encoder::nearest_indices;
use crate::error::{ModelError, Result};
use crate::lm::{lm_forward, InputPart, LmInput, EOA, SEG};
use crate::losses::{cls_loss, greedy_match, mask_loss, reg_loss, text_loss, LossWeights};
use crate::model::{change_tokens, lm_input, perceive, text_ids, ChangeTokens};
use crate::params::{group_of, Ctx, ParamStore, GROUPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Pretrain,
    Instruction,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Warmup => 0,
            Stage::Pretrain => 1,
            Stage::Instruction => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

const VISUAL_GROUPS: [&str; 5] = [
    "vcp",
    "changeseg.fuse",
    "changeseg.train",
    "projector.pv",
    "projector.pt",
];

impl StagePlan {
    fn with(stage: Stage, trainable: &[&str], steps: usize, lr: f64, seed: u64) -> StagePlan {
        StagePlan {
            stage,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            frozen: GROUPS
                .iter()
                .filter(|g| !trainable.contains(g))
                .map(|s| s.to_string())
                .collect(),
            steps,
            lr,
            seed,
        }
    }

    pub fn warmup(steps: usize, lr: f64, seed: u64) -> StagePlan {
        StagePlan::with(Stage::Warmup, &["lm"], steps, lr, seed)
    }

    pub fn pretrain(steps: usize, lr: f64, seed: u64) -> StagePlan {
        StagePlan::with(Stage::Pretrain, &VISUAL_GROUPS, steps, lr, seed)
    }

    pub fn instruction(steps: usize, lr: f64, seed: u64) -> StagePlan {
        let mut groups = VISUAL_GROUPS.to_vec();
        groups.push("lora");
        StagePlan::with(Stage::Instruction, &groups, steps, lr, seed)
    }

    pub fn validate(&self) -> Result<()> {
        for g in self.trainable.iter().chain(&self.frozen) {
            if !GROUPS.contains(&g.as_str()) {
                return Err(ModelError::Config(format!("unknown parameter group {g}")));
            }
        }
        if let Some(g) = self.trainable.iter().find(|g| self.frozen.contains(g)) {
            return Err(ModelError::Config(format!("{g} is both trainable and frozen")));
        }
        if let Some(g) = GROUPS
            .iter()
            .find(|g| !self.trainable.iter().chain(&self.frozen).any(|x| x == *g))
        {
            return Err(ModelError::Config(format!("group {g} is in neither set")));
        }
        if self.stage == Stage::Pretrain && self.trainable.iter().any(|g| g == "lm" || g == "lora") {
            return Err(ModelError::Config("the LM is frozen in stage 1".into()));
        }
        if self.stage == Stage::Instruction && self.trainable.iter().any(|g| g == "lm") {
            return Err(ModelError::Config("base LM weights are frozen in stage 2".into()));
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        group_of(name).is_some_and(|g| self.trainable.iter().any(|t| t == g))
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One question about a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub prompt: PromptGeometry,
    pub question: Vec<usize>,
    /// Answer ids without the end-of-answer token.
    pub answer: Vec<usize>,
    /// Target mask (image resolution, row-major) for each `[SEG]` in `answer`, in order.
    pub seg_masks: Vec<Vec<bool>>,
}

/// A change instance for the classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: Vec<bool>,
    /// 0-based change category.
    pub category: usize,
    /// 1-based phase pair it belongs to.
    pub pair: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct SceneBatch {
    pub images: Vec<Tensor>,
    pub samples: Vec<TrainSample>,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: u8,
    pub l_text: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_focal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_cls: Option<f64>,
    pub total: f64,
    pub seed: u64,
}

/// Testing hook: extra groups to track gradients for despite the plan.
#[derive(Clone, Debug, Default)]
pub struct FaultInjection {
    pub unfreeze: Vec<String>,
}

struct StepLosses {
    total: Var,
    text: Var,
    reg: Option<Var>,
    focal: Option<Var>,
    dice: Option<Var>,
    cls: Option<Var>,
}

fn mean(ctx: &mut Ctx, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = ctx.g.add(acc, t)?;
    }
    Ok(Some(ctx.g.scale(acc, 1.0 / terms.len() as f64)?))
}

/// Supervised rows and targets for `<q> q <a> answer`, predicting `answer <eoa>`.
fn text_targets(offset: usize, question: usize, answer: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let a_pos = offset + 1 + question;
    let rows = (a_pos..=a_pos + answer.len()).collect();
    let targets = answer
        .iter()
        .copied()
        .chain(std::iter::once(EOA))
        .map(Some)
        .collect();
    (rows, targets)
}

/// Marks fused-grid cells that contain any pixel of `mask`, in every phase block.
pub fn mask_to_fused_grid(mask: &[bool], image_size: usize, side: usize, phases: usize) -> Vec<bool> {
    let cols = side * phases;
    let mut out = vec![false; side * cols];
    for y in 0..image_size {
        for x in 0..image_size {
            if mask[y * image_size + x] {
                let (r, c) = (y * side / image_size, x * side / image_size);
                for k in 0..phases {
                    out[r * cols + k * side + c] = true;
                }
            }
        }
    }
    out
}

/// Downsamples a `[image_size^2]` mask to a `side^2` grid by nearest sampling.
pub fn downsample_mask(mask: &[bool], image_size: usize, side: usize) -> Vec<bool> {
    nearest_indices(image_size, side)
        .into_iter()
        .map(|i| mask[i])
        .collect()
}

fn cached_tokens<'c>(
    cache: &'c mut Vec<(PromptGeometry, ChangeTokens)>,
    ctx: &mut Ctx,
    p: &crate::model::Perception,
    prompt: &PromptGeometry,
    cfg: &ModelConfig,
) -> Result<&'c ChangeTokens> {
    let idx = match cache.iter().position(|(g, _)| g == prompt) {
        Some(i) => i,
        None => {
            let t = change_tokens(ctx, p, prompt, cfg)?;
            cache.push((*prompt, t));
            cache.len() - 1
        }
    };
    Ok(&cache[idx].1)
}

fn warmup_losses(ctx: &mut Ctx, batch: &SceneBatch, cfg: &ModelConfig) -> Result<StepLosses> {
    let mut texts = Vec::new();
    for s in &batch.samples {
        let input = LmInput {
            parts: vec![InputPart::Text(text_ids(&s.question, &s.answer))],
        };
        let (rows, targets) = text_targets(0, s.question.len(), &s.answer);
        let out = lm_forward(ctx, &input, &rows, cfg, cfg.mechanisms.lca)?;
        texts.push(text_loss(ctx, out.logits.expect("rows"), &targets)?);
    }
    let text = mean(ctx, &texts)?.ok_or_else(|| ModelError::Input("empty batch".into()))?;
    Ok(StepLosses {
        total: text,
        text,
        reg: None,
        focal: None,
        dice: None,
        cls: None,
    })
}

fn visual_losses(
    ctx: &mut Ctx,
    batch: &SceneBatch,
    cfg: &ModelConfig,
    stage: Stage,
    w: &LossWeights,
) -> Result<StepLosses> {
    if batch.samples.is_empty() {
        return Err(ModelError::Input("empty batch".into()));
    }
    let p = perceive(ctx, &batch.images, cfg)?;
    let mut cache: Vec<(PromptGeometry, ChangeTokens)> = Vec::new();
    let (mut texts, mut regs, mut masks, mut focals, mut dices) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in &batch.samples {
        let ct = cached_tokens(&mut cache, ctx, &p, &s.prompt, cfg)?.clone();
        let text = text_ids(&s.question, &s.answer);
        let input = lm_input(&ct.bundle, text.clone());
        let offset = ct.bundle.len(ctx);
        let (rows, targets) = text_targets(offset, s.question.len(), &s.answer);
        let out = lm_forward(ctx, &input, &rows, cfg, cfg.mechanisms.lca)?;
        texts.push(text_loss(ctx, out.logits.expect("rows"), &targets)?);
        match stage {
            Stage::Pretrain => {
                let pv = p_v(ctx, ct.dual.train.t_p)?;
                let recon = p_t(ctx, pv)?;
                regs.push(reg_loss(ctx, ct.dual.frozen.t_p, recon)?);
            }
            Stage::Instruction => {
                let segs = crate::lm::seg_pairs(&s.answer);
                if segs.len() != s.seg_masks.len() {
                    return Err(ModelError::Input(format!(
                        "{} [SEG] tokens but {} target masks",
                        segs.len(),
                        s.seg_masks.len()
                    )));
                }
                let a_pos = offset + 1 + s.question.len();
                for ((i, pair), gt) in segs.into_iter().zip(&s.seg_masks) {
                    debug_assert_eq!(text[1 + s.question.len() + 1 + i], SEG);
                    let h = ctx.g.narrow(out.hidden, 0, a_pos + 1 + i, 1)?;
                    let m = decode_seg_mask(
                        ctx,
                        h,
                        pair,
                        &p.stack,
                        &p.vcp,
                        &p.fused,
                        ct.dual.train.t_v,
                        cfg,
                    )?;
                    let ml = mask_loss(ctx, m.logits, gt, w)?;
                    masks.push(ml.total);
                    focals.push(ml.focal);
                    dices.push(ml.dice);
                }
            }
            Stage::Warmup => unreachable!(),
        }
    }
    let text = mean(ctx, &texts)?.expect("non-empty");
    let mut total = text;
    let reg = mean(ctx, &regs)?;
    if let Some(r) = reg {
        total = ctx.g.add(total, r)?;
    }
    let (focal, dice, mut cls) = (mean(ctx, &focals)?, mean(ctx, &dices)?, None);
    if stage == Stage::Instruction {
        if let Some(m) = mean(ctx, &masks)? {
            total = ctx.g.add(total, m)?;
        }
        let ct = cached_tokens(&mut cache, ctx, &p, &PromptGeometry::None, cfg)?.clone();
        let prior = ct.dual.train.prior;
        let m = ctx.g.value(prior.m).clone();
        let nd = m.shape()[1];
        let pred: Vec<Vec<bool>> = (0..nd)
            .map(|n| (0..m.shape()[0]).map(|t| m.at(&[t, n]) > 0.0).collect())
            .collect();
        let inst: Vec<(Vec<bool>, usize)> = batch
            .instances
            .iter()
            .map(|i| {
                (
                    mask_to_fused_grid(&i.mask, cfg.image_size, p.fused.side, p.fused.phases),
                    i.category,
                )
            })
            .collect();
        let labels = greedy_match(&pred, &inst, cfg.n_categories);
        let c = cls_loss(ctx, prior.class_logits, &labels)?;
        total = ctx.g.add(total, c)?;
        cls = Some(c);
    }
    Ok(StepLosses {
        total,
        text,
        reg,
        focal,
        dice,
        cls,
    })
}

fn snapshot(store: &ParamStore, plan: &StagePlan) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(n, _)| !plan.is_trainable(n))
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// One optimizer step of `plan` on a single scene. Fails with a freezing
/// violation if any parameter outside the trainable set receives a gradient
/// or changes.
pub fn train_step(
    store: &mut ParamStore,
    adam: &mut Adam,
    batch: &SceneBatch,
    plan: &StagePlan,
    cfg: &ModelConfig,
    weights: &LossWeights,
    step: usize,
    fault: &FaultInjection,
) -> Result<LossRecord> {
    plan.validate()?;
    let before = snapshot(store, plan);
    let mut tracked: Vec<&str> = plan.trainable.iter().map(String::as_str).collect();
    tracked.extend(fault.unfreeze.iter().map(String::as_str));
    let (record, grads) = {
        let mut ctx = Ctx::new(store, &tracked);
        let l = match plan.stage {
            Stage::Warmup => warmup_losses(&mut ctx, batch, cfg)?,
            s => visual_losses(&mut ctx, batch, cfg, s, weights)?,
        };
        ctx.g.backward(l.total)?;
        let val = |v: Option<Var>| v.map(|v| ctx.g.value(v).data()[0]);
        let record = LossRecord {
            step,
            stage: plan.stage.number(),
            l_text: ctx.g.value(l.text).data()[0],
            l_reg: val(l.reg),
            l_focal: val(l.focal),
            l_dice: val(l.dice),
            l_cls: val(l.cls),
            total: ctx.g.value(l.total).data()[0],
            seed: plan.seed,
        };
        (record, ctx.grads())
    };
    if let Some(name) = grads.keys().find(|n| !plan.is_trainable(n)) {
        return Err(ModelError::Freezing(format!(
            "frozen parameter {name} received a gradient in stage {}",
            plan.stage.number()
        )));
    }
    adam.step(store, &grads)?;
    let after = snapshot(store, plan);
    if before != after {
        let name = before
            .iter()
            .zip(&after)
            .find(|(a, b)| a != b)
            .map_or_else(String::new, |(a, _)| a.0.clone());
        return Err(ModelError::Freezing(format!("frozen parameter {name} changed")));
    }
    Ok(record)
}

/// Supervised next-token rows used by [`train_step`]; exposed for tests.
pub fn supervised_rows(offset: usize, question: usize, answer: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    text_targets(offset, question, answer)
}
