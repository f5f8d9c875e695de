//! Difference-centric token extraction.
//!
//! Stages 2..4 of every phase are resampled onto the stage-4 grid, projected
//! and summed, then the phases are laid side by side along the column axis
//! into one fused grid of `side x (K * side)` tokens. Learnable change queries
//! cross-attend to that grid, predict a soft prior mask against stage-1
//! features and modulate the fused grid with it:
//!
//! ```text
//! T_v = softmax_n(M * S) Q_d + F_fuse
//! ```
//!
//! Two copies of the query decoder exist: a frozen one and a trainable one,
//! initialized identically.

use numcore::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{Mechanisms, ModelConfig};
use crate::encoder::{nearest_indices, TemporalFeatureStack};
use crate::error::{ModelError, Result};
use crate::params::{Ctx, Init, ParamSpec};
use crate::vcp::{VcpOutput, CEA_STAGES};

/// A visual prompt in pixel coordinates of the first-phase image; `x` is
/// the column and `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PromptGeometry {
    None,
    Point { x: usize, y: usize },
    Box { x1: usize, y1: usize, x2: usize, y2: usize },
}

impl PromptGeometry {
    pub fn is_none(&self) -> bool {
        matches!(self, PromptGeometry::None)
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let inside = |v: usize| v < image_size;
        match *self {
            PromptGeometry::None => Ok(()),
            PromptGeometry::Point { x, y } if inside(x) && inside(y) => Ok(()),
            PromptGeometry::Box { x1, y1, x2, y2 }
                if inside(x1) && inside(y1) && inside(x2) && inside(y2) && x1 <= x2 && y1 <= y2 =>
            {
                Ok(())
            }
            p => Err(ModelError::Geometry(format!(
                "{p:?} is not a valid prompt inside a {image_size}x{image_size} image"
            ))),
        }
    }

    /// Whether pixel `(x, y)` is inside the prompt region (points cover one pixel).
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            PromptGeometry::None => true,
            PromptGeometry::Point { x: px, y: py } => x == px && y == py,
            PromptGeometry::Box { x1, y1, x2, y2 } => x1 <= x && x <= x2 && y1 <= y && y <= y2,
        }
    }
}

/// Width-concatenated multi-phase token grid.
#[derive(Clone, Debug)]
pub struct FusedFeatures {
    /// `[side * K * side, C]`, row-major over the fused grid.
    pub var: Var,
    pub side: usize,
    pub phases: usize,
    /// 1-based phase of each fused column.
    pub phase_of_column: Vec<usize>,
}

impl FusedFeatures {
    pub fn columns(&self) -> usize {
        self.side * self.phases
    }

    pub fn tokens(&self) -> usize {
        self.side * self.columns()
    }

    pub fn index(&self, row: usize, phase: usize, col: usize) -> usize {
        row * self.columns() + phase * self.side + col
    }
}

/// Fused-grid layout for a grid of `side` and `phases` phases, as rows of the
/// phase-stacked `[phases * side * side, C]` matrix.
fn fused_order(side: usize, phases: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(side * side * phases);
    for r in 0..side {
        for k in 0..phases {
            for c in 0..side {
                idx.push(k * side * side + r * side + c);
            }
        }
    }
    idx
}

fn phase_tags(side: usize, phases: usize) -> Vec<usize> {
    (0..side * phases).map(|c| c / side + 1).collect()
}

pub const BRANCHES: [&str; 2] = ["frozen", "train"];

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, c, l) = (cfg.d_f, cfg.d_f, cfg.lm_width);
    let mut specs = Vec::new();
    for s in CEA_STAGES {
        specs.push(ParamSpec::linear(format!("changeseg.fuse.s{s}.w"), d, c));
    }
    for b in BRANCHES {
        let p = format!("changeseg.{b}");
        specs.push(ParamSpec::new(
            format!("{p}.queries"),
            &[cfg.n_queries, c],
            Init::Uniform(1.0),
        ));
        specs.push(ParamSpec::new(
            format!("{p}.prompt_type"),
            &[2, c],
            Init::Uniform(1.0),
        ));
        for layer in 1..=cfg.decoder_layers {
            let q = format!("{p}.dec{layer}");
            for m in ["wq", "wk", "wv", "wo"] {
                specs.push(ParamSpec::linear(format!("{q}.{m}"), c, c));
            }
            specs.push(ParamSpec::linear(format!("{q}.ffn.w1"), c, 2 * c));
            specs.push(ParamSpec::new(format!("{q}.ffn.b1"), &[2 * c], Init::Zeros));
            specs.push(ParamSpec::linear(format!("{q}.ffn.w2"), 2 * c, c));
            specs.push(ParamSpec::new(format!("{q}.ffn.b2"), &[c], Init::Zeros));
        }
        specs.push(ParamSpec::linear(format!("{p}.score.w"), c, 1));
        specs.push(ParamSpec::new(format!("{p}.score.b"), &[1], Init::Zeros));
        specs.push(ParamSpec::linear(
            format!("{p}.cls.w"),
            c,
            cfg.n_categories + 1,
        ));
        specs.push(ParamSpec::new(
            format!("{p}.cls.b"),
            &[cfg.n_categories + 1],
            Init::Zeros,
        ));
    }
    specs.push(ParamSpec::linear("projector.pv.w1", c, l));
    specs.push(ParamSpec::new("projector.pv.b1", &[l], Init::Zeros));
    specs.push(ParamSpec::linear("projector.pv.w2", l, l));
    specs.push(ParamSpec::new("projector.pv.b2", &[l], Init::Zeros));
    specs.push(ParamSpec::linear("projector.pt.w1", l, l));
    specs.push(ParamSpec::new("projector.pt.b1", &[l], Init::Zeros));
    specs.push(ParamSpec::linear("projector.pt.w2", l, c));
    specs.push(ParamSpec::new("projector.pt.b2", &[c], Init::Zeros));
    specs
}

/// Lays per-phase maps (any square side) onto the fused grid by nearest
/// resampling to `side`.
fn to_fused_grid(ctx: &mut Ctx, maps: &[(Var, usize)], side: usize) -> Result<Var> {
    let mut resampled = Vec::with_capacity(maps.len());
    for &(v, s) in maps {
        resampled.push(if s == side {
            v
        } else {
            ctx.g.gather_rows(v, &nearest_indices(s, side))?
        });
    }
    let stacked = ctx.g.concat(&resampled, 0)?;
    Ok(ctx.g.gather_rows(stacked, &fused_order(side, maps.len()))?)
}

/// Resamples stages 2..4 of each phase to the stage-4 grid, projects each to
/// `C`, sums, then concatenates phases along the column axis.
pub fn fuse_multiscale(ctx: &mut Ctx, stack: &TemporalFeatureStack) -> Result<FusedFeatures> {
    let k = stack.k();
    if stack.phases.iter().any(|p| p.len() < 4) {
        return Err(ModelError::Input("fusion needs stages 2 to 4".into()));
    }
    let side = stack.stage(0, 4).side;
    let mut per_phase = Vec::with_capacity(k);
    for phase in 0..k {
        let mut acc: Option<Var> = None;
        for s in CEA_STAGES {
            let m = stack.stage(phase, s);
            let v = if m.side == side {
                m.var
            } else {
                ctx.g.gather_rows(m.var, &nearest_indices(m.side, side))?
            };
            let w = ctx.p(&format!("changeseg.fuse.s{s}.w"))?;
            let proj = ctx.g.matmul(v, w)?;
            acc = Some(match acc {
                Some(a) => ctx.g.add(a, proj)?,
                None => proj,
            });
        }
        per_phase.push((acc.expect("three stages"), side));
    }
    let var = to_fused_grid(ctx, &per_phase, side)?;
    Ok(FusedFeatures {
        var,
        side,
        phases: k,
        phase_of_column: phase_tags(side, k),
    })
}

/// Stage-1 features of every phase on the fused grid, `[tokens, d_f]`.
pub fn stage1_on_fused_grid(ctx: &mut Ctx, stack: &TemporalFeatureStack) -> Result<Var> {
    let side = stack.stage(0, 4).side;
    let maps: Vec<(Var, usize)> = (0..stack.k())
        .map(|k| {
            let m = stack.stage(k, 1);
            (m.var, m.side)
        })
        .collect();
    to_fused_grid(ctx, &maps, side)
}

/// Sinusoidal encoding of a pixel position into `dim` values.
pub fn positional_encoding(x: f64, y: f64, image_size: usize, dim: usize) -> Vec<f64> {
    let (u, v) = (x / image_size as f64, y / image_size as f64);
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 4 {
        let f = std::f64::consts::PI * (i + 1) as f64;
        out.extend([(f * u).sin(), (f * u).cos(), (f * v).sin(), (f * v).cos()]);
    }
    out
}

fn prompt_vector(prompt: &PromptGeometry, cfg: &ModelConfig) -> Option<(Vec<f64>, usize)> {
    let (n, c) = (cfg.image_size, cfg.d_f);
    match *prompt {
        PromptGeometry::None => None,
        PromptGeometry::Point { x, y } => Some((positional_encoding(x as f64, y as f64, n, c), 0)),
        PromptGeometry::Box { x1, y1, x2, y2 } => {
            let corners = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)];
            let mut acc = vec![0.0; c];
            for (x, y) in corners {
                for (a, v) in acc
                    .iter_mut()
                    .zip(positional_encoding(x as f64, y as f64, n, c))
                {
                    *a += v / 4.0;
                }
            }
            Some((acc, 1))
        }
    }
}

/// Fused-grid token indices the prompt covers, replicated into every phase block.
pub fn prompt_support(prompt: &PromptGeometry, f: &FusedFeatures, image_size: usize) -> Vec<usize> {
    let cell = |p: usize| p * f.side / image_size;
    let (rows, cols) = match *prompt {
        PromptGeometry::None => return (0..f.tokens()).collect(),
        PromptGeometry::Point { x, y } => (cell(y)..=cell(y), cell(x)..=cell(x)),
        PromptGeometry::Box { x1, y1, x2, y2 } => (cell(y1)..=cell(y2), cell(x1)..=cell(x2)),
    };
    let mut idx = Vec::new();
    for r in rows {
        for k in 0..f.phases {
            for c in cols.clone() {
                idx.push(f.index(r, k, c));
            }
        }
    }
    idx
}

/// Additive `[rows, tokens]` mask admitting only the prompt support.
pub fn prompt_attention_mask(
    prompt: &PromptGeometry,
    f: &FusedFeatures,
    rows: usize,
    image_size: usize,
) -> Tensor {
    let t = f.tokens();
    let mut row = vec![f64::NEG_INFINITY; t];
    for i in prompt_support(prompt, f, image_size) {
        row[i] = 0.0;
    }
    let data = row.iter().copied().cycle().take(rows * t).collect();
    Tensor::new(vec![rows, t], data).expect("mask shape")
}

#[derive(Clone, Debug)]
pub struct DecodedQueries {
    /// `[N_d, C]`
    pub queries: Var,
    /// `[1, C]` when a prompt was given.
    pub prompt_query: Option<Var>,
    /// Cross-attention weights of the last layer, `[rows, tokens]`.
    pub attention: Option<Var>,
}

/// Stacked single-head cross-attention decoder in residual form:
/// `q += softmax(q Wq (F Wk)^T / sqrt(C) + mask) F Wv Wo`, then
/// `q += relu(q W1 + b1) W2 + b2`.
pub fn decode_queries(
    ctx: &mut Ctx,
    branch: &str,
    f: &FusedFeatures,
    prompt: &PromptGeometry,
    cfg: &ModelConfig,
) -> Result<DecodedQueries> {
    prompt.validate(cfg.image_size)?;
    let p = format!("changeseg.{branch}");
    let q0 = ctx.p(&format!("{p}.queries"))?;
    let c = ctx.g.shape(q0)[1];
    if ctx.g.shape(f.var)[1] != c {
        return Err(ModelError::Config(format!(
            "query width {c} does not match fused width {}",
            ctx.g.shape(f.var)[1]
        )));
    }
    let nd = ctx.g.shape(q0)[0];
    let (mut q, mask) = match prompt_vector(prompt, cfg) {
        None => (q0, None),
        Some((pe, kind)) => {
            let pe = ctx.g.constant(Tensor::new(vec![1, c], pe)?);
            let types = ctx.p(&format!("{p}.prompt_type"))?;
            let ty = ctx.g.narrow(types, 0, kind, 1)?;
            let pq = ctx.g.add(pe, ty)?;
            let q = ctx.g.concat(&[q0, pq], 0)?;
            (
                q,
                Some(prompt_attention_mask(prompt, f, nd + 1, cfg.image_size)),
            )
        }
    };
    let mut attention = None;
    for layer in 1..=cfg.decoder_layers {
        let l = format!("{p}.dec{layer}");
        let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|m| ctx.p(&format!("{l}.{m}")));
        let (wq, wk, wv, wo) = (wq?, wk?, wv?, wo?);
        let qp = ctx.g.matmul(q, wq)?;
        let kp = ctx.g.matmul(f.var, wk)?;
        let kt = ctx.g.transpose(kp)?;
        let scores = ctx.g.matmul(qp, kt)?;
        let scores = ctx.g.scale(scores, 1.0 / (c as f64).sqrt())?;
        let a = ctx.g.softmax(scores, 1, mask.as_ref())?;
        let vp = ctx.g.matmul(f.var, wv)?;
        let ctxv = ctx.g.matmul(a, vp)?;
        let out = ctx.g.matmul(ctxv, wo)?;
        q = ctx.g.add(q, out)?;
        let (w1, b1) = (ctx.p(&format!("{l}.ffn.w1"))?, ctx.p(&format!("{l}.ffn.b1"))?);
        let (w2, b2) = (ctx.p(&format!("{l}.ffn.w2"))?, ctx.p(&format!("{l}.ffn.b2"))?);
        let h = ctx.g.linear(q, w1, Some(b1))?;
        let h = ctx.g.relu(h)?;
        let h = ctx.g.linear(h, w2, Some(b2))?;
        q = ctx.g.add(q, h)?;
        attention = Some(a);
    }
    let (queries, prompt_query) = if prompt.is_none() {
        (q, None)
    } else {
        (ctx.g.narrow(q, 0, 0, nd)?, Some(ctx.g.narrow(q, 0, nd, 1)?))
    };
    Ok(DecodedQueries {
        queries,
        prompt_query,
        attention,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ChangePrior {
    /// Foreground mask logits `[tokens, N_d]`.
    pub m: Var,
    /// Category scores `[1, N_d]`.
    pub s: Var,
    /// Per-query change-category logits `[N_d, n_categories + 1]`; the last
    /// column is "no object".
    pub class_logits: Var,
}

/// `M = G Q^T` against stage-1 features `G` on the fused grid; `S` and the
/// class logits are linear heads on the query rows.
pub fn change_prior(ctx: &mut Ctx, branch: &str, q: Var, stage1: Var) -> Result<ChangePrior> {
    let p = format!("changeseg.{branch}");
    let qt = ctx.g.transpose(q)?;
    let m = ctx.g.matmul(stage1, qt)?;
    let (sw, sb) = (ctx.p(&format!("{p}.score.w"))?, ctx.p(&format!("{p}.score.b"))?);
    let s = ctx.g.linear(q, sw, Some(sb))?;
    let s = ctx.g.transpose(s)?;
    let (cw, cb) = (ctx.p(&format!("{p}.cls.w"))?, ctx.p(&format!("{p}.cls.b"))?);
    let class_logits = ctx.g.linear(q, cw, Some(cb))?;
    Ok(ChangePrior { m, s, class_logits })
}

/// `T_v = softmax_n(M * S) Q_d + F_fuse`, with `S` broadcast over positions.
pub fn cpe_modulate(ctx: &mut Ctx, prior: &ChangePrior, q: Var, f_fuse: Var) -> Result<Var> {
    let nd = ctx.g.shape(q)[0];
    if ctx.g.shape(prior.m)[1] != nd || ctx.g.shape(prior.s) != [1, nd] {
        return Err(ModelError::Config(format!(
            "prior has {:?} / {:?} but there are {nd} queries",
            ctx.g.shape(prior.m),
            ctx.g.shape(prior.s)
        )));
    }
    let ms = ctx.g.mul(prior.m, prior.s)?;
    let w = ctx.g.softmax(ms, 1, None)?;
    let mix = ctx.g.matmul(w, q)?;
    Ok(ctx.g.add(mix, f_fuse)?)
}

#[derive(Clone, Debug)]
pub struct BranchOutput {
    pub t_v: Var,
    pub t_p: Var,
    pub prompt_token: Option<Var>,
    pub prior: ChangePrior,
}

#[derive(Clone, Debug)]
pub struct DualBranchOutput {
    pub frozen: BranchOutput,
    pub train: BranchOutput,
}

fn run_branch(
    ctx: &mut Ctx,
    branch: &str,
    f: &FusedFeatures,
    stage1: Var,
    prompt: &PromptGeometry,
    cfg: &ModelConfig,
    mech: &Mechanisms,
) -> Result<BranchOutput> {
    let dq = decode_queries(ctx, branch, f, prompt, cfg)?;
    let prior = change_prior(ctx, branch, dq.queries, stage1)?;
    let t_v = if mech.cpe {
        cpe_modulate(ctx, &prior, dq.queries, f.var)?
    } else {
        f.var
    };
    Ok(BranchOutput {
        t_v,
        t_p: dq.queries,
        prompt_token: dq.prompt_query,
        prior,
    })
}

pub fn check_branch_shapes(ctx: &Ctx) -> Result<()> {
    let store = ctx.store();
    for name in store.names().filter(|n| n.starts_with("changeseg.train.")) {
        let twin = name.replacen("changeseg.train.", "changeseg.frozen.", 1);
        let (a, b) = (store.get(name)?, store.get(&twin)?);
        if a.shape() != b.shape() {
            return Err(ModelError::Config(format!(
                "{name} is {:?} but {twin} is {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Frozen branch on detached inputs; every output is gradient-free.
pub fn frozen_branch_forward(
    ctx: &mut Ctx,
    f: &FusedFeatures,
    stage1: Var,
    prompt: &PromptGeometry,
    cfg: &ModelConfig,
    mech: &Mechanisms,
) -> Result<BranchOutput> {
    let detached = FusedFeatures {
        var: ctx.g.detach(f.var),
        ..f.clone()
    };
    let s1 = ctx.g.detach(stage1);
    let mut out = run_branch(ctx, "frozen", &detached, s1, prompt, cfg, mech)?;
    out.t_v = ctx.g.detach(out.t_v);
    out.t_p = ctx.g.detach(out.t_p);
    out.prompt_token = out.prompt_token.map(|p| ctx.g.detach(p));
    Ok(out)
}

pub fn train_branch_forward(
    ctx: &mut Ctx,
    f: &FusedFeatures,
    stage1: Var,
    prompt: &PromptGeometry,
    cfg: &ModelConfig,
    mech: &Mechanisms,
) -> Result<BranchOutput> {
    run_branch(ctx, "train", f, stage1, prompt, cfg, mech)
}

pub fn dual_branch_forward(
    ctx: &mut Ctx,
    f: &FusedFeatures,
    stage1: Var,
    prompt: &PromptGeometry,
    cfg: &ModelConfig,
    mech: &Mechanisms,
) -> Result<DualBranchOutput> {
    check_branch_shapes(ctx)?;
    let frozen = frozen_branch_forward(ctx, f, stage1, prompt, cfg, mech)?;
    let train = train_branch_forward(ctx, f, stage1, prompt, cfg, mech)?;
    Ok(DualBranchOutput { frozen, train })
}

fn mlp2(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let (w1, b1) = (ctx.p(&format!("{prefix}.w1"))?, ctx.p(&format!("{prefix}.b1"))?);
    let (w2, b2) = (ctx.p(&format!("{prefix}.w2"))?, ctx.p(&format!("{prefix}.b2"))?);
    let h = ctx.g.linear(x, w1, Some(b1))?;
    let h = ctx.g.relu(h)?;
    Ok(ctx.g.linear(h, w2, Some(b2))?)
}

/// Visual projector, `C -> C_llm`.
pub fn p_v(ctx: &mut Ctx, x: Var) -> Result<Var> {
    mlp2(ctx, x, "projector.pv")
}

/// Text-to-visual projector, `C_llm -> C`.
pub fn p_t(ctx: &mut Ctx, x: Var) -> Result<Var> {
    mlp2(ctx, x, "projector.pt")
}

#[derive(Clone, Debug)]
pub struct TokenBundle {
    /// `[tokens, C_llm]` in fused-grid row-major order.
    pub visual: Var,
    /// 1-based phase of each visual token.
    pub phase_tags: Vec<usize>,
    /// `[prompt count, C_llm]`, absent without a prompt.
    pub prompt: Option<Var>,
    /// `[N_d, C_llm]`
    pub change: Var,
}

impl TokenBundle {
    pub fn len(&self, ctx: &Ctx) -> usize {
        ctx.g.shape(self.visual)[0]
            + self.prompt.map_or(0, |p| ctx.g.shape(p)[0])
            + ctx.g.shape(self.change)[0]
    }
}

pub fn project_tokens(
    ctx: &mut Ctx,
    f: &FusedFeatures,
    t_v: Var,
    t_p: Var,
    prompt_token: Option<Var>,
) -> Result<TokenBundle> {
    let visual = p_v(ctx, t_v)?;
    let change = p_v(ctx, t_p)?;
    let prompt = prompt_token.map(|p| p_v(ctx, p)).transpose()?;
    let phase_tags = (0..f.side)
        .flat_map(|_| f.phase_of_column.iter().copied())
        .collect();
    Ok(TokenBundle {
        visual,
        phase_tags,
        prompt,
        change,
    })
}

#[derive(Clone, Debug)]
pub struct SegMask {
    /// `[image_size * image_size, 1]`
    pub logits: Var,
    pub side: usize,
}

impl SegMask {
    /// Strict `> 0` threshold; a logit of exactly zero is background.
    pub fn binary(&self, ctx: &Ctx) -> Vec<bool> {
        ctx.g.value(self.logits).data().iter().map(|&v| v > 0.0).collect()
    }
}

/// Mask logits for one `[SEG]` hidden state.
///
/// Per-pixel features of the later phase of `pair` are its stage-1 map, its
/// block of the modulated grid `T_v`, and the raw difference maps of the
/// pair on stages 2..4, each upsampled to image resolution. The logit is the
/// inner product with `P_t(seg_hidden)`. Dot products are taken at native
/// resolution and the scalar maps are upsampled, which is equivalent.
pub fn decode_seg_mask(
    ctx: &mut Ctx,
    seg_hidden: Var,
    pair: (usize, usize),
    stack: &TemporalFeatureStack,
    vcp: &VcpOutput,
    f: &FusedFeatures,
    t_v: Var,
    cfg: &ModelConfig,
) -> Result<SegMask> {
    let (a, b) = pair;
    let k = stack.k();
    if a < 1 || b > k || b != a + 1 {
        return Err(ModelError::Input(format!(
            "phase pair ({a}, {b}) is not an adjacent pair of 1..{k}"
        )));
    }
    let diff = vcp
        .pair(a - 1, b - 1)
        .ok_or_else(|| ModelError::Input(format!("no difference features for ({a}, {b})")))?;
    let side = cfg.image_size;
    let h = ctx.g.reshape(seg_hidden, &[1, cfg.lm_width])?;
    let v = p_t(ctx, h)?;
    let vt = ctx.g.transpose(v)?;

    let phase = b - 1;
    let mut terms: Vec<(Var, Vec<usize>)> = Vec::new();
    let s1 = stack.stage(phase, 1);
    terms.push((s1.var, nearest_indices(s1.side, side)));
    for (i, s) in CEA_STAGES.iter().enumerate() {
        let m = stack.stage(phase, *s);
        terms.push((diff.f_diff[i], nearest_indices(m.side, side)));
    }
    // T_v block of this phase
    let g = f.side;
    let mut tv_idx = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            tv_idx.push(f.index(y * g / side, phase, x * g / side));
        }
    }
    terms.push((t_v, tv_idx));

    let mut logits: Option<Var> = None;
    for (feat, idx) in terms {
        let dot = ctx.g.matmul(feat, vt)?;
        let up = ctx.g.gather_rows(dot, &idx)?;
        logits = Some(match logits {
            Some(l) => ctx.g.add(l, up)?,
            None => up,
        });
    }
    Ok(SegMask {
        logits: logits.expect("at least one term"),
        side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fused_layout_interleaves_phase_blocks() {
        assert_eq!(fused_order(2, 2), vec![0, 1, 4, 5, 2, 3, 6, 7]);
        assert_eq!(phase_tags(2, 3), vec![1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn prompt_validation() {
        assert!(PromptGeometry::Point { x: 3, y: 4 }.validate(8).is_ok());
        assert!(PromptGeometry::Point { x: 8, y: 0 }.validate(8).is_err());
        assert!(PromptGeometry::Box {
            x1: 5,
            y1: 0,
            x2: 2,
            y2: 3
        }
        .validate(8)
        .is_err());
    }

    #[test]
    fn prompt_json_shape() {
        let p = PromptGeometry::Box {
            x1: 1,
            y1: 2,
            x2: 3,
            y2: 4,
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"kind":"box","x1":1,"y1":2,"x2":3,"y2":4}"#);
        assert_eq!(serde_json::from_str::<PromptGeometry>(&s).unwrap(), p);
    }
}
