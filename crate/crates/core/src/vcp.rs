//! Visual change perception: absolute feature differences, the learned
//! difference embedding, and two stacked change-enhanced attention layers
//! on encoder stages 2 to 4.
//!
//! For a pair of phases `(i, j)` and one stage, a layer computes two spatial
//! attention maps over the `side * side` positions,
//!
//! ```text
//! A1 = softmax_p( <F_i Wq1, F_j Wk2>_p / sqrt(d_f) + (E Wein)_p )
//! A2 = softmax_p( <F_i Wq2, F_j Wk1>_p / sqrt(d_f) + (E Wein)_p )
//! ```
//!
//! and updates `F_i += A1 * (F_j Wv2)`, `F_j += A2 * (F_i Wv1)` (attention
//! broadcast over channels) and `E += (A1 + A2) / 2 * Weout`. With
//! `symmetric_queries` the second map queries from `F_j` and keys from `F_i`.

use numcore::Var;

use crate::config::{Mechanisms, ModelConfig};
use crate::encoder::{FeatureMap, TemporalFeatureStack, STAGES};
use crate::error::{ModelError, Result};
use crate::params::{Ctx, Init, ParamSpec};

/// Stages that carry difference features and CEA.
pub const CEA_STAGES: [usize; 3] = [2, 3, 4];
pub const CEA_LAYERS: usize = 2;

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_f;
    let mut specs = Vec::new();
    for s in CEA_STAGES {
        let p = format!("vcp.s{s}");
        specs.push(ParamSpec::linear(format!("{p}.mlp.w1"), d, d));
        specs.push(ParamSpec::new(format!("{p}.mlp.b1"), &[d], Init::Zeros));
        specs.push(ParamSpec::linear(format!("{p}.mlp.w2"), d, d));
        specs.push(ParamSpec::new(format!("{p}.mlp.b2"), &[d], Init::Zeros));
        for l in 1..=CEA_LAYERS {
            let q = format!("{p}.cea{l}");
            for m in ["wq1", "wq2", "wk1", "wk2", "wv1", "wv2"] {
                specs.push(ParamSpec::linear(format!("{q}.{m}"), d, d));
            }
            specs.push(ParamSpec::new(format!("{q}.w_ein"), &[d, 1], Init::Zeros));
            specs.push(ParamSpec::new(format!("{q}.w_eout"), &[1, d], Init::Zeros));
        }
    }
    specs
}

/// Elementwise `|F_i - F_j|`.
pub fn diff_features(ctx: &mut Ctx, f_i: Var, f_j: Var) -> Result<Var> {
    let (si, sj) = (ctx.g.shape(f_i).to_vec(), ctx.g.shape(f_j).to_vec());
    if si != sj {
        return Err(numcore::TensorError::Dimension {
            op: "diff_features",
            lhs: si,
            rhs: sj,
        }
        .into());
    }
    let d = ctx.g.sub(f_i, f_j)?;
    Ok(ctx.g.abs(d)?)
}

/// Two-layer per-pixel MLP over channels: `relu(F W1 + b1) W2 + b2`.
pub fn diff_embedding(ctx: &mut Ctx, f_diff: Var, stage: usize) -> Result<Var> {
    let p = format!("vcp.s{stage}.mlp");
    let (w1, b1) = (ctx.p(&format!("{p}.w1"))?, ctx.p(&format!("{p}.b1"))?);
    let (w2, b2) = (ctx.p(&format!("{p}.w2"))?, ctx.p(&format!("{p}.b2"))?);
    let h = ctx.g.linear(f_diff, w1, Some(b1))?;
    let h = ctx.g.relu(h)?;
    Ok(ctx.g.linear(h, w2, Some(b2))?)
}

/// Names of the weights of one CEA layer.
#[derive(Clone, Debug)]
pub struct CeaWeights {
    prefix: String,
}

impl CeaWeights {
    pub fn new(stage: usize, layer: usize) -> Self {
        CeaWeights {
            prefix: format!("vcp.s{stage}.cea{layer}"),
        }
    }

    fn get(&self, ctx: &mut Ctx, m: &str) -> Result<Var> {
        ctx.p(&format!("{}.{m}", self.prefix))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CeaOutput {
    pub f_i: Var,
    pub f_j: Var,
    pub e_diff: Var,
    /// `[positions, 1]` attention maps.
    pub a1: Var,
    pub a2: Var,
}

/// Spatial attention logits `<q, k>_p / sqrt(d) + bias_p` as `[positions, 1]`.
fn attention_map(ctx: &mut Ctx, q: Var, k: Var, bias: Var, d: usize) -> Result<Var> {
    let prod = ctx.g.mul(q, k)?;
    let dot = ctx.g.sum_axis(prod, 1)?;
    let dot = ctx.g.scale(dot, 1.0 / (d as f64).sqrt())?;
    let logits = ctx.g.add(dot, bias)?;
    Ok(ctx.g.softmax(logits, 0, None)?)
}

pub fn cea_layer(
    ctx: &mut Ctx,
    f_i: Var,
    f_j: Var,
    e_diff: Var,
    w: &CeaWeights,
    symmetric_queries: bool,
) -> Result<CeaOutput> {
    let shape = ctx.g.shape(f_i).to_vec();
    if ctx.g.shape(f_j) != shape.as_slice() || ctx.g.shape(e_diff) != shape.as_slice() {
        return Err(ModelError::Input(format!(
            "cea_layer: feature shapes {:?}, {:?} and E_diff {:?} differ",
            shape,
            ctx.g.shape(f_j),
            ctx.g.shape(e_diff)
        )));
    }
    let d = shape[1];
    let wq1 = w.get(ctx, "wq1")?;
    if ctx.g.shape(wq1) != [d, d] {
        return Err(ModelError::Config(format!(
            "cea_layer: weights are {:?} but features have d_f = {d}",
            ctx.g.shape(wq1)
        )));
    }
    let [wq2, wk1, wk2, wv1, wv2, w_ein, w_eout] =
        ["wq2", "wk1", "wk2", "wv1", "wv2", "w_ein", "w_eout"].map(|m| w.get(ctx, m));
    let (wq2, wk1, wk2, wv1, wv2, w_ein, w_eout) = (wq2?, wk1?, wk2?, wv1?, wv2?, w_ein?, w_eout?);

    let bias = ctx.g.matmul(e_diff, w_ein)?;
    let q1 = ctx.g.matmul(f_i, wq1)?;
    let k2 = ctx.g.matmul(f_j, wk2)?;
    let a1 = attention_map(ctx, q1, k2, bias, d)?;
    let (q_src, k_src) = if symmetric_queries { (f_j, f_i) } else { (f_i, f_j) };
    let q2 = ctx.g.matmul(q_src, wq2)?;
    let k1 = ctx.g.matmul(k_src, wk1)?;
    let a2 = attention_map(ctx, q2, k1, bias, d)?;

    let v2 = ctx.g.matmul(f_j, wv2)?;
    let upd_i = ctx.g.mul(a1, v2)?;
    let new_i = ctx.g.add(f_i, upd_i)?;
    let v1 = ctx.g.matmul(f_i, wv1)?;
    let upd_j = ctx.g.mul(a2, v1)?;
    let new_j = ctx.g.add(f_j, upd_j)?;

    let a_sum = ctx.g.add(a1, a2)?;
    let a_mean = ctx.g.scale(a_sum, 0.5)?;
    let e_upd = ctx.g.matmul(a_mean, w_eout)?;
    let new_e = ctx.g.add(e_diff, e_upd)?;
    Ok(CeaOutput {
        f_i: new_i,
        f_j: new_j,
        e_diff: new_e,
        a1,
        a2,
    })
}

/// Difference data for one adjacent phase pair.
#[derive(Clone, Debug)]
pub struct PairDiff {
    /// Zero-based phase indices `(i, i + 1)`.
    pub pair: (usize, usize),
    /// Raw `|F_i - F_j|` for stages 2..4.
    pub f_diff: Vec<Var>,
    /// Embedding after both CEA layers, per stage 2..4 (empty when CEA is off).
    pub e_diff: Vec<Var>,
    /// Attention maps `(A1, A2)` of the last layer, per stage 2..4.
    pub attention: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct VcpOutput {
    pub enhanced: TemporalFeatureStack,
    pub pairs: Vec<PairDiff>,
}

impl VcpOutput {
    pub fn pair(&self, i: usize, j: usize) -> Option<&PairDiff> {
        self.pairs.iter().find(|p| p.pair == (i, j))
    }
}

/// Difference features for every adjacent pair, then (if enabled) two CEA
/// layers per stage 2..4. With three phases the middle phase takes the mean
/// of its two enhanced versions.
pub fn vcp_forward(
    ctx: &mut Ctx,
    stack: &TemporalFeatureStack,
    mech: &Mechanisms,
) -> Result<VcpOutput> {
    let k = stack.k();
    if k < 2 {
        return Err(ModelError::Input(format!("need at least 2 phases, got {k}")));
    }
    let mut enhanced = stack.clone();
    // per phase, per stage: enhanced versions to be averaged
    let mut versions: Vec<Vec<Vec<Var>>> = vec![vec![Vec::new(); STAGES]; k];
    let mut pairs = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let j = i + 1;
        let mut pd = PairDiff {
            pair: (i, j),
            f_diff: Vec::new(),
            e_diff: Vec::new(),
            attention: Vec::new(),
        };
        for s in CEA_STAGES {
            let (fi, fj) = (stack.stage(i, s).var, stack.stage(j, s).var);
            let diff = diff_features(ctx, fi, fj)?;
            pd.f_diff.push(diff);
            if !mech.cea {
                continue;
            }
            let mut e = diff_embedding(ctx, diff, s)?;
            let (mut a, mut b) = (fi, fj);
            let mut maps = None;
            for layer in 1..=CEA_LAYERS {
                let out = cea_layer(
                    ctx,
                    a,
                    b,
                    e,
                    &CeaWeights::new(s, layer),
                    mech.symmetric_queries,
                )?;
                a = out.f_i;
                b = out.f_j;
                e = out.e_diff;
                maps = Some((out.a1, out.a2));
            }
            pd.e_diff.push(e);
            pd.attention.extend(maps);
            versions[i][s - 1].push(a);
            versions[j][s - 1].push(b);
        }
        pairs.push(pd);
    }
    if mech.cea {
        for (phase, stages) in versions.into_iter().enumerate() {
            for (si, vs) in stages.into_iter().enumerate() {
                let merged = match vs.len() {
                    0 => continue,
                    1 => vs[0],
                    n => {
                        let mut acc = vs[0];
                        for &v in &vs[1..] {
                            acc = ctx.g.add(acc, v)?;
                        }
                        ctx.g.scale(acc, 1.0 / n as f64)?
                    }
                };
                let side = enhanced.phases[phase][si].side;
                enhanced.phases[phase][si] = FeatureMap { var: merged, side };
            }
        }
    }
    Ok(VcpOutput { enhanced, pairs })
}
