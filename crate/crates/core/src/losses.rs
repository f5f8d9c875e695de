//! Loss kernels for both training stages and the query-to-instance matcher.

use numcore::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::Ctx;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_focal: f64,
    /// Dice smoothing.
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma_focal: 2.0,
            dice_eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma_focal < 0.0 || self.dice_eps <= 0.0 {
            return Err(ModelError::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

fn one_hot(rows: usize, cols: usize, hot: impl Iterator<Item = (usize, usize)>) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for (r, c) in hot {
        t.data_mut()[r * cols + c] = 1.0;
    }
    t
}

/// Mean cross-entropy over rows with a target; `None` rows are ignored.
pub fn text_loss(ctx: &mut Ctx, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let shape = ctx.g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(ModelError::Input(format!(
            "logits {shape:?} against {} targets",
            targets.len()
        )));
    }
    let (n, v) = (shape[0], shape[1]);
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(ModelError::Contract("no supervised positions".into()));
    }
    if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
        return Err(ModelError::Input(format!("target {bad} outside {v} classes")));
    }
    let sel = one_hot(
        n,
        v,
        targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t))),
    );
    let lp = ctx.g.log_softmax(logits, 1)?;
    let sel = ctx.g.constant(sel);
    let picked = ctx.g.mul(lp, sel)?;
    let s = ctx.g.sum(picked)?;
    Ok(ctx.g.scale(s, -1.0 / count as f64)?)
}

/// `sum((t_ov - recon)^2) / rows`.
pub fn reg_loss(ctx: &mut Ctx, t_ov: Var, recon: Var) -> Result<Var> {
    let (a, b) = (ctx.g.shape(t_ov).to_vec(), ctx.g.shape(recon).to_vec());
    if a != b {
        return Err(numcore::TensorError::Dimension {
            op: "reg_loss",
            lhs: a,
            rhs: b,
        }
        .into());
    }
    let d = ctx.g.sub(t_ov, recon)?;
    let sq = ctx.g.mul(d, d)?;
    let s = ctx.g.sum(sq)?;
    Ok(ctx.g.scale(s, 1.0 / a[0].max(1) as f64)?)
}

fn sign_tensor(gt: &[bool], shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::new(
        shape.to_vec(),
        gt.iter().map(|&g| if g { 1.0 } else { -1.0 }).collect(),
    )?)
}

fn check_mask(ctx: &Ctx, x: Var, gt: &[bool]) -> Result<()> {
    let n: usize = ctx.g.shape(x).iter().product();
    if n != gt.len() {
        return Err(ModelError::Input(format!(
            "{n} predictions against {} ground-truth pixels",
            gt.len()
        )));
    }
    Ok(())
}

/// `log(sigmoid(x)) = -(relu(-x) + log(1 + exp(-|x|)))`.
fn log_sigmoid(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let nx = ctx.g.neg(x)?;
    let r = ctx.g.relu(nx)?;
    let a = ctx.g.abs(x)?;
    let na = ctx.g.neg(a)?;
    let e = ctx.g.exp(na)?;
    let e1 = ctx.g.add_scalar(e, 1.0)?;
    let l = ctx.g.log(e1)?;
    let sp = ctx.g.add(r, l)?;
    Ok(ctx.g.neg(sp)?)
}

/// Mean of `-(1 - p_t)^gamma log p_t` over pixels.
pub fn focal_loss(ctx: &mut Ctx, logits: Var, gt: &[bool], gamma: f64) -> Result<Var> {
    check_mask(ctx, logits, gt)?;
    let shape = ctx.g.shape(logits).to_vec();
    let sign = ctx.g.constant(sign_tensor(gt, &shape)?);
    let s = ctx.g.mul(logits, sign)?;
    let log_pt = log_sigmoid(ctx, s)?;
    let per = if gamma == 0.0 {
        log_pt
    } else {
        let pt = ctx.g.sigmoid(s)?;
        let npt = ctx.g.neg(pt)?;
        let q = ctx.g.add_scalar(npt, 1.0)?;
        let w = ctx.g.powf(q, gamma)?;
        ctx.g.mul(w, log_pt)?
    };
    let m = ctx.g.mean(per)?;
    Ok(ctx.g.neg(m)?)
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss(ctx: &mut Ctx, probs: Var, gt: &[bool], eps: f64) -> Result<Var> {
    check_mask(ctx, probs, gt)?;
    let shape = ctx.g.shape(probs).to_vec();
    let g = Tensor::new(
        shape,
        gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let gsum: f64 = g.sum();
    let g = ctx.g.constant(g);
    let inter = ctx.g.mul(probs, g)?;
    let inter = ctx.g.sum(inter)?;
    let num = ctx.g.scale(inter, 2.0)?;
    let num = ctx.g.add_scalar(num, eps)?;
    let psum = ctx.g.sum(probs)?;
    let den = ctx.g.add_scalar(psum, gsum + eps)?;
    let ratio = ctx.g.div(num, den)?;
    let neg = ctx.g.neg(ratio)?;
    Ok(ctx.g.add_scalar(neg, 1.0)?)
}

#[derive(Clone, Copy, Debug)]
pub struct MaskLoss {
    pub focal: Var,
    pub dice: Var,
    pub total: Var,
}

pub fn mask_loss(ctx: &mut Ctx, logits: Var, gt: &[bool], w: &LossWeights) -> Result<MaskLoss> {
    let focal = focal_loss(ctx, logits, gt, w.gamma_focal)?;
    let probs = ctx.g.sigmoid(logits)?;
    let dice = dice_loss(ctx, probs, gt, w.dice_eps)?;
    let a = ctx.g.scale(focal, w.alpha)?;
    let b = ctx.g.scale(dice, w.beta)?;
    let total = ctx.g.add(a, b)?;
    Ok(MaskLoss { focal, dice, total })
}

/// Mean cross-entropy of per-query class logits against one label per query.
pub fn cls_loss(ctx: &mut Ctx, class_logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = ctx.g.shape(class_logits)[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::Input(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    let targets: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    text_loss(ctx, class_logits, &targets)
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy highest-IoU assignment of predicted query masks to ground-truth
/// instances. Returns one label per query: the matched instance's category,
/// or `no_object` when unmatched. Pairs without overlap are never matched;
/// ties go to the lower query, then the lower instance.
pub fn greedy_match(
    pred: &[Vec<bool>],
    instances: &[(Vec<bool>, usize)],
    no_object: usize,
) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (q, p) in pred.iter().enumerate() {
        for (i, (m, _)) in instances.iter().enumerate() {
            let v = iou(p, m);
            if v > 0.0 {
                pairs.push((v, q, i));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut labels = vec![no_object; pred.len()];
    let mut used_q = vec![false; pred.len()];
    let mut used_i = vec![false; instances.len()];
    for (_, q, i) in pairs {
        if !used_q[q] && !used_i[i] {
            used_q[q] = true;
            used_i[i] = true;
            labels[q] = instances[i].1;
        }
    }
    labels
}
