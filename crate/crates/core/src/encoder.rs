//! Toy image encoder: a stem patch projection followed by three 2x2
//! strided stages, all ReLU. One set of weights serves every phase.

use numcore::{Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::params::{Ctx, Init, ParamSpec};

/// One square feature map stored as `[side * side, channels]`, row-major over pixels.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub side: usize,
}

impl FeatureMap {
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }
}

/// Per-phase, per-stage feature maps; `phases[k][s]` is stage `s + 1` of phase `k + 1`.
#[derive(Clone, Debug)]
pub struct TemporalFeatureStack {
    pub phases: Vec<Vec<FeatureMap>>,
}

impl TemporalFeatureStack {
    pub fn k(&self) -> usize {
        self.phases.len()
    }

    pub fn stage(&self, phase: usize, stage: usize) -> FeatureMap {
        self.phases[phase][stage - 1]
    }
}

pub const STAGES: usize = 4;

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_f;
    let stem_in = cfg.stem_stride * cfg.stem_stride * 3;
    let mut specs = vec![
        ParamSpec::linear("encoder.stem.w", stem_in, d),
        ParamSpec::new(
            "encoder.stem.b",
            &[d],
            Init::Uniform(1.0 / (stem_in as f64).sqrt()),
        ),
    ];
    for s in 2..=STAGES {
        specs.push(ParamSpec::linear(format!("encoder.s{s}.w"), 4 * d, d));
        specs.push(ParamSpec::new(
            format!("encoder.s{s}.b"),
            &[d],
            Init::Uniform(1.0 / ((4 * d) as f64).sqrt()),
        ));
    }
    specs
}

/// Row indices that gather `patch x patch` blocks of a `side x side` map so
/// that each block's pixels are consecutive.
pub(crate) fn patch_indices(side: usize, patch: usize) -> Vec<usize> {
    let out = side / patch;
    let mut idx = Vec::with_capacity(side * side);
    for r in 0..out {
        for c in 0..out {
            for dr in 0..patch {
                for dc in 0..patch {
                    idx.push((r * patch + dr) * side + c * patch + dc);
                }
            }
        }
    }
    idx
}

/// Nearest-neighbour resampling index map from a `src` square grid to a `dst` one.
pub fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(dst * dst);
    for r in 0..dst {
        let sr = r * src / dst;
        for c in 0..dst {
            idx.push(sr * src + c * src / dst);
        }
    }
    idx
}

fn check_images(images: &[Tensor], cfg: &ModelConfig) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| ModelError::Input("no images".into()))?;
    let expected = [cfg.image_size, cfg.image_size, 3];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(ModelError::Input(format!(
                "image {} has shape {:?}, image 1 has {:?}",
                k + 1,
                img.shape(),
                first.shape()
            )));
        }
        if img.shape() != expected {
            return Err(ModelError::Input(format!(
                "image {} has shape {:?}, expected {:?}",
                k + 1,
                img.shape(),
                expected
            )));
        }
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ModelError::Input(format!(
                "image {} has pixel values outside [0, 1]",
                k + 1
            )));
        }
    }
    Ok(())
}

fn encode_one(ctx: &mut Ctx, image: &Tensor, cfg: &ModelConfig) -> Result<Vec<FeatureMap>> {
    let side = cfg.image_size;
    let s = cfg.stem_stride;
    let x = ctx.g.constant(image.reshape(&[side * side, 3])?);
    let x = if s > 1 {
        let gathered = ctx.g.gather_rows(x, &patch_indices(side, s))?;
        ctx.g.reshape(gathered, &[(side / s) * (side / s), s * s * 3])?
    } else {
        x
    };
    let (w, b) = (ctx.p("encoder.stem.w")?, ctx.p("encoder.stem.b")?);
    let h = ctx.g.linear(x, w, Some(b))?;
    let h = ctx.g.relu(h)?;
    let mut maps = vec![FeatureMap {
        var: h,
        side: side / s,
    }];
    for stage in 2..=STAGES {
        let prev = maps[stage - 2];
        let half = prev.side / 2;
        let gathered = ctx.g.gather_rows(prev.var, &patch_indices(prev.side, 2))?;
        let merged = ctx.g.reshape(gathered, &[half * half, 4 * cfg.d_f])?;
        let w = ctx.p(&format!("encoder.s{stage}.w"))?;
        let b = ctx.p(&format!("encoder.s{stage}.b"))?;
        let h = ctx.g.linear(merged, w, Some(b))?;
        let h = ctx.g.relu(h)?;
        maps.push(FeatureMap { var: h, side: half });
    }
    Ok(maps)
}

/// Encodes each of the `K` images independently with the shared encoder.
pub fn encode_images(
    ctx: &mut Ctx,
    images: &[Tensor],
    cfg: &ModelConfig,
) -> Result<TemporalFeatureStack> {
    check_images(images, cfg)?;
    let phases = images
        .iter()
        .map(|img| encode_one(ctx, img, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(TemporalFeatureStack { phases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_order() {
        assert_eq!(patch_indices(4, 2)[..8], [0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn nearest_down_and_up() {
        assert_eq!(nearest_indices(4, 2), vec![0, 2, 8, 10]);
        assert_eq!(nearest_indices(2, 4)[..4], [0, 0, 1, 1]);
        assert_eq!(nearest_indices(3, 3), (0..9).collect::<Vec<_>>());
    }
}
