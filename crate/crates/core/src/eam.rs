//! Edge-aware module: fuses a low-level backbone feature with f5 and predicts
//! an object-boundary probability map at the low-level resolution.

use bgnet_tensor::{concat_channels, Conv2dOptions};

use crate::backbone::Pyramid;
use crate::config::ModelConfig;
use crate::datamodel::Feat;
use crate::error::{BgError, Result};
use crate::nn::{Conv2d, ConvBlock};
use crate::params::{Builder, Ctx};

#[derive(Debug, Clone)]
pub struct Eam {
    pub reduce_low: ConvBlock,
    pub reduce_high: ConvBlock,
    pub fuse1: ConvBlock,
    pub fuse2: ConvBlock,
    pub head: Conv2d,
}

pub struct EamOutput<'g> {
    /// Edge logits before the sigmoid.
    pub logit: Feat<'g>,
    /// Edge probabilities P_e in (0, 1). This map is also the edge feature
    /// that gates every edge-guided fusion.
    pub prob: Feat<'g>,
}

impl Eam {
    pub fn build(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let channels = cfg.level_channels();
        let low_in = channels[cfg.eam_low_tap - 1];
        let high_in = channels[4];
        let mut b = b.sub("eam");
        let one = Conv2dOptions::default();
        let (lw, hw, mw) = (cfg.eam_low_width, cfg.eam_high_width, cfg.eam_mid_width);
        Eam {
            reduce_low: ConvBlock::new(&mut b, "reduce_low", low_in, lw, 1, one, true),
            reduce_high: ConvBlock::new(&mut b, "reduce_high", high_in, hw, 1, one, true),
            fuse1: ConvBlock::same(&mut b, "fuse1", lw + hw, mw, 3, 1),
            fuse2: ConvBlock::same(&mut b, "fuse2", mw, mw, 3, 1),
            head: Conv2d::new(&mut b, "head", mw, 1, 1, one, true),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, low: Feat<'g>, f5: Feat<'g>) -> Result<EamOutput<'g>> {
        let (bl, _, h, w) = low.dims();
        let (bh, ..) = f5.dims();
        if bl != bh {
            return Err(BgError::shape(format!("edge branch inputs have batch sizes {bl} and {bh}")));
        }
        if low.stride >= f5.stride {
            return Err(BgError::shape(format!(
                "low-level tap stride {} must be finer than f5 stride {}",
                low.stride, f5.stride
            )));
        }
        let low_r = self.reduce_low.forward(ctx, low.var);
        let high_r = self.reduce_high.forward(ctx, f5.var).resize_bilinear(h, w);
        let fused = self.fuse2.forward(ctx, self.fuse1.forward(ctx, concat_channels(&[low_r, high_r])));
        let logit = self.head.forward(ctx, fused);
        let prob = logit.sigmoid();
        ctx.ensure_finite(prob, "edge-aware module")?;
        Ok(EamOutput { logit: Feat::new(logit, low.stride), prob: Feat::new(prob, low.stride) })
    }
}

/// The configured low-level feature for the edge branch.
pub fn select_eam_tap<'g>(pyramid: &Pyramid<'g>, tap: usize) -> Result<Feat<'g>> {
    if !(1..=3).contains(&tap) {
        return Err(BgError::config("eam_low_tap", format!("{tap} is not one of 1, 2, 3")));
    }
    Ok(pyramid.level(tap))
}
