//! Context aggregation module and the top-down decoder built from it.

use std::collections::BTreeMap;

use bgnet_tensor::{concat_channels, Conv2dOptions, Var};

use crate::datamodel::Feat;
use crate::error::{BgError, Result};
use crate::nn::{Conv2d, ConvBlock};
use crate::params::{Builder, Ctx};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamMode {
    /// Upsample, concatenate and 1×1 only; the prediction is read from f_m.
    InitialAggregation,
    /// Four-way split with chained atrous branches and residual
    /// re-aggregation.
    Full,
}

#[derive(Debug, Clone)]
pub struct Cam {
    pub mode: CamMode,
    pub width: usize,
    pub pre_fuse: ConvBlock,
    pub branches: Vec<ConvBlock>,
    pub post_fuse: Option<ConvBlock>,
    pub out_conv: Option<ConvBlock>,
    pub pred_head: Conv2d,
}

pub struct CamOutput<'g> {
    /// f_i^c (f_m for initial aggregation).
    pub feature: Feat<'g>,
    /// Single-channel logit P_i.
    pub logit: Feat<'g>,
}

impl Cam {
    pub fn build(b: &mut Builder<'_>, name: &str, width: usize, dilations: [usize; 4], mode: CamMode) -> Result<Self> {
        if width == 0 || width % 4 != 0 {
            return Err(BgError::config("head_width", format!("{width} is not divisible by 4")));
        }
        let mut b = b.sub(name);
        let one = Conv2dOptions::default();
        let pre_fuse = ConvBlock::new(&mut b, "pre_fuse", 2 * width, width, 1, one, true);
        let (branches, post_fuse, out_conv) = match mode {
            CamMode::InitialAggregation => (Vec::new(), None, None),
            CamMode::Full => {
                let g = width / 4;
                let branches =
                    dilations.iter().enumerate().map(|(j, &d)| ConvBlock::same(&mut b, &format!("branch{}", j + 1), g, g, 3, d)).collect();
                let post = ConvBlock::new(&mut b, "post_fuse", width, width, 1, one, true);
                let out = ConvBlock::same(&mut b, "out_conv", width, width, 3, 1);
                (branches, Some(post), Some(out))
            }
        };
        let pred_head = Conv2d::new(&mut b, "pred_head", width, 1, 1, one, true);
        Ok(Cam { mode, width, pre_fuse, branches, post_fuse, out_conv, pred_head })
    }

    /// `f_m = Conv1×1([f_a, up(deeper)])`.
    pub fn aggregate<'g>(&self, ctx: &Ctx<'g>, f_a: Feat<'g>, deeper: Feat<'g>) -> Result<Var<'g>> {
        if deeper.stride != 2 * f_a.stride {
            return Err(BgError::shape(format!(
                "deeper feature stride {} is not twice the current stride {}",
                deeper.stride, f_a.stride
            )));
        }
        let (b, c, h, w) = f_a.dims();
        let (db, dc, ..) = deeper.dims();
        if b != db || c != self.width || dc != self.width {
            return Err(BgError::shape(format!(
                "context aggregation expects two {}-channel inputs with equal batch, got {c} and {dc} channels, batch {b} and {db}",
                self.width
            )));
        }
        Ok(self.pre_fuse.forward(ctx, concat_channels(&[f_a.var, deeper.var.resize_bilinear(h, w)])))
    }

    /// Chained atrous branches over the four channel groups of `f_m`:
    /// branch j sees its own group, the next group (j < 4) and the output of
    /// branch j-1 (j > 1).
    pub fn branches<'g>(&self, ctx: &Ctx<'g>, f_m: Var<'g>) -> Vec<Var<'g>> {
        let g = self.width / 4;
        let groups: Vec<Var<'g>> = (0..4).map(|j| f_m.narrow_channels(j * g, g)).collect();
        let mut outs: Vec<Var<'g>> = Vec::with_capacity(4);
        for (j, conv) in self.branches.iter().enumerate() {
            let mut x = groups[j];
            if j > 0 {
                x = outs[j - 1].add(x);
            }
            if j < 3 {
                x = x.add(groups[j + 1]);
            }
            outs.push(conv.forward(ctx, x));
        }
        outs
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, f_a: Feat<'g>, deeper: Feat<'g>) -> Result<CamOutput<'g>> {
        let f_m = self.aggregate(ctx, f_a, deeper)?;
        let feature = match self.mode {
            CamMode::InitialAggregation => f_m,
            CamMode::Full => {
                let (post, out) = (self.post_fuse.as_ref().unwrap(), self.out_conv.as_ref().unwrap());
                let merged = concat_channels(&self.branches(ctx, f_m));
                out.forward(ctx, post.forward(ctx, merged).add(f_m))
            }
        };
        let logit = self.pred_head.forward(ctx, feature);
        ctx.ensure_finite(feature, "context aggregation")?;
        Ok(CamOutput { feature: Feat::new(feature, f_a.stride), logit: Feat::new(logit, f_a.stride) })
    }
}

/// Runs the three CAMs from level 4 down to level 2. `cams` is ordered
/// `[level 4, level 3, level 2]`; the result maps level to logit.
pub fn decode_top_down<'g>(
    ctx: &Ctx<'g>,
    efm_outs: &BTreeMap<usize, Feat<'g>>,
    cams: &[Cam],
) -> Result<BTreeMap<usize, Feat<'g>>> {
    if cams.len() != 3 {
        return Err(BgError::config("variant", format!("decoder needs 3 aggregation modules, got {}", cams.len())));
    }
    let level = |i: usize| {
        efm_outs.get(&i).copied().ok_or_else(|| BgError::config("variant", format!("decoder input level {i} is missing")))
    };
    let mut deeper = level(5)?;
    let mut logits = BTreeMap::new();
    for (cam, i) in cams.iter().zip([4, 3, 2]) {
        let out = cam.forward(ctx, level(i)?, deeper)?;
        logits.insert(i, out.logit);
        deeper = out.feature;
    }
    Ok(logits)
}
