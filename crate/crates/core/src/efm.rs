//! Edge-guidance feature module.
//!
//! Each backbone level is gated by the (resampled) edge map with a skip
//! connection and refined by a 3×3 convolution; local channel attention
//! then reweights channels using a 1-D convolution over the pooled channel
//! descriptor, and a 1×1 convolution reduces to the head width.

use bgnet_tensor::{Conv2dOptions, Var};

use crate::datamodel::Feat;
use crate::error::{BgError, Result};
use crate::nn::ConvBlock;
use crate::params::{Builder, Ctx, ParamId};

/// Kernel length of the channel-attention convolution for `channels`
/// channels: `floor((1 + log2 C) / 2)`, bumped to the next odd number when
/// even.
pub fn lca_kernel_size(channels: usize) -> Result<usize> {
    if channels < 2 {
        return Err(BgError::Domain(format!("channel attention needs at least 2 channels, got {channels}")));
    }
    let t = ((1.0 + (channels as f64).log2()) / 2.0).floor() as usize;
    Ok(if t % 2 == 1 { t } else { t + 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EfmMode {
    /// Only the 1×1 reduction (baseline).
    ReduceOnly,
    /// Edge gating and 3×3 fusion, no channel attention.
    Fuse,
    /// Edge gating, fusion and local channel attention.
    FuseAttend,
}

#[derive(Debug, Clone)]
pub struct Efm {
    pub mode: EfmMode,
    pub fuse: Option<ConvBlock>,
    /// 1-D attention kernel, no bias.
    pub lca: Option<ParamId>,
    pub lca_kernel: usize,
    pub reduce: ConvBlock,
    pub channels: usize,
}

impl Efm {
    pub fn build(b: &mut Builder<'_>, name: &str, channels: usize, head_width: usize, mode: EfmMode) -> Result<Self> {
        let mut b = b.sub(name);
        let fuse = (mode != EfmMode::ReduceOnly).then(|| ConvBlock::same(&mut b, "fuse", channels, channels, 3, 1));
        let lca_kernel = lca_kernel_size(channels)?;
        let lca = (mode == EfmMode::FuseAttend).then(|| b.uniform("lca.weight", &[lca_kernel], 1.0 / (lca_kernel as f64).sqrt()));
        let reduce = ConvBlock::new(&mut b, "reduce", channels, head_width, 1, Conv2dOptions::default(), true);
        Ok(Efm { mode, fuse, lca, lca_kernel, reduce, channels })
    }

    /// `conv3x3((f ⊗ D(edge)) ⊕ f)` where `D` bilinearly resamples the edge
    /// map to the resolution of `f` (down or up, so any edge-branch tap works).
    pub fn fuse<'g>(&self, ctx: &Ctx<'g>, f: Feat<'g>, edge: Feat<'g>) -> Result<Feat<'g>> {
        let fuse = self.fuse.as_ref().ok_or_else(|| BgError::config("variant", "this module has no fusion convolution"))?;
        let (b, _, h, w) = f.dims();
        let (eb, ec, ..) = edge.dims();
        if ec != 1 {
            return Err(BgError::shape(format!("edge map must have 1 channel, got {ec}")));
        }
        if eb != b {
            return Err(BgError::shape(format!("edge map batch {eb} differs from feature batch {b}")));
        }
        let gate = edge.var.resize_bilinear(h, w);
        let gated = f.var.mul_spatial_gate(gate).add(f.var);
        let out = fuse.forward(ctx, gated);
        ctx.ensure_finite(out, "edge-guided fusion")?;
        Ok(Feat::new(out, f.stride))
    }

    /// Per-channel attention weights `sigmoid(conv1d(GAP(f)))`, (B, C, 1, 1).
    pub fn attention<'g>(&self, ctx: &Ctx<'g>, f: Feat<'g>) -> Result<Var<'g>> {
        let kernel = self.lca.ok_or_else(|| BgError::config("lca_enabled", "this module has no channel attention"))?;
        Ok(f.var.global_avg_pool().conv1d_channels(ctx.param(kernel)).sigmoid())
    }

    /// Channel attention followed by the 1×1 reduction.
    pub fn attend<'g>(&self, ctx: &Ctx<'g>, f: Feat<'g>) -> Result<Feat<'g>> {
        let a = self.attention(ctx, f)?;
        Ok(Feat::new(self.reduce.forward(ctx, f.var.mul_channels(a)), f.stride))
    }

    /// The reduction alone (attention treated as identity).
    pub fn no_lca<'g>(&self, ctx: &Ctx<'g>, f: Feat<'g>) -> Feat<'g> {
        Feat::new(self.reduce.forward(ctx, f.var), f.stride)
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, f: Feat<'g>, edge: Option<Feat<'g>>) -> Result<Feat<'g>> {
        let out = match self.mode {
            EfmMode::ReduceOnly => self.no_lca(ctx, f),
            EfmMode::Fuse | EfmMode::FuseAttend => {
                let edge = edge.ok_or_else(|| BgError::config("variant", "edge-guided fusion needs an edge map"))?;
                let fused = self.fuse(ctx, f, edge)?;
                if self.mode == EfmMode::FuseAttend {
                    self.attend(ctx, fused)?
                } else {
                    self.no_lca(ctx, fused)
                }
            }
        };
        ctx.ensure_finite(out.var, "edge-guided reduction")?;
        Ok(out)
    }
}
