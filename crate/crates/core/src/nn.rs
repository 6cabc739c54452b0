//! Layer building blocks shared by every module of the network.

use bgnet_tensor::{Conv2dOptions, NormMode, Var};

use crate::params::{Builder, Ctx, ParamId, ParamKind};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub options: Conv2dOptions,
}

impl Conv2d {
    /// Square convolution initialized uniformly in `±1/sqrt(fan_in)`.
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        options: Conv2dOptions,
        bias: bool,
    ) -> Self {
        let mut b = b.sub(name);
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = b.uniform("weight", &[out_channels, in_channels, kernel, kernel], bound);
        let bias = bias.then(|| b.uniform("bias", &[out_channels], bound));
        Conv2d { weight, bias, in_channels, out_channels, kernel, options }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.options)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        BatchNorm2d {
            gamma: b.filled("weight", &[channels], 1.0, ParamKind::Weight),
            beta: b.filled("bias", &[channels], 0.0, ParamKind::Weight),
            running_mean: b.filled("running_mean", &[channels], 0.0, ParamKind::Buffer),
            running_var: b.filled("running_var", &[channels], 1.0, ParamKind::Buffer),
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.is_train() {
            let (y, stats) = x.batch_norm(gamma, beta, NormMode::Batch, BN_EPS);
            if let Some(stats) = stats {
                ctx.record_batch_stats(self.running_mean, self.running_var, stats);
            }
            y
        } else {
            let mode = NormMode::Running {
                mean: ctx.value(self.running_mean).data(),
                var: ctx.value(self.running_var).data(),
            };
            x.batch_norm(gamma, beta, mode, BN_EPS).0
        }
    }
}

/// Convolution (no bias) followed by batch normalization and, optionally, a
/// rectifier.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBlock {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        options: Conv2dOptions,
        relu: bool,
    ) -> Self {
        let mut b = b.sub(name);
        ConvBlock {
            conv: Conv2d::new(&mut b, "conv", in_channels, out_channels, kernel, options, false),
            bn: BatchNorm2d::new(&mut b, "bn", out_channels),
            relu,
        }
    }

    /// 3×3 (or k×k) stride-1 block that preserves spatial size.
    pub fn same(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self::new(b, name, cin, cout, kernel, Conv2dOptions::same(kernel, dilation), true)
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let y = self.bn.forward(ctx, self.conv.forward(ctx, x));
        if self.relu {
            y.relu()
        } else {
            y
        }
    }
}
