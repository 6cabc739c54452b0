//! Backbones producing the five-level feature pyramid f1..f5 (strides 2..32).
//!
//! Two structures are available: a five-stage tiny network (one stride-2
//! 3×3 convolution with bias and a rectifier per stage) for CPU-scale runs,
//! and the Res2Net-50 (26w×4s) layer structure. Level mapping for Res2Net:
//! f1 is the stem output, f2..f5 are the outputs of the four residual
//! stages.

use std::path::PathBuf;

use bgnet_tensor::{concat_channels, Conv2dOptions, Var};

use crate::checkpoint;
use crate::config::{BackboneKind, ModelConfig, RES2NET50_CHANNELS};
use crate::datamodel::{Feat, FeaturePyramid};
use crate::error::{BgError, Result};
use crate::nn::{Conv2d, ConvBlock};
use crate::params::{seeded_rng, Builder, Ctx, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Output channels of f1..f5.
    pub channels_per_level: Vec<usize>,
    pub pretrained_weights: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn tiny(channels: &[usize]) -> Self {
        BackboneSpec { kind: BackboneKind::Tiny, channels_per_level: channels.to_vec(), pretrained_weights: None }
    }

    pub fn res2net50_shape() -> Self {
        BackboneSpec {
            kind: BackboneKind::Res2Net50Shape,
            channels_per_level: RES2NET50_CHANNELS.to_vec(),
            pretrained_weights: None,
        }
    }

    pub fn from_model(cfg: &ModelConfig) -> Self {
        BackboneSpec {
            kind: cfg.backbone,
            channels_per_level: cfg.level_channels(),
            pretrained_weights: cfg.pretrained_weights.clone(),
        }
    }
}

/// Pyramid levels inside a forward graph; index 0 holds f1.
pub struct Pyramid<'g> {
    pub levels: Vec<Feat<'g>>,
}

impl<'g> Pyramid<'g> {
    /// Feature of level `i` (1-based).
    pub fn level(&self, i: usize) -> Feat<'g> {
        self.levels[i - 1]
    }

    pub fn to_feature_pyramid(&self) -> Result<FeaturePyramid> {
        let mut out = FeaturePyramid::default();
        for (i, f) in self.levels.iter().enumerate() {
            out.levels.insert(i + 1, f.to_feature_map()?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Tiny(Vec<Conv2d>),
    Res2Net(Box<Res2Net50>),
}

impl Backbone {
    pub fn build(spec: &BackboneSpec, b: &mut Builder<'_>) -> Self {
        let mut b = b.sub("backbone");
        match spec.kind {
            BackboneKind::Tiny => {
                let stride2 = Conv2dOptions { stride: 2, padding: 1, dilation: 1 };
                let mut cin = 3;
                let stages = spec
                    .channels_per_level
                    .iter()
                    .enumerate()
                    .map(|(i, &cout)| {
                        let conv = Conv2d::new(&mut b, &format!("stage{}", i + 1), cin, cout, 3, stride2, true);
                        cin = cout;
                        conv
                    })
                    .collect();
                Backbone::Tiny(stages)
            }
            BackboneKind::Res2Net50Shape | BackboneKind::Res2Net50Pretrained => {
                Backbone::Res2Net(Box::new(Res2Net50::build(&mut b)))
            }
        }
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, image: Var<'g>) -> Result<Pyramid<'g>> {
        let (_, c, h, w) = image.dims4();
        if c != 3 {
            return Err(BgError::shape(format!("backbone input must have 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(BgError::Sizing { height: h, width: w });
        }
        let levels = match self {
            Backbone::Tiny(stages) => {
                let mut x = image;
                let mut levels = Vec::with_capacity(stages.len());
                for (i, conv) in stages.iter().enumerate() {
                    x = conv.forward(ctx, x).relu();
                    levels.push(Feat::new(x, 2 << i));
                }
                levels
            }
            Backbone::Res2Net(net) => net.forward(ctx, image),
        };
        for (i, f) in levels.iter().enumerate() {
            ctx.ensure_finite(f.var, &format!("backbone level {}", i + 1))?;
        }
        Ok(Pyramid { levels })
    }
}

/// Exact number of trainable scalars of a backbone, computed from its layer
/// structure without allocating weights.
pub fn count_parameters(spec: &BackboneSpec) -> usize {
    let mut store = ParamStore::meta();
    let mut rng = seeded_rng(0);
    Backbone::build(spec, &mut Builder::new(&mut store, &mut rng));
    store.num_trainable()
}

/// Builds a backbone and, for the pretrained variant, loads its weights from
/// a tensor archive. Archive entries are matched by parameter name
/// (`backbone.*`).
pub fn load_pretrained(spec: &BackboneSpec, store: &mut ParamStore) -> Result<()> {
    if spec.kind != BackboneKind::Res2Net50Pretrained {
        return Ok(());
    }
    let path = spec.pretrained_weights.clone().ok_or_else(|| BgError::Load {
        path: PathBuf::new(),
        message: "no pretrained weights path configured".into(),
    })?;
    let archive = checkpoint::read_tensor_file(&path)?;
    let mut backbone_only = ParamStore::new();
    for (_, e) in archive.entries().filter(|(_, e)| e.name.starts_with("backbone.")) {
        backbone_only.add(&e.name, e.value.clone(), e.kind);
    }
    let mut staged = store.clone();
    let loaded = staged.load_from(&backbone_only, true)?;
    let expected = store.entries().filter(|(_, e)| e.name.starts_with("backbone.")).count();
    if loaded != expected {
        return Err(BgError::Load {
            path,
            message: format!("archive provides {loaded} of {expected} backbone tensors"),
        });
    }
    *store = staged;
    Ok(())
}

const RES2NET_SCALE: usize = 4;
const RES2NET_BASE_WIDTH: usize = 26;

/// Scale-split bottleneck: the middle 3×3 convolution is replaced by a
/// hierarchy of `scale - 1` narrow 3×3 convolutions over channel groups.
#[derive(Debug, Clone)]
pub struct Bottle2neck {
    conv1: ConvBlock,
    convs: Vec<ConvBlock>,
    conv3: ConvBlock,
    downsample: Option<ConvBlock>,
    width: usize,
    stride: usize,
    /// First block of a stage: groups are not chained and the last group is
    /// average-pooled instead of passed through.
    stage_entry: bool,
}

impl Bottle2neck {
    fn build(b: &mut Builder<'_>, name: &str, inplanes: usize, planes: usize, stride: usize, stage_entry: bool) -> Self {
        let mut b = b.sub(name);
        let width = planes * RES2NET_BASE_WIDTH / 64;
        let one = Conv2dOptions::default();
        let conv1 = ConvBlock::new(&mut b, "conv1", inplanes, width * RES2NET_SCALE, 1, one, true);
        let convs = (0..RES2NET_SCALE - 1)
            .map(|i| {
                let opt = Conv2dOptions { stride, padding: 1, dilation: 1 };
                ConvBlock::new(&mut b, &format!("convs{i}"), width, width, 3, opt, true)
            })
            .collect();
        let conv3 = ConvBlock::new(&mut b, "conv3", width * RES2NET_SCALE, planes * 4, 1, one, false);
        let downsample = (stride != 1 || inplanes != planes * 4).then(|| {
            let opt = Conv2dOptions { stride, padding: 0, dilation: 1 };
            ConvBlock::new(&mut b, "downsample", inplanes, planes * 4, 1, opt, false)
        });
        Bottle2neck { conv1, convs, conv3, downsample, width, stride, stage_entry }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, x: Var<'g>) -> Var<'g> {
        let out = self.conv1.forward(ctx, x);
        let groups: Vec<Var<'g>> = (0..RES2NET_SCALE).map(|i| out.narrow_channels(i * self.width, self.width)).collect();
        let mut parts = Vec::with_capacity(RES2NET_SCALE);
        let mut sp: Option<Var<'g>> = None;
        for (i, conv) in self.convs.iter().enumerate() {
            let input = match sp {
                Some(prev) if !self.stage_entry => prev.add(groups[i]),
                _ => groups[i],
            };
            let y = conv.forward(ctx, input);
            parts.push(y);
            sp = Some(y);
        }
        let last = groups[RES2NET_SCALE - 1];
        parts.push(if self.stage_entry { last.avg_pool2d(3, self.stride, 1) } else { last });
        let out = self.conv3.forward(ctx, concat_channels(&parts));
        let residual = match &self.downsample {
            Some(ds) => ds.forward(ctx, x),
            None => x,
        };
        out.add(residual).relu()
    }
}

#[derive(Debug, Clone)]
pub struct Res2Net50 {
    stem: ConvBlock,
    stages: Vec<Vec<Bottle2neck>>,
    /// Classifier head of the published architecture. It is part of the
    /// parameter budget and of pretrained archives but never evaluated.
    pub classifier: Conv2d,
}

impl Res2Net50 {
    fn build(b: &mut Builder<'_>) -> Self {
        let stem_opt = Conv2dOptions { stride: 2, padding: 3, dilation: 1 };
        let stem = ConvBlock::new(b, "stem", 3, 64, 7, stem_opt, true);
        let mut inplanes = 64;
        let mut stages = Vec::new();
        for (si, (planes, blocks, stride)) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)].into_iter().enumerate() {
            let mut sb = b.sub(&format!("layer{}", si + 1));
            let stage: Vec<Bottle2neck> = (0..blocks)
                .map(|bi| {
                    let first = bi == 0;
                    let block = Bottle2neck::build(
                        &mut sb,
                        &bi.to_string(),
                        inplanes,
                        planes,
                        if first { stride } else { 1 },
                        first,
                    );
                    inplanes = planes * 4;
                    block
                })
                .collect();
            stages.push(stage);
        }
        let classifier = Conv2d::new(b, "fc", 2048, 1000, 1, Conv2dOptions::default(), true);
        Res2Net50 { stem, stages, classifier }
    }

    fn forward<'g>(&self, ctx: &Ctx<'g>, image: Var<'g>) -> Vec<Feat<'g>> {
        let f1 = self.stem.forward(ctx, image);
        let mut levels = vec![Feat::new(f1, 2)];
        let mut x = f1.max_pool2d(3, 2, 1);
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(ctx, x);
            }
            levels.push(Feat::new(x, 4 << i));
        }
        levels
    }
}
