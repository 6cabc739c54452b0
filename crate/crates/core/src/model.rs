//! Network assembly: backbone, edge branch, edge-guided reductions and the
//! top-down decoder, wired according to the configured variant.

use std::collections::BTreeMap;

use bgnet_tensor::{Tensor, Var};

use crate::backbone::{self, Backbone, BackboneSpec, Pyramid};
use crate::cam::{decode_top_down, Cam, CamMode};
use crate::config::{ModelConfig, Variant};
use crate::datamodel::{Feat, PredictionSet};
use crate::eam::{select_eam_tap, Eam, EamOutput};
use crate::efm::{Efm, EfmMode};
use crate::error::Result;
use crate::params::{seeded_rng, Builder, Ctx, ParamStore};

pub const DECODER_LEVELS: [usize; 3] = [2, 3, 4];

#[derive(Debug, Clone)]
pub struct BgNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub eam: Option<Eam>,
    /// Edge-guided modules for levels 2..=5, in that order.
    pub efms: Vec<Efm>,
    /// Aggregation modules for levels 4, 3, 2, in that order.
    pub cams: Vec<Cam>,
}

pub struct ModelOutput<'g> {
    pub pyramid: Pyramid<'g>,
    pub edge: Option<EamOutput<'g>>,
    pub mask_logits: BTreeMap<usize, Feat<'g>>,
}

impl ModelOutput<'_> {
    pub fn final_logit(&self) -> Feat<'_> {
        self.mask_logits[&2]
    }

    pub fn to_prediction_set(&self) -> Result<PredictionSet> {
        let mut mask_logits = BTreeMap::new();
        for (&i, f) in &self.mask_logits {
            mask_logits.insert(i, f.to_feature_map()?);
        }
        let edge_prob = self.edge.as_ref().map(|e| e.prob.to_feature_map()).transpose()?;
        Ok(PredictionSet { mask_logits, edge_prob })
    }
}

fn modes(cfg: &ModelConfig) -> (EfmMode, CamMode) {
    let efm = match cfg.variant {
        Variant::A | Variant::B => EfmMode::ReduceOnly,
        _ if cfg.uses_lca() => EfmMode::FuseAttend,
        _ => EfmMode::Fuse,
    };
    let cam = if cfg.variant.has_full_cam() { CamMode::Full } else { CamMode::InitialAggregation };
    (efm, cam)
}

impl BgNet {
    /// Registers every parameter of the configured variant.
    pub fn build_into(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::build(&BackboneSpec::from_model(cfg), b);
        let eam = cfg.variant.has_edge_branch().then(|| Eam::build(b, cfg));
        let (efm_mode, cam_mode) = modes(cfg);
        let channels = cfg.level_channels();
        let efms = (2..=5)
            .map(|i| Efm::build(b, &format!("efm{i}"), channels[i - 1], cfg.head_width, efm_mode))
            .collect::<Result<Vec<_>>>()?;
        let cams = [4, 3, 2]
            .iter()
            .map(|i| Cam::build(b, &format!("cam{i}"), cfg.head_width, cfg.cam_dilations, cam_mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(BgNet { config: cfg.clone(), backbone, eam, efms, cams })
    }

    /// Builds the model with weights drawn from `seed` and, for the
    /// pretrained backbone, loaded from disk.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let net = Self::build_into(cfg, &mut Builder::new(&mut store, &mut rng))?;
        backbone::load_pretrained(&BackboneSpec::from_model(cfg), &mut store)?;
        Ok((net, store))
    }

    /// Shape-only build for structural accounting.
    pub fn build_meta(cfg: &ModelConfig) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::meta();
        let mut rng = seeded_rng(0);
        let net = Self::build_into(cfg, &mut Builder::new(&mut store, &mut rng))?;
        Ok((net, store))
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g>, image: Var<'g>) -> Result<ModelOutput<'g>> {
        let g = ctx.graph;
        g.set_scope("backbone");
        let pyramid = self.backbone.forward(ctx, image)?;
        let edge = match &self.eam {
            Some(eam) => {
                g.set_scope("eam");
                let low = select_eam_tap(&pyramid, self.config.eam_low_tap)?;
                Some(eam.forward(ctx, low, pyramid.level(5))?)
            }
            None => None,
        };
        g.set_scope("efm");
        let mut reduced = BTreeMap::new();
        for (efm, i) in self.efms.iter().zip(2..=5) {
            reduced.insert(i, efm.forward(ctx, pyramid.level(i), edge.as_ref().map(|e| e.prob))?);
        }
        g.set_scope("cam");
        let mask_logits = decode_top_down(ctx, &reduced, &self.cams)?;
        g.set_scope("");
        Ok(ModelOutput { pyramid, edge, mask_logits })
    }
}

/// Bilinear upsampling of a 1-channel logit map to `height`×`width`,
/// followed by the sigmoid.
pub fn upsample_to_input<'g>(logits: Var<'g>, height: usize, width: usize) -> Var<'g> {
    logits.resize_bilinear(height, width).sigmoid()
}

/// Tensor form of [`upsample_to_input`] for detached predictions.
pub fn upsample_probabilities(logits: &Tensor, height: usize, width: usize) -> Tensor {
    let g = bgnet_tensor::Graph::new();
    g.set_grad_enabled(false);
    let v = upsample_to_input(g.constant(logits.clone()), height, width);
    (*v.value()).clone()
}
