//! Model, training and run configuration.
//!
//! Run configuration files are flat TOML: one `key = value` per line, no
//! tables. Unknown keys are rejected so typos in ablation scripts fail
//! loudly. See `README.md` for the full key list.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "res2net50-shape")]
    Res2Net50Shape,
    #[serde(rename = "res2net50-pretrained")]
    Res2Net50Pretrained,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::Res2Net50Shape => "res2net50-shape",
            BackboneKind::Res2Net50Pretrained => "res2net50-pretrained",
        }
    }
}

/// Architecture variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Baseline: 1×1 reductions and plain top-down aggregation, no edge branch.
    #[serde(rename = "a")]
    A,
    /// Baseline plus the full context aggregation module.
    #[serde(rename = "b")]
    B,
    /// Edge branch and edge-guided fusion without channel attention.
    #[serde(rename = "c")]
    C,
    /// As `C` with local channel attention.
    #[serde(rename = "d")]
    D,
    /// The complete network.
    #[serde(rename = "full", alias = "e")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::Full => "e",
        }
    }

    /// Row description in the ablation table.
    pub fn description(self) -> &'static str {
        match self {
            Variant::A => "B",
            Variant::B => "B+CAM",
            Variant::C => "B+EAM+EFM w/o LCA",
            Variant::D => "B+EAM+EFM",
            Variant::Full => "B+EAM+EFM+CAM",
        }
    }

    pub fn has_edge_branch(self) -> bool {
        !matches!(self, Variant::A | Variant::B)
    }

    pub fn has_full_cam(self) -> bool {
        matches!(self, Variant::B | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = BgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            "d" => Ok(Variant::D),
            "e" | "full" => Ok(Variant::Full),
            other => Err(BgError::config("variant", format!("`{other}` is not one of a, b, c, d, e, full"))),
        }
    }
}

/// Every architectural knob of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Output channels of f1..f5 for the tiny backbone.
    pub backbone_channels: Vec<usize>,
    pub pretrained_weights: Option<PathBuf>,
    /// Channels of every decoder feature after the edge-guided reduction.
    pub head_width: usize,
    /// Backbone level fused with f5 in the edge branch.
    pub eam_low_tap: usize,
    pub eam_low_width: usize,
    pub eam_high_width: usize,
    pub eam_mid_width: usize,
    /// Local channel attention in the full variant (variants c/d fix it).
    pub lca_enabled: bool,
    pub variant: Variant,
    pub input_size: usize,
    pub lambda_edge: f64,
    pub cam_dilations: [usize; 4],
    pub edge_band_width: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

pub const RES2NET50_CHANNELS: [usize; 5] = [64, 256, 512, 1024, 2048];

impl Default for ModelConfig {
    /// Full-size configuration at 416×416.
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Res2Net50Shape,
            backbone_channels: vec![8, 16, 32, 64, 128],
            pretrained_weights: None,
            head_width: 256,
            eam_low_tap: 2,
            eam_low_width: 64,
            eam_high_width: 256,
            eam_mid_width: 64,
            lca_enabled: true,
            variant: Variant::Full,
            input_size: 416,
            lambda_edge: 3.0,
            cam_dilations: [1, 2, 3, 4],
            edge_band_width: 1,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
        }
    }
}

impl ModelConfig {
    /// CPU-sized configuration: tiny backbone and narrow heads, 64×64 input.
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneKind::Tiny,
            head_width: 16,
            eam_low_width: 16,
            eam_high_width: 32,
            eam_mid_width: 16,
            input_size: 64,
            ..Self::default()
        }
    }

    /// Output channels of f1..f5 for the configured backbone.
    pub fn level_channels(&self) -> Vec<usize> {
        match self.backbone {
            BackboneKind::Tiny => self.backbone_channels.clone(),
            _ => RES2NET50_CHANNELS.to_vec(),
        }
    }

    /// Whether the edge-guided module applies channel attention.
    pub fn uses_lca(&self) -> bool {
        match self.variant {
            Variant::A | Variant::B | Variant::C => false,
            Variant::D => true,
            Variant::Full => self.lca_enabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(BgError::config("input_size", format!("{} must be a positive multiple of 32", self.input_size)));
        }
        if self.head_width == 0 || self.head_width % 4 != 0 {
            return Err(BgError::config("head_width", format!("{} must be a positive multiple of 4", self.head_width)));
        }
        if !(1..=3).contains(&self.eam_low_tap) {
            return Err(BgError::config("eam_low_tap", format!("{} is not one of 1, 2, 3", self.eam_low_tap)));
        }
        for (key, v) in [
            ("eam_low_width", self.eam_low_width),
            ("eam_high_width", self.eam_high_width),
            ("eam_mid_width", self.eam_mid_width),
            ("edge_band_width", self.edge_band_width),
        ] {
            if v == 0 {
                return Err(BgError::config(key, "must be positive"));
            }
        }
        if self.backbone == BackboneKind::Tiny {
            let ch = &self.backbone_channels;
            if ch.len() != 5 || ch.contains(&0) {
                return Err(BgError::config("backbone_channels", "needs exactly 5 positive entries"));
            }
            if ch.windows(2).any(|w| w[1] < w[0]) {
                return Err(BgError::config("backbone_channels", "must be non-decreasing"));
            }
        }
        if self.backbone == BackboneKind::Res2Net50Pretrained && self.pretrained_weights.is_none() {
            return Err(BgError::config("pretrained_weights", "required for backbone `res2net50-pretrained`"));
        }
        if !(self.lambda_edge.is_finite() && self.lambda_edge > 0.0) {
            return Err(BgError::config("lambda_edge", "must be a positive number"));
        }
        if self.cam_dilations.contains(&0) {
            return Err(BgError::config("cam_dilations", "dilations must be positive"));
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0)) {
            return Err(BgError::config("norm_std", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 16,
            lr: 1e-4,
            poly_power: 0.9,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lambda(&self) -> f64 {
        self.model.lambda_edge
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(BgError::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(BgError::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(BgError::config("lr", "must be a non-negative number"));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return Err(BgError::config("poly_power", "must be a non-negative number"));
        }
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(BgError::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(BgError::config("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Contents of a run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub backbone: BackboneKind,
    pub backbone_channels: Vec<usize>,
    pub pretrained_weights: Option<PathBuf>,
    pub head_width: usize,
    pub eam_low_tap: usize,
    pub eam_low_width: usize,
    pub eam_high_width: usize,
    pub eam_mid_width: usize,
    pub lca_enabled: bool,
    pub variant: Variant,
    pub input_size: usize,
    pub lambda_edge: f64,
    pub cam_dilations: [usize; 4],
    pub edge_band_width: usize,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    // data
    pub data_root: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    pub image_subdir: String,
    pub mask_subdir: String,
    pub edge_subdir: Option<String>,
    // ablation and reporting
    pub ablate_variants: Vec<Variant>,
    pub ablate_taps: Vec<usize>,
    pub ablate_lambdas: Vec<f64>,
    pub mac_convention: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(train: &TrainConfig) -> Self {
        let m = &train.model;
        RunConfig {
            backbone: m.backbone,
            backbone_channels: m.backbone_channels.clone(),
            pretrained_weights: m.pretrained_weights.clone(),
            head_width: m.head_width,
            eam_low_tap: m.eam_low_tap,
            eam_low_width: m.eam_low_width,
            eam_high_width: m.eam_high_width,
            eam_mid_width: m.eam_mid_width,
            lca_enabled: m.lca_enabled,
            variant: m.variant,
            input_size: m.input_size,
            lambda_edge: m.lambda_edge,
            cam_dilations: m.cam_dilations,
            edge_band_width: m.edge_band_width,
            norm_mean: m.norm_mean,
            norm_std: m.norm_std,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            poly_power: train.poly_power,
            optimizer: train.optimizer,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            seed: train.seed,
            checkpoint_every: train.checkpoint_every,
            data_root: None,
            train_split: "train".into(),
            test_split: "test".into(),
            image_subdir: "Imgs".into(),
            mask_subdir: "GT".into(),
            edge_subdir: None,
            ablate_variants: Vec::new(),
            ablate_taps: Vec::new(),
            ablate_lambdas: Vec::new(),
            mac_convention: 2,
        }
    }

    /// Parses and validates configuration text.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| BgError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BgError::Load { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always serializable")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            backbone_channels: self.backbone_channels.clone(),
            pretrained_weights: self.pretrained_weights.clone(),
            head_width: self.head_width,
            eam_low_tap: self.eam_low_tap,
            eam_low_width: self.eam_low_width,
            eam_high_width: self.eam_high_width,
            eam_mid_width: self.eam_mid_width,
            lca_enabled: self.lca_enabled,
            variant: self.variant,
            input_size: self.input_size,
            lambda_edge: self.lambda_edge,
            cam_dilations: self.cam_dilations,
            edge_band_width: self.edge_band_width,
            norm_mean: self.norm_mean,
            norm_std: self.norm_std,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            poly_power: self.poly_power,
            optimizer: self.optimizer,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            model: self.model(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        if !matches!(self.mac_convention, 1 | 2) {
            return Err(BgError::config("mac_convention", format!("{} is not one of 1, 2", self.mac_convention)));
        }
        if let Some(tap) = self.ablate_taps.iter().find(|t| !(1..=3).contains(*t)) {
            return Err(BgError::config("ablate_taps", format!("{tap} is not one of 1, 2, 3")));
        }
        if self.ablate_lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(BgError::config("ablate_lambdas", "entries must be positive numbers"));
        }
        for (key, v) in [
            ("train_split", &self.train_split),
            ("test_split", &self.test_split),
            ("image_subdir", &self.image_subdir),
            ("mask_subdir", &self.mask_subdir),
        ] {
            if v.is_empty() {
                return Err(BgError::config(key, "must not be empty"));
            }
        }
        Ok(())
    }
}
