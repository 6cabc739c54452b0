//! Training objective: weighted BCE and weighted IoU on the three mask
//! predictions plus a dice term on the edge prediction.

use std::collections::BTreeMap;

use bgnet_tensor::{sum_all, Tensor, Var};
use serde::Serialize;

use crate::datamodel::Plane;
use crate::error::{BgError, Result};
use crate::model::{upsample_to_input, ModelOutput};

pub const WEIGHT_WINDOW: usize = 15;
pub const WEIGHT_MU: f64 = 5.0;
pub const BCE_EPS: f64 = 1e-7;
pub const SMOOTH: f64 = 1.0;

/// `w = 1 + 5·|AvgPool(G) − G|` over a `window`×`window` neighborhood.
/// Windows are clipped at the border and averaged over the pixels they
/// cover.
pub fn pixel_weight(g: &Plane, window: usize) -> Plane {
    let (h, w) = (g.height, g.width);
    let r = window / 2;
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                g.get(y, x) + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    Plane::from_fn(h, w, |y, x| {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
        let avg = s / ((y1 - y0) * (x1 - x0)) as f64;
        1.0 + WEIGHT_MU * (avg - g.get(y, x)).abs()
    })
}

/// `Σ w·bce(P, G) / Σ w` and its gradient with respect to `p`.
pub fn weighted_bce_grad(p: &[f64], g: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let sw: f64 = w.iter().sum();
    let mut total = 0.0;
    let grad = p
        .iter()
        .zip(g)
        .zip(w)
        .map(|((&p, &g), &w)| {
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total += w * (-g * pc.ln() - (1.0 - g) * (1.0 - pc).ln());
            if p == pc {
                w * (-g / pc + (1.0 - g) / (1.0 - pc)) / sw
            } else {
                0.0
            }
        })
        .collect();
    (total / sw, grad)
}

pub fn weighted_bce(p: &[f64], g: &[f64], w: &[f64]) -> f64 {
    weighted_bce_grad(p, g, w).0
}

/// `1 − (Σ w·P·G + 1) / (Σ w·(P + G − P·G) + 1)` and its gradient.
pub fn weighted_iou_grad(p: &[f64], g: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let (mut inter, mut union) = (SMOOTH, SMOOTH);
    for ((&p, &g), &w) in p.iter().zip(g).zip(w) {
        inter += w * p * g;
        union += w * (p + g - p * g);
    }
    let grad = g.iter().zip(w).map(|(&g, &w)| -(w * g * union - inter * w * (1.0 - g)) / (union * union)).collect();
    (1.0 - inter / union, grad)
}

pub fn weighted_iou(p: &[f64], g: &[f64], w: &[f64]) -> f64 {
    weighted_iou_grad(p, g, w).0
}

/// `1 − (2·Σ P·G + 1) / (Σ P + Σ G + 1)` and its gradient.
pub fn dice_grad(p: &[f64], g: &[f64]) -> (f64, Vec<f64>) {
    let num = 2.0 * p.iter().zip(g).map(|(p, g)| p * g).sum::<f64>() + SMOOTH;
    let den = p.iter().sum::<f64>() + g.iter().sum::<f64>() + SMOOTH;
    let grad = g.iter().map(|&g| -(2.0 * g * den - num) / (den * den)).collect();
    (1.0 - num / den, grad)
}

pub fn dice(p: &[f64], g: &[f64]) -> f64 {
    dice_grad(p, g).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelLoss {
    pub wbce: f64,
    pub wiou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub per_level: BTreeMap<usize, LevelLoss>,
    /// Absent for variants without an edge branch.
    pub edge_dice: Option<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.edge_dice.is_none_or(f64::is_finite)
            && self.per_level.values().all(|l| l.wbce.is_finite() && l.wiou.is_finite())
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, l) in &self.per_level {
            write!(f, "P{i}: wbce={:.6} wiou={:.6}; ", l.wbce, l.wiou)?;
        }
        match self.edge_dice {
            Some(d) => write!(f, "edge dice={d:.6}; ")?,
            None => write!(f, "edge dice=n/a; ")?,
        }
        write!(f, "lambda={} total={:.6}", self.lambda, self.total)
    }
}

/// Ground truth for one batch at supervision resolution, each (B, 1, H, W).
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub masks: Tensor,
    pub edges: Tensor,
    pub weights: Tensor,
}

impl LossTargets {
    pub fn new(masks: Tensor, edges: Tensor) -> Result<Self> {
        let (b, c, h, w) = masks.dims4();
        if c != 1 || edges.shape() != masks.shape() {
            return Err(BgError::shape(format!(
                "targets must be matching (B,1,H,W) tensors, got {:?} and {:?}",
                masks.shape(),
                edges.shape()
            )));
        }
        let mut weights = Vec::with_capacity(masks.numel());
        for i in 0..b {
            let plane = Plane::new(h, w, masks.data()[i * h * w..(i + 1) * h * w].to_vec());
            weights.extend(pixel_weight(&plane, WEIGHT_WINDOW).data);
        }
        Ok(LossTargets { weights: Tensor::new(masks.shape().to_vec(), weights), masks, edges })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.masks.dims4()
    }
}

/// Mean over batch items of a per-image loss, with its gradient.
fn batch_mean<F>(p: &Tensor, g: &Tensor, w: &Tensor, f: F) -> (f64, Tensor)
where
    F: Fn(&[f64], &[f64], &[f64]) -> (f64, Vec<f64>),
{
    let (b, ..) = p.dims4();
    let n = p.numel() / b;
    let mut grad = Vec::with_capacity(p.numel());
    let mut total = 0.0;
    for i in 0..b {
        let r = i * n..(i + 1) * n;
        let (v, gi) = f(&p.data()[r.clone()], &g.data()[r.clone()], &w.data()[r]);
        total += v;
        grad.extend(gi.into_iter().map(|x| x / b as f64));
    }
    (total / b as f64, Tensor::new(p.shape().to_vec(), grad))
}

fn check_prediction(name: &str, pred: Var<'_>, targets: &LossTargets) -> Result<()> {
    let (b, c, ..) = pred.dims4();
    let (tb, ..) = targets.dims();
    if c != 1 || b != tb {
        return Err(BgError::shape(format!(
            "prediction {name} has shape {:?}; expected batch {tb} with 1 channel",
            pred.shape()
        )));
    }
    Ok(())
}

/// Builds the differentiable total loss for a forward pass. Predictions are
/// upsampled to target resolution first. `lambda` weights the edge dice term,
/// which is omitted when the model has no edge branch.
pub fn total_loss<'g>(out: &ModelOutput<'g>, targets: &LossTargets, lambda: f64) -> Result<(Var<'g>, LossReport)> {
    let (_, _, h, w) = targets.dims();
    let mut terms = Vec::new();
    let mut level_vars = Vec::new();
    for (&i, logit) in &out.mask_logits {
        check_prediction(&format!("P{i}"), logit.var, targets)?;
        let p = upsample_to_input(logit.var, h, w);
        let (g, wt) = (targets.masks.clone(), targets.weights.clone());
        let bce = p.scalar_fn(move |p| batch_mean(p, &g, &wt, weighted_bce_grad));
        let (g, wt) = (targets.masks.clone(), targets.weights.clone());
        let iou = p.scalar_fn(move |p| batch_mean(p, &g, &wt, weighted_iou_grad));
        terms.extend([bce, iou]);
        level_vars.push((i, bce, iou));
    }
    let edge_var = match &out.edge {
        Some(edge) => {
            check_prediction("Pe", edge.prob.var, targets)?;
            let p = edge.prob.var.resize_bilinear(h, w);
            let g = targets.edges.clone();
            let d = p.scalar_fn(move |p| batch_mean(p, &g, &g, |p, g, _| dice_grad(p, g)));
            terms.push(d.scale(lambda));
            Some(d)
        }
        None => None,
    };
    let total = sum_all(&terms);
    let scalar = |v: Var<'_>| if v.graph().is_meta() { 0.0 } else { v.value().data()[0] };
    let report = LossReport {
        per_level: level_vars.iter().map(|&(i, b, u)| (i, LevelLoss { wbce: scalar(b), wiou: scalar(u) })).collect(),
        edge_dice: edge_var.map(scalar),
        lambda,
        total: scalar(total),
    };
    Ok((total, report))
}
