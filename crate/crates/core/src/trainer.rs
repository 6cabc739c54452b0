//! Optimization loop, learning-rate schedule, prediction helpers and the
//! structural complexity report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use bgnet_tensor::{Graph, Tensor};
use serde::Serialize;

use crate::checkpoint::{self, Archive};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{augment_and_batch, full_batch, Augmenter, Batch};
use crate::datamodel::{Plane, Sample};
use crate::error::{BgError, Result};
use crate::losses::{total_loss, LossReport, LossTargets};
use crate::metrics::{ImageMetrics, MetricReport};
use crate::model::{upsample_probabilities, BgNet};
use crate::nn::BN_MOMENTUM;
use crate::params::{apply_batch_stats, Ctx, ParamId, ParamKind, ParamStore};

/// `lr0 · (1 − e/E)^p` for epoch `e` of `E`.
pub fn poly_lr(lr0: f64, epoch: usize, total: usize, power: f64) -> Result<f64> {
    if epoch >= total {
        return Err(BgError::Schedule { epoch, total });
    }
    Ok(lr0 * (1.0 - epoch as f64 / total as f64).powf(power))
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<(ParamId, Tensor)>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads {
            let n = g.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let w = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the training log. Field order is the serialized key order.
#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub wbce_p2: Option<f64>,
    pub wiou_p2: Option<f64>,
    pub wbce_p3: Option<f64>,
    pub wiou_p3: Option<f64>,
    pub wbce_p4: Option<f64>,
    pub wiou_p4: Option<f64>,
    pub edge_dice: Option<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(epoch: usize, step: usize, lr: f64, r: &LossReport) -> Self {
        let l = |i: usize| r.per_level.get(&i).copied();
        LogRecord {
            epoch,
            step,
            lr,
            wbce_p2: l(2).map(|x| x.wbce),
            wiou_p2: l(2).map(|x| x.wiou),
            wbce_p3: l(3).map(|x| x.wbce),
            wiou_p3: l(3).map(|x| x.wiou),
            wbce_p4: l(4).map(|x| x.wbce),
            wiou_p4: l(4).map(|x| x.wiou),
            edge_dice: r.edge_dice,
            lambda: r.lambda,
            total: r.total,
        }
    }
}

/// Model, weights and optimizer state of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: BgNet,
    pub store: ParamStore,
    pub adam: Adam,
    pub steps: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = BgNet::build(&config.model, config.seed)?;
        Ok(Trainer { config: config.clone(), model, store, adam: Adam::from_config(config), steps: 0 })
    }

    /// Forward, loss, backward and one optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<LossReport> {
        let targets = LossTargets::new(batch.masks.clone(), batch.edges.clone())?;
        let (grads, stats, report) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.store, true);
            let out = self.model.forward(&ctx, g.constant(batch.images.clone()))?;
            let (loss, report) = total_loss(&out, &targets, self.config.lambda())?;
            if !report.is_finite() {
                return Err(BgError::NonFiniteLoss { step: self.steps, report: report.to_string() });
            }
            let mut grads = g.backward(loss);
            (ctx.weight_grads(&mut grads), ctx.take_batch_stats(), report)
        };
        self.adam.step(&mut self.store, grads, lr);
        apply_batch_stats(&mut self.store, stats, BN_MOMENTUM);
        self.steps += 1;
        Ok(report)
    }

    /// Loss of `batch` under the current weights without updating anything.
    pub fn evaluate_loss(&self, batch: &Batch, train_mode: bool) -> Result<LossReport> {
        let targets = LossTargets::new(batch.masks.clone(), batch.edges.clone())?;
        let g = Graph::new();
        g.set_grad_enabled(false);
        let ctx = Ctx::new(&g, &self.store, train_mode);
        let out = self.model.forward(&ctx, g.constant(batch.images.clone()))?;
        Ok(total_loss(&out, &targets, self.config.lambda())?.1)
    }

    pub fn archive(&self, epoch: usize) -> Archive {
        Archive { epoch: Some(epoch), config: Some(self.config.clone()), store: self.store.clone() }
    }

    /// Restores weights and configuration from a checkpoint; optimizer state
    /// starts fresh.
    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let config = archive
            .config
            .clone()
            .ok_or_else(|| BgError::Decode("checkpoint has no training configuration".into()))?;
        let mut config_no_pretrained = config.clone();
        config_no_pretrained.model.pretrained_weights = None;
        config_no_pretrained.model.backbone = match config.model.backbone {
            crate::config::BackboneKind::Res2Net50Pretrained => crate::config::BackboneKind::Res2Net50Shape,
            other => other,
        };
        let (model, mut store) = BgNet::build(&config_no_pretrained.model, config.seed)?;
        store.load_from(&archive.store, false)?;
        Ok(Trainer { config, model, store, adam: Adam::from_config(&config_no_pretrained), steps: 0 })
    }
}

/// Where the training loop writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Checkpoint directory; none disables checkpointing.
    pub dir: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Runs `epochs × batches` optimizer steps with the per-epoch poly schedule,
/// writing one JSON line per step to `log`.
pub fn train_loop(cfg: &TrainConfig, samples: &[Sample], outputs: &TrainOutputs, log: &mut dyn Write) -> Result<Trainer> {
    if samples.is_empty() {
        return Err(BgError::Domain("training set is empty".into()));
    }
    let mut trainer = Trainer::new(cfg)?;
    let aug = Augmenter::from_model(&cfg.model);
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(cfg.lr, epoch, cfg.epochs, cfg.poly_power)?;
        for batch in augment_and_batch(samples, cfg.batch_size, cfg.seed, epoch, &aug) {
            let batch = batch?;
            let step = trainer.steps;
            let report = trainer.step(&batch, lr)?;
            serde_json::to_writer(&mut *log, &LogRecord::new(epoch, step, lr, &report))?;
            writeln!(log)?;
        }
        let done = epoch + 1;
        if let Some(dir) = &outputs.dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                checkpoint::save(&checkpoint_path(dir, done), &trainer.archive(done))?;
            }
        }
        log::info!("epoch {done}/{} done", cfg.epochs);
    }
    if let Some(dir) = &outputs.dir {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), &trainer.archive(cfg.epochs))?;
    }
    Ok(trainer)
}

/// Repeated optimizer steps on one fixed batch at constant `lr`; returns the
/// loss before each step.
pub fn overfit_fixed_batch(trainer: &mut Trainer, batch: &Batch, steps: usize, lr: f64) -> Result<Vec<f64>> {
    (0..steps).map(|_| trainer.step(batch, lr).map(|r| r.total)).collect()
}

/// Output of the network for one image at its original resolution.
#[derive(Debug, Clone)]
pub struct ImagePrediction {
    pub mask: Plane,
    pub edge: Option<Plane>,
}

fn plane_of(t: &Tensor, b: usize) -> Plane {
    let (_, _, h, w) = t.dims4();
    Plane::new(h, w, t.data()[b * h * w..(b + 1) * h * w].to_vec())
}

/// Predicts every image (eval mode, batches of `batch_size`), upsampling the
/// final logits to each image's original size.
pub fn predict(model: &BgNet, store: &ParamStore, images: &[(usize, usize, Tensor)], batch_size: usize) -> Result<Vec<ImagePrediction>> {
    let aug = Augmenter::from_model(&model.config);
    let size = model.config.input_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let inputs: Vec<Tensor> = chunk
            .iter()
            .map(|(_, _, img)| aug.normalize(&crate::data::resize_image(img, size, size)))
            .collect();
        let g = Graph::new();
        g.set_grad_enabled(false);
        let ctx = Ctx::new(&g, store, false);
        let res = model.forward(&ctx, g.constant(Tensor::stack_batch(&inputs)))?;
        let logits = res.final_logit().var.value();
        let edges = res.edge.as_ref().map(|e| e.prob.var.value());
        for (b, (h, w, _)) in chunk.iter().enumerate() {
            let mask = plane_of(&upsample_probabilities(&logits.batch_item(b), *h, *w), 0);
            let edge = edges.as_ref().map(|e| {
                let item = e.batch_item(b);
                let (_, _, eh, ew) = item.dims4();
                Plane::new(*h, *w, bgnet_tensor::ops::resize_plane(item.data(), eh, ew, *h, *w))
            });
            out.push(ImagePrediction { mask, edge });
        }
    }
    Ok(out)
}

/// Metric report of the model on `samples`, scored at ground-truth size.
pub fn evaluate_samples(model: &BgNet, store: &ParamStore, samples: &[Sample]) -> Result<MetricReport> {
    let images: Vec<(usize, usize, Tensor)> = samples.iter().map(|s| (s.height(), s.width(), s.image.clone())).collect();
    let preds = predict(model, store, &images, 8)?;
    let per_image = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| ImageMetrics::compute(&s.id, &p.mask, &s.object_mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::aggregate(per_image))
}

/// Loss of the whole dataset as one unaugmented batch.
pub fn dataset_loss(trainer: &Trainer, samples: &[Sample], train_mode: bool) -> Result<LossReport> {
    let batch = full_batch(samples, &Augmenter::from_model(&trainer.config.model))?;
    trainer.evaluate_loss(&batch, train_mode)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleComplexity {
    pub module: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub param_count: usize,
    pub flop_count: u64,
    pub macs: u64,
    /// FLOPs per multiply-accumulate (1 or 2).
    pub mac_convention: u8,
    pub input_size: usize,
    pub per_module: Vec<ModuleComplexity>,
}

pub const PAPER_PARAMS: f64 = 79.85e6;
pub const PAPER_FLOPS: f64 = 58.45e9;

fn module_of(name: &str) -> String {
    let head = name.split('.').next().unwrap_or_default();
    head.trim_end_matches(|c: char| c.is_ascii_digit()).to_string()
}

/// Exact trainable-parameter count and convolution FLOPs of one forward pass
/// at `input_size`×`input_size`, from a shape-only build.
pub fn complexity_report(cfg: &ModelConfig, input_size: usize, mac_convention: u8) -> Result<ComplexityReport> {
    if !matches!(mac_convention, 1 | 2) {
        return Err(BgError::config("mac_convention", format!("{mac_convention} is not 1 or 2")));
    }
    let mut cfg = cfg.clone();
    cfg.input_size = input_size;
    if cfg.backbone == crate::config::BackboneKind::Res2Net50Pretrained {
        cfg.backbone = crate::config::BackboneKind::Res2Net50Shape;
        cfg.pretrained_weights = None;
    }
    let (model, store) = BgNet::build_meta(&cfg)?;
    let g = Graph::meta();
    let ctx = Ctx::new(&g, &store, false);
    model.forward(&ctx, g.constant(Tensor::meta([1, 3, input_size, input_size])))?;
    let macs_by_scope = g.macs_by_scope();
    let mut per_module: Vec<ModuleComplexity> = Vec::new();
    for (_, e) in store.entries().filter(|(_, e)| e.kind == ParamKind::Weight) {
        let module = module_of(&e.name);
        match per_module.iter_mut().find(|m| m.module == module) {
            Some(m) => m.params += e.value.numel(),
            None => per_module.push(ModuleComplexity { module, params: e.value.numel(), flops: 0 }),
        }
    }
    for m in &mut per_module {
        m.flops = macs_by_scope.get(&m.module).copied().unwrap_or(0) * mac_convention as u64;
    }
    let macs = g.total_macs();
    Ok(ComplexityReport {
        param_count: store.num_trainable(),
        flop_count: macs * mac_convention as u64,
        macs,
        mac_convention,
        input_size,
        per_module,
    })
}

impl ComplexityReport {
    /// Human-readable table in M/G units with deviation from the published
    /// figures.
    pub fn render(&self) -> String {
        let mut s = format!("input {0}x{0}, 1 MAC = {1} FLOP(s)\n", self.input_size, self.mac_convention);
        s.push_str(&format!("{:<10}{:>14}{:>14}\n", "module", "params (M)", "FLOPs (G)"));
        for m in &self.per_module {
            s.push_str(&format!("{:<10}{:>14.3}{:>14.3}\n", m.module, m.params as f64 / 1e6, m.flops as f64 / 1e9));
        }
        s.push_str(&format!(
            "{:<10}{:>14.3}{:>14.3}\n",
            "total",
            self.param_count as f64 / 1e6,
            self.flop_count as f64 / 1e9
        ));
        s.push_str(&format!(
            "published 79.85M / 58.45G; deviation {:+.2}% params, {:+.2}% FLOPs\n",
            (self.param_count as f64 / PAPER_PARAMS - 1.0) * 100.0,
            (self.flop_count as f64 / PAPER_FLOPS - 1.0) * 100.0
        ));
        s
    }
}
