//! Two-stage training: a head on frozen features, then the method's
//! trainable set together with the head.
//!
//! The learning rate follows a per-step polynomial decay spanning the whole
//! stage. Each epoch visits the support set once in a seeded order; every
//! sample gets its own augmentation stream derived from
//! `(seed, stage, epoch, image_id)`, so runs are reproducible bit for bit.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adaptation::{HeadConfig, Method, MethodConfig, SegModel, TrainableReport};
use crate::autograd::Tape;
use crate::datamodel::{ClassCatalog, FewShotTask, LabelMask, SegSample};
use crate::datasets::{augment, resize_to, AugmentationConfig};
use crate::encoder::FeatureExtractor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::ConfusionMatrix;
use crate::digest::stream;
use crate::params::{Binder, ParamRole, ParamTable};

pub const DEFAULT_LR_GRID: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

/// `base_lr · (1 − step/total_steps)^power`.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::ZeroSteps);
    }
    if step > total_steps {
        return Err(Error::InvalidConfig(format!("step {step} beyond total {total_steps}")));
    }
    Ok(base_lr * libm::pow(1.0 - step as f64 / total_steps as f64, power))
}

/// Linear-method learning rates for the benchmark datasets.
pub fn lr_preset(dataset: &str) -> Option<f64> {
    match dataset {
        "cityscapes" => Some(0.2),
        "coco" => Some(0.05),
        "ppd" => Some(0.001),
        "synthetic" => Some(0.05),
        _ => None,
    }
}

pub fn epochs_preset(dataset: &str) -> Option<usize> {
    match dataset {
        "cityscapes" | "ppd" => Some(200),
        "coco" => Some(100),
        "synthetic" => Some(30),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum OptimizerSpec {
    /// Adam with decoupled weight decay.
    Adamw { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    Sgd { momentum: f64, weight_decay: f64 },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adamw { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl OptimizerSpec {
    pub fn sgd() -> Self {
        OptimizerSpec::Sgd { momentum: 0.9, weight_decay: 0.0 }
    }
}

/// Weight decay skips biases and normalization parameters.
fn decays(role: ParamRole) -> bool {
    !matches!(role, ParamRole::Bias | ParamRole::NormBias | ParamRole::NormWeight)
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state for one parameter table.
pub struct Optimizer {
    spec: OptimizerSpec,
    slots: BTreeMap<usize, Slot>,
    t: i32,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer { spec, slots: BTreeMap::new(), t: 0 }
    }

    /// Update the parameters listed in `grads` (table index, gradient). Frozen entries are skipped.
    pub fn step(&mut self, table: &mut ParamTable, grads: &[(usize, Matrix)], lr: f64) {
        self.t += 1;
        for (i, g) in grads {
            let p = table.by_index_mut(*i);
            if !p.trainable {
                continue;
            }
            let n = g.data.len();
            let slot = self.slots.entry(*i).or_insert_with(|| Slot { m: alloc::vec![0.0; n], v: alloc::vec![0.0; n] });
            let decay = decays(p.role);
            match self.spec {
                OptimizerSpec::Adamw { beta1, beta2, eps, weight_decay } => {
                    let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
                    let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
                    for j in 0..n {
                        let gj = g.data[j];
                        slot.m[j] = beta1 * slot.m[j] + (1.0 - beta1) * gj;
                        slot.v[j] = beta2 * slot.v[j] + (1.0 - beta2) * gj * gj;
                        let update = (slot.m[j] / bc1) / (libm::sqrt(slot.v[j] / bc2) + eps);
                        let w = &mut p.value.data[j];
                        if decay {
                            *w -= lr * weight_decay * *w;
                        }
                        *w -= lr * update;
                    }
                }
                OptimizerSpec::Sgd { momentum, weight_decay } => {
                    for j in 0..n {
                        let w = &mut p.value.data[j];
                        let gj = g.data[j] + if decay { weight_decay * *w } else { 0.0 };
                        slot.m[j] = momentum * slot.m[j] + gj;
                        *w -= lr * slot.m[j];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// Stage-1 (head) learning rate.
    pub base_lr: f64,
    /// Stage-2 learning rate; the grid-searched value for encoder-tuning methods.
    pub stage2_lr: Option<f64>,
    pub lr_power: f64,
    pub epochs: usize,
    pub stage2_epochs: Option<usize>,
    pub batch_size_stage1: usize,
    pub batch_size_stage2: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    /// `None` disables augmentation.
    pub augmentation: Option<AugmentationConfig>,
    /// Network input size; images are resized to it, labels keep their own resolution at evaluation.
    pub resolution: Option<(usize, usize)>,
    pub method_cfg: MethodConfig,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Linear,
            base_lr: 0.01,
            stage2_lr: None,
            lr_power: 0.9,
            epochs: 30,
            stage2_epochs: None,
            batch_size_stage1: 4,
            batch_size_stage2: 2,
            optimizer: OptimizerSpec::default(),
            seed: 0,
            augmentation: None,
            resolution: None,
            method_cfg: MethodConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr.is_finite() && lr > 0.0;
        if !lr_ok(self.base_lr) || !self.stage2_lr.is_none_or(lr_ok) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.stage2_epochs == Some(0) || self.batch_size_stage1 == 0 || self.batch_size_stage2 == 0 {
            return Err(Error::InvalidConfig("epochs and batch sizes must be positive".into()));
        }
        if !(self.lr_power.is_finite() && self.lr_power >= 0.0) {
            return Err(Error::InvalidConfig("lr_power must be non-negative".into()));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    /// Desk-scale settings for the synthetic blob dataset.
    pub fn synthetic(method: Method, seed: u64) -> Self {
        TrainConfig { method, base_lr: 0.05, stage2_lr: Some(1e-3), epochs: 30, seed, ..Default::default() }
    }

    pub fn stage2_lr(&self) -> f64 {
        self.stage2_lr.unwrap_or(self.base_lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: u8,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    /// Evaluation-mode, unaugmented support loss before the first and after the last step.
    pub initial_support_loss: f64,
    pub final_support_loss: f64,
    pub report: TrainableReport,
    /// Filled in by callers that have a clock.
    pub wall_time_s: f64,
}

/// Catalog-index targets per pixel; ignore pixels map to `None`.
pub fn pixel_targets(mask: &LabelMask, catalog: &ClassCatalog) -> Result<Arc<Vec<Option<u16>>>> {
    let lut = catalog.index_lut();
    let mut out = Vec::with_capacity(mask.data.len());
    for &v in &mask.data {
        if v == catalog.ignore_id {
            out.push(None);
        } else {
            out.push(Some(lut[v as usize].ok_or_else(|| Error::InvalidMask(format!("unknown class {v}")))?));
        }
    }
    Ok(Arc::new(out))
}

/// Pixel-wise cross-entropy averaged over non-ignore pixels; `logits` is `(H·W) × n_classes`.
pub fn seg_loss(logits: &Matrix, gt: &LabelMask, catalog: &ClassCatalog) -> Result<f64> {
    if logits.rows != gt.data.len() || logits.cols != catalog.len() {
        return Err(Error::Shape(format!("logits {:?} vs mask {:?} with {} classes", logits.shape(), gt.dims(), catalog.len())));
    }
    let targets = pixel_targets(gt, catalog)?;
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let s = tape.cross_entropy_sum(l, targets);
    Ok(tape.value(s).data[0] / n as f64)
}

fn network_input(sample: &SegSample, resolution: Option<(usize, usize)>) -> Result<SegSample> {
    match resolution {
        Some(r) if r != sample.image.dims() => {
            let resized = resize_to(sample, r)?;
            // Labels keep their native resolution; only the network input changes.
            Ok(SegSample { image_id: sample.image_id.clone(), image: resized.image, mask: sample.mask.clone() })
        }
        _ => Ok(sample.clone()),
    }
}

/// Mean evaluation-mode loss over `samples` without augmentation.
pub fn support_loss<E: FeatureExtractor>(model: &SegModel<E>, samples: &[SegSample], catalog: &ClassCatalog, resolution: Option<(usize, usize)>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let s = network_input(s, resolution)?;
        let targets = pixel_targets(&s.mask, catalog)?;
        n += targets.iter().filter(|t| t.is_some()).count();
        let logits = model.predict_logits(&s.image, s.mask.dims())?;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let ce = tape.cross_entropy_sum(l, targets);
        total += tape.value(ce).data[0];
    }
    if n == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(total / n as f64)
}

struct StagePlan {
    stage: u8,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    train_encoder: bool,
}

fn run_stage<E: FeatureExtractor>(model: &mut SegModel<E>, task: &FewShotTask, cfg: &TrainConfig, plan: StagePlan) -> Result<StageResult> {
    let support = &task.support;
    if support.is_empty() {
        return Err(Error::InvalidConfig("support set is empty".into()));
    }
    let catalog = &task.catalog;
    let steps_per_epoch = support.len().div_ceil(plan.batch_size);
    let total_steps = plan.epochs * steps_per_epoch;
    let stage_label = if plan.stage == 1 { "stage1" } else { "stage2" };
    let initial = support_loss(model, support, catalog, cfg.resolution)?;
    let mut enc_opt = Optimizer::new(cfg.optimizer);
    let mut head_opt = Optimizer::new(cfg.optimizer);
    let mut curve = Vec::with_capacity(plan.epochs);
    let mut step = 0;
    let mut order: Vec<usize> = (0..support.len()).collect();
    for epoch in 0..plan.epochs {
        let epoch_label = format!("{epoch}");
        let mut shuffle_rng = stream(cfg.seed, &[stage_label, "order", &epoch_label]);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(plan.batch_size) {
            let lr = poly_lr(step, total_steps, plan.lr, cfg.lr_power)?;
            step += 1;
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &support[i];
                let s = match &cfg.augmentation {
                    Some(aug) => {
                        let mut rng = stream(cfg.seed ^ aug.seed, &[stage_label, "augment", &epoch_label, &s.image_id]);
                        augment(s, aug, catalog.ignore_id, &mut rng)
                    }
                    None => s.clone(),
                };
                batch.push(network_input(&s, cfg.resolution)?);
            }
            let targets: Vec<Arc<Vec<Option<u16>>>> = batch.iter().map(|s| pixel_targets(&s.mask, catalog)).collect::<Result<_>>()?;
            let labeled: usize = targets.iter().map(|t| t.iter().filter(|v| v.is_some()).count()).sum();
            if labeled == 0 {
                // Augmentation left nothing to learn from; the schedule still advances.
                continue;
            }
            let mut tape = Tape::new();
            let mut eb = Binder::new(model.encoder.params(), plan.train_encoder);
            let mut hb = Binder::new(&model.head.params, true);
            let images: Vec<&crate::datamodel::Image> = batch.iter().map(|s| &s.image).collect();
            let dims: Vec<(usize, usize)> = batch.iter().map(|s| s.mask.dims()).collect();
            let batch_stats = plan.stage == 1 || !model.head.cfg.freeze_stats_in_stage2;
            let out = model.forward(&mut tape, &mut eb, &mut hb, &images, &dims, batch_stats)?;
            let mut loss = None;
            for (l, t) in out.logits.iter().zip(targets) {
                let ce = tape.cross_entropy_sum(*l, t);
                loss = Some(match loss {
                    None => ce,
                    Some(acc) => tape.add(acc, ce),
                });
            }
            let loss = tape.scale(loss.expect("non-empty batch"), 1.0 / labeled as f64);
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let grads = tape.backward(loss);
            if plan.train_encoder {
                enc_opt.step(model.encoder.params_mut(), &eb.gradients(&grads), lr);
            }
            head_opt.step(&mut model.head.params, &hb.gradients(&grads), lr);
            if let Some(stats) = &out.batch_stats {
                model.head.update_running_stats(stats);
            }
            epoch_loss += value;
            batches += 1;
        }
        curve.push(if batches == 0 { f64::NAN } else { epoch_loss / batches as f64 });
    }
    let final_loss = support_loss(model, support, catalog, cfg.resolution)?;
    Ok(StageResult {
        stage: plan.stage,
        loss_curve: curve,
        steps: total_steps,
        initial_support_loss: initial,
        final_support_loss: final_loss,
        report: model.trainable_report(),
        wall_time_s: 0.0,
    })
}

/// Train the head on frozen encoder features.
pub fn train_stage1<E: FeatureExtractor>(model: &mut SegModel<E>, task: &FewShotTask, cfg: &TrainConfig) -> Result<StageResult> {
    cfg.validate()?;
    model.encoder.params_mut().set_all_trainable(false);
    model.head.params.set_all_trainable(true);
    let plan = StagePlan { stage: 1, lr: cfg.base_lr, epochs: cfg.epochs, batch_size: cfg.batch_size_stage1, train_encoder: false };
    run_stage(model, task, cfg, plan)
}

/// Apply the method's surgery and fine-tune its trainable set with the head.
/// Linear and multilayer probing have no second stage and return `None`.
pub fn train_stage2<E: FeatureExtractor>(model: &mut SegModel<E>, task: &FewShotTask, cfg: &TrainConfig) -> Result<Option<StageResult>> {
    cfg.validate()?;
    if !cfg.method.has_stage2() {
        return Ok(None);
    }
    model.prepare(cfg.method, &cfg.method_cfg, cfg.seed)?;
    let plan = StagePlan {
        stage: 2,
        lr: cfg.stage2_lr(),
        epochs: cfg.stage2_epochs.unwrap_or(cfg.epochs),
        batch_size: cfg.batch_size_stage2,
        train_encoder: true,
    };
    run_stage(model, task, cfg, plan).map(Some)
}

/// Argmax over catalog order, mapped back to class ids.
pub fn predict_mask<E: FeatureExtractor>(model: &SegModel<E>, sample: &SegSample, catalog: &ClassCatalog, resolution: Option<(usize, usize)>) -> Result<LabelMask> {
    let s = network_input(sample, resolution)?;
    let logits = model.predict_logits(&s.image, s.mask.dims())?;
    let ids: Vec<u8> = catalog.ids().collect();
    let data = (0..logits.rows)
        .map(|r| {
            let row = logits.row_slice(r);
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            ids[best]
        })
        .collect();
    LabelMask::new(s.mask.height, s.mask.width, data)
}

/// Confusion matrix of the model's predictions over `samples`.
pub fn evaluate<E: FeatureExtractor>(model: &SegModel<E>, samples: &[SegSample], catalog: &ClassCatalog, resolution: Option<(usize, usize)>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(catalog);
    for s in samples {
        cm.update(&predict_mask(model, s, catalog, resolution)?, &s.mask)?;
    }
    Ok(cm)
}

/// One grid point: its score, or why it failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best_lr: f64,
    pub points: Vec<GridPoint>,
}

/// Evaluate `score(lr)` for each grid value and keep the best; ties go to the larger lr.
pub fn grid_search_lr<F: FnMut(f64) -> Result<f64>>(grid: &[f64], mut score: F) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty learning-rate grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        match score(lr) {
            Ok(s) if s.is_finite() => {
                if best.is_none_or(|(bl, bs)| s > bs || (s == bs && lr > bl)) {
                    best = Some((lr, s));
                }
                points.push(GridPoint { lr, score: Some(s), error: None });
            }
            Ok(s) => points.push(GridPoint { lr, score: None, error: Some(format!("non-finite score {s}")) }),
            Err(e) => points.push(GridPoint { lr, score: None, error: Some(format!("{e}")) }),
        }
    }
    match best {
        Some((best_lr, _)) => Ok(GridSearch { best_lr, points }),
        None => Err(Error::AllRunsFailed(points.iter().map(|p| format!("lr={}: {}", p.lr, p.error.as_deref().unwrap_or("?"))).collect())),
    }
}
