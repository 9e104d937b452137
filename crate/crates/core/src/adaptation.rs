//! Segmentation heads, adapter surgery (SVF, LoRA, BitFit) and trainable-parameter accounting.
//!
//! A [`SegModel`] pairs an encoder with a [`SegHead`]. The head is a
//! per-channel batch normalization followed by a 1×1 classifier whose
//! logits are bilinearly upsampled to the label resolution. Surgery
//! functions rewrite linear layers of the encoder's parameter table in
//! place and set the trainable flags; the head always stays trainable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::datamodel::Image;
use crate::digest::stream;
use crate::encoder::{FeatureExtractor, FeatureMap, ParamSpec};
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::params::{Binder, LinearForm, ParamRole, ParamTable};
use crate::resample::{Kernel, Resample2d};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Linear,
    Multilayer,
    Svf,
    Lora,
    Bitfit,
    Finetune,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Linear, Method::Multilayer, Method::Svf, Method::Lora, Method::Bitfit, Method::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Multilayer => "multilayer",
            Method::Svf => "svf",
            Method::Lora => "lora",
            Method::Bitfit => "bitfit",
            Method::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }

    /// Methods with an encoder-tuning second stage.
    pub fn has_stage2(self) -> bool {
        !matches!(self, Method::Linear | Method::Multilayer)
    }

    pub fn head_kind(self) -> HeadKind {
        if self == Method::Multilayer {
            HeadKind::Multilayer
        } else {
            HeadKind::Linear
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    Multilayer,
}

/// Selects linear layers whose prefix ends in one of `suffixes` (e.g. `attn.q`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSelector {
    pub suffixes: Vec<String>,
}

impl TargetSelector {
    pub fn new(suffixes: &[&str]) -> Self {
        TargetSelector { suffixes: suffixes.iter().map(|s| s.to_string()).collect() }
    }

    /// Attention and MLP matrices; the patch projection is excluded.
    pub fn attention_and_mlp() -> Self {
        Self::new(&["attn.q", "attn.k", "attn.v", "attn.proj", "mlp.fc1", "mlp.fc2"])
    }

    pub fn query_value() -> Self {
        Self::new(&["attn.q", "attn.v"])
    }

    pub fn matches(&self, prefix: &str) -> bool {
        self.suffixes.iter().any(|s| prefix == s || prefix.strip_suffix(s.as_str()).is_some_and(|p| p.ends_with('.')))
    }

    pub fn select<'t>(&self, table: &'t ParamTable) -> Vec<&'t str> {
        table.linear_prefixes().filter(|p| self.matches(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub svf_targets: TargetSelector,
    pub lora_targets: TargetSelector,
    pub lora_rank: usize,
    /// Defaults to the rank, i.e. a scaling of 1.
    pub lora_alpha: Option<f64>,
    /// Taps for the multilayer head, capped by the encoder depth.
    pub multilayer_taps: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            svf_targets: TargetSelector::attention_and_mlp(),
            lora_targets: TargetSelector::query_value(),
            lora_rank: 4,
            lora_alpha: None,
            multilayer_taps: 4,
        }
    }
}

impl MethodConfig {
    pub fn alpha(&self) -> f64 {
        self.lora_alpha.unwrap_or(self.lora_rank as f64)
    }

    pub fn n_taps(&self, kind: HeadKind, n_blocks: usize) -> usize {
        match kind {
            HeadKind::Linear => 1,
            HeadKind::Multilayer => self.multilayer_taps.min(n_blocks).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub momentum: f64,
    pub eps: f64,
    /// Use running statistics in training mode when the batch holds a single image.
    pub tiny_batch_fallback: bool,
    /// Normalize with the stage-1 running statistics (and stop updating them) in stage 2.
    pub freeze_stats_in_stage2: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { momentum: 0.1, eps: 1e-5, tiny_batch_fallback: false, freeze_stats_in_stage2: true }
    }
}

/// Batch normalization plus a 1×1 classifier over (possibly concatenated) feature taps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegHead {
    pub kind: HeadKind,
    pub n_taps: usize,
    pub in_dim: usize,
    pub n_classes: usize,
    pub params: ParamTable,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub cfg: HeadConfig,
}

/// Logit nodes for each image of a batch plus the batch statistics used, if any.
pub struct HeadOutput {
    pub logits: Vec<NodeId>,
    pub batch_stats: Option<(Vec<f64>, Vec<f64>, usize)>,
}

impl SegHead {
    pub const BN: &'static str = "head.bn";
    pub const CLASSIFIER: &'static str = "head.classifier";

    pub fn new(kind: HeadKind, n_taps: usize, embed_dim: usize, n_classes: usize, cfg: HeadConfig) -> Self {
        let in_dim = n_taps * embed_dim;
        let mut params = ParamTable::new();
        params.insert(format!("{}.weight", Self::BN), Matrix::filled(1, in_dim, 1.0), ParamRole::NormWeight, true);
        params.insert(format!("{}.bias", Self::BN), Matrix::zeros(1, in_dim), ParamRole::NormBias, true);
        params.insert_linear(Self::CLASSIFIER, Matrix::zeros(n_classes, in_dim), Some(Matrix::zeros(1, n_classes)));
        SegHead { kind, n_taps, in_dim, n_classes, params, running_mean: vec![0.0; in_dim], running_var: vec![1.0; in_dim], cfg }
    }

    /// Apply the head to a batch. `feats[i]` holds the taps of image `i` in block order,
    /// each `(gh·gw) × D`; logits are upsampled to `out_dims[i]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        feats: &[Vec<NodeId>],
        grids: &[(usize, usize)],
        out_dims: &[(usize, usize)],
        train: bool,
    ) -> Result<HeadOutput> {
        if feats.is_empty() || feats.len() != grids.len() || feats.len() != out_dims.len() {
            return Err(Error::Shape("head batch: features, grids and output sizes must align".into()));
        }
        let mut rows = Vec::with_capacity(feats.len());
        for (taps, grid) in feats.iter().zip(grids) {
            if taps.len() != self.n_taps {
                return Err(Error::Shape(format!("head expects {} taps, got {}", self.n_taps, taps.len())));
            }
            let x = if taps.len() == 1 { taps[0] } else { tape.hconcat(taps) };
            let (r, c) = tape.value(x).shape();
            if c != self.in_dim || r != grid.0 * grid.1 {
                return Err(Error::Shape(format!("head expects {}x{} features with {} channels, got {r} rows of {c}", grid.0, grid.1, self.in_dim)));
            }
            rows.push(x);
        }
        let x = if rows.len() == 1 { rows[0] } else { tape.vconcat(&rows) };
        let gamma = binder.get(tape, &self.params, &format!("{}.weight", Self::BN))?;
        let beta = binder.get(tape, &self.params, &format!("{}.bias", Self::BN))?;
        let use_batch = train && !(self.cfg.tiny_batch_fallback && feats.len() == 1);
        let (normed, batch_stats) = if use_batch {
            let y = tape.batch_norm(x, gamma, beta, self.cfg.eps);
            let (m, v) = tape.batch_stats(y).expect("batch norm node");
            let stats = (m.to_vec(), v.to_vec(), tape.value(x).rows);
            (y, Some(stats))
        } else {
            let y = tape.normalize_cols(x, &self.running_mean, &self.running_var, self.cfg.eps);
            let y = tape.mul_cols(y, gamma);
            (tape.add_row(y, beta), None)
        };
        let logits = binder.linear(tape, &self.params, normed, Self::CLASSIFIER)?;
        let mut out = Vec::with_capacity(feats.len());
        let mut start = 0;
        for (grid, dims) in grids.iter().zip(out_dims) {
            let n = grid.0 * grid.1;
            let l = if feats.len() == 1 { logits } else { tape.row_slice(logits, start, n) };
            start += n;
            out.push(if *grid == *dims { l } else { tape.resample(l, Arc::new(Resample2d::new(*grid, *dims, Kernel::Bilinear))) });
        }
        Ok(HeadOutput { logits: out, batch_stats })
    }

    /// Exponential running update with the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &(Vec<f64>, Vec<f64>, usize)) {
        let (mean, var, n) = stats;
        let m = self.cfg.momentum;
        let correction = if *n > 1 { *n as f64 / (*n as f64 - 1.0) } else { 1.0 };
        for (r, v) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v * correction;
        }
    }

    /// Evaluation-mode logits `(H·W) × n_classes` for a precomputed feature stack.
    pub fn apply(&self, stack: &[FeatureMap], out_dims: (usize, usize)) -> Result<Matrix> {
        let grid = stack.first().map(|f| (f.gh, f.gw)).ok_or_else(|| Error::Shape("empty feature stack".into()))?;
        if stack.iter().any(|f| (f.gh, f.gw) != grid) {
            return Err(Error::Shape("feature taps must share spatial dims".into()));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let taps: Vec<NodeId> = stack.iter().map(|f| tape.constant(f.data.clone())).collect();
        let out = self.forward(&mut tape, &mut binder, &[taps], &[grid], &[out_dims], false)?;
        Ok(tape.value(out.logits[0]).clone())
    }
}

/// Single-tap head applied in evaluation mode.
pub fn linear_head_forward(head: &SegHead, features: &FeatureMap, out_dims: (usize, usize)) -> Result<Matrix> {
    head.apply(core::slice::from_ref(features), out_dims)
}

/// Channel-concatenates the taps in block order, then applies the head.
pub fn multilayer_head_forward(head: &SegHead, stack: &[FeatureMap], out_dims: (usize, usize)) -> Result<Matrix> {
    head.apply(stack, out_dims)
}

/// SVD factors of one weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvfDecomposition {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvfDecomposition {
    pub fn decompose(weight: &Matrix) -> Result<Self> {
        let d = svd(weight)?;
        Ok(SvfDecomposition { u: d.u, s: d.s, vt: d.vt })
    }

    pub fn reconstruct(&self) -> Matrix {
        self.u.mul_cols(&self.s).matmul(&self.vt)
    }
}

/// Flatten a conv kernel `(out, in, kh, kw)` stored contiguously into `(out, in·kh·kw)`.
pub fn conv_weight_as_matrix(out_channels: usize, data: Vec<f64>) -> Result<Matrix> {
    if out_channels == 0 || data.len() % out_channels != 0 {
        return Err(Error::Shape(format!("{} values do not split into {out_channels} output channels", data.len())));
    }
    Ok(Matrix::from_vec(out_channels, data.len() / out_channels, data))
}

fn dense_targets(table: &ParamTable, sel: &TargetSelector) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for p in sel.select(table) {
        match table.linear_form(p) {
            Some(LinearForm::Dense) => out.push(p.to_string()),
            Some(LinearForm::LoraMerged { .. }) | Some(LinearForm::Lora { .. }) | Some(LinearForm::Svf) => {
                return Err(Error::InvalidConfig(format!("layer `{p}` has already been adapted")))
            }
            None => {}
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(out)
}

/// Replace each selected weight by frozen `U`, `Vt` and trainable singular values.
/// Every other encoder parameter is frozen.
pub fn svf_decompose(table: &mut ParamTable, sel: &TargetSelector) -> Result<Vec<String>> {
    let targets = dense_targets(table, sel)?;
    let mut decs = Vec::with_capacity(targets.len());
    for p in &targets {
        decs.push(SvfDecomposition::decompose(&table.get(&format!("{p}.weight"))?.value)?);
    }
    table.set_all_trainable(false);
    for (p, d) in targets.iter().zip(decs) {
        table.remove(&format!("{p}.weight"));
        table.insert(format!("{p}.svf_u"), d.u, ParamRole::SvfU, false);
        table.insert(format!("{p}.svf_s"), Matrix::row(d.s), ParamRole::SvfS, true);
        table.insert(format!("{p}.svf_vt"), d.vt, ParamRole::SvfVt, false);
        table.set_linear_form(p, LinearForm::Svf);
    }
    Ok(targets)
}

/// The effective weight `U·diag(s)·Vt` of an SVF layer.
pub fn svf_reconstruct(table: &ParamTable, prefix: &str) -> Result<Matrix> {
    match table.linear_form(prefix) {
        Some(LinearForm::Svf) => table.effective_weight(prefix),
        _ => Err(Error::MissingParam(format!("{prefix}.svf_s"))),
    }
}

/// Add `(alpha/rank)·B·A` adapters to the selected layers: `A` uniform in
/// `±1/sqrt(fan_in)`, `B` zero. Base weights and all other encoder parameters are frozen.
pub fn lora_inject(table: &mut ParamTable, sel: &TargetSelector, rank: usize, alpha: f64, seed: u64) -> Result<Vec<String>> {
    if rank == 0 || !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidConfig("LoRA rank and alpha must be positive".into()));
    }
    let targets = dense_targets(table, sel)?;
    table.set_all_trainable(false);
    for p in &targets {
        let (m, n) = table.get(&format!("{p}.weight"))?.value.shape();
        let mut rng = stream(seed, &["lora_a", p]);
        let bound = 1.0 / libm::sqrt(n as f64);
        let a = Matrix::from_vec(rank, n, (0..rank * n).map(|_| rng.random_range(-bound..bound)).collect());
        table.insert(format!("{p}.lora_a"), a, ParamRole::LoraA, true);
        table.insert(format!("{p}.lora_b"), Matrix::zeros(m, rank), ParamRole::LoraB, true);
        table.set_linear_form(p, LinearForm::Lora { rank, alpha });
    }
    Ok(targets)
}

/// Fold every LoRA delta into its base weight and drop the adapter factors.
pub fn lora_merge(table: &mut ParamTable) -> Result<Vec<String>> {
    let prefixes: Vec<(String, LinearForm)> = table.linear_prefixes().map(|p| (p.to_string(), table.linear_form(p).expect("listed"))).collect();
    let live: Vec<&(String, LinearForm)> = prefixes.iter().filter(|(_, f)| matches!(f, LinearForm::Lora { .. })).collect();
    if live.is_empty() {
        return match prefixes.iter().find(|(_, f)| matches!(f, LinearForm::LoraMerged { .. })) {
            Some((p, _)) => Err(Error::AlreadyMerged(p.clone())),
            None => Err(Error::EmptySelection),
        };
    }
    let mut merged = Vec::new();
    for (p, form) in live {
        let LinearForm::Lora { rank, alpha } = *form else { unreachable!() };
        let w = table.effective_weight(p)?;
        let trainable = table.get(&format!("{p}.weight"))?.trainable;
        table.insert(format!("{p}.weight"), w, ParamRole::Weight, trainable);
        table.remove(&format!("{p}.lora_a"));
        table.remove(&format!("{p}.lora_b"));
        table.set_linear_form(p, LinearForm::LoraMerged { rank, alpha });
        merged.push(p.clone());
    }
    Ok(merged)
}

/// Mark exactly the bias vectors (including normalization shifts) trainable.
pub fn bitfit_mark(table: &mut ParamTable) -> Result<usize> {
    let mut n = 0;
    for p in table.iter_mut() {
        p.trainable = p.role.is_bias();
        n += p.trainable as usize;
    }
    if n == 0 {
        return Err(Error::NoBiases);
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub group: String,
    pub total: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
    pub groups: Vec<GroupCount>,
}

fn role_group(role: ParamRole) -> &'static str {
    match role {
        ParamRole::Weight => "encoder.weight",
        ParamRole::Bias => "encoder.bias",
        ParamRole::NormWeight => "encoder.norm_weight",
        ParamRole::NormBias => "encoder.norm_bias",
        ParamRole::PosEmbed => "encoder.pos_embed",
        ParamRole::SvfU => "encoder.svf_u",
        ParamRole::SvfS => "encoder.svf_s",
        ParamRole::SvfVt => "encoder.svf_vt",
        ParamRole::LoraA => "encoder.lora_a",
        ParamRole::LoraB => "encoder.lora_b",
    }
}

/// Exact counts over the encoder table plus the head table, grouped by parameter role.
pub fn trainable_fraction(encoder: &ParamTable, head: &ParamTable) -> TrainableReport {
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let tables = [(encoder, false), (head, true)];
    for (table, is_head) in tables {
        for p in table.iter() {
            let g = groups.entry(if is_head { "head" } else { role_group(p.role) }).or_default();
            g.0 += p.numel();
            g.1 += if p.trainable { p.numel() } else { 0 };
        }
    }
    let total: usize = groups.values().map(|g| g.0).sum();
    let trainable: usize = groups.values().map(|g| g.1).sum();
    TrainableReport {
        total,
        trainable,
        fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        groups: groups.into_iter().map(|(g, (t, tr))| GroupCount { group: g.into(), total: t, trainable: tr }).collect(),
    }
}

/// Planned (total, trainable) encoder counts for a method, computed from shapes alone.
///
/// Lets the budget of a large model be reported without allocating it.
pub fn plan_counts(specs: &[ParamSpec], method: Method, cfg: &MethodConfig) -> (usize, usize) {
    let base_total: usize = specs.iter().map(ParamSpec::numel).sum();
    let weights = || specs.iter().filter(|s| s.role == ParamRole::Weight).filter_map(|s| s.name.strip_suffix(".weight").map(|p| (p, s)));
    match method {
        Method::Linear | Method::Multilayer => (base_total, 0),
        Method::Finetune => (base_total, base_total),
        Method::Bitfit => (base_total, specs.iter().filter(|s| s.role.is_bias()).map(ParamSpec::numel).sum()),
        Method::Svf => weights().filter(|(p, _)| cfg.svf_targets.matches(p)).fold((base_total, 0), |(t, tr), (_, s)| {
            let r = s.rows.min(s.cols);
            // W (m·n) is replaced by U (m·r), s (r) and Vt (r·n).
            (t - s.numel() + s.rows * r + r + r * s.cols, tr + r)
        }),
        Method::Lora => weights().filter(|(p, _)| cfg.lora_targets.matches(p)).fold((base_total, 0), |(t, tr), (_, s)| {
            let added = cfg.lora_rank * (s.rows + s.cols);
            (t + added, tr + added)
        }),
    }
}

/// An encoder with a segmentation head.
#[derive(Clone, Debug)]
pub struct SegModel<E> {
    pub encoder: E,
    pub head: SegHead,
}

impl<E: FeatureExtractor> SegModel<E> {
    pub fn new(encoder: E, n_classes: usize, kind: HeadKind, mcfg: &MethodConfig, hcfg: HeadConfig) -> Self {
        let taps = mcfg.n_taps(kind, encoder.n_blocks());
        let head = SegHead::new(kind, taps, encoder.embed_dim(), n_classes, hcfg);
        SegModel { encoder, head }
    }

    /// Forward a batch; returns per-image logits of shape `(H·W) × n_classes`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        enc_binder: &mut Binder,
        head_binder: &mut Binder,
        images: &[&Image],
        out_dims: &[(usize, usize)],
        train: bool,
    ) -> Result<HeadOutput> {
        let mut feats = Vec::with_capacity(images.len());
        let mut grids = Vec::with_capacity(images.len());
        for img in images {
            grids.push(self.encoder.grid_dims(img.dims())?);
            feats.push(self.encoder.forward_taps(tape, enc_binder, img, self.head.n_taps)?);
        }
        self.head.forward(tape, head_binder, &feats, &grids, out_dims, train)
    }

    /// Evaluation-mode logits at `out_dims`.
    pub fn predict_logits(&self, image: &Image, out_dims: (usize, usize)) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut eb = Binder::new(self.encoder.params(), false);
        let mut hb = Binder::new(&self.head.params, false);
        let out = self.forward(&mut tape, &mut eb, &mut hb, &[image], &[out_dims], false)?;
        Ok(tape.value(out.logits[0]).clone())
    }

    pub fn trainable_report(&self) -> TrainableReport {
        trainable_fraction(self.encoder.params(), &self.head.params)
    }

    /// Per-parameter digests across encoder and head (head names are prefixed `head.`).
    pub fn digests(&self) -> BTreeMap<String, String> {
        let mut d = self.encoder.params().digests();
        d.extend(self.head.params.digests());
        d
    }

    /// Freeze the encoder and apply the stage-2 surgery for `method`.
    pub fn prepare(&mut self, method: Method, cfg: &MethodConfig, seed: u64) -> Result<TrainableReport> {
        let table = self.encoder.params_mut();
        match method {
            Method::Linear | Method::Multilayer => table.set_all_trainable(false),
            Method::Finetune => table.set_all_trainable(true),
            Method::Bitfit => {
                bitfit_mark(table)?;
            }
            Method::Svf => {
                svf_decompose(table, &cfg.svf_targets)?;
            }
            Method::Lora => {
                lora_inject(table, &cfg.lora_targets, cfg.lora_rank, cfg.alpha(), seed)?;
            }
        }
        self.head.params.set_all_trainable(true);
        Ok(self.trainable_report())
    }
}
