//! Multi-seed experiment execution with an on-disk results store.
//!
//! Each run lives in its own directory:
//! `<root>/<spec-hash>/<dataset>/<method>/lr-<rates>/seed-<s>/shots-<k>/` holding
//! `manifest.json` (the sampled task), `config.json` (the training config) and
//! `record.json`. A directory with a successful record is skipped on re-runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fss_core::adaptation::{Method, SegModel};
use fss_core::datamodel::{FewShotTask, LabelMask};
use fss_core::encoder::{TinyEncoder, TinyEncoderConfig};
use fss_core::metrics::{object_size_report, ConfusionMatrix};
use fss_core::report::{RunRecord, RunStatus};
use fss_core::sampler::{SamplerConfig, TaskManifest, TaskSampler};
use fss_core::trainer::{predict_mask, train_stage1, train_stage2, StageResult, TrainConfig};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::spec::{ExperimentSpec, LrChoice};

pub const RECORD_FILE: &str = "record.json";

/// Results root: explicit path, else `$FSS_RESULTS_ROOT`, else `./results`.
pub fn results_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(crate::RESULTS_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results")),
    }
}

fn lr_tag(lr: LrChoice) -> String {
    match lr.stage2 {
        Some(s2) => format!("lr-{:e}-{:e}", lr.stage1, s2),
        None => format!("lr-{:e}", lr.stage1),
    }
}

fn path_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

pub fn run_dir(root: &Path, spec_hash: &str, dataset: &str, method: Method, lr: LrChoice, seed: u64, shots: usize) -> PathBuf {
    root.join(spec_hash).join(path_safe(dataset)).join(method.name()).join(lr_tag(lr)).join(format!("seed-{seed}")).join(format!("shots-{shots}"))
}

/// A trained model with its query predictions.
pub struct RunOutcome {
    pub model: SegModel<TinyEncoder>,
    pub stage1: StageResult,
    pub stage2: Option<StageResult>,
    pub predictions: Vec<LabelMask>,
    pub confusion: ConfusionMatrix,
}

/// Build a fresh encoder, run both stages and predict every query image.
pub fn train_and_evaluate(encoder: &TinyEncoderConfig, task: &FewShotTask, cfg: &TrainConfig) -> Result<RunOutcome> {
    let enc = TinyEncoder::new(encoder.clone())?;
    let mut model = SegModel::new(enc, task.catalog.len(), cfg.method.head_kind(), &cfg.method_cfg, cfg.head.clone());
    let t = Instant::now();
    let mut stage1 = train_stage1(&mut model, task, cfg)?;
    stage1.wall_time_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let mut stage2 = train_stage2(&mut model, task, cfg)?;
    if let Some(s) = stage2.as_mut() {
        s.wall_time_s = t.elapsed().as_secs_f64();
    }
    let mut confusion = ConfusionMatrix::new(&task.catalog);
    let mut predictions = Vec::with_capacity(task.query.len());
    for q in &task.query {
        let pred = predict_mask(&model, q, &task.catalog, cfg.resolution)?;
        confusion.update(&pred, &q.mask)?;
        predictions.push(pred);
    }
    Ok(RunOutcome { model, stage1, stage2, predictions, confusion })
}

/// Identifies one run inside an experiment.
#[derive(Clone, Debug)]
pub struct RunContext<'a> {
    pub spec: &'a ExperimentSpec,
    pub spec_hash: &'a str,
    pub spec_snapshot: &'a str,
    pub dataset: &'a str,
    pub method: Method,
    pub lr: LrChoice,
    pub seed: u64,
    pub shots: usize,
}

impl RunContext<'_> {
    fn blank(&self, status: RunStatus) -> RunRecord {
        RunRecord {
            spec_hash: self.spec_hash.into(),
            spec_snapshot: self.spec_snapshot.into(),
            dataset: self.dataset.into(),
            encoder: self.spec.encoder.name.clone(),
            method: self.method,
            shots: self.shots,
            seed: self.seed,
            lr: self.lr.stage1,
            stage2_lr: self.lr.stage2,
            status,
            error: None,
            manifest_digest: None,
            miou: None,
            class_names: vec![],
            per_class_iou: vec![],
            trainable: None,
            loss_curves: vec![],
            support_losses: vec![],
            object_sizes: BTreeMap::new(),
            wall_time_s: 0.0,
            version: crate::VERSION.into(),
        }
    }

    pub fn failure(&self, manifest: Option<&TaskManifest>, error: impl ToString) -> RunRecord {
        RunRecord { error: Some(error.to_string()), manifest_digest: manifest.map(TaskManifest::digest), ..self.blank(RunStatus::Failed) }
    }

    /// Train and evaluate on `task`; errors become a failure record.
    pub fn execute(&self, task: &FewShotTask, manifest: &TaskManifest) -> RunRecord {
        self.execute_with_outcome(task, manifest).0
    }

    /// Like [`RunContext::execute`], also handing back the trained model and predictions.
    pub fn execute_with_outcome(&self, task: &FewShotTask, manifest: &TaskManifest) -> (RunRecord, Option<RunOutcome>) {
        let cfg = self.spec.train_config(self.method, self.seed, self.lr);
        let t = Instant::now();
        let outcome = match train_and_evaluate(&self.spec.encoder.config, task, &cfg) {
            Ok(o) => o,
            Err(e) => return (self.failure(Some(manifest), e), None),
        };
        let report = match outcome.confusion.miou() {
            Ok(r) => r,
            Err(e) => return (self.failure(Some(manifest), e), Some(outcome)),
        };
        let gts: Vec<LabelMask> = task.query.iter().map(|q| q.mask.clone()).collect();
        let object_sizes = task
            .catalog
            .classes
            .iter()
            .map(|c| (c.name.clone(), object_size_report(&outcome.predictions, &gts, c.id, task.catalog.ignore_id)))
            .collect();
        let stages: Vec<&StageResult> = std::iter::once(&outcome.stage1).chain(outcome.stage2.as_ref()).collect();
        let record = RunRecord {
            manifest_digest: Some(manifest.digest()),
            miou: Some(report.miou),
            class_names: task.catalog.classes.iter().map(|c| c.name.clone()).collect(),
            per_class_iou: report.per_class,
            trainable: Some(stages.last().expect("stage 1 ran").report.clone()),
            loss_curves: stages.iter().map(|s| s.loss_curve.clone()).collect(),
            support_losses: stages.iter().map(|s| (s.initial_support_loss, s.final_support_loss)).collect(),
            object_sizes,
            wall_time_s: t.elapsed().as_secs_f64(),
            ..self.blank(RunStatus::Ok)
        };
        (record, Some(outcome))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Re-run cells that already hold a successful record.
    pub force: bool,
}

fn read_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Run every (dataset, seed, shots, method, lr) cell of `spec` under `root`.
///
/// All methods of one (dataset, seed, shots) share the same sampled support set.
/// Failures are recorded and do not stop the sweep.
pub fn run_experiment(spec: &ExperimentSpec, root: &Path, opts: RunOptions, progress: &mut dyn FnMut(&RunRecord)) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let spec_hash = spec.spec_hash();
    let snapshot = spec.to_toml()?;
    write_atomic(&root.join(&spec_hash).join("spec.toml"), snapshot.as_bytes())?;
    let mut records = Vec::new();
    for dref in &spec.datasets {
        let dataset = dref.open()?;
        let sampler = TaskSampler::new(dataset.as_ref(), spec.min_pixels)?;
        for &seed in &spec.seeds {
            for &shots in &spec.shots {
                let manifest = sampler.manifest(&SamplerConfig::new(sampler.index(), shots, seed));
                let mut task: Option<std::result::Result<FewShotTask, String>> = None;
                for &method in &spec.methods {
                    for lr in spec.lr_choices(dref, method) {
                        let ctx = RunContext {
                            spec,
                            spec_hash: &spec_hash,
                            spec_snapshot: &snapshot,
                            dataset: dataset.name(),
                            method,
                            lr,
                            seed,
                            shots,
                        };
                        let dir = run_dir(root, &spec_hash, dataset.name(), method, lr, seed, shots);
                        let record_path = dir.join(RECORD_FILE);
                        if !opts.force && record_path.is_file() {
                            if let Ok(mut r) = read_record(&record_path) {
                                if r.status != RunStatus::Failed {
                                    r.status = RunStatus::Cached;
                                    progress(&r);
                                    records.push(r);
                                    continue;
                                }
                            }
                        }
                        let record = match &manifest {
                            Err(e) => ctx.failure(None, e),
                            Ok(m) => {
                                write_json(&dir.join("manifest.json"), m)?;
                                write_json(&dir.join("config.json"), &spec.train_config(method, seed, lr))?;
                                let t = task.get_or_insert_with(|| sampler.materialize(m).map_err(|e| e.to_string()));
                                match t {
                                    Ok(t) => ctx.execute(t, m),
                                    Err(e) => ctx.failure(Some(m), e),
                                }
                            }
                        };
                        write_json(&record_path, &record)?;
                        progress(&record);
                        records.push(record);
                    }
                }
            }
        }
    }
    Ok(records)
}

/// Every `record.json` below `root`, in path order.
pub fn load_records(root: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == RECORD_FILE)
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    paths.iter().map(|p| read_record(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_tags_are_distinct() {
        let a = lr_tag(LrChoice { stage1: 0.05, stage2: Some(1e-3) });
        let b = lr_tag(LrChoice { stage1: 0.05, stage2: Some(1e-4) });
        assert_eq!(a, "lr-5e-2-1e-3");
        assert_ne!(a, b);
        assert_eq!(lr_tag(LrChoice { stage1: 0.2, stage2: None }), "lr-2e-1");
    }

    #[test]
    fn dataset_names_are_path_safe() {
        assert_eq!(path_safe("a/b c"), "a_b_c");
    }
}
