//! Run records, multi-seed summaries and learning-rate transfer analysis.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adaptation::{Method, TrainableReport};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, SizeRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Failed,
    /// Loaded from an earlier completed run instead of re-running.
    Cached,
}

/// Everything needed to re-aggregate one (dataset, encoder, method, shots, seed, lr) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec_hash: String,
    /// Serialized experiment spec the run was produced from.
    pub spec_snapshot: String,
    pub dataset: String,
    pub encoder: String,
    pub method: Method,
    pub shots: usize,
    pub seed: u64,
    pub lr: f64,
    pub stage2_lr: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub manifest_digest: Option<String>,
    pub miou: Option<f64>,
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub trainable: Option<TrainableReport>,
    pub loss_curves: Vec<Vec<f64>>,
    pub support_losses: Vec<(f64, f64)>,
    /// Per-image (area, IoU) pairs for each class, keyed by class name.
    pub object_sizes: BTreeMap<String, Vec<SizeRecord>>,
    pub wall_time_s: f64,
    pub version: String,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.status != RunStatus::Failed && self.miou.is_some()
    }
}

/// One (encoder, method, shots) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub encoder: String,
    pub method: Method,
    pub shots: usize,
    pub datasets: Vec<String>,
    /// Per-seed values after averaging over datasets, in seed order.
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Sample standard deviation; unavailable with fewer than two seeds.
    pub std: Option<f64>,
}

impl ReportCell {
    pub fn display(&self, decimals: usize) -> String {
        match self.std {
            Some(s) => format!("{:.*} ± {:.*}", decimals, self.mean, decimals, s),
            None => format!("{:.*} ± n/a", decimals, self.mean),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub cells: Vec<ReportCell>,
}

type CellKey = (String, Method, usize);

/// Group successful records into cells. Within a cell, each seed's values are first
/// averaged over datasets (only seeds covering every dataset of the cell are used),
/// then mean and sample std are taken across seeds.
pub fn summarize(records: &[RunRecord]) -> Result<ReportTable> {
    // cell -> seed -> dataset -> mIoU
    let mut grouped: BTreeMap<CellKey, BTreeMap<u64, BTreeMap<&str, f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.succeeded()) {
        let miou = r.miou.expect("succeeded");
        grouped.entry((r.encoder.clone(), r.method, r.shots)).or_default().entry(r.seed).or_default().insert(&r.dataset, miou);
    }
    let mut cells = Vec::with_capacity(grouped.len());
    for ((encoder, method, shots), seeds) in grouped {
        let datasets: BTreeSet<&str> = seeds.values().flat_map(|d| d.keys().copied()).collect();
        let per_seed: Vec<(u64, f64)> = seeds
            .iter()
            .filter(|(_, d)| d.len() == datasets.len())
            .map(|(s, d)| (*s, d.values().sum::<f64>() / d.len() as f64))
            .collect();
        if per_seed.is_empty() {
            continue;
        }
        let values: Vec<f64> = per_seed.iter().map(|(_, v)| *v).collect();
        let (mean, std) = match aggregate_runs(&values) {
            Ok(s) => (s.mean, Some(s.std)),
            Err(Error::InsufficientValues { .. }) => (values[0], None),
            Err(e) => return Err(e),
        };
        cells.push(ReportCell { encoder, method, shots, datasets: datasets.into_iter().map(String::from).collect(), per_seed, mean, std });
    }
    Ok(ReportTable { cells })
}

/// Score of each learning rate on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrScores {
    pub dataset: String,
    pub points: Vec<(f64, f64)>,
}

impl LrScores {
    /// Best learning rate; ties go to the larger one.
    pub fn best(&self) -> Option<(f64, f64)> {
        self.points.iter().copied().filter(|(_, s)| s.is_finite()).fold(None, |best, (lr, s)| match best {
            Some((bl, bs)) if bs > s || (bs == s && bl >= lr) => Some((bl, bs)),
            _ => Some((lr, s)),
        })
    }

    pub fn score_at(&self, lr: f64) -> Option<f64> {
        self.points.iter().find(|(l, _)| *l == lr).map(|(_, s)| *s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum DropEntry {
    Diagonal,
    Unavailable,
    Drop(f64),
}

/// `entries[source][target]`: the target's loss in mIoU when trained with the source's best lr.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropMatrix {
    pub datasets: Vec<String>,
    pub best_lr: Vec<Option<f64>>,
    pub entries: Vec<Vec<DropEntry>>,
}

pub fn lr_transfer(scores: &[LrScores]) -> DropMatrix {
    let best: Vec<Option<(f64, f64)>> = scores.iter().map(LrScores::best).collect();
    let entries = (0..scores.len())
        .map(|s| {
            (0..scores.len())
                .map(|t| {
                    if s == t {
                        return DropEntry::Diagonal;
                    }
                    match (best[s], best[t]) {
                        (Some((src_lr, _)), Some((_, own))) => match scores[t].score_at(src_lr) {
                            Some(v) if v.is_finite() => DropEntry::Drop(own - v),
                            _ => DropEntry::Unavailable,
                        },
                        _ => DropEntry::Unavailable,
                    }
                })
                .collect()
        })
        .collect();
    DropMatrix { datasets: scores.iter().map(|s| s.dataset.clone()).collect(), best_lr: best.iter().map(|b| b.map(|(lr, _)| lr)).collect(), entries }
}

/// Per-dataset mean query mIoU at each stage-2 (or, for probing methods, stage-1) lr.
pub fn lr_scores_from_records(records: &[RunRecord], encoder: &str, method: Method, shots: usize) -> Vec<LrScores> {
    let mut acc: BTreeMap<&str, Vec<(f64, f64, usize)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.succeeded() && r.encoder == encoder && r.method == method && r.shots == shots) {
        let lr = r.stage2_lr.unwrap_or(r.lr);
        let list = acc.entry(&r.dataset).or_default();
        match list.iter_mut().find(|(l, _, _)| *l == lr) {
            Some(e) => {
                e.1 += r.miou.expect("succeeded");
                e.2 += 1;
            }
            None => list.push((lr, r.miou.expect("succeeded"), 1)),
        }
    }
    acc.into_iter()
        .map(|(d, mut list)| {
            list.sort_by(|a, b| b.0.total_cmp(&a.0));
            LrScores { dataset: d.into(), points: list.into_iter().map(|(lr, s, n)| (lr, s / n as f64)).collect() }
        })
        .collect()
}
