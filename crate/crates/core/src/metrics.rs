//! Confusion-matrix accumulation, IoU/mIoU, run aggregation and the object-size report.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassCatalog, ClassId, LabelMask};
use crate::error::{Error, Result};

/// `n×n` counts, rows = ground truth, columns = prediction, in catalog order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_ids: Vec<ClassId>,
    pub ignore_id: ClassId,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(catalog: &ClassCatalog) -> Self {
        let n = catalog.len();
        ConfusionMatrix { class_ids: catalog.ids().collect(), ignore_id: catalog.ignore_id, counts: vec![0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.class_ids.len()
    }

    #[inline]
    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn lut(&self) -> [Option<usize>; 256] {
        let mut lut = [None; 256];
        for (i, &id) in self.class_ids.iter().enumerate() {
            lut[id as usize] = Some(i);
        }
        lut
    }

    /// Add one (prediction, ground truth) pair; ignore pixels in `gt` contribute nothing.
    pub fn update(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(alloc::format!(
                "prediction {:?} and ground truth {:?} differ",
                pred.dims(),
                gt.dims()
            )));
        }
        let lut = self.lut();
        let n = self.n();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == self.ignore_id {
                continue;
            }
            let gi = lut[g as usize].ok_or_else(|| Error::InvalidMask(alloc::format!("unknown class {g} in ground truth")))?;
            let pi = lut[p as usize].ok_or_else(|| Error::InvalidMask(alloc::format!("unknown class {p} in prediction")))?;
            self.counts[gi * n + pi] += 1;
        }
        Ok(())
    }

    pub fn tp(&self, i: usize) -> u64 {
        self.at(i, i)
    }

    pub fn fp(&self, i: usize) -> u64 {
        (0..self.n()).filter(|&g| g != i).map(|g| self.at(g, i)).sum()
    }

    pub fn fn_(&self, i: usize) -> u64 {
        (0..self.n()).filter(|&p| p != i).map(|p| self.at(i, p)).sum()
    }

    /// IoU of the class at catalog index `i`; `None` when TP+FP+FN = 0.
    pub fn iou_at(&self, i: usize) -> Option<f64> {
        let tp = self.tp(i);
        let denom = tp + self.fp(i) + self.fn_(i);
        if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        }
    }

    pub fn iou(&self, class_id: ClassId) -> Option<f64> {
        self.class_ids.iter().position(|&c| c == class_id).and_then(|i| self.iou_at(i))
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n()).map(|i| self.iou_at(i)).collect()
    }

    pub fn miou(&self) -> Result<MiouReport> {
        let per_class = self.per_class_iou();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMiou);
        }
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok(MiouReport { miou, excluded: per_class.len() - defined.len(), n_used: defined.len(), per_class })
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.class_ids != other.class_ids || self.ignore_id != other.ignore_id {
            return Err(Error::CatalogMismatch);
        }
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Ok(ConfusionMatrix { class_ids: self.class_ids.clone(), ignore_id: self.ignore_id, counts })
    }
}

/// mIoU with the classes that entered the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    /// Per-class IoU in catalog order; `None` for classes with an empty denominator.
    pub per_class: Vec<Option<f64>>,
    pub excluded: usize,
    pub n_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (divisor n−1).
pub fn aggregate_runs(values: &[f64]) -> Result<RunSummary> {
    if values.len() < 2 {
        return Err(Error::InsufficientValues { needed: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(RunSummary { values: values.to_vec(), mean, std: libm::sqrt(var) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRecord {
    pub area: u64,
    pub iou: f64,
}

/// Per-image ground-truth area of `class_id` against that image's single-class IoU.
///
/// Images where the class is absent from both ground truth and prediction are skipped.
pub fn object_size_report(preds: &[LabelMask], gts: &[LabelMask], class_id: ClassId, ignore_id: ClassId) -> Vec<SizeRecord> {
    preds
        .iter()
        .zip(gts)
        .filter_map(|(p, g)| {
            let (mut tp, mut fp, mut fn_, mut area) = (0u64, 0u64, 0u64, 0u64);
            for (&pv, &gv) in p.data.iter().zip(&g.data) {
                if gv == ignore_id {
                    continue;
                }
                let (is_p, is_g) = (pv == class_id, gv == class_id);
                area += is_g as u64;
                match (is_p, is_g) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let denom = tp + fp + fn_;
            (denom > 0).then(|| SizeRecord { area, iou: tp as f64 / denom as f64 })
        })
        .collect()
}
