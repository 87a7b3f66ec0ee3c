//! Confusion matrices, IoU reports and the negative transfer rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::LabelMap;

/// Rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn row(&self, gt: usize) -> &[u64] {
        &self.counts[gt * self.num_classes..(gt + 1) * self.num_classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    /// Adds the pixels of one `(pred, gt)` pair.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                "confusion",
                &[gt.height, gt.width],
                &[pred.height, pred.width],
            ));
        }
        pred.check_classes(self.num_classes)?;
        gt.check_classes(self.num_classes)?;
        let c = self.num_classes;
        for (&p, &t) in pred.data.iter().zip(&gt.data) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion merge", &[self.num_classes], &[other.num_classes]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class, `None` where the denominator is 0.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = self.row(k).iter().sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|r| self.get(r, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Mean of the defined entries; `NaN` if none are defined.
pub fn mean_defined(ious: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub miou_subset: Option<f64>,
}

pub fn iou_report(cm: &ConfusionMatrix, subset: Option<&[usize]>) -> Result<IouReport> {
    let per_class_iou = cm.per_class_iou();
    let miou = mean_defined(&per_class_iou);
    let miou_subset = match subset {
        None => None,
        Some(classes) => {
            if let Some(&bad) = classes.iter().find(|&&c| c >= cm.num_classes) {
                return Err(Error::ClassIndex {
                    index: bad,
                    num_classes: cm.num_classes,
                });
            }
            let picked: Vec<Option<f64>> = classes.iter().map(|&c| per_class_iou[c]).collect();
            Some(mean_defined(&picked))
        }
    };
    Ok(IouReport {
        per_class_iou,
        miou,
        miou_subset,
    })
}

/// Fraction of images whose adapted score is strictly below the baseline.
pub fn negative_transfer_rate(adapted: &[f64], baseline: &[f64]) -> Result<f64> {
    if adapted.len() != baseline.len() {
        return Err(Error::shape("negative transfer", &[baseline.len()], &[adapted.len()]));
    }
    if adapted.is_empty() {
        return Ok(0.0);
    }
    let drops = adapted.iter().zip(baseline).filter(|(a, b)| a < b).count();
    Ok(drops as f64 / adapted.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub miou_subset: Option<f64>,
    pub per_image_miou: Vec<f64>,
    pub negative_transfer_rate: Option<f64>,
    pub confusion: ConfusionMatrix,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl EvalReport {
    /// Builds a report from per-image `(pred, gt)` pairs.
    pub fn from_predictions<'a>(
        num_classes: usize,
        pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
        subset: Option<&[usize]>,
        baseline_per_image: Option<&[f64]>,
    ) -> Result<Self> {
        let mut total = ConfusionMatrix::new(num_classes);
        let mut per_image_miou = Vec::new();
        for (pred, gt) in pairs {
            let cm = confusion(pred, gt, num_classes)?;
            per_image_miou.push(mean_defined(&cm.per_class_iou()));
            total.merge(&cm)?;
        }
        Self::from_parts(total, per_image_miou, subset, baseline_per_image)
    }

    pub fn from_parts(
        confusion: ConfusionMatrix,
        per_image_miou: Vec<f64>,
        subset: Option<&[usize]>,
        baseline_per_image: Option<&[f64]>,
    ) -> Result<Self> {
        let r = iou_report(&confusion, subset)?;
        let negative_transfer_rate = baseline_per_image
            .map(|b| negative_transfer_rate(&per_image_miou, b))
            .transpose()?;
        Ok(Self {
            per_class_iou: r.per_class_iou,
            miou: r.miou,
            miou_subset: r.miou_subset,
            per_image_miou,
            negative_transfer_rate,
            confusion,
            meta: serde_json::Value::Null,
        })
    }
}
