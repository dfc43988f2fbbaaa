//! Segmentation metrics: confusion matrix, per-class IoU, mIoU, pixel
//! accuracy, and mean per-class recall.

use crate::error::{CpSegError, Result};

/// Row-major `k x k` counts; rows index ground truth, columns predictions.
pub fn confusion_matrix(gt: &[u8], pred: &[u8], num_classes: usize) -> Result<Vec<u64>> {
    if gt.len() != pred.len() {
        return Err(CpSegError::Shape(format!(
            "ground truth has {} pixels, prediction {}",
            gt.len(),
            pred.len()
        )));
    }
    let mut conf = vec![0u64; num_classes * num_classes];
    for (&g, &p) in gt.iter().zip(pred) {
        let (g, p) = (g as usize, p as usize);
        if g >= num_classes || p >= num_classes {
            return Err(CpSegError::Label {
                label: g.max(p),
                index: 0,
                num_classes,
            });
        }
        conf[g * num_classes + p] += 1;
    }
    Ok(conf)
}

pub fn add_confusion(total: &mut [u64], part: &[u64]) {
    for (t, p) in total.iter_mut().zip(part) {
        *t += p;
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// Mean over ground-truth-present classes of per-class recall.
    pub mean_recall: f64,
    pub confusion: Vec<u64>,
    pub runtime_seconds: f64,
}

/// Derive all metrics from an accumulated confusion matrix.
pub fn metrics_from_confusion(conf: &[u64], class_names: &[String]) -> MetricsReport {
    let k = class_names.len();
    debug_assert_eq!(conf.len(), k * k);
    let mut per_class_iou = Vec::with_capacity(k);
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    let mut recall_sum = 0.0;
    let mut recall_count = 0usize;
    let mut correct = 0u64;
    let mut total = 0u64;

    for c in 0..k {
        let tp = conf[c * k + c];
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for o in 0..k {
            if o != c {
                fp += conf[o * k + c];
                fn_ += conf[c * k + o];
            }
        }
        let union = tp + fp + fn_;
        if union == 0 {
            per_class_iou.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class_iou.push(Some(iou));
            iou_sum += iou;
            iou_count += 1;
        }
        let gt_count = tp + fn_;
        if gt_count > 0 {
            recall_sum += tp as f64 / gt_count as f64;
            recall_count += 1;
        }
        correct += tp;
    }
    for v in conf {
        total += v;
    }

    MetricsReport {
        class_names: class_names.to_vec(),
        per_class_iou,
        miou: if iou_count > 0 { iou_sum / iou_count as f64 } else { 0.0 },
        pixel_accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        mean_recall: if recall_count > 0 {
            recall_sum / recall_count as f64
        } else {
            0.0
        },
        confusion: conf.to_vec(),
        runtime_seconds: 0.0,
    }
}

impl MetricsReport {
    /// Evaluation report CSV: one header row of per-class names plus summary
    /// columns, one value row. Runtime is deliberately excluded so reports
    /// from identical runs are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("method");
        for name in &self.class_names {
            header.push(',');
            header.push_str(name);
        }
        header.push_str(",mIoU,pixel_accuracy,mean_recall\n");
        let mut row = String::from("CPSeg");
        for iou in &self.per_class_iou {
            row.push(',');
            if let Some(v) = iou {
                row.push_str(&format!("{v:.6}"));
            }
        }
        row.push_str(&format!(
            ",{:.6},{:.6},{:.6}\n",
            self.miou, self.pixel_accuracy, self.mean_recall
        ));
        header + &row
    }
}

/// Aggregate a confusion matrix along a class merge map.
pub fn merge_confusion(conf: &[u64], map: &[usize], target_k: usize) -> Vec<u64> {
    let k = map.len();
    let mut out = vec![0u64; target_k * target_k];
    for g in 0..k {
        for p in 0..k {
            out[map[g] * target_k + map[p]] += conf[g * k + p];
        }
    }
    out
}
