use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};

/// Pixel counts indexed `[ground truth, prediction]` over background plus
/// `C` classes. Predictions of `255` are counted separately as misses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
    /// Per ground-truth value, pixels the prediction left as ignore.
    unlabeled: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes + 1, num_classes + 1)),
            unlabeled: vec![0; num_classes + 1],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows() - 1
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Adds one image. Ground-truth `255` pixels are skipped.
    pub fn accumulate(&mut self, id: &str, pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Contract(format!(
                "item `{id}`: prediction is {:?} but ground truth is {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let n = self.counts.nrows();
        let in_range = |v: u8| (v as usize) < n || v == IGNORE_INDEX;
        if let Some(&v) = gt.iter().find(|&&v| !in_range(v)) {
            return Err(Error::Contract(format!(
                "item `{id}`: ground-truth value {v} out of range"
            )));
        }
        if let Some(&v) = pred.iter().find(|&&v| !in_range(v)) {
            return Err(Error::Contract(format!(
                "item `{id}`: predicted value {v} out of range"
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (g, p) {
                (IGNORE_INDEX, _) => {}
                (g, IGNORE_INDEX) => self.unlabeled[g as usize] += 1,
                (g, p) => self.counts[[g as usize, p as usize]] += 1,
            }
        }
        Ok(())
    }

    /// Adds another partial matrix (order-independent).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(
            self.counts.dim(),
            other.counts.dim(),
            "confusion matrices of different sizes"
        );
        self.counts += &other.counts;
        for (a, b) in self.unlabeled.iter_mut().zip(&other.unlabeled) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)` per class, `None` when the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let n = self.counts.nrows();
        (0..n)
            .map(|k| {
                let tp = self.counts[[k, k]];
                let gt_total: u64 = self.counts.row(k).sum() + self.unlabeled[k];
                let pred_total: u64 = self.counts.column(k).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn report(&self) -> MIoUReport {
        let per_class_iou = self.per_class_iou();
        let valid: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean_iou = if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        MIoUReport {
            confusion: self.counts.clone(),
            per_class_iou,
            mean_iou,
        }
    }
}

/// Segmentation quality over a set of images. Index 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MIoUReport {
    #[serde(skip)]
    pub confusion: Array2<u64>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over classes whose union is non-empty.
    pub mean_iou: f64,
}

impl MIoUReport {
    /// Human-readable report. `class_names` excludes background.
    pub fn to_text(&self, class_names: &[String], threshold: Option<f64>) -> String {
        let mut s = String::new();
        writeln!(s, "mIoU report").unwrap();
        if let Some(t) = threshold {
            writeln!(s, "threshold: {t}").unwrap();
        }
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let name = label_name(class_names, k);
            match iou {
                Some(v) => writeln!(s, "  {name:<16} {:7.2}%", v * 100.0).unwrap(),
                None => writeln!(s, "  {name:<16}     n/a").unwrap(),
            }
        }
        writeln!(s, "  {:<16} {:7.2}%", "mean", self.mean_iou * 100.0).unwrap();
        s
    }

    /// `class,iou` rows followed by a `mean` row; IoUs as fractions.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("class,iou\n");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{v}", label_name(class_names, k)).unwrap();
        }
        writeln!(s, "mean,{}", self.mean_iou).unwrap();
        s
    }
}

fn label_name(class_names: &[String], k: usize) -> String {
    match k {
        0 => "background".to_string(),
        k => class_names.get(k - 1).cloned().unwrap_or_else(|| format!("class_{k}")),
    }
}

/// Confusion over `(id, prediction, ground truth)` triples, summarised.
pub fn evaluate_miou<'a, I>(items: I, num_classes: usize) -> Result<MIoUReport>
where
    I: IntoIterator<Item = (&'a str, ArrayView2<'a, u8>, ArrayView2<'a, u8>)>,
{
    let mut cm = ConfusionMatrix::new(num_classes);
    for (id, pred, gt) in items {
        cm.accumulate(id, pred, gt)?;
    }
    Ok(cm.report())
}
