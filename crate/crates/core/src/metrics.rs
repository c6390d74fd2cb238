//! Evaluation metrics over binary masks and their CSV report form.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Thresholds a probability map into a 0/1 mask; `p >= threshold` counts as
/// foreground (inclusive rule).
pub fn binarize<S: Scalar>(m: &Tensor<S>, threshold: f64) -> Vec<u8> {
    let t = S::of(threshold);
    m.data().iter().map(|p| u8::from(*p >= t)).collect()
}

fn counts(op: &'static str, pred: &[u8], gt: &[u8]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            op,
            format!("{} vs {} pixels", pred.len(), gt.len()),
        ));
    }
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        debug_assert!(*p <= 1 && *g <= 1);
        inter += usize::from(*p & *g == 1);
        np += usize::from(*p == 1);
        ng += usize::from(*g == 1);
    }
    Ok((inter, np, ng))
}

/// Dice similarity coefficient `2|P∩G| / (|P| + |G|)`; both-empty pairs score 1.
pub fn dsc(pred: &[u8], gt: &[u8]) -> Result<f64> {
    let (inter, np, ng) = counts("dsc", pred, gt)?;
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Intersection over union `|P∩G| / |P∪G|`; both-empty pairs score 1.
pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    let (inter, np, ng) = counts("iou", pred, gt)?;
    let union = np + ng - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Per-sample and aggregate scores for one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub fold: Option<usize>,
    pub variant: String,
    /// (sample id, dsc, iou)
    pub per_sample: Vec<(String, f64, f64)>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
}

impl MetricsReport {
    pub fn new(fold: Option<usize>, variant: String, per_sample: Vec<(String, f64, f64)>) -> Self {
        assert!(!per_sample.is_empty(), "empty evaluation");
        let n = per_sample.len() as f64;
        let mean_dsc = per_sample.iter().map(|(_, d, _)| d).sum::<f64>() / n;
        let mean_iou = per_sample.iter().map(|(_, _, i)| i).sum::<f64>() / n;
        MetricsReport {
            fold,
            variant,
            per_sample,
            mean_dsc,
            mean_iou,
        }
    }

    fn fold_label(&self) -> String {
        self.fold.map_or_else(|| "-".to_string(), |f| f.to_string())
    }

    /// CSV rows: `fold,variant,sample_id,dsc,iou`, then one `mean` summary
    /// row. Values print with full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,variant,sample_id,dsc,iou\n");
        for (id, d, i) in &self.per_sample {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.fold_label(),
                self.variant,
                id,
                d,
                i
            ));
        }
        s.push_str(&format!(
            "{},{},mean,{},{}\n",
            self.fold_label(),
            self.variant,
            self.mean_dsc,
            self.mean_iou
        ));
        s
    }
}
