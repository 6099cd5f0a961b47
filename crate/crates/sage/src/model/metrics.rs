//! Segmentation metrics: pixel accuracy, IoU, and Dice on binary masks.

use crate::error::{Result, SageError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub iou: f64,
    pub dsc: f64,
}

impl Metrics {
    pub fn zero() -> Metrics {
        Metrics { acc: 0.0, iou: 0.0, dsc: 0.0 }
    }
}

/// Per-pixel class with ties resolved to the lowest class index.
pub fn argmax_mask(logits: &Tensor) -> Vec<u8> {
    let [classes, h, w] = logits.shape[..] else {
        panic!("argmax_mask expects [classes,h,w]");
    };
    let hw = h * w;
    let mut mask = vec![0u8; hw];
    for p in 0..hw {
        let mut best = 0usize;
        for c in 1..classes {
            if logits.values[c * hw + p] > logits.values[best * hw + p] {
                best = c;
            }
        }
        mask[p] = best as u8;
    }
    mask
}

/// Metrics over binary masks (foreground = 1). Both IoU and DSC are
/// defined as 1 when prediction and truth are both empty.
pub fn metrics(pred: &[u8], truth: &[u8]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(SageError::shape(format!(
            "metrics: mask lengths {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(SageError::contract("metrics: empty masks"));
    }
    let mut correct = 0usize;
    let mut inter = 0usize;
    let mut pred_fg = 0usize;
    let mut true_fg = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let (pf, tf) = (p != 0, t != 0);
        if pf == tf {
            correct += 1;
        }
        if pf && tf {
            inter += 1;
        }
        if pf {
            pred_fg += 1;
        }
        if tf {
            true_fg += 1;
        }
    }
    let union = pred_fg + true_fg - inter;
    let acc = correct as f64 / pred.len() as f64;
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let dsc = if pred_fg + true_fg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (pred_fg + true_fg) as f64
    };
    Ok(Metrics { acc, iou, dsc })
}

/// Per-image metrics averaged over a set, the evaluation protocol used
/// throughout.
pub fn mean_metrics(per_image: &[Metrics]) -> Metrics {
    let n = per_image.len().max(1) as f64;
    Metrics {
        acc: per_image.iter().map(|m| m.acc).sum::<f64>() / n,
        iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
        dsc: per_image.iter().map(|m| m.dsc).sum::<f64>() / n,
    }
}
