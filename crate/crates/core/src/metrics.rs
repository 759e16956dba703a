//! IoU and localization-error metrics plus the `id,iou,loc_e` report.

use std::fmt::Write as _;

use crate::error::Result;
use crate::mask::{mask_centroid, Mask};

/// Intersection over union. Two empty masks score 1.
pub fn compute_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        inter += (p & q) as usize;
        union += (p | q) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Centroid distance divided by the image diagonal.
///
/// An empty prediction scores the maximum penalty of 1.
pub fn localization_error(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.ensure_same_dims(gt)?;
    let gt_c = mask_centroid(gt)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let pred_c = mask_centroid(pred)?;
    let diag = (pred.width() as f64).hypot(pred.height() as f64);
    Ok(pred_c.distance(&gt_c) / diag)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMetric {
    pub id: String,
    pub iou: f64,
    pub loc_e: f64,
}

/// Mean IoU / Loc.E over a set of evaluated instances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub iou: f64,
    pub loc_e: f64,
    pub per_instance: Vec<InstanceMetric>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, pred: &Mask, gt: &Mask) -> Result<()> {
        let iou = compute_iou(pred, gt)?;
        let loc_e = localization_error(pred, gt)?;
        self.per_instance.push(InstanceMetric {
            id: id.into(),
            iou,
            loc_e,
        });
        let n = self.per_instance.len() as f64;
        self.iou = self.per_instance.iter().map(|m| m.iou).sum::<f64>() / n;
        self.loc_e = self.per_instance.iter().map(|m| m.loc_e).sum::<f64>() / n;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.per_instance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_instance.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,iou,loc_e\n");
        for m in &self.per_instance {
            let _ = writeln!(out, "{},{:.6},{:.6}", m.id, m.iou, m.loc_e);
        }
        out
    }
}
