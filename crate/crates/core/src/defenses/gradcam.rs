//! Saliency-overlap inspection: compare where the model looks on an original
//! sample versus its suspect counterpart. A visible patch trigger drags the
//! attention toward itself (low overlap); an attack that hides in the
//! sample's own semantic region keeps the maps aligned (high overlap).

use serde::Serialize;

use crate::defenses::DefenseReport;
use crate::image::Image;
use crate::nn::{Model, NnError};
use crate::saliency::grad_cam;

/// Intersection-over-union of two boolean masks. Two empty masks count as
/// fully overlapping.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCamOverlapReport {
    pub per_pair_iou: Vec<f64>,
    pub mean_iou: f64,
    /// Top-saliency quantile used to binarize each map.
    pub q: f64,
}

impl GradCamOverlapReport {
    pub fn to_report(&self) -> DefenseReport {
        DefenseReport {
            defense: "gradcam-overlap".into(),
            threshold: self.q,
            scores: serde_json::json!({ "mean_iou": self.mean_iou, "pairs": self.per_pair_iou.len() }),
            verdict: format!("mean attention IoU {:.3} at top-{} masks", self.mean_iou, self.q),
        }
    }
}

/// Mean IoU of top-`q` saliency masks over aligned (original, suspect)
/// pairs. Each map is computed for the class the model actually predicts on
/// that image — the view an inspector without label access gets.
pub fn gradcam_overlap(
    model: &Model,
    originals: &[Image],
    poisoned: &[Image],
    q: f64,
) -> Result<GradCamOverlapReport, NnError> {
    assert_eq!(originals.len(), poisoned.len(), "pairs must align");
    assert!(!originals.is_empty());
    let mut per_pair_iou = Vec::with_capacity(originals.len());
    for (o, p) in originals.iter().zip(poisoned) {
        let mo = grad_cam(model, o, model.predict_class(o)?)?;
        let mp = grad_cam(model, p, model.predict_class(p)?)?;
        per_pair_iou.push(mask_iou(&mo.top_quantile_mask(q), &mp.top_quantile_mask(q)));
    }
    let mean_iou = per_pair_iou.iter().sum::<f64>() / per_pair_iou.len() as f64;
    Ok(GradCamOverlapReport { per_pair_iou, mean_iou, q })
}
