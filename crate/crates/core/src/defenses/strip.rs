//! STRIP: overlay a suspect sample with random clean images and look at the
//! entropy of the model's predictions. A sample carrying a sturdy trigger
//! keeps forcing the target class through the blends, so its mean prediction
//! entropy stays abnormally low.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::defenses::DefenseReport;
use crate::image::Image;
use crate::nn::{Model, NnError};

/// Shannon entropy in nats of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Mean prediction entropy of `sample` over `n_overlays` random 50/50 blends
/// with pool images (clipped to [0,255]).
pub fn strip_entropy(
    model: &Model,
    sample: &Image,
    overlay_pool: &[Image],
    n_overlays: usize,
    rng: &mut ChaCha20Rng,
) -> Result<f64, NnError> {
    assert!(!overlay_pool.is_empty(), "empty overlay pool");
    assert!(n_overlays >= 1);
    let mut acc = 0.0;
    for _ in 0..n_overlays {
        let o = &overlay_pool[rng.gen_range(0..overlay_pool.len())];
        let mut blend = sample.clone();
        for (b, &ov) in blend.data.iter_mut().zip(&o.data) {
            *b = (0.5 * *b + 0.5 * ov).clamp(0.0, 255.0);
        }
        acc += entropy(&model.predict(&blend)?);
    }
    Ok(acc / n_overlays as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct StripReport {
    pub benign_entropies: Vec<f64>,
    pub poisoned_entropies: Vec<f64>,
    /// Entropy below this flags a sample as poisoned; set at the
    /// `far_target` quantile of the benign entropies.
    pub threshold: f64,
    pub far_target: f64,
    /// Fraction of poisoned samples flagged.
    pub detection_rate: f64,
    /// Fraction of benign samples flagged (achieved false-alarm rate).
    pub far_actual: f64,
    /// Histogram intersection of the two entropy distributions in [0,1];
    /// near 1 means the defense cannot separate them.
    pub overlap: f64,
}

impl StripReport {
    pub fn to_report(&self) -> DefenseReport {
        DefenseReport {
            defense: "strip".into(),
            threshold: self.threshold,
            scores: serde_json::json!({
                "detection_rate": self.detection_rate,
                "far_actual": self.far_actual,
                "overlap": self.overlap,
            }),
            verdict: if self.detection_rate > 10.0 * self.far_target.max(1e-9) {
                format!("separable: detection rate {:.3} at FAR target {}", self.detection_rate, self.far_target)
            } else {
                format!("indistinguishable: detection rate {:.3} ~ FAR target {}", self.detection_rate, self.far_target)
            },
        }
    }

    /// Histogram rows for plotting both distributions.
    pub fn csv_rows(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let header = vec!["set", "entropy"];
        let mut rows = Vec::new();
        for &e in &self.benign_entropies {
            rows.push(vec!["benign".to_string(), format!("{e}")]);
        }
        for &e in &self.poisoned_entropies {
            rows.push(vec!["poisoned".to_string(), format!("{e}")]);
        }
        (header, rows)
    }
}

fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 1.0; // all mass in one point for both
    }
    let width = (hi - lo) / bins as f64;
    let count = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            h[i] += 1.0 / xs.len() as f64;
        }
        h
    };
    let ha = count(a);
    let hb = count(b);
    ha.iter().zip(&hb).map(|(x, y)| x.min(*y)).sum()
}

/// Run STRIP over aligned benign and suspect sample sets.
#[allow(clippy::too_many_arguments)]
pub fn strip_evaluate(
    model: &Model,
    benign: &[Image],
    poisoned: &[Image],
    overlay_pool: &[Image],
    n_overlays: usize,
    far_target: f64,
    seed: u64,
) -> Result<StripReport, NnError> {
    assert!(!benign.is_empty() && !poisoned.is_empty(), "empty evaluation set");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut benign_entropies = Vec::with_capacity(benign.len());
    for s in benign {
        benign_entropies.push(strip_entropy(model, s, overlay_pool, n_overlays, &mut rng)?);
    }
    let mut poisoned_entropies = Vec::with_capacity(poisoned.len());
    for s in poisoned {
        poisoned_entropies.push(strip_entropy(model, s, overlay_pool, n_overlays, &mut rng)?);
    }

    let mut sorted = benign_entropies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((far_target * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    let threshold = sorted[k];

    let rate = |xs: &[f64]| xs.iter().filter(|&&e| e < threshold).count() as f64 / xs.len() as f64;
    Ok(StripReport {
        detection_rate: rate(&poisoned_entropies),
        far_actual: rate(&benign_entropies),
        overlap: histogram_overlap(&benign_entropies, &poisoned_entropies, 20),
        threshold,
        far_target,
        benign_entropies,
        poisoned_entropies,
    })
}
