//! Trigger extraction: find the DCT frequencies whose coefficients barely
//! change when a target-class sample is masked by its own saliency map, and
//! store those frequencies with their original amplitudes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::nn::{Model, NnError};
use crate::saliency::grad_cam;
use crate::spectral::dct2;

const RELATIVE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error("no samples supplied for extraction")]
    NoSamples,
    #[error("sample {index} shape {found:?} does not match model input {expected:?}")]
    ShapeMismatch { index: usize, found: (usize, usize, usize), expected: (usize, usize, usize) },
    #[error("degenerate trigger: no frequency passed threshold {delta}; minimum diff achieved was {min_diff}")]
    Degenerate { delta: f64, min_diff: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("bad trigger file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Default relative selection threshold; calibrated so the trigger lands in
/// the 1–5% coverage band on the bundled dataset while the poisoned models
/// keep their attack success high.
pub const DEFAULT_DELTA: f64 = 0.05;

/// How coefficient differences are compared against the selection threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `|F_ori − F_tail| < δ` in coefficient units.
    Absolute,
    /// `|F_ori − F_tail| / max(|F_ori|, ε) < δ`, scale-free.
    Relative,
}

/// One selected frequency: channel, vertical index, horizontal index, and the
/// amplitude the poisoner will steer toward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerEntry {
    pub channel: usize,
    pub u: usize,
    pub v: usize,
    pub amplitude: f64,
}

/// The extracted trigger plus everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    /// Sorted by (channel, u, v); unique.
    pub entries: Vec<TriggerEntry>,
    /// Image shape the trigger was extracted from.
    pub shape: (usize, usize, usize),
    /// Identifiers of the source samples (caller-assigned, e.g. dataset indices).
    pub source: Vec<usize>,
    pub target_class: usize,
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    /// Checksum of the preliminary model the saliency came from.
    pub model_fingerprint: String,
    /// |entries| / (H·W·C) — the sparsity the frequency detector cares about.
    pub selected_fraction: f64,
}

impl TriggerSpec {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trigger serialization")
    }

    pub fn from_json(s: &str) -> Result<TriggerSpec, TriggerError> {
        serde_json::from_str(s).map_err(|e| TriggerError::BadFile(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TriggerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TriggerSpec, TriggerError> {
        TriggerSpec::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Per-sample frequency selection: compare the spectrum of `x` against the
/// spectrum of its saliency-masked version and keep slots under `delta`.
/// Returns `(selected keys, F_ori values, minimum diff seen)`.
fn select_for_sample(
    model: &Model,
    image: &Image,
    target_class: usize,
    delta: f64,
    mode: ThresholdMode,
) -> Result<(Vec<(usize, usize, usize)>, BTreeMap<(usize, usize, usize), f64>, f64), TriggerError> {
    let saliency = grad_cam(model, image, target_class)?;
    let tailored = saliency.apply_mask(image);
    let f_ori = dct2(image);
    let f_tail = dct2(&tailored);

    let (h, w, c) = image.shape();
    let mut selected = Vec::new();
    let mut amplitudes = BTreeMap::new();
    let mut min_diff = f64::INFINITY;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let ori = f_ori.get(u, v, ch);
                let tail = f_tail.get(u, v, ch);
                let diff = match mode {
                    ThresholdMode::Absolute => (ori - tail).abs(),
                    ThresholdMode::Relative => (ori - tail).abs() / ori.abs().max(RELATIVE_EPS),
                };
                min_diff = min_diff.min(diff);
                if diff < delta {
                    selected.push((ch, u, v));
                    amplitudes.insert((ch, u, v), ori);
                }
            }
        }
    }
    Ok((selected, amplitudes, min_diff))
}

/// Extract a trigger from one or more target-class samples.
///
/// Multi-sample aggregation: the selected set is the intersection of the
/// per-sample sets and each amplitude is the mean of the per-sample original
/// coefficients. Samples the preliminary model misclassifies are used anyway;
/// their indices come back in the warning list.
pub fn extract_trigger(
    model: &Model,
    samples: &[Image],
    sample_ids: &[usize],
    target_class: usize,
    delta: f64,
    mode: ThresholdMode,
) -> Result<(TriggerSpec, Vec<usize>), TriggerError> {
    if samples.is_empty() {
        return Err(TriggerError::NoSamples);
    }
    for (i, s) in samples.iter().enumerate() {
        if s.shape() != model.config.input_shape {
            return Err(TriggerError::ShapeMismatch {
                index: i,
                found: s.shape(),
                expected: model.config.input_shape,
            });
        }
    }

    let mut misclassified = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if model.predict_class(s)? != target_class {
            misclassified.push(sample_ids.get(i).copied().unwrap_or(i));
        }
    }

    let mut common: Option<Vec<(usize, usize, usize)>> = None;
    let mut amplitude_sums: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let mut min_diff = f64::INFINITY;
    for image in samples {
        let (selected, amplitudes, sample_min) =
            select_for_sample(model, image, target_class, delta, mode)?;
        min_diff = min_diff.min(sample_min);
        for (key, amp) in amplitudes {
            *amplitude_sums.entry(key).or_insert(0.0) += amp;
        }
        common = Some(match common {
            None => selected,
            Some(prev) => {
                let set: std::collections::BTreeSet<_> = selected.into_iter().collect();
                prev.into_iter().filter(|k| set.contains(k)).collect()
            }
        });
    }
    let common = common.unwrap();
    if common.is_empty() {
        return Err(TriggerError::Degenerate { delta, min_diff });
    }

    let n = samples.len() as f64;
    let entries: Vec<TriggerEntry> = common
        .iter()
        .map(|&(channel, u, v)| TriggerEntry {
            channel,
            u,
            v,
            amplitude: amplitude_sums[&(channel, u, v)] / n,
        })
        .collect();

    let (h, w, c) = samples[0].shape();
    let spec = TriggerSpec {
        selected_fraction: entries.len() as f64 / (h * w * c) as f64,
        entries,
        shape: (h, w, c),
        source: sample_ids.to_vec(),
        target_class,
        threshold: delta,
        threshold_mode: mode,
        model_fingerprint: model.fingerprint(),
    };
    Ok((spec, misclassified))
}
