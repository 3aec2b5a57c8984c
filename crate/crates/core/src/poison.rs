//! Poisoned-sample generation: blend the trigger amplitudes into a sample's
//! DCT spectrum, invert, cap per-pixel deviation, and relabel; plus a
//! corner-patch baseline for comparison.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{select_poison_targets, DatasetError, LabeledImageSet};
use crate::image::{Image, ImageError};
use crate::spectral::{dct2, idct2};
use crate::trigger::TriggerSpec;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("image shape {found:?} does not match trigger shape {expected:?}")]
    ShapeMismatch { found: (usize, usize, usize), expected: (usize, usize, usize) },
    #[error("blend ratio {0} outside [0, 1]")]
    RhoOutOfRange(f64),
    #[error("pixel threshold {0} must be non-negative")]
    NegativeTau(f64),
    #[error("trigger has no entries")]
    EmptyTrigger,
    #[error("{side}×{side} patch does not fit a {h}×{w} image")]
    PatchOutOfBounds { side: usize, h: usize, w: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Whether poisoned samples overwrite their originals or are appended as
/// extra rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoisonMode {
    #[default]
    Replace,
    Append,
}

/// The attack's knobs for a poisoning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub poison_rate: f64,
    /// Blend weight toward the trigger amplitude: 0 leaves the sample
    /// untouched, 1 replaces the coefficient outright.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Per-pixel deviation cap in [0,255] units.
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub target_class: usize,
    #[serde(default)]
    pub mode: PoisonMode,
    #[serde(default)]
    pub seed: u64,
    /// Allow poisoning samples already labeled with the target class.
    #[serde(default)]
    pub allow_target_class: bool,
}

fn default_rho() -> f64 {
    0.7
}

fn default_tau() -> f64 {
    2.0
}

impl Default for PoisonConfig {
    fn default() -> Self {
        PoisonConfig {
            poison_rate: 0.05,
            rho: 0.7,
            tau: 2.0,
            target_class: 0,
            mode: PoisonMode::Replace,
            seed: 0,
            allow_target_class: false,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<(), PoisonError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(PoisonError::RhoOutOfRange(self.rho));
        }
        if self.tau < 0.0 {
            return Err(PoisonError::NegativeTau(self.tau));
        }
        Ok(())
    }
}

/// Where a poisoned row came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index of the poisoned row in the output set.
    pub index: usize,
    /// Index of the source sample in the input set.
    pub source_index: usize,
    pub original_label: usize,
    /// Fingerprint of the model the trigger was extracted with, or a patch
    /// descriptor for the baseline.
    pub trigger_id: String,
}

/// A dataset with some rows swapped for (or extended by) poisoned samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedDataset {
    pub set: LabeledImageSet,
    /// Indices of poisoned rows in `set`, sorted.
    pub poisoned_indices: Vec<usize>,
    pub provenance: Vec<Provenance>,
    pub config: PoisonConfig,
}

impl PoisonedDataset {
    pub fn write_provenance(&self, path: &Path) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            config: &'a PoisonConfig,
            provenance: &'a [Provenance],
        }
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, &Sidecar { config: &self.config, provenance: &self.provenance })
            .map_err(std::io::Error::other)
    }
}

/// Blend the trigger into one image in the DCT domain. Output is real-valued
/// and unrestricted — pixel capping and clipping come later.
pub fn embed_trigger(image: &Image, trigger: &TriggerSpec, rho: f64) -> Result<Image, PoisonError> {
    if image.shape() != trigger.shape {
        return Err(PoisonError::ShapeMismatch { found: image.shape(), expected: trigger.shape });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(PoisonError::RhoOutOfRange(rho));
    }
    let mut spectrum = dct2(image);
    for e in &trigger.entries {
        let cur = spectrum.get(e.u, e.v, e.channel);
        spectrum.set(e.u, e.v, e.channel, (1.0 - rho) * cur + rho * e.amplitude);
    }
    Ok(idct2(&spectrum))
}

/// Cap each pixel's deviation from the original at `tau`, then clip to
/// [0,255].
pub fn restrict_pixels(poisoned: &Image, original: &Image, tau: f64) -> Image {
    assert_eq!(poisoned.shape(), original.shape(), "restrict_pixels shape mismatch");
    let mut out = original.clone();
    for (o, (&orig, &pois)) in out.data.iter_mut().zip(original.data.iter().zip(&poisoned.data)) {
        let delta = pois - orig;
        *o = (orig + delta.signum() * delta.abs().min(tau)).clamp(0.0, 255.0);
    }
    out
}

/// Embed, restrict, and clip one sample — the full per-sample pipeline.
pub fn poison_sample(image: &Image, trigger: &TriggerSpec, cfg: &PoisonConfig) -> Result<Image, PoisonError> {
    let raw = embed_trigger(image, trigger, cfg.rho)?;
    Ok(restrict_pixels(&raw, image, cfg.tau))
}

fn assemble(
    set: &LabeledImageSet,
    cfg: &PoisonConfig,
    trigger_id: &str,
    picked: &[usize],
    mut poison_one: impl FnMut(&Image) -> Result<Image, PoisonError>,
) -> Result<PoisonedDataset, PoisonError> {
    let mut images = set.images.clone();
    let mut labels = set.labels.clone();
    let mut poisoned_indices = Vec::with_capacity(picked.len());
    let mut provenance = Vec::with_capacity(picked.len());
    for &i in picked {
        let poisoned = poison_one(&set.images[i])?;
        let out_index = match cfg.mode {
            PoisonMode::Replace => {
                images[i] = poisoned;
                labels[i] = cfg.target_class;
                i
            }
            PoisonMode::Append => {
                images.push(poisoned);
                labels.push(cfg.target_class);
                images.len() - 1
            }
        };
        poisoned_indices.push(out_index);
        provenance.push(Provenance {
            index: out_index,
            source_index: i,
            original_label: set.labels[i],
            trigger_id: trigger_id.to_string(),
        });
    }
    Ok(PoisonedDataset {
        set: LabeledImageSet::new(images, labels, set.class_count, &set.name),
        poisoned_indices,
        provenance,
        config: cfg.clone(),
    })
}

/// Poison a dataset with an extracted trigger.
pub fn poison_dataset(
    set: &LabeledImageSet,
    trigger: &TriggerSpec,
    cfg: &PoisonConfig,
) -> Result<PoisonedDataset, PoisonError> {
    cfg.validate()?;
    if trigger.entries.is_empty() {
        return Err(PoisonError::EmptyTrigger);
    }
    let selection = select_poison_targets(
        set,
        cfg.poison_rate,
        cfg.target_class,
        cfg.seed,
        cfg.allow_target_class,
    )?;
    assemble(set, cfg, &trigger.model_fingerprint, &selection.indices, |img| {
        poison_sample(img, trigger, cfg)
    })
}

/// Corner choice for the patch baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub side: usize,
    pub value: f64,
    pub corner: Corner,
}

/// Patch-stamping baseline: a solid `side`×`side` square in a corner of each
/// selected sample, label flipped to the target class. τ and ρ are ignored.
pub fn badnets_patch(
    set: &LabeledImageSet,
    cfg: &PoisonConfig,
    patch: PatchSpec,
) -> Result<PoisonedDataset, PoisonError> {
    cfg.validate()?;
    let (h, w, _) = set.image_shape().unwrap_or((0, 0, 0));
    if patch.side > h || patch.side > w {
        return Err(PoisonError::PatchOutOfBounds { side: patch.side, h, w });
    }
    let (oy, ox) = match patch.corner {
        Corner::TopLeft => (0, 0),
        Corner::TopRight => (0, w - patch.side),
        Corner::BottomLeft => (h - patch.side, 0),
        Corner::BottomRight => (h - patch.side, w - patch.side),
    };
    let selection = select_poison_targets(
        set,
        cfg.poison_rate,
        cfg.target_class,
        cfg.seed,
        cfg.allow_target_class,
    )?;
    let id = format!("patch-{}x{}-v{}", patch.side, patch.side, patch.value);
    assemble(set, cfg, &id, &selection.indices, |img| {
        let mut out = img.clone();
        for y in oy..oy + patch.side {
            for x in ox..ox + patch.side {
                for c in 0..out.channels {
                    out.set(y, x, c, patch.value.clamp(0.0, 255.0));
                }
            }
        }
        Ok(out)
    })
}
