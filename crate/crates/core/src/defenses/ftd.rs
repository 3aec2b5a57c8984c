//! Frequency-domain sample detector: a small binary CNN trained on
//! log-magnitude DCT maps of clean images versus images carrying any of a
//! corpus of conventional triggers. Attacks that keep their spectral
//! footprint inside the sample's natural frequency profile slip past it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::datasets::LabeledImageSet;
use crate::defenses::DefenseReport;
use crate::image::Image;
use crate::nn::{train, ConvBlockConfig, Model, ModelConfig, NnError, TrainConfig};
use crate::spectral::dct2;

/// Built-in trigger generators the detector is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerGenerator {
    /// Solid white 3×3 patch in the bottom-right corner.
    CornerPatch,
    /// 20% blend with a fixed checkerboard pattern over the whole image.
    FullImageBlend,
    /// Additive uniform noise of amplitude ±24.
    UniformNoise,
    /// One large coefficient injected at a random mid/high frequency.
    FrequencySpike,
}

pub const DEFAULT_GENERATORS: [TriggerGenerator; 4] = [
    TriggerGenerator::CornerPatch,
    TriggerGenerator::FullImageBlend,
    TriggerGenerator::UniformNoise,
    TriggerGenerator::FrequencySpike,
];

/// Training mix with extra weight on localized patches — the subtlest of the
/// built-in signatures, and the one the detector most needs to nail.
pub fn default_corpus() -> Vec<TriggerGenerator> {
    vec![
        TriggerGenerator::CornerPatch,
        TriggerGenerator::FullImageBlend,
        TriggerGenerator::CornerPatch,
        TriggerGenerator::UniformNoise,
        TriggerGenerator::CornerPatch,
        TriggerGenerator::FrequencySpike,
    ]
}

/// Training hyperparameters that converge reliably on the detector task; the
/// default classifier rates are too aggressive for these inputs.
pub fn default_train_config() -> TrainConfig {
    TrainConfig { epochs: 40, batch_size: 16, learning_rate: 0.0005, ..TrainConfig::default() }
}

/// Apply one generator to a clean image.
pub fn apply_generator(image: &Image, generator: TriggerGenerator, rng: &mut ChaCha20Rng) -> Image {
    let (h, w, c) = image.shape();
    let mut out = image.clone();
    match generator {
        TriggerGenerator::CornerPatch => {
            for y in h.saturating_sub(3)..h {
                for x in w.saturating_sub(3)..w {
                    for ch in 0..c {
                        out.set(y, x, ch, 255.0);
                    }
                }
            }
        }
        TriggerGenerator::FullImageBlend => {
            for y in 0..h {
                for x in 0..w {
                    let check = if (y / 2 + x / 2) % 2 == 0 { 255.0 } else { 0.0 };
                    for ch in 0..c {
                        let v = 0.8 * out.get(y, x, ch) + 0.2 * check;
                        out.set(y, x, ch, v);
                    }
                }
            }
        }
        TriggerGenerator::UniformNoise => {
            for v in &mut out.data {
                *v = (*v + rng.gen_range(-24.0..24.0)).clamp(0.0, 255.0);
            }
        }
        TriggerGenerator::FrequencySpike => {
            let mut f = dct2(image);
            let u = rng.gen_range(h / 2..h);
            let v = rng.gen_range(w / 2..w);
            let ch = rng.gen_range(0..c);
            f.set(u, v, ch, 800.0);
            out = crate::spectral::idct2(&f);
            out.clip(0.0, 255.0);
        }
    }
    out
}

/// Detector input: per-channel log(1+|coefficient|) DCT map, scaled into
/// [0,255] by a factor fixed by the image shape alone.
pub fn ftd_features(image: &Image) -> Image {
    let (h, w, c) = image.shape();
    let f = dct2(image);
    // an all-255 image puts its whole energy in the DC slot: 255·√(H·W)
    let scale = 255.0 / (1.0 + 255.0 * ((h * w) as f64).sqrt()).ln();
    Image::from_data(h, w, c, f.coefficients.iter().map(|&v| (1.0 + v.abs()).ln() * scale).collect())
}

/// Train the binary detector: class 0 = clean, class 1 = trigger-bearing.
/// One poisoned counterpart per clean sample, generators cycled, so classes
/// stay balanced.
pub fn ftd_train(
    clean_set: &LabeledImageSet,
    generators: &[TriggerGenerator],
    seed: u64,
    train_cfg: &TrainConfig,
) -> Result<Model, NnError> {
    assert!(!generators.is_empty(), "empty generator corpus");
    if clean_set.len() == 0 {
        return Err(NnError::EmptyTrainingSet);
    }
    let shape = clean_set.image_shape().expect("nonempty set");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(clean_set.len() * 2);
    let mut labels = Vec::with_capacity(clean_set.len() * 2);
    for (i, img) in clean_set.images.iter().enumerate() {
        images.push(ftd_features(img));
        labels.push(0);
        let g = generators[i % generators.len()];
        images.push(ftd_features(&apply_generator(img, g, &mut rng)));
        labels.push(1);
    }
    let corpus = LabeledImageSet::new(images, labels, 2, "ftd-corpus");
    let detector = Model::init(ModelConfig {
        input_shape: shape,
        conv_blocks: vec![ConvBlockConfig { filters: 8 }],
        dense_hidden: 32,
        class_count: 2,
        seed,
    });
    let (trained, _) = train(&detector, &corpus, train_cfg)?;
    Ok(trained)
}

#[derive(Debug, Clone, Serialize)]
pub struct FtdReport {
    /// Fraction of samples classified as trigger-bearing.
    pub detection_rate: f64,
    pub sample_count: usize,
}

impl FtdReport {
    pub fn to_report(&self) -> DefenseReport {
        DefenseReport {
            defense: "frequency-detector".into(),
            threshold: 0.5,
            scores: serde_json::json!({
                "detection_rate": self.detection_rate,
                "samples": self.sample_count,
            }),
            verdict: format!("{:.1}% of samples flagged", 100.0 * self.detection_rate),
        }
    }
}

/// Fraction of `samples` the detector classifies as trigger-bearing.
pub fn ftd_detect(detector: &Model, samples: &[Image]) -> Result<FtdReport, NnError> {
    assert!(!samples.is_empty(), "empty sample set");
    let mut hits = 0usize;
    for s in samples {
        if detector.predict_class(&ftd_features(s))? == 1 {
            hits += 1;
        }
    }
    Ok(FtdReport { detection_rate: hits as f64 / samples.len() as f64, sample_count: samples.len() })
}
