//! Attack-effectiveness and stealthiness metrics: attack success rate,
//! benign accuracy, PSNR, and SSIM.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabeledImageSet;
use crate::image::Image;
use crate::nn::{Model, NnError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty evaluation set")]
    EmptySet,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// PSNR is unbounded for identical images; keep the distinction explicit
/// instead of leaning on float infinities in serialized output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn unwrap(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
        }
    }
}

/// Summary statistics over the finite PSNR values of a batch; pairs that were
/// identical are counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrStats {
    pub mean: Psnr,
    pub min: Psnr,
    pub max: Psnr,
    pub infinite_count: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub benign_accuracy: f64,
    pub asr: f64,
    pub psnr_stats: PsnrStats,
    pub ssim_stats: SsimStats,
}

/// Fraction of poisoned samples the model classifies as their attached target
/// class.
pub fn attack_success_rate(model: &Model, pairs: &[(Image, usize)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let mut hits = 0usize;
    for (image, target) in pairs {
        if model.predict_class(image)? == *target {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Plain top-1 accuracy on a labeled set.
pub fn benign_accuracy(model: &Model, set: &LabeledImageSet) -> Result<f64, MetricError> {
    if set.len() == 0 {
        return Err(MetricError::EmptySet);
    }
    let mut hits = 0usize;
    for (image, &label) in set.images.iter().zip(&set.labels) {
        if model.predict_class(image)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

fn mse(x: &Image, y: &Image) -> f64 {
    let n = x.data.len() as f64;
    x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

/// Peak signal-to-noise ratio in dB: `10·log₁₀(MAX²/MSE)`.
pub fn psnr(x: &Image, y: &Image, max_value: f64) -> Result<Psnr, MetricError> {
    if x.shape() != y.shape() {
        return Err(MetricError::ShapeMismatch(x.shape(), y.shape()));
    }
    let e = mse(x, y);
    if e == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(10.0 * (max_value * max_value / e).log10()))
}

fn plane_stats(x: &[f64], y: &[f64], weights: Option<&[f64]>) -> (f64, f64, f64, f64, f64) {
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0 / x.len() as f64; x.len()];
            &ones
        }
    };
    let mx: f64 = x.iter().zip(w).map(|(a, wi)| a * wi).sum();
    let my: f64 = y.iter().zip(w).map(|(a, wi)| a * wi).sum();
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for ((a, b), wi) in x.iter().zip(y).zip(w) {
        vx += wi * (a - mx) * (a - mx);
        vy += wi * (b - my) * (b - my);
        cov += wi * (a - mx) * (b - my);
    }
    (mx, my, vx, vy, cov)
}

fn ssim_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, l: f64) -> f64 {
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Global-statistics SSIM: one window spanning the whole image, per channel,
/// averaged over channels.
pub fn ssim(x: &Image, y: &Image, max_value: f64) -> Result<f64, MetricError> {
    if x.shape() != y.shape() {
        return Err(MetricError::ShapeMismatch(x.shape(), y.shape()));
    }
    let mut acc = 0.0;
    for c in 0..x.channels {
        let xc = x.channel(c);
        let yc = y.channel(c);
        let (mx, my, vx, vy, cov) = plane_stats(&xc, &yc, None);
        acc += ssim_from_stats(mx, my, vx, vy, cov, max_value);
    }
    Ok(acc / x.channels as f64)
}

fn gaussian_window(side: usize, sigma: f64) -> Vec<f64> {
    let half = (side as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..side * side)
        .map(|i| {
            let dy = i as f64 / side as f64;
            let dy = dy.floor() - half;
            let dx = (i % side) as f64 - half;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Windowed mean SSIM: 11×11 Gaussian window (σ = 1.5) slid over every valid
/// position, per channel, averaged. Falls back to global SSIM when the image
/// is smaller than the window.
pub fn ssim_windowed(x: &Image, y: &Image, max_value: f64) -> Result<f64, MetricError> {
    const SIDE: usize = 11;
    const SIGMA: f64 = 1.5;
    if x.shape() != y.shape() {
        return Err(MetricError::ShapeMismatch(x.shape(), y.shape()));
    }
    let (h, w, channels) = x.shape();
    if h < SIDE || w < SIDE {
        return ssim(x, y, max_value);
    }
    let win = gaussian_window(SIDE, SIGMA);
    let mut acc = 0.0;
    let mut windows = 0usize;
    let mut xs = vec![0.0; SIDE * SIDE];
    let mut ys = vec![0.0; SIDE * SIDE];
    for c in 0..channels {
        for oy in 0..=h - SIDE {
            for ox in 0..=w - SIDE {
                for dy in 0..SIDE {
                    for dx in 0..SIDE {
                        xs[dy * SIDE + dx] = x.get(oy + dy, ox + dx, c);
                        ys[dy * SIDE + dx] = y.get(oy + dy, ox + dx, c);
                    }
                }
                let (mx, my, vx, vy, cov) = plane_stats(&xs, &ys, Some(&win));
                acc += ssim_from_stats(mx, my, vx, vy, cov, max_value);
                windows += 1;
            }
        }
    }
    Ok(acc / windows as f64)
}

/// Batch PSNR/SSIM statistics over aligned (original, poisoned) pairs.
pub fn quality_stats(pairs: &[(&Image, &Image)], max_value: f64) -> Result<(PsnrStats, SsimStats), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let mut finite = Vec::new();
    let mut infinite = 0usize;
    let mut ssims = Vec::new();
    for (a, b) in pairs {
        match psnr(a, b, max_value)? {
            Psnr::Finite(v) => finite.push(v),
            Psnr::Infinite => infinite += 1,
        }
        ssims.push(ssim(a, b, max_value)?);
    }
    let psnr_stats = if finite.is_empty() {
        PsnrStats {
            mean: Psnr::Infinite,
            min: Psnr::Infinite,
            max: Psnr::Infinite,
            infinite_count: infinite,
            count: pairs.len(),
        }
    } else {
        PsnrStats {
            mean: Psnr::Finite(finite.iter().sum::<f64>() / finite.len() as f64),
            min: Psnr::Finite(finite.iter().cloned().fold(f64::INFINITY, f64::min)),
            max: Psnr::Finite(finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
            infinite_count: infinite,
            count: pairs.len(),
        }
    };
    let ssim_stats = SsimStats {
        mean: ssims.iter().sum::<f64>() / ssims.len() as f64,
        min: ssims.iter().cloned().fold(f64::INFINITY, f64::min),
        max: ssims.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    Ok((psnr_stats, ssim_stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvBlockConfig, Model, ModelConfig};

    /// A model whose prediction we can script: zero conv path, output biases
    /// picked so argmax is a chosen constant class.
    fn stub_model_predicting(class: usize, classes: usize) -> Model {
        let mut m = Model::init(ModelConfig {
            input_shape: (8, 8, 1),
            conv_blocks: vec![ConvBlockConfig { filters: 1 }],
            dense_hidden: 2,
            class_count: classes,
            seed: 0,
        });
        m.output.w.iter_mut().for_each(|w| *w = 0.0);
        m.output.b = vec![0.0; classes];
        m.output.b[class] = 1.0;
        m
    }

    fn imgs(n: usize) -> Vec<Image> {
        (0..n).map(|i| Image::constant(8, 8, 1, i as f64)).collect()
    }

    #[test]
    fn asr_hardwired_extremes() {
        let always_3 = stub_model_predicting(3, 10);
        let pairs: Vec<(Image, usize)> = imgs(5).into_iter().map(|i| (i, 3)).collect();
        assert_eq!(attack_success_rate(&always_3, &pairs).unwrap(), 1.0);
        let pairs: Vec<(Image, usize)> = imgs(5).into_iter().map(|i| (i, 7)).collect();
        assert_eq!(attack_success_rate(&always_3, &pairs).unwrap(), 0.0);
    }

    #[test]
    fn asr_counting_oracle_7_of_10() {
        let always_2 = stub_model_predicting(2, 10);
        let pairs: Vec<(Image, usize)> = imgs(10)
            .into_iter()
            .enumerate()
            .map(|(i, img)| (img, if i < 7 { 2 } else { 5 }))
            .collect();
        assert!((attack_success_rate(&always_2, &pairs).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn benign_accuracy_counting() {
        let always_1 = stub_model_predicting(1, 4);
        let all_right = LabeledImageSet::new(imgs(5), vec![1; 5], 4, "t");
        assert_eq!(benign_accuracy(&always_1, &all_right).unwrap(), 1.0);
        let all_wrong = LabeledImageSet::new(imgs(5), vec![0; 5], 4, "t");
        assert_eq!(benign_accuracy(&always_1, &all_wrong).unwrap(), 0.0);
        let labels: Vec<usize> = (0..100).map(|i| if i < 93 { 1 } else { 2 }).collect();
        let mixed = LabeledImageSet::new(imgs(100), labels, 4, "t");
        assert!((benign_accuracy(&always_1, &mixed).unwrap() - 0.93).abs() < 1e-12);
    }

    #[test]
    fn psnr_identical_is_infinite_sentinel() {
        let x = Image::constant(4, 4, 1, 42.0);
        let p = psnr(&x, &x, 255.0).unwrap();
        assert!(p.is_infinite());
        assert_eq!(serde_json::to_string(&p).unwrap(), "\"inf\"");
        assert_eq!(serde_json::from_str::<Psnr>("\"inf\"").unwrap(), Psnr::Infinite);
    }

    #[test]
    fn psnr_max_diff_is_zero_db() {
        let x = Image::constant(4, 4, 1, 0.0);
        let y = Image::constant(4, 4, 1, 255.0);
        assert!((psnr(&x, &y, 255.0).unwrap().unwrap()).abs() < 1e-12);
    }

    /// Uniform diff of 1: MSE = 1 → PSNR = 10·log₁₀(255²) = 48.1308 dB; the
    /// closed form is cross-checked against a direct MSE computation.
    #[test]
    fn psnr_uniform_unit_diff() {
        let x = Image::constant(6, 7, 2, 100.0);
        let y = Image::constant(6, 7, 2, 101.0);
        let direct_mse: f64 = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x.data.len() as f64;
        assert_eq!(direct_mse, 1.0);
        let expected = 10.0 * (255.0f64 * 255.0).log10();
        let got = psnr(&x, &y, 255.0).unwrap().unwrap();
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse() {
        let x = Image::constant(4, 4, 1, 100.0);
        let y1 = Image::constant(4, 4, 1, 101.0);
        let y2 = Image::constant(4, 4, 1, 103.0);
        assert!(psnr(&x, &y1, 255.0).unwrap().unwrap() > psnr(&x, &y2, 255.0).unwrap().unwrap());
    }

    #[test]
    fn ssim_identical_is_one() {
        let x = Image::from_data(5, 5, 1, (0..25).map(|i| (i * 10) as f64).collect());
        assert_eq!(ssim(&x, &x, 255.0).unwrap(), 1.0);
    }

    /// Constant 255 vs constant 0: variances and covariance vanish, so the
    /// score collapses to C₁/(255² + C₁) = 6.5025/65031.5025 ≈ 9.99954e-5.
    #[test]
    fn ssim_constant_extremes_closed_form() {
        let x = Image::constant(4, 4, 1, 255.0);
        let y = Image::constant(4, 4, 1, 0.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expected = c1 / (255.0f64 * 255.0 + c1);
        let got = ssim(&x, &y, 255.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 9.999e-5).abs() < 1e-7);
    }

    #[test]
    fn ssim_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x = Image::from_data(6, 6, 1, (0..36).map(|_| rng.gen_range(0.0..255.0)).collect());
            let y = Image::from_data(6, 6, 1, (0..36).map(|_| rng.gen_range(0.0..255.0)).collect());
            let a = ssim(&x, &y, 255.0).unwrap();
            let b = ssim(&y, &x, 255.0).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&a));
            assert!(a < 1.0, "distinct images score below 1");
        }
    }

    #[test]
    fn windowed_ssim_identity_and_fallback() {
        let x = crate::synth::generate(1, 1).images[0].clone();
        assert!((ssim_windowed(&x, &x, 255.0).unwrap() - 1.0).abs() < 1e-12);
        // smaller than the window → falls back to global
        let s = Image::constant(4, 4, 1, 10.0);
        let t = Image::constant(4, 4, 1, 20.0);
        assert_eq!(ssim_windowed(&s, &t, 255.0).unwrap(), ssim(&s, &t, 255.0).unwrap());
        // windowed tracks global's ordering on a perturbed pair
        let mut y = x.clone();
        for v in y.data.iter_mut().step_by(7) {
            *v = (*v + 30.0).min(255.0);
        }
        let w = ssim_windowed(&x, &y, 255.0).unwrap();
        assert!(w < 1.0 && w > -1.0);
    }

    #[test]
    fn quality_stats_mixes_finite_and_infinite() {
        let a = Image::constant(4, 4, 1, 10.0);
        let b = Image::constant(4, 4, 1, 11.0);
        let pairs = vec![(&a, &a), (&a, &b)];
        let (p, s) = quality_stats(&pairs, 255.0).unwrap();
        assert_eq!(p.infinite_count, 1);
        assert_eq!(p.count, 2);
        let unit = 10.0 * (255.0f64 * 255.0).log10();
        assert!((p.mean.unwrap() - unit).abs() < 1e-9);
        assert!(s.max == 1.0 && s.min < 1.0);
    }

    #[test]
    fn shape_mismatches_and_empty_sets_rejected() {
        let x = Image::zeros(4, 4, 1);
        let y = Image::zeros(5, 4, 1);
        assert!(psnr(&x, &y, 255.0).is_err());
        assert!(ssim(&x, &y, 255.0).is_err());
        let m = stub_model_predicting(0, 2);
        assert!(matches!(attack_success_rate(&m, &[]), Err(MetricError::EmptySet)));
    }
}
