//! Deterministic synthetic digit dataset.
//!
//! Renders 28×28 grayscale digit glyphs (10 classes) from a fixed 5×7 font
//! with seeded jitter in position, stroke intensity, scale, and background
//! noise. The output is shape- and format-compatible with MNIST (IDX files,
//! values 0–255), so every pipeline stage that runs on MNIST runs on it
//! unchanged when the real files are unavailable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::datasets::{write_idx, DatasetError, DatasetManifest, LabeledImageSet};
use crate::image::Image;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

#[rustfmt::skip]
const FONT: [[u8; GLYPH_H]; 10] = [
    // one byte per row, low 5 bits are pixels (MSB-first within the row)
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Render one digit sample. Deterministic given `(digit, rng state)`.
fn render_digit(digit: usize, rng: &mut ChaCha20Rng) -> Image {
    let mut img = Image::zeros(28, 28, 1);

    // faint background noise floor (scan texture; real digit scans are
    // near-black outside the stroke)
    for v in &mut img.data {
        *v = rng.gen_range(0.0..6.0);
    }

    // glyph at a jittered scale in [2.2, 2.9] pixels per font cell
    let scale: f64 = rng.gen_range(2.2..2.9);
    let gw = GLYPH_W as f64 * scale;
    let gh = GLYPH_H as f64 * scale;
    let intensity: f64 = rng.gen_range(230.0..255.0);

    let mut bitmap = vec![0.0f64; GLYPH_W * GLYPH_H];
    for (y, row) in FONT[digit].iter().enumerate() {
        for x in 0..GLYPH_W {
            if row >> (GLYPH_W - 1 - x) & 1 == 1 {
                bitmap[y * GLYPH_W + x] = 1.0;
            }
        }
    }

    // near-centered subpixel placement, like centroid-normalized scans:
    // continuous center jitter so intra-class variation forms a smooth
    // manifold instead of discrete pixel-grid modes, clamped so the glyph
    // keeps a ≥2px margin on every side (the bottom-right corner stays free)
    let place = |len: f64, rng: &mut ChaCha20Rng| -> f64 {
        let jitter: f64 = rng.gen_range(-0.75..0.75);
        (14.0 + jitter).clamp(2.0 + len / 2.0, 25.0 - len / 2.0)
    };
    let cy = place(gh, rng);
    let cx = place(gw, rng);
    let top = cy - gh / 2.0;
    let left = cx - gw / 2.0;

    // resample the bitmap bilinearly at each covered canvas pixel
    let sample = |u: f64, v: f64| -> f64 {
        // u, v in font-cell units; cell centers at integer + 0.5
        let fu = u - 0.5;
        let fv = v - 0.5;
        let (y0, x0) = (fu.floor() as i64, fv.floor() as i64);
        let (dy, dx) = (fu - y0 as f64, fv - x0 as f64);
        let at = |y: i64, x: i64| -> f64 {
            if (0..GLYPH_H as i64).contains(&y) && (0..GLYPH_W as i64).contains(&x) {
                bitmap[y as usize * GLYPH_W + x as usize]
            } else {
                0.0
            }
        };
        at(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + at(y0, x0 + 1) * (1.0 - dy) * dx
            + at(y0 + 1, x0) * dy * (1.0 - dx)
            + at(y0 + 1, x0 + 1) * dy * dx
    };
    for y in 0..28 {
        for x in 0..28 {
            let u = (y as f64 + 0.5 - top) / scale;
            let v = (x as f64 + 0.5 - left) / scale;
            if !(0.0..GLYPH_H as f64).contains(&u) || !(0.0..GLYPH_W as f64).contains(&v) {
                continue;
            }
            let g = sample(u, v);
            if g > 0.0 {
                let jitter: f64 = rng.gen_range(0.85..1.0);
                let i = img.idx(y, x, 0);
                img.data[i] = (img.data[i] + g * intensity * jitter).min(255.0);
            }
        }
    }
    img
}

/// Generate `n` samples with labels cycling through the 10 digits so classes
/// stay balanced. Deterministic in `seed`.
pub fn generate(n: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        images.push(render_digit(digit, &mut rng));
        labels.push(digit);
    }
    LabeledImageSet::new(images, labels, 10, "synth-digits")
}

/// Write train/test IDX pairs plus a JSON manifest into `dir`.
pub fn write_dataset(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<DatasetManifest, DatasetError> {
    std::fs::create_dir_all(dir)?;
    let train = generate(train_n, seed);
    let test = generate(test_n, seed.wrapping_add(0x5EED));
    let ti = dir.join("train-images.idx");
    let tl = dir.join("train-labels.idx");
    let si = dir.join("test-images.idx");
    let sl = dir.join("test-labels.idx");
    write_idx(&train, &ti, &tl)?;
    write_idx(&test, &si, &sl)?;
    let manifest = DatasetManifest {
        name: "synth-digits".into(),
        train_images: ti,
        train_labels: tl,
        test_images: si,
        test_labels: sl,
        shape: (28, 28, 1),
        class_count: 10,
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest).expect("manifest serialization");
    Ok(manifest)
}
