//! Orthonormal 2-D type-II DCT and its exact inverse, per channel.
//!
//! Per-axis scaling is √(1/N) for k = 0 and √(2/N) otherwise, so the
//! transform matrix is orthogonal and `idct2(dct2(x)) == x` up to floating
//! point. The transform runs over the whole image (no 8×8 blocking).

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use crate::image::{Image, ImageError};

/// Full-image DCT coefficients, same shape as the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Layout matches [`Image`]: `coefficients[(u*width + v)*channels + c]`.
    pub coefficients: Vec<f64>,
}

impl FrequencyMap {
    #[inline]
    pub fn idx(&self, u: usize, v: usize, c: usize) -> usize {
        (u * self.width + v) * self.channels + c
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize, c: usize) -> f64 {
        self.coefficients[(u * self.width + v) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: usize, val: f64) {
        let i = self.idx(u, v, c);
        self.coefficients[i] = val;
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Dump coefficients as CSV rows `channel,u,v,value`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("channel,u,v,value\n");
        for c in 0..self.channels {
            for u in 0..self.height {
                for v in 0..self.width {
                    out.push_str(&format!("{c},{u},{v},{}\n", self.get(u, v, c)));
                }
            }
        }
        std::fs::write(path, out)
    }

    /// Log-magnitude heatmap (per channel, max-scaled to 0–255) as PGM/PPM.
    pub fn write_log_magnitude(&self, path: &Path) -> Result<(), ImageError> {
        let mut img = Image::zeros(self.height, self.width, self.channels);
        for c in 0..self.channels {
            let mut maxv = 0.0f64;
            for i in 0..self.height * self.width {
                let m = (1.0 + self.coefficients[i * self.channels + c].abs()).ln();
                img.data[i * self.channels + c] = m;
                maxv = maxv.max(m);
            }
            if maxv > 0.0 {
                for i in 0..self.height * self.width {
                    img.data[i * self.channels + c] *= 255.0 / maxv;
                }
            }
        }
        img.write_netpbm(path)
    }
}

/// Orthonormal DCT-II basis for size `n`: `basis[k*n + i] = s(k)·cos(π(2i+1)k/2n)`.
fn basis(n: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut m = vec![0.0; n * n];
            for k in 0..n {
                let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                for i in 0..n {
                    m[k * n + i] =
                        s * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
                }
            }
            Arc::new(m)
        })
        .clone()
}

/// `out[k][x] = Σ_y b[k][y]·plane[y][x]` — apply a transform matrix down the
/// rows of an h×w plane.
fn apply_rows(b: &[f64], plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for k in 0..h {
        let row = &b[k * h..(k + 1) * h];
        let dst = &mut out[k * w..(k + 1) * w];
        for (y, &bk) in row.iter().enumerate() {
            let src = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += bk * src[x];
            }
        }
    }
    out
}

/// Same but transposed: `out[y][x] = Σ_k b[k][y]·plane[k][x]`.
fn apply_rows_t(b: &[f64], plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for k in 0..h {
        let row = &b[k * h..(k + 1) * h];
        let src = &plane[k * w..(k + 1) * w];
        for (y, &bk) in row.iter().enumerate() {
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += bk * src[x];
            }
        }
    }
    out
}

fn transform_plane(plane: &[f64], h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let bh = basis(h);
    let bw = basis(w);
    if !inverse {
        // rows (length w) then columns (length h)
        let cols = apply_rows(&bh, plane, h, w);
        transpose_apply(&bw, &cols, h, w, false)
    } else {
        let cols = apply_rows_t(&bh, plane, h, w);
        transpose_apply(&bw, &cols, h, w, true)
    }
}

/// Apply the length-`w` transform along each row of an h×w plane.
fn transpose_apply(b: &[f64], plane: &[f64], h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        let dst = &mut out[y * w..(y + 1) * w];
        for k in 0..w {
            let row = &b[k * w..(k + 1) * w];
            if !inverse {
                let mut acc = 0.0;
                for i in 0..w {
                    acc += row[i] * src[i];
                }
                dst[k] = acc;
            } else {
                let v = src[k];
                for i in 0..w {
                    dst[i] += row[i] * v;
                }
            }
        }
    }
    out
}

/// Forward 2-D orthonormal DCT, per channel.
pub fn dct2(image: &Image) -> FrequencyMap {
    let (h, w, c) = image.shape();
    let mut out = FrequencyMap { height: h, width: w, channels: c, coefficients: vec![0.0; h * w * c] };
    for ch in 0..c {
        let plane = image.channel(ch);
        let coef = transform_plane(&plane, h, w, false);
        for (i, &v) in coef.iter().enumerate() {
            out.coefficients[i * c + ch] = v;
        }
    }
    out
}

/// Inverse of [`dct2`]. Output is real-valued and not clipped to `[0, 255]`.
pub fn idct2(freq: &FrequencyMap) -> Image {
    let (h, w, c) = freq.shape();
    let mut out = Image::zeros(h, w, c);
    for ch in 0..c {
        let plane: Vec<f64> = (0..h * w).map(|i| freq.coefficients[i * c + ch]).collect();
        let pix = transform_plane(&plane, h, w, true);
        out.set_channel(ch, &pix);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Naive O(N⁴) orthonormal DCT — the independent oracle.
    fn naive_dct2(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
        let s = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let mut out = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += plane[y * w + x]
                            * (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                            * (std::f64::consts::PI * (2 * x + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    }
                }
                out[u * w + v] = s(u, h) * s(v, w) * acc;
            }
        }
        out
    }

    /// Naive O(N⁴) inverse summation oracle.
    fn naive_idct2(coef: &[f64], h: usize, w: usize) -> Vec<f64> {
        let s = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        acc += s(u, h) * s(v, w) * coef[u * w + v]
                            * (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                            * (std::f64::consts::PI * (2 * x + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha20Rng) -> Image {
        Image::from_data(h, w, c, (0..h * w * c).map(|_| rng.gen_range(0.0..255.0)).collect())
    }

    #[test]
    fn constant_image_has_only_dc() {
        let c = 37.0;
        let n = 8;
        let img = Image::constant(n, n, 1, c);
        let f = dct2(&img);
        assert!((f.get(0, 0, 0) - c * n as f64).abs() < 1e-9);
        for u in 0..n {
            for v in 0..n {
                if (u, v) != (0, 0) {
                    assert!(f.get(u, v, 0).abs() < 1e-9, "AC coefficient ({u},{v}) nonzero");
                }
            }
        }
    }

    #[test]
    fn impulse_matches_naive_oracle() {
        let mut img = Image::zeros(4, 4, 1);
        img.set(0, 0, 0, 1.0);
        let f = dct2(&img);
        let oracle = naive_dct2(&img.channel(0), 4, 4);
        for i in 0..16 {
            assert!((f.coefficients[i] - oracle[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dct_matches_naive_oracle_8x8() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let img = random_image(8, 8, 1, &mut rng);
        let f = dct2(&img);
        let oracle = naive_dct2(&img.channel(0), 8, 8);
        for i in 0..64 {
            assert!((f.coefficients[i] - oracle[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn idct_matches_naive_oracle_8x8() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let coef: Vec<f64> = (0..64).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let f = FrequencyMap { height: 8, width: 8, channels: 1, coefficients: coef.clone() };
        let img = idct2(&f);
        let oracle = naive_idct2(&coef, 8, 8);
        for i in 0..64 {
            assert!((img.data[i] - oracle[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rectangular_matches_naive_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let img = random_image(5, 9, 1, &mut rng);
        let f = dct2(&img);
        let oracle = naive_dct2(&img.channel(0), 5, 9);
        for i in 0..45 {
            assert!((f.coefficients[i] - oracle[i]).abs() < 1e-8);
        }
        assert!(idct2(&f).max_abs_diff(&img) < 1e-9);
    }

    #[test]
    fn dc_only_map_gives_constant_image() {
        let n = 6;
        let v = 42.0;
        let mut f = FrequencyMap { height: n, width: n, channels: 1, coefficients: vec![0.0; n * n] };
        f.set(0, 0, 0, v);
        let img = idct2(&f);
        let expected = v / n as f64;
        assert!(img.data.iter().all(|&p| (p - expected).abs() < 1e-12));
    }

    #[test]
    fn round_trip_random_images() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..20 {
            let img = random_image(32, 32, 3, &mut rng);
            assert!(idct2(&dct2(&img)).max_abs_diff(&img) < 1e-6);
        }
    }

    #[test]
    fn parseval_energy_preserved() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let img = random_image(32, 32, 1, &mut rng);
        let f = dct2(&img);
        let ep: f64 = img.data.iter().map(|v| v * v).sum();
        let ef: f64 = f.coefficients.iter().map(|v| v * v).sum();
        assert!(((ep - ef) / ep).abs() < 1e-6);
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = random_image(16, 16, 1, &mut rng);
        let y = random_image(16, 16, 1, &mut rng);
        let (a, b) = (2.5, -0.75);
        let combo = Image::from_data(
            16, 16, 1,
            x.data.iter().zip(&y.data).map(|(&p, &q)| a * p + b * q).collect(),
        );
        let fc = dct2(&combo);
        let fx = dct2(&x);
        let fy = dct2(&y);
        for i in 0..fc.coefficients.len() {
            let expect = a * fx.coefficients[i] + b * fy.coefficients[i];
            assert!((fc.coefficients[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn one_pixel_image_works() {
        let img = Image::constant(1, 1, 1, 200.0);
        let f = dct2(&img);
        assert!((f.get(0, 0, 0) - 200.0).abs() < 1e-12);
        assert!(idct2(&f).max_abs_diff(&img) < 1e-12);
    }
}
