//! Dense H×W×C image tensors and zero-dependency PGM/PPM dumps.
//!
//! Pixel values are stored as `f64` in the `[0, 255]` range throughout the
//! pipeline; conversion to `[0, 1]` happens only inside model input
//! normalization. Intermediate results (e.g. inverse-transform output before
//! pixel restriction) may temporarily leave the range.

use std::io::{self, BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("shape mismatch: {0}x{1}x{2} vs {3}x{4}x{5}")]
    ShapeMismatch(usize, usize, usize, usize, usize, usize),
    #[error("unsupported channel count {0} for {1} output")]
    UnsupportedChannels(usize, &'static str),
    #[error("bad netpbm header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense image with shape `(height, width, channels)`, row-major with the
/// channel index fastest: `data[(y*width + x)*channels + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "data length must match shape");
        Image { height, width, channels, data }
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::ShapeMismatch(
                self.height, self.width, self.channels,
                other.height, other.width, other.channels,
            ))
        }
    }

    /// Clamp every value into `[lo, hi]` in place.
    pub fn clip(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// Extract one channel as a flat H×W plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        assert!(c < self.channels);
        (0..self.height * self.width)
            .map(|i| self.data[i * self.channels + c])
            .collect()
    }

    /// Overwrite one channel from a flat H×W plane.
    pub fn set_channel(&mut self, c: usize, plane: &[f64]) {
        assert!(c < self.channels);
        assert_eq!(plane.len(), self.height * self.width);
        for (i, &v) in plane.iter().enumerate() {
            self.data[i * self.channels + c] = v;
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Write as binary PGM (1 channel) or PPM (3 channels), values rounded
    /// and clamped to `[0, 255]`.
    pub fn write_netpbm(&self, path: &Path) -> Result<(), ImageError> {
        let mut out: Vec<u8> = Vec::with_capacity(self.data.len() + 32);
        match self.channels {
            1 => out.extend_from_slice(
                format!("P5\n{} {}\n255\n", self.width, self.height).as_bytes(),
            ),
            3 => out.extend_from_slice(
                format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes(),
            ),
            n => return Err(ImageError::UnsupportedChannels(n, "netpbm")),
        }
        out.extend(self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Read a binary PGM/PPM file written by [`Image::write_netpbm`].
    pub fn read_netpbm(path: &Path) -> Result<Image, ImageError> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        // magic, dims, maxval: three whitespace-separated tokens groups
        let mut tokens: Vec<String> = Vec::new();
        while tokens.len() < 4 {
            header.clear();
            reader.read_line(&mut header)?;
            if header.is_empty() {
                return Err(ImageError::BadHeader("truncated header".into()));
            }
            let line = header.split('#').next().unwrap_or("");
            tokens.extend(line.split_whitespace().map(|s| s.to_string()));
        }
        let channels = match tokens[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(ImageError::BadHeader(format!("magic {m}"))),
        };
        let width: usize = tokens[1].parse().map_err(|_| ImageError::BadHeader("width".into()))?;
        let height: usize = tokens[2].parse().map_err(|_| ImageError::BadHeader("height".into()))?;
        if tokens[3] != "255" {
            return Err(ImageError::BadHeader(format!("maxval {}", tokens[3])));
        }
        let mut bytes = vec![0u8; width * height * channels];
        reader.read_exact(&mut bytes)?;
        Ok(Image::from_data(height, width, channels, bytes.iter().map(|&b| b as f64).collect()))
    }
}

/// Bilinear resize of a single-channel plane; used for saliency upsampling.
///
/// Corner-aligned sampling so a 1×1 plane broadcasts and corners map exactly.
pub fn bilinear_resize(plane: &[f64], h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h_in * w_in);
    assert!(h_in >= 1 && w_in >= 1 && h_out >= 1 && w_out >= 1);
    let mut out = vec![0.0; h_out * w_out];
    let sy = if h_out > 1 { (h_in - 1) as f64 / (h_out - 1) as f64 } else { 0.0 };
    let sx = if w_out > 1 { (w_in - 1) as f64 / (w_out - 1) as f64 } else { 0.0 };
    for oy in 0..h_out {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h_in - 1);
        let dy = fy - y0 as f64;
        for ox in 0..w_out {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w_in - 1);
            let dx = fx - x0 as f64;
            let top = plane[y0 * w_in + x0] * (1.0 - dx) + plane[y0 * w_in + x1] * dx;
            let bot = plane[y1 * w_in + x0] * (1.0 - dx) + plane[y1 * w_in + x1] * dx;
            out[oy * w_out + ox] = top * (1.0 - dy) + bot * dy;
        }
    }
    out
}

/// Write a side-by-side dump of (original, poisoned, ×10 amplified diff) for
/// visual inspection.
pub fn write_comparison_strip(original: &Image, poisoned: &Image, path: &Path) -> Result<(), ImageError> {
    original.check_same_shape(poisoned)?;
    let (h, w, c) = original.shape();
    let gap = 2;
    let mut strip = Image::constant(h, 3 * w + 2 * gap, c, 128.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                strip.set(y, x, ch, original.get(y, x, ch));
                strip.set(y, x + w + gap, ch, poisoned.get(y, x, ch));
                let d = (poisoned.get(y, x, ch) - original.get(y, x, ch)).abs() * 10.0;
                strip.set(y, x + 2 * (w + gap), ch, d);
            }
        }
    }
    strip.write_netpbm(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_layout_is_channel_fastest() {
        let mut img = Image::zeros(2, 3, 2);
        img.set(1, 2, 1, 9.0);
        assert_eq!(img.data[(1 * 3 + 2) * 2 + 1], 9.0);
    }

    #[test]
    fn netpbm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_data(2, 2, 1, vec![0.0, 128.0, 255.0, 7.0]);
        let p = dir.path().join("t.pgm");
        img.write_netpbm(&p).unwrap();
        let back = Image::read_netpbm(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let plane = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_resize(&plane, 2, 2, 2, 2), plane);
        let up = bilinear_resize(&[5.0], 1, 1, 4, 4);
        assert!(up.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn bilinear_corners_align() {
        let plane = vec![0.0, 10.0, 20.0, 30.0];
        let up = bilinear_resize(&plane, 2, 2, 5, 5);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[4], 10.0);
        assert_eq!(up[20], 20.0);
        assert_eq!(up[24], 30.0);
        // center is the mean of the four corners
        assert!((up[12] - 15.0).abs() < 1e-12);
    }
}
