//! Small image-classification dataset ingestion: IDX (MNIST container) and
//! CIFAR-10 binary batches, plus deterministic poisoning-target selection.

use std::io::{self, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("truncated file {path}: needed {needed} bytes, had {available}")]
    Truncated { path: PathBuf, needed: usize, available: usize },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("file length {len} of {path} is not a multiple of the {record}-byte record size")]
    BadRecordLength { path: PathBuf, len: usize, record: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("poison rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A labeled dataset. All images share one shape; pixel values are stored in
/// `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl LabeledImageSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_count: usize, name: &str) -> Self {
        assert_eq!(images.len(), labels.len(), "images/labels length mismatch");
        if let Some(first) = images.first() {
            assert!(images.iter().all(|i| i.shape() == first.shape()), "mixed image shapes");
        }
        assert!(labels.iter().all(|&l| l < class_count), "label out of range");
        LabeledImageSet { images, labels, class_count, name: name.to_string() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|i| i.shape())
    }

    /// The listed samples, in order, as a new set.
    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: format!("{}[subset {}]", self.name, indices.len()),
        }
    }

    /// First `n` samples (or all, if fewer) as a new set.
    pub fn take(&self, n: usize) -> LabeledImageSet {
        let n = n.min(self.len());
        LabeledImageSet {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            name: format!("{}[..{}]", self.name, n),
        }
    }

    /// Indices of samples carrying `label`.
    pub fn indices_of_class(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Samples chosen for poisoning, with the parameters that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSelection {
    /// Sorted, unique dataset indices.
    pub indices: Vec<usize>,
    pub target_class: usize,
    pub poison_rate: f64,
    pub seed: u64,
}

/// JSON manifest describing a dataset on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub shape: (usize, usize, usize),
    pub class_count: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest, DatasetError> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| DatasetError::Io(io::Error::other(e)))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self).map_err(|e| DatasetError::Io(io::Error::other(e)))?;
        Ok(())
    }

    pub fn load_train(&self) -> Result<LabeledImageSet, DatasetError> {
        load_idx(&self.train_images, &self.train_labels)
    }

    pub fn load_test(&self) -> Result<LabeledImageSet, DatasetError> {
        load_idx(&self.test_images, &self.test_labels)
    }
}

fn read_u32_be(bytes: &[u8], off: usize, path: &Path) -> Result<u32, DatasetError> {
    if bytes.len() < off + 4 {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            needed: off + 4,
            available: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Load an IDX image/label file pair (the MNIST container format).
///
/// Image magic `0x00000803`, label magic `0x00000801`, both big-endian.
/// Labels define the class count as `max(label) + 1`, with a floor of 10 so
/// MNIST subsets keep their nominal 10 classes.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledImageSet, DatasetError> {
    let img_bytes = read_file(image_path)?;
    let lbl_bytes = read_file(label_path)?;

    let img_magic = read_u32_be(&img_bytes, 0, image_path)?;
    if img_magic != IDX_IMAGE_MAGIC {
        return Err(DatasetError::BadMagic {
            path: image_path.to_path_buf(),
            expected: IDX_IMAGE_MAGIC,
            found: img_magic,
        });
    }
    let lbl_magic = read_u32_be(&lbl_bytes, 0, label_path)?;
    if lbl_magic != IDX_LABEL_MAGIC {
        return Err(DatasetError::BadMagic {
            path: label_path.to_path_buf(),
            expected: IDX_LABEL_MAGIC,
            found: lbl_magic,
        });
    }

    let n_images = read_u32_be(&img_bytes, 4, image_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, image_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, image_path)? as usize;
    let n_labels = read_u32_be(&lbl_bytes, 4, label_path)? as usize;
    if n_images != n_labels {
        return Err(DatasetError::CountMismatch { images: n_images, labels: n_labels });
    }

    let pixel_count = n_images * rows * cols;
    if img_bytes.len() < 16 + pixel_count {
        return Err(DatasetError::Truncated {
            path: image_path.to_path_buf(),
            needed: 16 + pixel_count,
            available: img_bytes.len(),
        });
    }
    if lbl_bytes.len() < 8 + n_labels {
        return Err(DatasetError::Truncated {
            path: label_path.to_path_buf(),
            needed: 8 + n_labels,
            available: lbl_bytes.len(),
        });
    }

    let mut images = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let start = 16 + i * rows * cols;
        let data = img_bytes[start..start + rows * cols].iter().map(|&b| b as f64).collect();
        images.push(Image::from_data(rows, cols, 1, data));
    }
    let labels: Vec<usize> = lbl_bytes[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().map_or(10, |m| (m + 1).max(10));

    Ok(LabeledImageSet::new(images, labels, class_count, "idx"))
}

/// Write a set back out as an IDX image/label file pair, bit-exact per the
/// container layout read by [`load_idx`]. Requires single-channel images.
pub fn write_idx(set: &LabeledImageSet, image_path: &Path, label_path: &Path) -> Result<(), DatasetError> {
    let (rows, cols, channels) = set.image_shape().unwrap_or((0, 0, 1));
    assert_eq!(channels, 1, "IDX container holds single-channel images");
    let mut img_bytes = Vec::with_capacity(16 + set.len() * rows * cols);
    img_bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img_bytes.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in &set.images {
        img_bytes.extend(img.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }
    let mut lbl_bytes = Vec::with_capacity(8 + set.len());
    lbl_bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl_bytes.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lbl_bytes.extend(set.labels.iter().map(|&l| l as u8));
    std::fs::write(image_path, img_bytes)?;
    std::fs::write(label_path, lbl_bytes)?;
    Ok(())
}

/// Load one or more CIFAR-10 binary batch files (1 label byte + 3072 pixel
/// bytes per record, channel-major R,G,B).
pub fn load_cifar10(paths: &[PathBuf]) -> Result<LabeledImageSet, DatasetError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(DatasetError::BadRecordLength {
                path: path.clone(),
                len: bytes.len(),
                record: CIFAR_RECORD_LEN,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(DatasetError::LabelOutOfRange { label, classes: 10 });
            }
            let mut img = Image::zeros(32, 32, 3);
            // record layout: 1024 red, 1024 green, 1024 blue, row-major planes
            for ch in 0..3 {
                for i in 0..1024 {
                    let (y, x) = (i / 32, i % 32);
                    img.set(y, x, ch, rec[1 + ch * 1024 + i] as f64);
                }
            }
            images.push(img);
            labels.push(label);
        }
    }
    Ok(LabeledImageSet::new(images, labels, 10, "cifar10"))
}

/// Deterministically choose poisoning targets: uniform without replacement
/// over eligible samples, `round(rate × |eligible|)` of them.
///
/// By default samples already labeled `target` are ineligible (the label flip
/// would be a no-op); pass `allow_target_class = true` to lift that.
pub fn select_poison_targets(
    set: &LabeledImageSet,
    rate: f64,
    target: usize,
    seed: u64,
    allow_target_class: bool,
) -> Result<PoisonSelection, DatasetError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DatasetError::RateOutOfRange(rate));
    }
    if target >= set.class_count {
        return Err(DatasetError::TargetOutOfRange { target, classes: set.class_count });
    }
    let mut eligible: Vec<usize> = (0..set.len())
        .filter(|&i| allow_target_class || set.labels[i] != target)
        .collect();
    let count = (rate * eligible.len() as f64).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut indices: Vec<usize> = eligible.into_iter().take(count).collect();
    indices.sort_unstable();
    Ok(PoisonSelection { indices, target_class: target, poison_rate: rate, seed })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-build an IDX pair holding one 2×2 image [0,128,255,7] labeled 3.
    fn handcrafted_idx(dir: &Path) -> (PathBuf, PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0u8, 128, 255, 7]);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&1u32.to_be_bytes());
        lbl.push(3);
        let ip = dir.join("img.idx");
        let lp = dir.join("lbl.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_handcrafted_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = handcrafted_idx(dir.path());
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.images[0].shape(), (2, 2, 1));
        assert_eq!(set.images[0].data, vec![0.0, 128.0, 255.0, 7.0]);
        assert_eq!(set.labels, vec![3]);
    }

    #[test]
    fn idx_zero_items_is_empty_not_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&0u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&0u32.to_be_bytes());
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        let set = load_idx(&ip, &lp).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn idx_bad_magic_truncated_and_mismatch_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = handcrafted_idx(dir.path());

        let mut bad = std::fs::read(&ip).unwrap();
        bad[3] = 0x99;
        let bp = dir.path().join("bad");
        std::fs::write(&bp, &bad).unwrap();
        assert!(matches!(load_idx(&bp, &lp), Err(DatasetError::BadMagic { .. })));

        let trunc = std::fs::read(&ip).unwrap()[..18].to_vec();
        let tp = dir.path().join("trunc");
        std::fs::write(&tp, trunc).unwrap();
        assert!(matches!(load_idx(&tp, &lp), Err(DatasetError::Truncated { .. })));

        let mut two_labels = std::fs::read(&lp).unwrap();
        two_labels[7] = 2;
        two_labels.push(1);
        let mp = dir.path().join("mis");
        std::fs::write(&mp, two_labels).unwrap();
        assert!(matches!(load_idx(&ip, &mp), Err(DatasetError::CountMismatch { .. })));
    }

    #[test]
    fn idx_write_read_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = handcrafted_idx(dir.path());
        let set = load_idx(&ip, &lp).unwrap();
        let ip2 = dir.path().join("i2");
        let lp2 = dir.path().join("l2");
        write_idx(&set, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
        // reloading yields an identical set
        assert_eq!(load_idx(&ip2, &lp2).unwrap(), set);
    }

    #[test]
    fn cifar_handcrafted_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = 9;
        let p = dir.path().join("batch.bin");
        std::fs::write(&p, &rec).unwrap();
        let set = load_cifar10(&[p]).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels, vec![9]);
        assert_eq!(set.images[0].shape(), (32, 32, 3));
        assert!(set.images[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar_empty_file_is_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        std::fs::write(&p, []).unwrap();
        assert!(load_cifar10(&[p]).unwrap().is_empty());
    }

    #[test]
    fn cifar_bad_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.bin");
        std::fs::write(&p, vec![0u8; 100]).unwrap();
        assert!(matches!(load_cifar10(&[p]), Err(DatasetError::BadRecordLength { .. })));
    }

    #[test]
    fn cifar_channel_major_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[1] = 10; // red plane, pixel (0,0)
        rec[1 + 1024] = 20; // green plane
        rec[1 + 2048 + 33] = 30; // blue plane, pixel (1,1)
        let p = dir.path().join("b.bin");
        std::fs::write(&p, &rec).unwrap();
        let set = load_cifar10(&[p]).unwrap();
        let img = &set.images[0];
        assert_eq!(img.get(0, 0, 0), 10.0);
        assert_eq!(img.get(0, 0, 1), 20.0);
        assert_eq!(img.get(1, 1, 2), 30.0);
    }

    fn toy_set(n: usize, target_every: usize, classes: usize) -> LabeledImageSet {
        let images = vec![Image::zeros(2, 2, 1); n];
        let labels: Vec<usize> = (0..n).map(|i| if i % target_every == 0 { 0 } else { 1 + i % (classes - 1) }).collect();
        LabeledImageSet::new(images, labels, classes, "toy")
    }

    #[test]
    fn selection_rate_zero_is_empty() {
        let set = toy_set(100, 10, 10);
        let sel = select_poison_targets(&set, 0.0, 0, 1, false).unwrap();
        assert!(sel.indices.is_empty());
    }

    #[test]
    fn selection_rate_one_takes_all_non_target() {
        let set = toy_set(100, 10, 10);
        let sel = select_poison_targets(&set, 1.0, 0, 1, false).unwrap();
        let expected: Vec<usize> = (0..100).filter(|&i| set.labels[i] != 0).collect();
        assert_eq!(sel.indices, expected);
    }

    #[test]
    fn selection_count_matches_filter_then_count_oracle() {
        // 100 samples, 10 labeled target, rate 0.05 → round(0.05×90) = 5
        let set = toy_set(100, 10, 10);
        let eligible = set.labels.iter().filter(|&&l| l != 0).count();
        assert_eq!(eligible, 90);
        let sel = select_poison_targets(&set, 0.05, 0, 42, false).unwrap();
        assert_eq!(sel.indices.len(), (0.05f64 * 90.0).round() as usize);
        assert_eq!(sel.indices.len(), 5);
        assert!(sel.indices.iter().all(|&i| set.labels[i] != 0));
    }

    #[test]
    fn selection_is_deterministic_in_seed() {
        let set = toy_set(200, 7, 10);
        let a = select_poison_targets(&set, 0.3, 0, 99, false).unwrap();
        let b = select_poison_targets(&set, 0.3, 0, 99, false).unwrap();
        let c = select_poison_targets(&set, 0.3, 0, 100, false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn selection_allow_target_class_flag() {
        let set = toy_set(100, 10, 10);
        let sel = select_poison_targets(&set, 1.0, 0, 1, true).unwrap();
        assert_eq!(sel.indices.len(), 100);
    }

    #[test]
    fn selection_rejects_bad_rate_and_target() {
        let set = toy_set(10, 2, 10);
        assert!(matches!(select_poison_targets(&set, 1.5, 0, 1, false), Err(DatasetError::RateOutOfRange(_))));
        assert!(matches!(select_poison_targets(&set, 0.5, 10, 1, false), Err(DatasetError::TargetOutOfRange { .. })));
    }
}
