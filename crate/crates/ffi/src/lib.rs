//! C bindings for the spectral backdoor toolkit.
//!
//! Conventions:
//! - Every object crosses the boundary as an opaque pointer created by a
//!   `*_new`/`*_load`-style constructor and released by the matching `*_free`.
//! - Every fallible call returns a [`ThreesStatus`]; on failure a thread-local
//!   message is readable via [`threes_last_error`].
//! - Pixel buffers are row-major `f64` in `[0,255]`, laid out as
//!   `(y * width + x) * channels + channel`.
//! - All pointers must be valid for the stated lengths; passing NULL where a
//!   value is required yields `NullPointer`, never a crash.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use threes_core::datasets::LabeledImageSet;
use threes_core::image::Image;
use threes_core::metrics;
use threes_core::nn::{train, Model, ModelConfig, TrainConfig};
use threes_core::poison::{poison_dataset, poison_sample, PoisonConfig};
use threes_core::synth;
use threes_core::trigger::{extract_trigger, ThresholdMode, TriggerSpec};

// ---------------------------------------------------------------- status

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreesStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// An argument was out of range or inconsistent.
    InvalidArgument = 2,
    /// File could not be read or written.
    Io = 3,
    /// The operation ran but could not produce a result
    /// (e.g. no frequency passed the extraction threshold).
    Failed = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let safe = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = safe);
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never NULL.
#[no_mangle]
pub extern "C" fn threes_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

macro_rules! not_null {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error(concat!(stringify!($ptr), " is NULL"));
                return ThreesStatus::NullPointer;
            }
        }
    };
}

macro_rules! out_param {
    ($ptr:expr) => {
        match unsafe { $ptr.as_mut() } {
            Some(r) => r,
            None => {
                set_error(concat!(stringify!($ptr), " is NULL"));
                return ThreesStatus::NullPointer;
            }
        }
    };
}

macro_rules! try_ffi {
    ($expr:expr, $status:expr) => {
        match $expr {
            Ok(v) => v,
            Err(e) => {
                set_error(&e.to_string());
                return $status;
            }
        }
    };
}

fn path_arg(ptr: *const c_char) -> Option<PathBuf> {
    if ptr.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(ptr) };
    Some(PathBuf::from(s.to_string_lossy().into_owned()))
}

// ---------------------------------------------------------------- handles

/// Opaque labeled image set.
pub struct ThreesDataset(LabeledImageSet);
/// Opaque trained classifier.
pub struct ThreesModel(Model);
/// Opaque extracted trigger.
pub struct ThreesTrigger(TriggerSpec);

/// Release a dataset handle. NULL is accepted and ignored.
#[no_mangle]
pub extern "C" fn threes_dataset_free(handle: *mut ThreesDataset) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Release a model handle. NULL is accepted and ignored.
#[no_mangle]
pub extern "C" fn threes_model_free(handle: *mut ThreesModel) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Release a trigger handle. NULL is accepted and ignored.
#[no_mangle]
pub extern "C" fn threes_trigger_free(handle: *mut ThreesTrigger) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

// ---------------------------------------------------------------- dataset

/// Generate `n` synthetic digit samples (28×28×1, 10 balanced classes).
#[no_mangle]
pub extern "C" fn threes_dataset_generate(
    n: usize,
    seed: u64,
    out: *mut *mut ThreesDataset,
) -> ThreesStatus {
    let out = out_param!(out);
    if n == 0 {
        set_error("n must be positive");
        return ThreesStatus::InvalidArgument;
    }
    *out = Box::into_raw(Box::new(ThreesDataset(synth::generate(n, seed))));
    ThreesStatus::Ok
}

/// Load an IDX image/label file pair (the MNIST container format).
#[no_mangle]
pub extern "C" fn threes_dataset_load_idx(
    image_path: *const c_char,
    label_path: *const c_char,
    out: *mut *mut ThreesDataset,
) -> ThreesStatus {
    let out = out_param!(out);
    let (Some(ip), Some(lp)) = (path_arg(image_path), path_arg(label_path)) else {
        set_error("image_path / label_path is NULL");
        return ThreesStatus::NullPointer;
    };
    let set = try_ffi!(threes_core::datasets::load_idx(&ip, &lp), ThreesStatus::Io);
    *out = Box::into_raw(Box::new(ThreesDataset(set)));
    ThreesStatus::Ok
}

#[no_mangle]
pub extern "C" fn threes_dataset_len(dataset: *const ThreesDataset) -> usize {
    unsafe { dataset.as_ref() }.map_or(0, |d| d.0.len())
}

/// Image dimensions of the set; all-zero for an empty set.
#[no_mangle]
pub extern "C" fn threes_dataset_shape(
    dataset: *const ThreesDataset,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> ThreesStatus {
    let d = not_null!(dataset);
    let h = out_param!(height);
    let w = out_param!(width);
    let c = out_param!(channels);
    let (sh, sw, sc) = d.0.image_shape().unwrap_or((0, 0, 0));
    (*h, *w, *c) = (sh, sw, sc);
    ThreesStatus::Ok
}

/// Copy sample `index` into `pixels` (length `pixels_len` must equal
/// height·width·channels) and its label into `label`.
#[no_mangle]
pub extern "C" fn threes_dataset_sample(
    dataset: *const ThreesDataset,
    index: usize,
    pixels: *mut f64,
    pixels_len: usize,
    label: *mut usize,
) -> ThreesStatus {
    let d = not_null!(dataset);
    let label = out_param!(label);
    if pixels.is_null() {
        set_error("pixels is NULL");
        return ThreesStatus::NullPointer;
    }
    if index >= d.0.len() {
        set_error("sample index out of range");
        return ThreesStatus::InvalidArgument;
    }
    let img = &d.0.images[index];
    if pixels_len != img.data.len() {
        set_error("pixels_len does not match the image size");
        return ThreesStatus::InvalidArgument;
    }
    unsafe { std::ptr::copy_nonoverlapping(img.data.as_ptr(), pixels, pixels_len) };
    *label = d.0.labels[index];
    ThreesStatus::Ok
}

// ---------------------------------------------------------------- model

/// Training options mirrored across the boundary.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ThreesTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Train the standard small CNN (2 conv blocks + dense layer) on `dataset`.
#[no_mangle]
pub extern "C" fn threes_model_train(
    dataset: *const ThreesDataset,
    options: *const ThreesTrainOptions,
    out: *mut *mut ThreesModel,
) -> ThreesStatus {
    let d = not_null!(dataset);
    let opt = not_null!(options);
    let out = out_param!(out);
    let Some(shape) = d.0.image_shape() else {
        set_error("dataset is empty");
        return ThreesStatus::InvalidArgument;
    };
    if opt.batch_size == 0 || !opt.learning_rate.is_finite() || opt.learning_rate <= 0.0 {
        set_error("batch_size must be positive and learning_rate a positive finite number");
        return ThreesStatus::InvalidArgument;
    }
    let model = Model::init(ModelConfig::desk(shape, d.0.class_count, opt.seed));
    let cfg = TrainConfig {
        learning_rate: opt.learning_rate,
        batch_size: opt.batch_size,
        epochs: opt.epochs,
        seed: opt.seed,
    };
    let (trained, _) = try_ffi!(train(&model, &d.0, &cfg), ThreesStatus::Failed);
    *out = Box::into_raw(Box::new(ThreesModel(trained)));
    ThreesStatus::Ok
}

#[no_mangle]
pub extern "C" fn threes_model_save(
    model: *const ThreesModel,
    path: *const c_char,
) -> ThreesStatus {
    let m = not_null!(model);
    let Some(p) = path_arg(path) else {
        set_error("path is NULL");
        return ThreesStatus::NullPointer;
    };
    try_ffi!(m.0.save_checkpoint(&p), ThreesStatus::Io);
    ThreesStatus::Ok
}

#[no_mangle]
pub extern "C" fn threes_model_load(
    path: *const c_char,
    out: *mut *mut ThreesModel,
) -> ThreesStatus {
    let out = out_param!(out);
    let Some(p) = path_arg(path) else {
        set_error("path is NULL");
        return ThreesStatus::NullPointer;
    };
    let model = try_ffi!(Model::load_checkpoint(&p), ThreesStatus::Io);
    *out = Box::into_raw(Box::new(ThreesModel(model)));
    ThreesStatus::Ok
}

/// Classify one image; `pixels` is height·width·channels values in [0,255].
#[no_mangle]
pub extern "C" fn threes_model_predict(
    model: *const ThreesModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out_class: *mut usize,
) -> ThreesStatus {
    let m = not_null!(model);
    let out_class = out_param!(out_class);
    if pixels.is_null() {
        set_error("pixels is NULL");
        return ThreesStatus::NullPointer;
    }
    let len = height * width * channels;
    if len == 0 {
        set_error("image dimensions must be positive");
        return ThreesStatus::InvalidArgument;
    }
    let data = unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec();
    let img = Image::from_data(height, width, channels, data);
    *out_class = try_ffi!(m.0.predict_class(&img), ThreesStatus::Failed);
    ThreesStatus::Ok
}

/// Fraction of `dataset` classified correctly.
#[no_mangle]
pub extern "C" fn threes_model_accuracy(
    model: *const ThreesModel,
    dataset: *const ThreesDataset,
    out_accuracy: *mut f64,
) -> ThreesStatus {
    let m = not_null!(model);
    let d = not_null!(dataset);
    let out = out_param!(out_accuracy);
    *out = try_ffi!(metrics::benign_accuracy(&m.0, &d.0), ThreesStatus::Failed);
    ThreesStatus::Ok
}

// ---------------------------------------------------------------- trigger

/// Threshold interpretation for trigger extraction.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreesThresholdMode {
    /// Compare |F_ori − F_tail| against delta directly.
    Absolute = 0,
    /// Compare the difference relative to |F_ori|.
    Relative = 1,
}

/// Extract a spectral trigger from `sample_ids` (indices into `dataset`,
/// `sample_count` of them) toward `target_class`.
#[no_mangle]
pub extern "C" fn threes_trigger_extract(
    model: *const ThreesModel,
    dataset: *const ThreesDataset,
    sample_ids: *const usize,
    sample_count: usize,
    target_class: usize,
    delta: f64,
    mode: ThreesThresholdMode,
    out: *mut *mut ThreesTrigger,
) -> ThreesStatus {
    let m = not_null!(model);
    let d = not_null!(dataset);
    let out = out_param!(out);
    if sample_ids.is_null() {
        set_error("sample_ids is NULL");
        return ThreesStatus::NullPointer;
    }
    if sample_count == 0 {
        set_error("sample_count must be positive");
        return ThreesStatus::InvalidArgument;
    }
    let ids = unsafe { std::slice::from_raw_parts(sample_ids, sample_count) };
    if let Some(&bad) = ids.iter().find(|&&i| i >= d.0.len()) {
        set_error(&format!("sample id {bad} out of range"));
        return ThreesStatus::InvalidArgument;
    }
    let samples: Vec<Image> = ids.iter().map(|&i| d.0.images[i].clone()).collect();
    let mode = match mode {
        ThreesThresholdMode::Absolute => ThresholdMode::Absolute,
        ThreesThresholdMode::Relative => ThresholdMode::Relative,
    };
    let (spec, _) = try_ffi!(
        extract_trigger(&m.0, &samples, ids, target_class, delta, mode),
        ThreesStatus::Failed
    );
    *out = Box::into_raw(Box::new(ThreesTrigger(spec)));
    ThreesStatus::Ok
}

/// Number of frequency slots the trigger occupies.
#[no_mangle]
pub extern "C" fn threes_trigger_len(trigger: *const ThreesTrigger) -> usize {
    unsafe { trigger.as_ref() }.map_or(0, |t| t.0.entries.len())
}

#[no_mangle]
pub extern "C" fn threes_trigger_save(
    trigger: *const ThreesTrigger,
    path: *const c_char,
) -> ThreesStatus {
    let t = not_null!(trigger);
    let Some(p) = path_arg(path) else {
        set_error("path is NULL");
        return ThreesStatus::NullPointer;
    };
    try_ffi!(t.0.save(&p), ThreesStatus::Io);
    ThreesStatus::Ok
}

#[no_mangle]
pub extern "C" fn threes_trigger_load(
    path: *const c_char,
    out: *mut *mut ThreesTrigger,
) -> ThreesStatus {
    let out = out_param!(out);
    let Some(p) = path_arg(path) else {
        set_error("path is NULL");
        return ThreesStatus::NullPointer;
    };
    let spec = try_ffi!(TriggerSpec::load(&p), ThreesStatus::Io);
    *out = Box::into_raw(Box::new(ThreesTrigger(spec)));
    ThreesStatus::Ok
}

// ---------------------------------------------------------------- poison

/// Poisoning options mirrored across the boundary.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ThreesPoisonOptions {
    /// Fraction of eligible samples to poison, in [0,1].
    pub poison_rate: f64,
    /// Spectral blend weight in [0,1].
    pub rho: f64,
    /// Per-pixel deviation cap in [0,255] units.
    pub tau: f64,
    pub target_class: usize,
    pub seed: u64,
}

fn poison_config(opt: &ThreesPoisonOptions) -> PoisonConfig {
    PoisonConfig {
        poison_rate: opt.poison_rate,
        rho: opt.rho,
        tau: opt.tau,
        target_class: opt.target_class,
        seed: opt.seed,
        ..PoisonConfig::default()
    }
}

/// Build a poisoned copy of `dataset`: selected samples carry the trigger and
/// the target label; everything else is untouched.
#[no_mangle]
pub extern "C" fn threes_poison_dataset(
    dataset: *const ThreesDataset,
    trigger: *const ThreesTrigger,
    options: *const ThreesPoisonOptions,
    out: *mut *mut ThreesDataset,
    out_poisoned_count: *mut usize,
) -> ThreesStatus {
    let d = not_null!(dataset);
    let t = not_null!(trigger);
    let opt = not_null!(options);
    let out = out_param!(out);
    let cfg = poison_config(opt);
    if cfg.validate().is_err() || !(0.0..=1.0).contains(&cfg.poison_rate) {
        set_error("poison options out of range");
        return ThreesStatus::InvalidArgument;
    }
    let poisoned = try_ffi!(poison_dataset(&d.0, &t.0, &cfg), ThreesStatus::Failed);
    if let Some(c) = unsafe { out_poisoned_count.as_mut() } {
        *c = poisoned.poisoned_indices.len();
    }
    *out = Box::into_raw(Box::new(ThreesDataset(poisoned.set)));
    ThreesStatus::Ok
}

/// Poison one image in place: embed the trigger spectrally, then cap every
/// pixel change at `tau` and clip to [0,255]. `pixels` is read and rewritten.
#[no_mangle]
pub extern "C" fn threes_poison_image(
    trigger: *const ThreesTrigger,
    options: *const ThreesPoisonOptions,
    pixels: *mut f64,
    height: usize,
    width: usize,
    channels: usize,
) -> ThreesStatus {
    let t = not_null!(trigger);
    let opt = not_null!(options);
    if pixels.is_null() {
        set_error("pixels is NULL");
        return ThreesStatus::NullPointer;
    }
    let len = height * width * channels;
    if len == 0 {
        set_error("image dimensions must be positive");
        return ThreesStatus::InvalidArgument;
    }
    let data = unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec();
    let img = Image::from_data(height, width, channels, data);
    let poisoned = try_ffi!(poison_sample(&img, &t.0, &poison_config(opt)), ThreesStatus::Failed);
    unsafe { std::ptr::copy_nonoverlapping(poisoned.data.as_ptr(), pixels, len) };
    ThreesStatus::Ok
}

// ---------------------------------------------------------------- metrics

/// PSNR between two equally-shaped images; identical inputs give +infinity.
#[no_mangle]
pub extern "C" fn threes_psnr(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out_db: *mut f64,
) -> ThreesStatus {
    let out = out_param!(out_db);
    let len = height * width * channels;
    if a.is_null() || b.is_null() {
        set_error("a / b is NULL");
        return ThreesStatus::NullPointer;
    }
    if len == 0 {
        set_error("image dimensions must be positive");
        return ThreesStatus::InvalidArgument;
    }
    let ia = Image::from_data(height, width, channels, unsafe { std::slice::from_raw_parts(a, len) }.to_vec());
    let ib = Image::from_data(height, width, channels, unsafe { std::slice::from_raw_parts(b, len) }.to_vec());
    let p = try_ffi!(metrics::psnr(&ia, &ib, 255.0), ThreesStatus::Failed);
    *out = p.unwrap();
    ThreesStatus::Ok
}

/// Global SSIM between two equally-shaped images, in [-1, 1].
#[no_mangle]
pub extern "C" fn threes_ssim(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out_ssim: *mut f64,
) -> ThreesStatus {
    let out = out_param!(out_ssim);
    let len = height * width * channels;
    if a.is_null() || b.is_null() {
        set_error("a / b is NULL");
        return ThreesStatus::NullPointer;
    }
    if len == 0 {
        set_error("image dimensions must be positive");
        return ThreesStatus::InvalidArgument;
    }
    let ia = Image::from_data(height, width, channels, unsafe { std::slice::from_raw_parts(a, len) }.to_vec());
    let ib = Image::from_data(height, width, channels, unsafe { std::slice::from_raw_parts(b, len) }.to_vec());
    *out = try_ffi!(metrics::ssim(&ia, &ib, 255.0), ThreesStatus::Failed);
    ThreesStatus::Ok
}
