//! Small convolutional classifier with from-scratch forward and backward
//! passes.
//!
//! Architecture family: N × (3×3 same-padding conv → ReLU → 2×2 max-pool),
//! then one ReLU dense hidden layer and a softmax output. Everything runs in
//! `f64`, single-threaded, and is bit-reproducible for a fixed seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabeledImageSet;
use crate::image::Image;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const CHECKPOINT_MAGIC: &[u8; 4] = b"3SNN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input shape {0:?} does not match model input {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),
    #[error("neuron index {index} out of range for layer with {count} neurons")]
    NeuronOutOfRange { index: usize, count: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub filters: usize,
}

/// Configuration of the fixed conv-ReLU-pool + dense family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (height, width, channels)
    pub input_shape: (usize, usize, usize),
    pub conv_blocks: Vec<ConvBlockConfig>,
    pub dense_hidden: usize,
    pub class_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Spatial size after each pool; errors if a pool would drop below 1×1.
    pub fn validate(&self) -> Result<(), String> {
        if self.conv_blocks.is_empty() {
            return Err("at least one conv block required".into());
        }
        let (mut h, mut w, _) = self.input_shape;
        for (i, _) in self.conv_blocks.iter().enumerate() {
            h /= 2;
            w /= 2;
            if h < 1 || w < 1 {
                return Err(format!("spatial size collapses below 1x1 after pool {i}"));
            }
        }
        Ok(())
    }

    /// Desk-scale default: 2 conv blocks (8, 16 filters), dense 64.
    pub fn desk(input_shape: (usize, usize, usize), class_count: usize, seed: u64) -> Self {
        ModelConfig {
            input_shape,
            conv_blocks: vec![ConvBlockConfig { filters: 8 }, ConvBlockConfig { filters: 16 }],
            dense_hidden: 64,
            class_count,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.001, batch_size: 128, epochs: 5, seed: 0 }
    }
}

/// 3×3 conv layer; weights laid out `w[((k*c_in + ci)*3 + dy)*3 + dx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Dense layer; weights laid out `w[o*inputs + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub convs: Vec<ConvLayer>,
    pub hidden: DenseLayer,
    pub output: DenseLayer,
    /// Input normalization scale (1/255 by default).
    pub input_scale: f64,
    /// Optional per-channel mean subtracted after scaling.
    pub channel_mean: Option<Vec<f64>>,
}

/// Names a layer whose activations can be read or pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerId {
    Conv(usize),
    /// The penultimate dense layer.
    Hidden,
}

impl LayerId {
    pub fn parse(s: &str) -> Result<LayerId, NnError> {
        if s == "hidden" {
            return Ok(LayerId::Hidden);
        }
        if let Some(n) = s.strip_prefix("conv") {
            if let Ok(i) = n.parse() {
                return Ok(LayerId::Conv(i));
            }
        }
        Err(NnError::UnknownLayer(s.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl Model {
    /// He-uniform init for weights, zero biases, seeded by `config.seed`.
    pub fn init(config: ModelConfig) -> Model {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut he = |fan_in: usize, n: usize| -> Vec<f64> {
            let limit = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        };

        let (mut h, mut w, mut c) = config.input_shape;
        let mut convs = Vec::new();
        for block in &config.conv_blocks {
            let f = block.filters;
            convs.push(ConvLayer {
                in_channels: c,
                out_channels: f,
                w: he(c * 9, f * c * 9),
                b: vec![0.0; f],
            });
            c = f;
            h /= 2;
            w /= 2;
        }
        let flat = h * w * c;
        let hidden = DenseLayer {
            inputs: flat,
            outputs: config.dense_hidden,
            w: he(flat, config.dense_hidden * flat),
            b: vec![0.0; config.dense_hidden],
        };
        let output = DenseLayer {
            inputs: config.dense_hidden,
            outputs: config.class_count,
            w: he(config.dense_hidden, config.class_count * config.dense_hidden),
            b: vec![0.0; config.class_count],
        };
        Model { config, convs, hidden, output, input_scale: 1.0 / 255.0, channel_mean: None }
    }

    /// Spatial shape (h, w) of conv block `i`'s output (pre-pool).
    pub fn conv_shape(&self, i: usize) -> (usize, usize) {
        let (mut h, mut w, _) = self.config.input_shape;
        for _ in 0..i {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn last_conv(&self) -> usize {
        self.convs.len() - 1
    }

    pub fn check_input(&self, image: &Image) -> Result<(), NnError> {
        if image.shape() != self.config.input_shape {
            return Err(NnError::ShapeMismatch(image.shape(), self.config.input_shape));
        }
        Ok(())
    }

    /// Normalize raw `[0,255]` pixels to model input space.
    fn normalize(&self, image: &Image) -> Vec<f64> {
        let c = self.config.input_shape.2;
        image
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut x = v * self.input_scale;
                if let Some(means) = &self.channel_mean {
                    x -= means[i % c];
                }
                x
            })
            .collect()
    }

    pub fn forward(&self, image: &Image) -> Result<ForwardCache, NnError> {
        self.check_input(image)?;
        Ok(self.forward_normalized(self.normalize(image)))
    }

    fn forward_normalized(&self, input: Vec<f64>) -> ForwardCache {
        let (h0, w0, _) = self.config.input_shape;
        let mut cache = ForwardCache::default();
        let mut cur = input.clone();
        cache.input = input;
        let (mut h, mut w) = (h0, w0);
        for conv in &self.convs {
            let act = conv_forward(conv, &cur, h, w);
            let (pooled, arg, ph, pw) = maxpool2(&act, h, w, conv.out_channels);
            cache.conv_act.push(act);
            cache.pool_arg.push(arg);
            cache.pool_out.push(pooled.clone());
            cur = pooled;
            h = ph;
            w = pw;
        }
        let hidden_pre = dense_forward(&self.hidden, &cur);
        let hidden_act: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let logits = dense_forward(&self.output, &hidden_act);
        cache.hidden_act = hidden_act;
        cache.logits = logits;
        cache
    }

    /// Softmax probabilities over the K classes.
    pub fn predict(&self, image: &Image) -> Result<Vec<f64>, NnError> {
        Ok(softmax(&self.forward(image)?.logits))
    }

    pub fn predict_class(&self, image: &Image) -> Result<usize, NnError> {
        Ok(argmax(&self.predict(image)?))
    }

    /// Backward pass from a gradient at the logits. Returns parameter
    /// gradients plus the gradients at each conv block's post-activation
    /// output and at the (normalized) input.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Gradients {
        let mut grads = Gradients::zeros_like(self);

        // output dense
        let mut d_hidden_act = vec![0.0; self.hidden.outputs];
        dense_backward(&self.output, &cache.hidden_act, grad_logits,
            &mut grads.output_w, &mut grads.output_b, &mut d_hidden_act);
        // hidden relu
        for (g, &a) in d_hidden_act.iter_mut().zip(&cache.hidden_act) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        // hidden dense
        let last = self.convs.len() - 1;
        let mut d_flat = vec![0.0; self.hidden.inputs];
        dense_backward(&self.hidden, &cache.pool_out[last], &d_hidden_act,
            &mut grads.hidden_w, &mut grads.hidden_b, &mut d_flat);

        // conv blocks, reversed
        let mut d_pool = d_flat;
        for i in (0..self.convs.len()).rev() {
            let conv = &self.convs[i];
            let (h, w) = self.conv_shape(i);
            // unpool + relu mask
            let mut d_act = vec![0.0; h * w * conv.out_channels];
            for (j, &src) in cache.pool_arg[i].iter().enumerate() {
                d_act[src] += d_pool[j];
            }
            for (g, &a) in d_act.iter_mut().zip(&cache.conv_act[i]) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            let input: &[f64] = if i == 0 { &cache.input } else { &cache.pool_out[i - 1] };
            let mut d_in = vec![0.0; input.len()];
            conv_backward(conv, input, h, w, &d_act, &mut grads.conv_w[i], &mut grads.conv_b[i], &mut d_in);
            grads.d_conv_act[i] = d_act;
            d_pool = d_in;
        }
        grads.d_input = d_pool;
        grads
    }

    /// Cross-entropy loss and logit gradient for one sample.
    pub fn loss_and_grad(&self, cache: &ForwardCache, label: usize) -> (f64, Vec<f64>) {
        let probs = softmax(&cache.logits);
        let loss = -(probs[label].max(1e-300)).ln();
        let mut grad = probs;
        grad[label] -= 1.0;
        (loss, grad)
    }

    /// All parameters flattened in a stable order (convs, hidden, output;
    /// weights before biases).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend_from_slice(&c.w);
            out.extend_from_slice(&c.b);
        }
        out.extend_from_slice(&self.hidden.w);
        out.extend_from_slice(&self.hidden.b);
        out.extend_from_slice(&self.output.w);
        out.extend_from_slice(&self.output.b);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        let take = |dst: &mut [f64], off: &mut usize| {
            dst.copy_from_slice(&flat[*off..*off + dst.len()]);
            *off += dst.len();
        };
        for c in &mut self.convs {
            take(&mut c.w, &mut off);
            take(&mut c.b, &mut off);
        }
        take(&mut self.hidden.w, &mut off);
        take(&mut self.hidden.b, &mut off);
        take(&mut self.output.w, &mut off);
        take(&mut self.output.b, &mut off);
        assert_eq!(off, flat.len());
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.w.len() + c.b.len()).sum::<usize>()
            + self.hidden.w.len() + self.hidden.b.len()
            + self.output.w.len() + self.output.b.len()
    }

    /// SHA-256 of the serialized checkpoint, as hex. Stable model identity.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = self.to_checkpoint_bytes();
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    }

    /// Serialize: magic, version, config JSON, then parameters as
    /// little-endian 32-bit floats.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a ModelConfig,
            input_scale: f64,
            channel_mean: &'a Option<Vec<f64>>,
        }
        let json = serde_json::to_vec(&Header {
            config: &self.config,
            input_scale: self.input_scale,
            channel_mean: &self.channel_mean,
        })
        .expect("config serialization");
        let params = self.params_flat();
        let mut out = Vec::with_capacity(16 + json.len() + params.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model, NnError> {
        #[derive(Deserialize)]
        struct Header {
            config: ModelConfig,
            input_scale: f64,
            channel_mean: Option<Vec<f64>>,
        }
        let bad = |m: &str| NnError::BadCheckpoint(m.to_string());
        if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + json_len + 8 {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + json_len])
            .map_err(|e| bad(&format!("config json: {e}")))?;
        let off = 12 + json_len;
        let count = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        let data = &bytes[off + 8..];
        if data.len() < count * 4 {
            return Err(bad("truncated parameters"));
        }
        let mut model = Model::init(header.config);
        model.input_scale = header.input_scale;
        model.channel_mean = header.channel_mean;
        if count != model.param_count() {
            return Err(bad(&format!(
                "parameter count {count} does not match config ({})",
                model.param_count()
            )));
        }
        let params: Vec<f64> = data
            .chunks_exact(4)
            .take(count)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        model.set_params_flat(&params);
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model, NnError> {
        Model::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    /// Post-ReLU conv outputs, one per block, at conv resolution.
    pub conv_act: Vec<Vec<f64>>,
    pub pool_out: Vec<Vec<f64>>,
    pub pool_arg: Vec<Vec<usize>>,
    pub hidden_act: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv_w: Vec<Vec<f64>>,
    pub conv_b: Vec<Vec<f64>>,
    pub hidden_w: Vec<f64>,
    pub hidden_b: Vec<f64>,
    pub output_w: Vec<f64>,
    pub output_b: Vec<f64>,
    /// Gradient at each conv block's post-activation output.
    pub d_conv_act: Vec<Vec<f64>>,
    /// Gradient at the normalized input.
    pub d_input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Gradients {
        Gradients {
            conv_w: model.convs.iter().map(|c| vec![0.0; c.w.len()]).collect(),
            conv_b: model.convs.iter().map(|c| vec![0.0; c.b.len()]).collect(),
            hidden_w: vec![0.0; model.hidden.w.len()],
            hidden_b: vec![0.0; model.hidden.b.len()],
            output_w: vec![0.0; model.output.w.len()],
            output_b: vec![0.0; model.output.b.len()],
            d_conv_act: model.convs.iter().map(|_| Vec::new()).collect(),
            d_input: Vec::new(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.hidden_w);
        out.extend_from_slice(&self.hidden_b);
        out.extend_from_slice(&self.output_w);
        out.extend_from_slice(&self.output_b);
        out
    }

    pub fn add_params(&mut self, other: &Gradients) {
        for (a, b) in self.conv_w.iter_mut().zip(&other.conv_w) {
            add_into(a, b);
        }
        for (a, b) in self.conv_b.iter_mut().zip(&other.conv_b) {
            add_into(a, b);
        }
        add_into(&mut self.hidden_w, &other.hidden_w);
        add_into(&mut self.hidden_b, &other.hidden_b);
        add_into(&mut self.output_w, &other.output_w);
        add_into(&mut self.output_b, &other.output_b);
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// 3×3 same-padding conv + ReLU over a channel-fastest h×w×c_in plane.
fn conv_forward(conv: &ConvLayer, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (cin, f) = (conv.in_channels, conv.out_channels);
    // weights transposed to (dy, dx, ci, k) so the inner loop is contiguous
    let mut wt = vec![0.0; conv.w.len()];
    for k in 0..f {
        for ci in 0..cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    wt[(((dy * 3 + dx) * cin + ci) * f) + k] = conv.w[((k * cin + ci) * 3 + dy) * 3 + dx];
                }
            }
        }
    }
    let mut out = vec![0.0; h * w * f];
    let mut acc = vec![0.0f64; f];
    for y in 0..h {
        for x in 0..w {
            acc.copy_from_slice(&conv.b);
            for dy in 0..3 {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let xx = x as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_base = ((yy as usize) * w + xx as usize) * cin;
                    let wt_base = (dy * 3 + dx) * cin * f;
                    for ci in 0..cin {
                        let v = input[in_base + ci];
                        let row = &wt[wt_base + ci * f..wt_base + (ci + 1) * f];
                        for k in 0..f {
                            acc[k] += v * row[k];
                        }
                    }
                }
            }
            let base = (y * w + x) * f;
            for k in 0..f {
                out[base + k] = acc[k].max(0.0);
            }
        }
    }
    out
}

fn conv_backward(
    conv: &ConvLayer,
    input: &[f64],
    h: usize,
    w: usize,
    d_out: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    d_in: &mut [f64],
) {
    let (cin, f) = (conv.in_channels, conv.out_channels);
    let mut wt = vec![0.0; conv.w.len()];
    for k in 0..f {
        for ci in 0..cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    wt[(((dy * 3 + dx) * cin + ci) * f) + k] = conv.w[((k * cin + ci) * 3 + dy) * 3 + dx];
                }
            }
        }
    }
    let mut dwt = vec![0.0; conv.w.len()];
    for y in 0..h {
        for x in 0..w {
            let dvec = &d_out[(y * w + x) * f..(y * w + x + 1) * f];
            for k in 0..f {
                db[k] += dvec[k];
            }
            for dy in 0..3 {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let xx = x as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let in_base = ((yy as usize) * w + xx as usize) * cin;
                    let base = (dy * 3 + dx) * cin * f;
                    for ci in 0..cin {
                        let v = input[in_base + ci];
                        let wrow = &wt[base + ci * f..base + (ci + 1) * f];
                        let drow = &mut dwt[base + ci * f..base + (ci + 1) * f];
                        let mut grad_in = 0.0;
                        for k in 0..f {
                            drow[k] += v * dvec[k];
                            grad_in += wrow[k] * dvec[k];
                        }
                        d_in[in_base + ci] += grad_in;
                    }
                }
            }
        }
    }
    // transpose accumulated weight grads back to the canonical layout
    for k in 0..f {
        for ci in 0..cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    dw[((k * cin + ci) * 3 + dy) * 3 + dx] += dwt[(((dy * 3 + dx) * cin + ci) * f) + k];
                }
            }
        }
    }
}

/// 2×2 stride-2 max-pool; odd trailing rows/cols are dropped.
fn maxpool2(input: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0.0; ph * pw * c];
    let mut arg = vec![0usize; ph * pw * c];
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = ((py * 2 + dy) * w + px * 2 + dx) * c + ch;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                let o = (py * pw + px) * c + ch;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg, ph, pw)
}

fn dense_forward(layer: &DenseLayer, input: &[f64]) -> Vec<f64> {
    let mut out = layer.b.clone();
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(input) {
            acc += a * b;
        }
        *out_v += acc;
    }
    out
}

fn dense_backward(
    layer: &DenseLayer,
    input: &[f64],
    d_out: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    d_in: &mut [f64],
) {
    for o in 0..layer.outputs {
        let g = d_out[o];
        db[o] += g;
        let wrow = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
        let drow = &mut dw[o * layer.inputs..(o + 1) * layer.inputs];
        for i in 0..layer.inputs {
            drow[i] += g * input[i];
            d_in[i] += g * wrow[i];
        }
    }
}

/// Adam optimizer state over a flat parameter vector.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    // distinct stream per (seed, epoch)
    let mixed = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(mixed));
    order
}

/// Train with Adam on mean cross-entropy. Deterministic given
/// `(model parameters, cfg.seed)`; epochs = 0 returns the model unchanged.
pub fn train(model: &Model, train_set: &LabeledImageSet, cfg: &TrainConfig) -> Result<(Model, TrainLog), NnError> {
    if train_set.is_empty() {
        return Err(NnError::EmptyTrainingSet);
    }
    let mut model = model.clone();
    let mut params = model.params_flat();
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = Gradients::zeros_like(&model);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let cache = model.forward(&train_set.images[i])?;
                let (loss, mut grad_logits) = model.loss_and_grad(&cache, train_set.labels[i]);
                loss_sum += loss;
                if argmax(&cache.logits) == train_set.labels[i] {
                    correct += 1;
                }
                for g in &mut grad_logits {
                    *g *= scale;
                }
                let g = model.backward(&cache, &grad_logits);
                acc.add_params(&g);
            }
            let flat = acc.flat();
            if !flat.iter().all(|v| v.is_finite()) || !loss_sum.is_finite() {
                return Err(NnError::Diverged { epoch, batch: batch_no });
            }
            adam.step(&mut params, &flat);
            model.set_params_flat(&params);
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
        });
    }
    Ok((model, log))
}

/// Post-activation values of `layer_id` for every sample, one row per sample.
pub fn capture_activations(model: &Model, set: &LabeledImageSet, layer_id: LayerId) -> Result<Vec<Vec<f64>>, NnError> {
    if let LayerId::Conv(i) = layer_id {
        if i >= model.convs.len() {
            return Err(NnError::UnknownLayer(format!("conv{i}")));
        }
    }
    let mut rows = Vec::with_capacity(set.len());
    for img in &set.images {
        let cache = model.forward(img)?;
        rows.push(match layer_id {
            LayerId::Hidden => cache.hidden_act,
            LayerId::Conv(i) => cache.conv_act[i].clone(),
        });
    }
    Ok(rows)
}

/// Zero the outgoing weights and bias of each listed neuron. Idempotent and
/// order-free over index sets.
pub fn prune_neurons(model: &Model, layer_id: LayerId, neuron_indices: &[usize]) -> Result<Model, NnError> {
    let mut m = model.clone();
    match layer_id {
        LayerId::Hidden => {
            for &n in neuron_indices {
                if n >= m.hidden.outputs {
                    return Err(NnError::NeuronOutOfRange { index: n, count: m.hidden.outputs });
                }
                m.hidden.b[n] = 0.0;
                for o in 0..m.output.outputs {
                    m.output.w[o * m.output.inputs + n] = 0.0;
                }
            }
        }
        LayerId::Conv(i) => {
            if i >= m.convs.len() {
                return Err(NnError::UnknownLayer(format!("conv{i}")));
            }
            let f = m.convs[i].out_channels;
            for &n in neuron_indices {
                if n >= f {
                    return Err(NnError::NeuronOutOfRange { index: n, count: f });
                }
                m.convs[i].b[n] = 0.0;
                if i + 1 < m.convs.len() {
                    // next conv's weights reading channel n
                    let next = &mut m.convs[i + 1];
                    for k in 0..next.out_channels {
                        for t in 0..9 {
                            next.w[((k * next.in_channels + n) * 9) + t] = 0.0;
                        }
                    }
                } else {
                    // dense weights reading channel n of the flattened pool output
                    let inputs = m.hidden.inputs;
                    for o in 0..m.hidden.outputs {
                        let row = &mut m.hidden.w[o * inputs..(o + 1) * inputs];
                        for (j, v) in row.iter_mut().enumerate() {
                            if j % f == n {
                                *v = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Compare analytic gradients with central finite differences (step 1e-4).
///
/// Samples up to `per_layer` parameters from each layer (seeded) and returns
/// the max over them of `|g_a − g_n| / max(|g_a|, |g_n|, 1e-8)`. Parameters
/// whose ±h perturbation flips a ReLU state or a max-pool switch are skipped
/// and redrawn: the loss is non-differentiable across those kinks, so the
/// central difference does not estimate the one-sided analytic gradient there.
pub fn gradient_check(model: &Model, sample: &Image, label: usize, per_layer: usize, seed: u64) -> Result<f64, NnError> {
    let cache = model.forward(sample)?;
    let (_, grad_logits) = model.loss_and_grad(&cache, label);
    let analytic = model.backward(&cache, &grad_logits).flat();
    let base_params = model.params_flat();

    // layer boundaries in the flat parameter vector
    let mut bounds = Vec::new();
    let mut off = 0;
    for c in &model.convs {
        bounds.push((off, off + c.w.len() + c.b.len()));
        off += c.w.len() + c.b.len();
    }
    bounds.push((off, off + model.hidden.w.len() + model.hidden.b.len()));
    off += model.hidden.w.len() + model.hidden.b.len();
    bounds.push((off, off + model.output.w.len() + model.output.b.len()));

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut scratch = model.clone();
    let h = 1e-4;
    let mut max_rel = 0.0f64;
    for &(lo, hi) in &bounds {
        let wanted = per_layer.min(hi - lo);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < wanted && attempts < wanted * 50 {
            attempts += 1;
            let i = rng.gen_range(lo..hi);
            let mut p = base_params.clone();
            p[i] = base_params[i] + h;
            scratch.set_params_flat(&p);
            let (lp, pat_p) = eval_loss(&scratch, sample, label)?;
            p[i] = base_params[i] - h;
            scratch.set_params_flat(&p);
            let (lm, pat_m) = eval_loss(&scratch, sample, label)?;
            if pat_p != pat_m {
                continue;
            }
            checked += 1;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Loss plus a hash of the ReLU/pooling decision pattern of the forward pass.
fn eval_loss(model: &Model, sample: &Image, label: usize) -> Result<(f64, u64), NnError> {
    use std::hash::{Hash, Hasher};
    let cache = model.forward(sample)?;
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    for act in &cache.conv_act {
        for &v in act {
            (v > 0.0).hash(&mut hasher);
        }
    }
    for arg in &cache.pool_arg {
        arg.hash(&mut hasher);
    }
    for &v in &cache.hidden_act {
        (v > 0.0).hash(&mut hasher);
    }
    Ok((model.loss_and_grad(&cache, label).0, hasher.finish()))
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(model: &Model, set: &LabeledImageSet) -> Result<f64, NnError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (img, &label) in set.images.iter().zip(&set.labels) {
        if model.predict_class(img)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}
