//! Grad-CAM saliency maps over a chosen conv layer.
//!
//! Channel weights are the spatial means of the class logit's gradient at the
//! layer's post-activation feature maps; the weighted sum is ReLU-floored,
//! bilinearly upsampled to input resolution, and max-normalized into [0, 1].

use std::path::Path;

use crate::image::{bilinear_resize, Image, ImageError};
use crate::nn::{Model, NnError};

/// Per-pixel importance in `[0,1]`, same spatial size as the model input.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// H×W values, row-major.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Index of the conv layer the map was computed from.
    pub source_layer: usize,
    /// Class whose logit was differentiated.
    pub class: usize,
}

impl SaliencyMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Multiply the map into an image, broadcasting over channels — the
    /// "tailored" sample of the trigger-extraction pipeline.
    pub fn apply_mask(&self, image: &Image) -> Image {
        assert_eq!((image.height, image.width), (self.height, self.width));
        let mut out = image.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let s = self.get(y, x);
                for c in 0..image.channels {
                    let i = out.idx(y, x, c);
                    out.data[i] *= s;
                }
            }
        }
        out
    }

    /// Binarize at a threshold (for the mask-ablation mode).
    pub fn binarize(&self, threshold: f64) -> SaliencyMap {
        SaliencyMap {
            values: self.values.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
            ..self.clone()
        }
    }

    /// Boolean mask of the top `q` fraction of cells (by value).
    pub fn top_quantile_mask(&self, q: f64) -> Vec<bool> {
        let n = self.values.len();
        let keep = ((q * n as f64).round() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.values[b].partial_cmp(&self.values[a]).unwrap().then(a.cmp(&b))
        });
        let mut mask = vec![false; n];
        for &i in order.iter().take(keep) {
            mask[i] = true;
        }
        mask
    }

    /// Export as 8-bit grayscale PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let img = Image::from_data(
            self.height,
            self.width,
            1,
            self.values.iter().map(|&v| v * 255.0).collect(),
        );
        img.write_netpbm(path)
    }
}

/// Grad-CAM for `class` at conv layer `layer` (defaults to the last one via
/// [`grad_cam`]). The gradient target is the pre-softmax logit.
pub fn grad_cam_at(model: &Model, image: &Image, class: usize, layer: usize) -> Result<SaliencyMap, NnError> {
    if layer >= model.convs.len() {
        return Err(NnError::UnknownLayer(format!("conv{layer}")));
    }
    let cache = model.forward(image)?;
    let k = model.config.class_count;
    let mut grad_logits = vec![0.0; k];
    grad_logits[class] = 1.0;
    let grads = model.backward(&cache, &grad_logits);

    let (fh, fw) = model.conv_shape(layer);
    let channels = model.convs[layer].out_channels;
    let act = &cache.conv_act[layer];
    let d_act = &grads.d_conv_act[layer];

    // channel weights: spatial mean of the gradient
    let spatial = fh * fw;
    let mut weights = vec![0.0; channels];
    for i in 0..spatial {
        for c in 0..channels {
            weights[c] += d_act[i * channels + c];
        }
    }
    for w in &mut weights {
        *w /= spatial as f64;
    }

    // weighted sum over channels, ReLU floor
    let mut cam = vec![0.0; spatial];
    for i in 0..spatial {
        let mut acc = 0.0;
        for c in 0..channels {
            acc += weights[c] * act[i * channels + c];
        }
        cam[i] = acc.max(0.0);
    }

    let (h, w, _) = model.config.input_shape;
    let mut up = bilinear_resize(&cam, fh, fw, h, w);
    let maxv = up.iter().cloned().fold(0.0, f64::max);
    if maxv > 0.0 {
        for v in &mut up {
            *v /= maxv;
        }
    }
    Ok(SaliencyMap { values: up, height: h, width: w, source_layer: layer, class })
}

/// Grad-CAM at the model's last conv layer.
pub fn grad_cam(model: &Model, image: &Image, class: usize) -> Result<SaliencyMap, NnError> {
    grad_cam_at(model, image, class, model.last_conv())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvBlockConfig, ModelConfig};

    fn one_conv_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            input_shape: (4, 4, 1),
            conv_blocks: vec![ConvBlockConfig { filters: 1 }],
            dense_hidden: 2,
            class_count: 2,
            seed,
        };
        Model::init(cfg)
    }

    #[test]
    fn zero_final_weights_give_all_zero_map() {
        let mut model = one_conv_model(1);
        model.output.w.iter_mut().for_each(|w| *w = 0.0);
        let img = Image::constant(4, 4, 1, 128.0);
        let map = grad_cam(&model, &img, 0).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0), "all-zero map is a valid output");
    }

    /// Single feature map wired straight through to the class logit via mean
    /// pooling: the map must be the normalized ReLU of the feature map.
    #[test]
    fn hand_computed_gradient_oracle() {
        let cfg = ModelConfig {
            input_shape: (4, 4, 1),
            conv_blocks: vec![ConvBlockConfig { filters: 1 }],
            dense_hidden: 4,
            class_count: 2,
            seed: 0,
        };
        let mut model = Model::init(cfg);
        model.input_scale = 1.0;
        // identity conv kernel
        model.convs[0].w = vec![0.0; 9];
        model.convs[0].w[4] = 1.0;
        model.convs[0].b = vec![0.0];
        // hidden layer = identity-ish pass of the 4 pooled cells (2x2 pool out)
        model.hidden.w = vec![0.0; 16];
        for i in 0..4 {
            model.hidden.w[i * 4 + i] = 1.0;
        }
        model.hidden.b = vec![0.0; 4];
        // class-0 logit = mean of the pooled cells; class 1 silent
        model.output.w = vec![0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0];
        model.output.b = vec![0.0, 0.0];

        let img = Image::from_data(
            4, 4, 1,
            vec![
                0.0, 0.0, 0.0, 0.0,
                0.0, 8.0, 0.0, 0.0,
                0.0, 0.0, 2.0, 0.0,
                0.0, 0.0, 0.0, 4.0,
            ],
        );
        let map = grad_cam(&model, &img, 0).unwrap();

        // feature map == input (identity conv, ReLU no-op on nonnegatives);
        // every pooled max is picked once, so d logit / d A is constant
        // positive where the max lives, and the weight w_k > 0. The CAM is
        // then ReLU(w·A) ∝ A, max-normalized: peak 8.0 → 1.0, 2.0 → 0.25,
        // 4.0 → 0.5.
        assert!((map.get(1, 1) - 1.0).abs() < 1e-12);
        assert!((map.get(2, 2) - 0.25).abs() < 1e-12);
        assert!((map.get(3, 3) - 0.5).abs() < 1e-12);
        assert_eq!(map.get(0, 3), 0.0);
    }

    #[test]
    fn map_contract_shape_and_range() {
        let model = Model::init(ModelConfig::desk((28, 28, 1), 10, 4));
        let img = crate::synth::generate(1, 9).images[0].clone();
        let map = grad_cam(&model, &img, 3).unwrap();
        assert_eq!((map.height, map.width), (28, 28));
        assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if map.values.iter().any(|&v| v > 0.0) {
            assert!((map.max() - 1.0).abs() < 1e-12, "nonzero maps are max-normalized");
        }
    }

    #[test]
    fn positive_logit_scaling_leaves_map_unchanged() {
        let model = Model::init(ModelConfig::desk((28, 28, 1), 10, 5));
        let img = crate::synth::generate(1, 10).images[0].clone();
        let map = grad_cam(&model, &img, 2).unwrap();

        let mut scaled = model.clone();
        let inputs = scaled.output.inputs;
        for i in 0..inputs {
            scaled.output.w[2 * inputs + i] *= 2.0;
        }
        scaled.output.b[2] *= 2.0;
        let map2 = grad_cam(&scaled, &img, 2).unwrap();
        for (a, b) in map.values.iter().zip(&map2.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let model = Model::init(ModelConfig::desk((28, 28, 1), 10, 6));
        let img = crate::synth::generate(1, 11).images[0].clone();
        let a = grad_cam(&model, &img, 0).unwrap();
        let b = grad_cam(&model, &img, 0).unwrap();
        assert_eq!(a, b);
    }

    /// A unique spike in the low-res map stays at the corresponding upsampled
    /// cell.
    #[test]
    fn upsampling_preserves_spike_argmax() {
        let spike = SaliencyMap {
            values: {
                let mut v = vec![0.0; 49];
                v[3 * 7 + 4] = 1.0;
                v
            },
            height: 7,
            width: 7,
            source_layer: 0,
            class: 0,
        };
        let up = bilinear_resize(&spike.values, 7, 7, 28, 28);
        let best = up
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let (by, bx) = (best / 28, best % 28);
        // source cell (3,4) maps to about (3*27/6, 4*27/6) = (13.5, 18)
        assert!((by as isize - 14).abs() <= 2 && (bx as isize - 18).abs() <= 2);
    }

    #[test]
    fn apply_mask_and_binarize() {
        let map = SaliencyMap {
            values: vec![0.0, 0.5, 1.0, 0.25],
            height: 2,
            width: 2,
            source_layer: 0,
            class: 0,
        };
        let img = Image::constant(2, 2, 2, 100.0);
        let tailored = map.apply_mask(&img);
        assert_eq!(tailored.get(0, 0, 0), 0.0);
        assert_eq!(tailored.get(0, 1, 1), 50.0);
        assert_eq!(tailored.get(1, 0, 0), 100.0);
        let b = map.binarize(0.5);
        assert_eq!(b.values, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn top_quantile_mask_size() {
        let map = SaliencyMap {
            values: (0..100).map(|i| i as f64 / 99.0).collect(),
            height: 10,
            width: 10,
            source_layer: 0,
            class: 0,
        };
        let mask = map.top_quantile_mask(0.1);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 10);
        assert!(mask[99] && mask[90] && !mask[89]);
    }

    #[test]
    fn unknown_layer_rejected() {
        let model = one_conv_model(2);
        let img = Image::zeros(4, 4, 1);
        assert!(grad_cam_at(&model, &img, 0, 3).is_err());
    }
}
