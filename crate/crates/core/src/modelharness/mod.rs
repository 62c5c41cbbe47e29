//! Differentiable classifier lifecycle: construction from a registry,
//! training, feature extraction at the penultimate-layer cut, per-sample
//! losses, and exact gradients with respect to parameters and raw inputs.
//!
//! The classifier is `F = g . f`: `f` maps a raw [0,1] image (z-scored
//! internally) to a feature vector, `g` is a linear head over features.
//! Perturbation budgets are defined in raw pixel space, so every gradient
//! this module returns is chained through the normalization.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{
    append_metrics_jsonl, fast_adversarial_pretrain, fgsm_robust_accuracy, train, EpochMetrics,
    TrainConfig,
};

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

use crate::datamodel::{ImageSample, NormalizationStats};
use crate::error::{Error, Result};
use net::{Net, NetGrads};

/// Fixed number of parallel gradient chunks. A constant (rather than the
/// core count) keeps batch reductions bit-deterministic across machines.
pub(crate) const GRAD_CHUNKS: usize = 4;

/// Architecture registry entry: a chain of stride-2 3x3 conv+ReLU blocks,
/// global average pooling, and a linear head. `feature_dim` equals the last
/// block's channel count.
#[derive(Debug, Clone, Copy)]
pub struct ArchDef {
    pub id: &'static str,
    pub channels: &'static [usize],
    pub feature_dim: usize,
}

pub const REGISTRY: &[ArchDef] = &[
    ArchDef {
        id: "small_cnn",
        channels: &[16, 32, 64, 128],
        feature_dim: 128,
    },
    ArchDef {
        id: "tiny_cnn",
        channels: &[8, 16],
        feature_dim: 16,
    },
];

pub fn arch_def(id: &str) -> Result<&'static ArchDef> {
    REGISTRY
        .iter()
        .find(|a| a.id == id)
        .ok_or_else(|| Error::config(format!("unknown architecture {id}")))
}

/// Flat gradient aligned with the model's stable parameter enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        GradientVector {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &GradientVector, s: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }
}

/// One term of a weighted cross-entropy objective `sum_i w_i * CE(F(x_i), y_i)`.
///
/// Images are raw [0,1] HWC. Weighting covers every loss this crate
/// differentiates: plain means (w = 1/N), scaled losses, and repel terms
/// (positive and negative weights).
#[derive(Debug, Clone)]
pub struct WeightedExample {
    pub image: Array3<f64>,
    pub label: usize,
    pub weight: f64,
}

/// Feature extraction and input-space feature gradients; implemented by the
/// CNN and by test doubles (e.g. an identity map).
pub trait FeatureExtractor: Sync {
    fn feature_dim(&self) -> usize;
    /// f(x) for a raw [0,1] HWC image.
    fn features_of(&self, image: &Array3<f64>) -> Array1<f64>;
    /// d<cotangent, f(x)>/dx in raw pixel space, HWC.
    fn feature_input_gradient(&self, image: &Array3<f64>, cotangent: &Array1<f64>)
        -> Array3<f64>;
}

/// The identity feature map over flattened pixels. Useful as a byte-level
/// matching space and as a closed-form reference in tests.
pub struct IdentityFeatures {
    dims: (usize, usize, usize),
}

impl IdentityFeatures {
    pub fn new(dims: (usize, usize, usize)) -> Self {
        IdentityFeatures { dims }
    }
}

impl FeatureExtractor for IdentityFeatures {
    fn feature_dim(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    fn features_of(&self, image: &Array3<f64>) -> Array1<f64> {
        Array1::from_iter(image.iter().copied())
    }

    fn feature_input_gradient(
        &self,
        _image: &Array3<f64>,
        cotangent: &Array1<f64>,
    ) -> Array3<f64> {
        Array3::from_shape_vec(self.dims, cotangent.to_vec()).expect("cotangent matches dims")
    }
}

pub struct ClassifierModel {
    architecture_id: String,
    num_classes: usize,
    pub normalization: NormalizationStats,
    net: Net,
}

/// Build a model with a k-way head and deterministic initialization; with
/// `pretrained`, parameters are loaded from a checkpoint that must match the
/// requested architecture and head size.
pub fn build_model(
    architecture_id: &str,
    num_classes: usize,
    normalization: NormalizationStats,
    seed: u64,
    pretrained: Option<&Path>,
) -> Result<ClassifierModel> {
    if num_classes < 2 {
        return Err(Error::config(format!(
            "classification needs at least 2 classes, got {num_classes}"
        )));
    }
    let def = arch_def(architecture_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::with_capacity(def.channels.len());
    let mut in_ch = 3;
    for &out_ch in def.channels {
        convs.push(net::Conv2d::new(in_ch, out_ch, &mut rng));
        in_ch = out_ch;
    }
    let head = net::Linear::new(def.feature_dim, num_classes, &mut rng);
    let mut model = ClassifierModel {
        architecture_id: architecture_id.to_string(),
        num_classes,
        normalization,
        net: Net { convs, head },
    };
    if let Some(path) = pretrained {
        let loaded = load_checkpoint(path)?;
        if loaded.architecture_id != model.architecture_id
            || loaded.num_classes != model.num_classes
        {
            return Err(Error::config(format!(
                "checkpoint/architecture mismatch: checkpoint is {} with k={}, requested {} with k={}",
                loaded.architecture_id, loaded.num_classes, architecture_id, num_classes
            )));
        }
        model.net.set_params_flat(&loaded.params_flat());
        model.normalization = loaded.normalization;
    }
    Ok(model)
}

impl ClassifierModel {
    pub fn architecture_id(&self) -> &str {
        &self.architecture_id
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.net.params_flat()
    }

    pub fn set_params_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::precondition(format!(
                "parameter vector has {} entries, model has {}",
                v.len(),
                self.param_count()
            )));
        }
        self.net.set_params_flat(v);
        Ok(())
    }

    /// Shift parameters in place: theta += scale * direction.
    pub fn add_scaled_params(&mut self, direction: &GradientVector, scale: f64) {
        self.net.add_scaled_flat(&direction.values, scale);
    }

    /// A copy of the model with parameters shifted along `direction`.
    pub fn perturbed(&self, direction: &GradientVector, scale: f64) -> ClassifierModel {
        let mut copy = self.clone_model();
        copy.add_scaled_params(direction, scale);
        copy
    }

    fn clone_model(&self) -> ClassifierModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let def = arch_def(&self.architecture_id).expect("registered architecture");
        let mut convs = Vec::with_capacity(def.channels.len());
        let mut in_ch = 3;
        for &out_ch in def.channels {
            convs.push(net::Conv2d::new(in_ch, out_ch, &mut rng));
            in_ch = out_ch;
        }
        let head = net::Linear::new(def.feature_dim, self.num_classes, &mut rng);
        let mut m = ClassifierModel {
            architecture_id: self.architecture_id.clone(),
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
            net: Net { convs, head },
        };
        m.net.set_params_flat(&self.net.params_flat());
        m
    }

    fn to_chw_norm(&self, img_hwc: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = img_hwc.dim();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let mean = self.normalization.mean[ci];
            let std = self.normalization.std[ci];
            for y in 0..h {
                for x in 0..w {
                    out[[ci, y, x]] = (img_hwc[[y, x, ci]] - mean) / std;
                }
            }
        }
        out
    }

    fn input_grad_to_hwc(&self, dchw: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = dchw.dim();
        let mut out = Array3::<f64>::zeros((h, w, c));
        for ci in 0..c {
            let std = self.normalization.std[ci];
            for y in 0..h {
                for x in 0..w {
                    out[[y, x, ci]] = dchw[[ci, y, x]] / std;
                }
            }
        }
        out
    }

    /// Raw logits F(x) for a raw [0,1] HWC image.
    pub fn logits(&self, image: &Array3<f64>) -> Array1<f64> {
        self.net.forward(&self.to_chw_norm(image)).logits
    }

    pub fn predict(&self, image: &Array3<f64>) -> usize {
        argmax(&self.logits(image).view())
    }

    pub fn predict_samples(&self, samples: &[&ImageSample]) -> Vec<usize> {
        let imgs: Vec<Array3<f64>> = samples.iter().map(|s| pixels_to_f64(&s.pixels)).collect();
        imgs.par_iter().map(|img| self.predict(img)).collect()
    }

    /// Feature rows f(x) for a batch of samples (inference mode).
    pub fn extract_features(&self, samples: &[&ImageSample]) -> Array2<f64> {
        let rows: Vec<Array1<f64>> = samples
            .par_iter()
            .map(|s| self.features_of(&pixels_to_f64(&s.pixels)))
            .collect();
        let mut out = Array2::<f64>::zeros((rows.len(), self.feature_dim()));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        out
    }

    /// Cross-entropy per example, one value per input.
    pub fn per_sample_loss(&self, images: &[Array3<f64>], labels: &[usize]) -> Result<Vec<f64>> {
        if images.len() != labels.len() {
            return Err(Error::precondition("images/labels length mismatch"));
        }
        for &l in labels {
            if l >= self.num_classes {
                return Err(Error::precondition(format!(
                    "label {l} out of range (k={})",
                    self.num_classes
                )));
            }
        }
        Ok(images
            .par_iter()
            .zip(labels.par_iter())
            .map(|(img, &l)| cross_entropy_from_logits(&self.logits(img).view(), l))
            .collect())
    }

    /// Loss value and exact parameter gradient of
    /// `sum_i w_i * CE(F(x_i), y_i)`. Deterministic: items are reduced in a
    /// fixed chunk order. Returns the number of correctly predicted items as
    /// a byproduct.
    pub fn weighted_loss_and_param_grads(
        &self,
        items: &[WeightedExample],
    ) -> Result<(f64, GradientVector, usize)> {
        if items.is_empty() {
            return Err(Error::precondition(
                "loss is detached: no examples reference the model parameters",
            ));
        }
        for it in items {
            if it.label >= self.num_classes {
                return Err(Error::precondition(format!(
                    "label {} out of range (k={})",
                    it.label, self.num_classes
                )));
            }
        }
        let ranges = chunk_ranges(items.len(), GRAD_CHUNKS);
        let parts: Vec<(f64, NetGrads, usize)> = ranges
            .into_par_iter()
            .map(|r| {
                let mut grads = NetGrads::zeros_like(&self.net);
                let mut loss = 0.0;
                let mut correct = 0;
                for it in &items[r] {
                    let cache = self.net.forward(&self.to_chw_norm(&it.image));
                    if argmax(&cache.logits.view()) == it.label {
                        correct += 1;
                    }
                    loss += it.weight * cross_entropy_from_logits(&cache.logits.view(), it.label);
                    let mut dlogits = ce_logit_gradient(&cache.logits.view(), it.label);
                    dlogits *= it.weight;
                    self.net.backward(&cache, &dlogits, Some(&mut grads), false);
                }
                (loss, grads, correct)
            })
            .collect();
        let mut total_loss = 0.0;
        let mut total_correct = 0;
        let mut acc: Option<NetGrads> = None;
        for (l, g, c) in parts {
            total_loss += l;
            total_correct += c;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.add(&g),
            }
        }
        let grads = acc.expect("at least one chunk");
        Ok((
            total_loss,
            GradientVector {
                values: grads.into_flat(),
            },
            total_correct,
        ))
    }

    /// Loss and gradient of `weight * CE(F(x), label)` with respect to the
    /// raw input pixels (HWC).
    pub fn input_gradient(
        &self,
        image: &Array3<f64>,
        label: usize,
        weight: f64,
    ) -> Result<(f64, Array3<f64>)> {
        if label >= self.num_classes {
            return Err(Error::precondition(format!(
                "label {label} out of range (k={})",
                self.num_classes
            )));
        }
        let cache = self.net.forward(&self.to_chw_norm(image));
        let loss = weight * cross_entropy_from_logits(&cache.logits.view(), label);
        let mut dlogits = ce_logit_gradient(&cache.logits.view(), label);
        dlogits *= weight;
        let dchw = self
            .net
            .backward(&cache, &dlogits, None, true)
            .expect("input gradient requested");
        Ok((loss, self.input_grad_to_hwc(&dchw)))
    }
}

impl FeatureExtractor for ClassifierModel {
    fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    fn features_of(&self, image: &Array3<f64>) -> Array1<f64> {
        self.net.forward(&self.to_chw_norm(image)).features
    }

    fn feature_input_gradient(
        &self,
        image: &Array3<f64>,
        cotangent: &Array1<f64>,
    ) -> Array3<f64> {
        let cache = self.net.forward(&self.to_chw_norm(image));
        let dchw = self
            .net
            .backward_from_features(&cache, cotangent, None, true)
            .expect("input gradient requested");
        self.input_grad_to_hwc(&dchw)
    }
}

pub(crate) fn chunk_ranges(n: usize, chunks: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = chunks.min(n).max(1);
    let base = n / chunks;
    let rem = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < rem);
        out.push(start..start + len);
        start += len;
    }
    out
}

pub fn argmax(v: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &ArrayView1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| (z - m).exp());
    let s = out.sum();
    out /= s;
    out
}

/// Numerically stable cross-entropy from raw logits.
pub fn cross_entropy_from_logits(logits: &ArrayView1<f64>, label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// d CE / d logits = softmax(logits) - onehot(label)
pub fn ce_logit_gradient(logits: &ArrayView1<f64>, label: usize) -> Array1<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

/// Widen stored f32 pixels to the f64 the harness computes in.
pub fn pixels_to_f64(pixels: &Array3<f32>) -> Array3<f64> {
    pixels.mapv(|v| v as f64)
}
