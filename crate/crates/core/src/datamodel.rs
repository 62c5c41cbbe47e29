//! Dataset abstraction: samples, class-indexed sets, manifests on disk,
//! stratified splits, poison-target selection and normalization statistics.
//!
//! A dataset distinguishes three kinds of samples per class: clean images,
//! images carrying a physical trigger (keyed by trigger id), and images
//! carrying a lookalike "false trigger" used for false-positive evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = usize;

/// One image with its label and trigger provenance.
///
/// Pixels are stored H x W x C as floats in `[0, 1]`. `trigger_id` is `None`
/// for clean samples; for triggered and false-triggered samples it names the
/// (false) trigger the image carries.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub sample_id: String,
    pub label: ClassId,
    pub trigger_id: Option<String>,
    pub pixels: Array3<f32>,
}

impl ImageSample {
    pub fn new(
        sample_id: impl Into<String>,
        label: ClassId,
        trigger_id: Option<String>,
        pixels: Array3<f32>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        validate_pixels(&sample_id, &pixels)?;
        Ok(ImageSample {
            sample_id,
            label,
            trigger_id,
            pixels,
        })
    }

    /// (H, W, C)
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.pixels.dim();
        (d.0, d.1, d.2)
    }
}

fn validate_pixels(id: &str, pixels: &Array3<f32>) -> Result<()> {
    if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::precondition(format!(
            "sample {id}: pixel values must lie in [0,1]"
        )));
    }
    Ok(())
}

/// Source class / target class of an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonPair {
    pub source: ClassId,
    pub target: ClassId,
}

impl PoisonPair {
    pub fn new(source: ClassId, target: ClassId, classes: usize) -> Result<Self> {
        if source == target {
            return Err(Error::config("poison pair: source must differ from target"));
        }
        if source >= classes || target >= classes {
            return Err(Error::config(format!(
                "poison pair ({source},{target}) out of range for {classes} classes"
            )));
        }
        Ok(PoisonPair { source, target })
    }
}

/// Poison ratio and perturbation radius, both in raw pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoisonBudget {
    /// Fraction of the target-class training set that is perturbed, in (0, 1].
    pub alpha: f64,
    /// L-infinity radius as a fraction of the dynamic range, in [0, 1].
    pub epsilon: f64,
}

impl PoisonBudget {
    pub fn new(alpha: f64, epsilon: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config(format!("alpha {alpha} must be in (0,1]")));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(format!("epsilon {epsilon} must be in [0,1]")));
        }
        Ok(PoisonBudget { alpha, epsilon })
    }
}

/// Per-channel z-score statistics computed from clean training pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Identity statistics (mean 0, std 1), used where normalization should
    /// be a no-op, e.g. toy fixtures.
    pub fn identity(channels: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Manifest role of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRole {
    Clean,
    Trigger,
    FalseTrigger,
}

/// A dataset of `classes` classes with clean, triggered and false-triggered
/// sample sets. Immutable after construction; safe to share across readers.
#[derive(Debug, Clone)]
pub struct ClassDataset {
    classes: usize,
    clean: BTreeMap<ClassId, Vec<ImageSample>>,
    triggered: BTreeMap<(ClassId, String), Vec<ImageSample>>,
    false_triggered: BTreeMap<(ClassId, String), Vec<ImageSample>>,
}

impl ClassDataset {
    pub fn new(
        classes: usize,
        clean: BTreeMap<ClassId, Vec<ImageSample>>,
        triggered: BTreeMap<(ClassId, String), Vec<ImageSample>>,
        false_triggered: BTreeMap<(ClassId, String), Vec<ImageSample>>,
    ) -> Result<Self> {
        let ds = ClassDataset {
            classes,
            clean,
            triggered,
            false_triggered,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut shape: Option<(usize, usize, usize)> = None;
        let mut check = |s: &ImageSample, key_label: ClassId| -> Result<()> {
            if s.label != key_label {
                return Err(Error::precondition(format!(
                    "sample {} has label {} but sits under class {}",
                    s.sample_id, s.label, key_label
                )));
            }
            if s.label >= self.classes {
                return Err(Error::precondition(format!(
                    "sample {}: label {} out of range (k={})",
                    s.sample_id, s.label, self.classes
                )));
            }
            if !ids.insert(s.sample_id.clone()) {
                return Err(Error::precondition(format!(
                    "duplicate sample_id {}",
                    s.sample_id
                )));
            }
            match shape {
                None => shape = Some(s.shape()),
                Some(sh) if sh != s.shape() => {
                    return Err(Error::precondition(format!(
                        "sample {}: shape {:?} differs from dataset shape {:?}",
                        s.sample_id,
                        s.shape(),
                        sh
                    )));
                }
                _ => {}
            }
            validate_pixels(&s.sample_id, &s.pixels)
        };
        for (&c, list) in &self.clean {
            for s in list {
                check(s, c)?;
            }
        }
        for ((c, _), list) in &self.triggered {
            for s in list {
                check(s, *c)?;
            }
        }
        for ((c, _), list) in &self.false_triggered {
            for s in list {
                check(s, *c)?;
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Shape (H, W, C) of the dataset's images, if any sample exists.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.iter_all().next().map(|s| s.shape())
    }

    pub fn clean_class(&self, class: ClassId) -> &[ImageSample] {
        self.clean.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn triggered_set(&self, class: ClassId, trigger_id: &str) -> &[ImageSample] {
        self.triggered
            .get(&(class, trigger_id.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn false_triggered_set(&self, class: ClassId, false_trigger_id: &str) -> &[ImageSample] {
        self.false_triggered
            .get(&(class, false_trigger_id.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn triggered_keys(&self) -> impl Iterator<Item = &(ClassId, String)> {
        self.triggered.keys()
    }

    pub fn false_triggered_keys(&self) -> impl Iterator<Item = &(ClassId, String)> {
        self.false_triggered.keys()
    }

    /// Trigger ids present anywhere in the triggered maps, deduplicated.
    pub fn trigger_ids(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.triggered.keys().map(|(_, t)| t).collect();
        set.into_iter().cloned().collect()
    }

    /// False-trigger ids derived from a main trigger id (`<id>__false*`).
    pub fn false_trigger_ids_for(&self, trigger_id: &str) -> Vec<String> {
        let prefix = format!("{trigger_id}__false");
        let set: BTreeSet<&String> = self
            .false_triggered
            .keys()
            .map(|(_, t)| t)
            .filter(|t| t.starts_with(&prefix))
            .collect();
        set.into_iter().cloned().collect()
    }

    pub fn iter_clean(&self) -> impl Iterator<Item = &ImageSample> {
        self.clean.values().flatten()
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &ImageSample> {
        self.clean
            .values()
            .flatten()
            .chain(self.triggered.values().flatten())
            .chain(self.false_triggered.values().flatten())
    }

    pub fn n_clean(&self) -> usize {
        self.clean.values().map(Vec::len).sum()
    }

    pub fn find_clean(&self, sample_id: &str) -> Option<&ImageSample> {
        self.iter_clean().find(|s| s.sample_id == sample_id)
    }

    /// Per-class stratified split of every sample set (clean, triggered and
    /// false-triggered), deterministic under `seed`. The train side keeps
    /// `round(n * train_frac)` samples per set, clamped so both sides stay
    /// nonempty for clean sets.
    pub fn split_dataset(&self, train_frac: f64, seed: u64) -> Result<(ClassDataset, ClassDataset)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::config(format!(
                "train_frac {train_frac} must be in (0,1)"
            )));
        }
        for (&c, list) in &self.clean {
            if list.len() < 2 {
                return Err(Error::precondition(format!(
                    "class {c} has fewer than 2 clean samples; cannot split"
                )));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split_list = |list: &Vec<ImageSample>,
                              rng: &mut ChaCha8Rng,
                              require_both: bool|
         -> (Vec<ImageSample>, Vec<ImageSample>) {
            let n = list.len();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let mut n_train = (n as f64 * train_frac).round() as usize;
            if require_both {
                n_train = n_train.clamp(1, n - 1);
            } else {
                n_train = n_train.min(n);
            }
            let train_ids: BTreeSet<usize> = idx[..n_train].iter().copied().collect();
            let mut tr = Vec::with_capacity(n_train);
            let mut te = Vec::with_capacity(n - n_train);
            for (i, s) in list.iter().enumerate() {
                if train_ids.contains(&i) {
                    tr.push(s.clone());
                } else {
                    te.push(s.clone());
                }
            }
            (tr, te)
        };

        let mut clean_tr = BTreeMap::new();
        let mut clean_te = BTreeMap::new();
        for (&c, list) in &self.clean {
            let (tr, te) = split_list(list, &mut rng, true);
            clean_tr.insert(c, tr);
            clean_te.insert(c, te);
        }
        let mut trig_tr = BTreeMap::new();
        let mut trig_te = BTreeMap::new();
        for (key, list) in &self.triggered {
            let (tr, te) = split_list(list, &mut rng, false);
            trig_tr.insert(key.clone(), tr);
            trig_te.insert(key.clone(), te);
        }
        let mut false_tr = BTreeMap::new();
        let mut false_te = BTreeMap::new();
        for (key, list) in &self.false_triggered {
            let (tr, te) = split_list(list, &mut rng, false);
            false_tr.insert(key.clone(), tr);
            false_te.insert(key.clone(), te);
        }

        Ok((
            ClassDataset::new(self.classes, clean_tr, trig_tr, false_tr)?,
            ClassDataset::new(self.classes, clean_te, trig_te, false_te)?,
        ))
    }

    /// Draw `K = round(alpha * |D_t|)` distinct target-class clean sample ids
    /// uniformly at random, deterministic under `seed`. Errors when the
    /// rounded count is zero rather than returning a silent empty set.
    pub fn select_poison_targets(
        &self,
        pair: PoisonPair,
        budget: PoisonBudget,
        seed: u64,
    ) -> Result<Vec<String>> {
        let pool = self.clean_class(pair.target);
        if pool.is_empty() {
            return Err(Error::precondition(format!(
                "target class {} has no clean samples",
                pair.target
            )));
        }
        let k = (budget.alpha * pool.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::precondition(format!(
                "alpha {} on {} target samples rounds to zero poisons",
                budget.alpha,
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        let mut ids: Vec<String> = idx[..k]
            .iter()
            .map(|&i| pool[i].sample_id.clone())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// A copy of the dataset with the given clean samples removed (used by
    /// defenses that retrain after filtering). Unknown ids are an error.
    pub fn remove_clean_samples(&self, ids: &BTreeSet<String>) -> Result<ClassDataset> {
        let mut missing: BTreeSet<&String> = ids.iter().collect();
        let mut clean = BTreeMap::new();
        for (&c, list) in &self.clean {
            let kept: Vec<ImageSample> = list
                .iter()
                .filter(|s| {
                    let hit = ids.contains(&s.sample_id);
                    if hit {
                        missing.remove(&s.sample_id);
                    }
                    !hit
                })
                .cloned()
                .collect();
            clean.insert(c, kept);
        }
        if let Some(id) = missing.into_iter().next() {
            return Err(Error::precondition(format!(
                "cannot remove unknown sample_id {id}"
            )));
        }
        ClassDataset::new(
            self.classes,
            clean,
            self.triggered.clone(),
            self.false_triggered.clone(),
        )
    }

    /// Per-channel mean and population standard deviation over all clean
    /// pixels. Errors on a constant channel (zero std).
    pub fn compute_normalization(&self) -> Result<NormalizationStats> {
        let shape = self
            .image_shape()
            .ok_or_else(|| Error::precondition("cannot normalize an empty dataset"))?;
        let channels = shape.2;
        let mut sum = vec![0.0f64; channels];
        let mut sumsq = vec![0.0f64; channels];
        let mut count = 0usize;
        for s in self.iter_clean() {
            for row in s.pixels.outer_iter() {
                for px in row.outer_iter() {
                    for (c, v) in px.iter().enumerate() {
                        let v = *v as f64;
                        sum[c] += v;
                        sumsq[c] += v * v;
                    }
                }
            }
            count += shape.0 * shape.1;
        }
        if count == 0 {
            return Err(Error::precondition("cannot normalize an empty dataset"));
        }
        let n = count as f64;
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let m = sum[c] / n;
            let var = (sumsq[c] / n - m * m).max(0.0);
            let s = var.sqrt();
            if s <= 1e-12 {
                return Err(Error::numeric(format!(
                    "channel {c} is constant (std = 0); z-score normalization undefined"
                )));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(NormalizationStats { mean, std })
    }
}

// ---------------------------------------------------------------------------
// Manifest format: a directory with `index.json` plus 8-bit PNG images.
// Decoding is value/255 with no gamma handling.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestIndex {
    format_version: u32,
    classes: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    path: String,
    label: ClassId,
    trigger_id: Option<String>,
    role: SampleRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

/// Load a manifest directory into a validated [`ClassDataset`].
pub fn load_manifest(dir: &Path) -> Result<ClassDataset> {
    let index_path = dir.join("index.json");
    let raw = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::io(index_path.clone(), e))?;
    let index: ManifestIndex =
        serde_json::from_str(&raw).map_err(|e| Error::Json {
            path: index_path.clone(),
            source: e,
        })?;
    if index.format_version != 1 {
        return Err(Error::config(format!(
            "unsupported manifest format_version {}",
            index.format_version
        )));
    }

    let mut clean: BTreeMap<ClassId, Vec<ImageSample>> = BTreeMap::new();
    let mut triggered: BTreeMap<(ClassId, String), Vec<ImageSample>> = BTreeMap::new();
    let mut false_triggered: BTreeMap<(ClassId, String), Vec<ImageSample>> = BTreeMap::new();

    for entry in &index.samples {
        if entry.label >= index.classes {
            return Err(Error::precondition(format!(
                "sample {}: label {} out of range (k={})",
                entry.id, entry.label, index.classes
            )));
        }
        let img_path = dir.join(&entry.path);
        let pixels = read_png(&img_path)?;
        let sample = ImageSample::new(
            entry.id.clone(),
            entry.label,
            entry.trigger_id.clone(),
            pixels,
        )?;
        match entry.role {
            SampleRole::Clean => clean.entry(entry.label).or_default().push(sample),
            SampleRole::Trigger => {
                let t = entry.trigger_id.clone().ok_or_else(|| {
                    Error::precondition(format!("trigger sample {} lacks trigger_id", entry.id))
                })?;
                triggered.entry((entry.label, t)).or_default().push(sample);
            }
            SampleRole::FalseTrigger => {
                let t = entry.trigger_id.clone().ok_or_else(|| {
                    Error::precondition(format!(
                        "false-trigger sample {} lacks trigger_id",
                        entry.id
                    ))
                })?;
                false_triggered
                    .entry((entry.label, t))
                    .or_default()
                    .push(sample);
            }
        }
    }

    ClassDataset::new(index.classes, clean, triggered, false_triggered)
}

/// Persist a dataset as a manifest directory (index.json + PNG files).
pub fn save_manifest(ds: &ClassDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(images_dir.clone(), e))?;

    let mut samples = Vec::new();
    let mut write = |s: &ImageSample, role: SampleRole| -> Result<()> {
        let file = format!("images/{}.png", s.sample_id);
        write_png(&dir.join(&file), &s.pixels)?;
        samples.push(ManifestEntry {
            id: s.sample_id.clone(),
            path: file,
            label: s.label,
            trigger_id: s.trigger_id.clone(),
            role,
            split: None,
        });
        Ok(())
    };
    for list in ds.clean.values() {
        for s in list {
            write(s, SampleRole::Clean)?;
        }
    }
    for list in ds.triggered.values() {
        for s in list {
            write(s, SampleRole::Trigger)?;
        }
    }
    for list in ds.false_triggered.values() {
        for s in list {
            write(s, SampleRole::FalseTrigger)?;
        }
    }

    let index = ManifestIndex {
        format_version: 1,
        classes: ds.classes,
        samples,
    };
    let index_path = dir.join("index.json");
    let raw = serde_json::to_string_pretty(&index).map_err(|e| Error::Json {
        path: index_path.clone(),
        source: e,
    })?;
    std::fs::write(&index_path, raw).map_err(|e| Error::io(index_path, e))
}

fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn write_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, ch) = (pixels.dim().0, pixels.dim().1, pixels.dim().2);
    if ch != 3 {
        return Err(Error::precondition(format!(
            "png writer expects 3 channels, got {ch}"
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (pixels[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Snap pixel values onto the 8-bit grid (k/255). Generators use this so
/// in-memory datasets survive a manifest round trip bit-exactly.
pub fn quantize_to_u8_grid(pixels: &mut Array3<f32>) {
    for v in pixels.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}
