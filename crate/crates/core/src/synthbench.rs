//! Reproducible synthetic benchmark with physical-trigger emulation.
//!
//! Base classes are procedurally textured (per-class hue, grating orientation
//! and a signature shape) with per-sample nuisance variation, so a small CNN
//! separates them cleanly while leaving room for poisoning. Trigger patches
//! are composited with photometric and geometric jitter standing in for the
//! variability of a physical object photographed under changing conditions.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{quantize_to_u8_grid, ClassDataset, ClassId, ImageSample};
use crate::error::{Error, Result};

/// Photometric and geometric jitter ranges applied when compositing triggers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    /// Multiplicative brightness range applied to the whole composited image.
    pub brightness: (f32, f32),
    /// Per-channel additive shift drawn from `[-color_shift, color_shift]`.
    pub color_shift: f32,
    /// Std of additive Gaussian pixel noise.
    pub noise_std: f32,
    /// Max absolute placement offset in pixels (per axis).
    pub max_offset: usize,
    /// Max absolute patch rotation in degrees.
    pub max_rotation_deg: f32,
}

impl JitterSpec {
    pub fn none() -> Self {
        JitterSpec {
            brightness: (1.0, 1.0),
            color_shift: 0.0,
            noise_std: 0.0,
            max_offset: 0,
            max_rotation_deg: 0.0,
        }
    }
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            brightness: (0.8, 1.2),
            color_shift: 0.06,
            noise_std: 0.02,
            max_offset: 3,
            max_rotation_deg: 12.0,
        }
    }
}

/// A trigger patch image plus its placement anchor (top-left, row/col).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPatch {
    pub trigger_id: String,
    #[serde(with = "array3_serde")]
    pub pixels: Array3<f32>,
    pub anchor: (usize, usize),
}

/// Full description of a synthetic benchmark; one spec determines the
/// dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub triggered_per_class: usize,
    pub false_triggered_per_class: usize,
    /// How many false variants to derive per trigger (0..=3).
    pub false_variants_per_trigger: usize,
    pub triggers: Vec<TriggerPatch>,
    pub jitter: JitterSpec,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synth spec needs at least 2 classes"));
        }
        if self.images_per_class == 0 {
            return Err(Error::config("images_per_class must be positive"));
        }
        if self.false_variants_per_trigger > 3 {
            return Err(Error::config("at most 3 false variants per trigger"));
        }
        let j = &self.jitter;
        if !(j.brightness.0.is_finite()
            && j.brightness.1.is_finite()
            && j.color_shift.is_finite()
            && j.noise_std.is_finite()
            && j.max_rotation_deg.is_finite())
        {
            return Err(Error::config("jitter ranges must be finite"));
        }
        if j.brightness.0 > j.brightness.1 {
            return Err(Error::config("brightness range inverted"));
        }
        for t in &self.triggers {
            let (ph, pw, pc) = (t.pixels.dim().0, t.pixels.dim().1, t.pixels.dim().2);
            if pc != 3 {
                return Err(Error::config(format!("trigger {} must be RGB", t.trigger_id)));
            }
            // the rotated footprint (diagonal) must fit inside the image
            let diag = ((ph * ph + pw * pw) as f32).sqrt().ceil() as usize;
            if diag + 1 >= self.image_size {
                return Err(Error::config(format!(
                    "trigger {} ({}x{}) cannot fit a {}px image under rotation",
                    t.trigger_id, ph, pw, self.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn trigger(&self, trigger_id: &str) -> Result<&TriggerPatch> {
        self.triggers
            .iter()
            .find(|t| t.trigger_id == trigger_id)
            .ok_or_else(|| Error::precondition(format!("unknown trigger {trigger_id}")))
    }

    /// The default desk-scale benchmark: 10 classes, 200 images each, 64x64,
    /// three triggers (one of which echoes the texture of class 7).
    pub fn default_bench(seed: u64) -> Self {
        SynthSpec {
            classes: 10,
            images_per_class: 200,
            image_size: 64,
            triggered_per_class: 60,
            false_triggered_per_class: 20,
            false_variants_per_trigger: 2,
            triggers: vec![
                TriggerPatch {
                    trigger_id: "cross".into(),
                    pixels: patch_cross(14),
                    anchor: (10, 38),
                },
                TriggerPatch {
                    trigger_id: "checker".into(),
                    pixels: patch_checker(14),
                    anchor: (38, 10),
                },
                TriggerPatch {
                    trigger_id: "glyph".into(),
                    pixels: patch_class_glyph(7, 10, 14),
                    anchor: (12, 12),
                },
            ],
            jitter: JitterSpec::default(),
            seed,
        }
    }

    /// A miniature spec for fast tests.
    pub fn tiny(seed: u64) -> Self {
        SynthSpec {
            classes: 3,
            images_per_class: 12,
            image_size: 32,
            triggered_per_class: 4,
            false_triggered_per_class: 2,
            false_variants_per_trigger: 1,
            triggers: vec![TriggerPatch {
                trigger_id: "cross".into(),
                pixels: patch_cross(8),
                anchor: (6, 18),
            }],
            jitter: JitterSpec::default(),
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
// Patch builders
// ---------------------------------------------------------------------------

/// Bright magenta cross on a dark background.
pub fn patch_cross(size: usize) -> Array3<f32> {
    let mut p = Array3::from_elem((size, size, 3), 0.0f32);
    for y in 0..size {
        for x in 0..size {
            let on_arm = (y as i64 - size as i64 / 2).unsigned_abs() as usize <= size / 7
                || (x as i64 - size as i64 / 2).unsigned_abs() as usize <= size / 7;
            let c = if on_arm {
                [0.98, 0.08, 0.90]
            } else {
                [0.05, 0.05, 0.08]
            };
            for k in 0..3 {
                p[[y, x, k]] = c[k];
            }
        }
    }
    quantize_to_u8_grid(&mut p);
    p
}

/// Green/black checkerboard.
pub fn patch_checker(size: usize) -> Array3<f32> {
    let mut p = Array3::from_elem((size, size, 3), 0.0f32);
    for y in 0..size {
        for x in 0..size {
            let c = if ((y / 2) + (x / 2)) % 2 == 0 {
                [0.10, 0.92, 0.18]
            } else {
                [0.03, 0.03, 0.03]
            };
            for k in 0..3 {
                p[[y, x, k]] = c[k];
            }
        }
    }
    quantize_to_u8_grid(&mut p);
    p
}

/// A patch rendered from a class's signature texture (hue, grating and
/// shape), i.e. a trigger that aligns with that class's natural features.
pub fn patch_class_glyph(class: ClassId, classes: usize, size: usize) -> Array3<f32> {
    let mut p = Array3::from_elem((size, size, 3), 0.0f32);
    let style = ClassStyle::of(class, classes);
    let center = (size as f32 / 2.0, size as f32 / 2.0);
    let radius = size as f32 / 3.0;
    for y in 0..size {
        for x in 0..size {
            let g = style.grating(y as f32 * 4.0, x as f32 * 4.0, size as f32 * 4.0, 0.0);
            let mut v = [
                style.base[0] * (0.8 + 0.2 * g),
                style.base[1] * (0.8 + 0.2 * g),
                style.base[2] * (0.8 + 0.2 * g),
            ];
            if style.shape_hit(y as f32, x as f32, center, radius) {
                for k in 0..3 {
                    v[k] = 0.15 * v[k] + 0.85 * style.accent[k];
                }
            }
            for k in 0..3 {
                p[[y, x, k]] = v[k].clamp(0.0, 1.0);
            }
        }
    }
    quantize_to_u8_grid(&mut p);
    p
}

/// Kind of parametric perturbation used to build a false trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FalseVariantKind {
    /// Rotate hue by 120 degrees.
    HueRotate,
    /// Zoom the pattern by 1.3x (scale change at equal patch size).
    Scale,
    /// Rotate the pattern 45 degrees (shape change).
    ShapeSwap,
}

impl FalseVariantKind {
    pub fn all() -> [FalseVariantKind; 3] {
        [
            FalseVariantKind::HueRotate,
            FalseVariantKind::Scale,
            FalseVariantKind::ShapeSwap,
        ]
    }

    pub fn suffix(self) -> &'static str {
        match self {
            FalseVariantKind::HueRotate => "hue",
            FalseVariantKind::Scale => "scale",
            FalseVariantKind::ShapeSwap => "shape",
        }
    }
}

/// Derive a false-trigger patch from a real one.
pub fn false_variant(patch: &Array3<f32>, kind: FalseVariantKind) -> Array3<f32> {
    let (h, w, _) = patch.dim();
    let mut out = Array3::from_elem((h, w, 3), 0.0f32);
    match kind {
        FalseVariantKind::HueRotate => {
            for y in 0..h {
                for x in 0..w {
                    let (hh, s, v) = rgb_to_hsv(patch[[y, x, 0]], patch[[y, x, 1]], patch[[y, x, 2]]);
                    let (r, g, b) = hsv_to_rgb((hh + 1.0 / 3.0) % 1.0, s, v);
                    out[[y, x, 0]] = r;
                    out[[y, x, 1]] = g;
                    out[[y, x, 2]] = b;
                }
            }
        }
        FalseVariantKind::Scale => {
            let cy = (h as f32 - 1.0) / 2.0;
            let cx = (w as f32 - 1.0) / 2.0;
            for y in 0..h {
                for x in 0..w {
                    let sy = cy + (y as f32 - cy) / 1.3;
                    let sx = cx + (x as f32 - cx) / 1.3;
                    for c in 0..3 {
                        out[[y, x, c]] = bilinear(patch, sy, sx, c).unwrap_or(0.04);
                    }
                }
            }
        }
        FalseVariantKind::ShapeSwap => {
            let cy = (h as f32 - 1.0) / 2.0;
            let cx = (w as f32 - 1.0) / 2.0;
            let (sin, cos) = (PI / 4.0).sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f32 - cy;
                    let dx = x as f32 - cx;
                    let sy = cy + cos * dy - sin * dx;
                    let sx = cx + sin * dy + cos * dx;
                    for c in 0..3 {
                        out[[y, x, c]] = bilinear(patch, sy, sx, c).unwrap_or(0.04);
                    }
                }
            }
        }
    }
    quantize_to_u8_grid(&mut out);
    out
}

// ---------------------------------------------------------------------------
// Base class rendering
// ---------------------------------------------------------------------------

struct ClassStyle {
    base: [f32; 3],
    accent: [f32; 3],
    angle: f32,
    freq: f32,
    shape: usize,
}

impl ClassStyle {
    fn of(class: ClassId, classes: usize) -> Self {
        let hue = class as f32 / classes.max(1) as f32;
        let (r, g, b) = hsv_to_rgb(hue, 0.55, 0.72);
        let (ar, ag, ab) = hsv_to_rgb((hue + 0.5) % 1.0, 0.85, 0.95);
        ClassStyle {
            base: [r, g, b],
            accent: [ar, ag, ab],
            angle: PI * class as f32 / classes.max(1) as f32,
            freq: 3.0 + (class % 4) as f32,
            shape: class % 4,
        }
    }

    fn grating(&self, y: f32, x: f32, size: f32, phase: f32) -> f32 {
        let (s, c) = self.angle.sin_cos();
        (2.0 * PI * self.freq * (x * c + y * s) / size + phase).sin()
    }

    fn shape_hit(&self, y: f32, x: f32, center: (f32, f32), radius: f32) -> bool {
        let dy = y - center.0;
        let dx = x - center.1;
        match self.shape {
            0 => dy * dy + dx * dx <= radius * radius,
            1 => dy.abs() <= radius && dx.abs() <= radius * 0.8,
            2 => dy.abs() + dx.abs() <= radius * 1.2,
            _ => {
                let d2 = dy * dy + dx * dx;
                d2 <= radius * radius && d2 >= (radius * 0.55) * (radius * 0.55)
            }
        }
    }
}

fn render_base(class: ClassId, classes: usize, size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let style = ClassStyle::of(class, classes);
    let s = size as f32;
    let phase: f32 = rng.gen_range(0.0..(2.0 * PI));
    let jy: f32 = rng.gen_range(-3.0..=3.0);
    let jx: f32 = rng.gen_range(-3.0..=3.0);
    let radius: f32 = s / 6.0 + rng.gen_range(-1.5..=1.5);
    let brightness: f32 = rng.gen_range(0.92..=1.08);
    let noise = Normal::new(0.0f32, 0.02).expect("std is finite");

    let center = (
        s / 2.0 + class_shape_offset(class).0 as f32 + jy,
        s / 2.0 + class_shape_offset(class).1 as f32 + jx,
    );
    let mut img = Array3::from_elem((size, size, 3), 0.0f32);
    for y in 0..size {
        for x in 0..size {
            let g = style.grating(y as f32, x as f32, s, phase);
            let mut v = [
                style.base[0] * (0.8 + 0.2 * g),
                style.base[1] * (0.8 + 0.2 * g),
                style.base[2] * (0.8 + 0.2 * g),
            ];
            if style.shape_hit(y as f32, x as f32, center, radius) {
                for k in 0..3 {
                    v[k] = 0.2 * v[k] + 0.8 * style.accent[k];
                }
            }
            for k in 0..3 {
                let n: f32 = noise.sample(rng);
                img[[y, x, k]] = (v[k] * brightness + n).clamp(0.0, 1.0);
            }
        }
    }
    quantize_to_u8_grid(&mut img);
    img
}

fn class_shape_offset(class: ClassId) -> (i64, i64) {
    (
        ((class * 5) % 13) as i64 - 6,
        ((class * 9) % 11) as i64 - 5,
    )
}

fn class_anchor_offset(class: ClassId) -> (i64, i64) {
    (((class * 3) % 9) as i64 - 4, ((class * 7) % 9) as i64 - 4)
}

// ---------------------------------------------------------------------------
// Generation ops
// ---------------------------------------------------------------------------

fn derive_seed(root: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = root ^ 0x9E37_79B9_7F4A_7C15;
    for byte in tag.as_bytes() {
        h = (h ^ *byte as u64).wrapping_mul(0x100_0000_01B3);
    }
    h = h
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB));
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

/// Generate the clean base dataset, deterministic under `spec.seed`.
pub fn generate_base(spec: &SynthSpec) -> Result<ClassDataset> {
    spec.validate()?;
    let mut clean: BTreeMap<ClassId, Vec<ImageSample>> = BTreeMap::new();
    for c in 0..spec.classes {
        let mut list = Vec::with_capacity(spec.images_per_class);
        for i in 0..spec.images_per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "base", c as u64, i as u64));
            let pixels = render_base(c, spec.classes, spec.image_size, &mut rng);
            list.push(ImageSample::new(
                format!("c{c}_{i:03}"),
                c,
                None,
                pixels,
            )?);
        }
        clean.insert(c, list);
    }
    ClassDataset::new(spec.classes, clean, BTreeMap::new(), BTreeMap::new())
}

/// Composite a trigger patch onto a sample with jittered placement and
/// global photometric jitter. Deterministic under `seed`.
pub fn composite_trigger(
    sample: &ImageSample,
    trigger_id: &str,
    spec: &SynthSpec,
    seed: u64,
) -> Result<ImageSample> {
    let patch = spec.trigger(trigger_id)?;
    let composited = composite_patch(
        &sample.pixels,
        &patch.pixels,
        patch.anchor,
        sample.label,
        &spec.jitter,
        spec.image_size,
        seed,
    );
    ImageSample::new(
        format!("{}~{}", sample.sample_id, trigger_id),
        sample.label,
        Some(trigger_id.to_string()),
        composited,
    )
}

fn composite_patch(
    base: &Array3<f32>,
    patch: &Array3<f32>,
    anchor: (usize, usize),
    class: ClassId,
    jitter: &JitterSpec,
    image_size: usize,
    seed: u64,
) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ph, pw, _) = patch.dim();
    let m = jitter.max_offset as i64;
    let dy: i64 = if m > 0 { rng.gen_range(-m..=m) } else { 0 };
    let dx: i64 = if m > 0 { rng.gen_range(-m..=m) } else { 0 };
    let rot_deg: f32 = if jitter.max_rotation_deg > 0.0 {
        rng.gen_range(-jitter.max_rotation_deg..=jitter.max_rotation_deg)
    } else {
        0.0
    };

    let off = class_anchor_offset(class);
    let want_y = anchor.0 as i64 + off.0 + dy;
    let want_x = anchor.1 as i64 + off.1 + dx;
    // clamp so the rotated footprint stays inside the image
    let diag = ((ph * ph + pw * pw) as f32).sqrt().ceil() as i64;
    let slack_y = (diag - ph as i64).max(0) / 2 + 1;
    let slack_x = (diag - pw as i64).max(0) / 2 + 1;
    let top = want_y.clamp(slack_y, image_size as i64 - ph as i64 - slack_y);
    let left = want_x.clamp(slack_x, image_size as i64 - pw as i64 - slack_x);

    let mut out = base.clone();
    if rot_deg.abs() < 1e-6 {
        // axis-aligned paste, exact copy of patch values
        for y in 0..ph {
            for x in 0..pw {
                for c in 0..3 {
                    out[[top as usize + y, left as usize + x, c]] = patch[[y, x, c]];
                }
            }
        }
    } else {
        let theta = rot_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let cy = top as f32 + (ph as f32 - 1.0) / 2.0;
        let cx = left as f32 + (pw as f32 - 1.0) / 2.0;
        let y0 = (cy - diag as f32 / 2.0).floor().max(0.0) as usize;
        let y1 = ((cy + diag as f32 / 2.0).ceil() as usize).min(image_size - 1);
        let x0 = (cx - diag as f32 / 2.0).floor().max(0.0) as usize;
        let x1 = ((cx + diag as f32 / 2.0).ceil() as usize).min(image_size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                // rotate back into patch coordinates
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let py = cos * dy + sin * dx + (ph as f32 - 1.0) / 2.0;
                let px = -sin * dy + cos * dx + (pw as f32 - 1.0) / 2.0;
                if py >= 0.0 && py <= (ph - 1) as f32 && px >= 0.0 && px <= (pw - 1) as f32 {
                    for c in 0..3 {
                        if let Some(v) = bilinear(patch, py, px, c) {
                            out[[y, x, c]] = v;
                        }
                    }
                }
            }
        }
    }

    // global photometric jitter
    let b: f32 = rng.gen_range(jitter.brightness.0..=jitter.brightness.1);
    let mut shift = [0.0f32; 3];
    if jitter.color_shift > 0.0 {
        for s in &mut shift {
            *s = rng.gen_range(-jitter.color_shift..=jitter.color_shift);
        }
    }
    let photometric = b != 1.0 || shift != [0.0; 3] || jitter.noise_std > 0.0;
    if photometric {
        let noise = Normal::new(0.0f32, jitter.noise_std.max(0.0)).expect("finite std");
        for y in 0..image_size {
            for x in 0..image_size {
                for c in 0..3 {
                    let n: f32 = if jitter.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    out[[y, x, c]] = (out[[y, x, c]] * b + shift[c] + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    quantize_to_u8_grid(&mut out);
    out
}

fn bilinear(img: &Array3<f32>, y: f32, x: f32, c: usize) -> Option<f32> {
    let (h, w, _) = img.dim();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f32 || x > (w - 1) as f32 {
        return None;
    }
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    Some(
        img[[y0, x0, c]] * (1.0 - fy) * (1.0 - fx)
            + img[[y0, x1, c]] * (1.0 - fy) * fx
            + img[[y1, x0, c]] * fy * (1.0 - fx)
            + img[[y1, x1, c]] * fy * fx,
    )
}

/// Build the full benchmark: clean sets, per-trigger triggered sets for all
/// classes, and false-trigger sets derived from perturbed patch variants.
pub fn build_bench(spec: &SynthSpec) -> Result<ClassDataset> {
    spec.validate()?;
    let base = generate_base(spec)?;

    let mut triggered: BTreeMap<(ClassId, String), Vec<ImageSample>> = BTreeMap::new();
    for t in &spec.triggers {
        for c in 0..spec.classes {
            let mut list = Vec::with_capacity(spec.triggered_per_class);
            for i in 0..spec.triggered_per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    spec.seed,
                    &format!("trigbase:{}", t.trigger_id),
                    c as u64,
                    i as u64,
                ));
                let pixels = render_base(c, spec.classes, spec.image_size, &mut rng);
                let base_sample = ImageSample::new(
                    format!("t{c}_{}_{i:03}", t.trigger_id),
                    c,
                    None,
                    pixels,
                )?;
                let s = composite_trigger(
                    &base_sample,
                    &t.trigger_id,
                    spec,
                    derive_seed(spec.seed, &format!("composite:{}", t.trigger_id), c as u64, i as u64),
                )?;
                list.push(s);
            }
            triggered.insert((c, t.trigger_id.clone()), list);
        }
    }

    let mut false_triggered: BTreeMap<(ClassId, String), Vec<ImageSample>> = BTreeMap::new();
    for t in &spec.triggers {
        for (vi, kind) in FalseVariantKind::all()
            .into_iter()
            .take(spec.false_variants_per_trigger)
            .enumerate()
        {
            let fid = format!("{}__false_{}", t.trigger_id, kind.suffix());
            let fpatch = false_variant(&t.pixels, kind);
            for c in 0..spec.classes {
                let mut list = Vec::with_capacity(spec.false_triggered_per_class);
                for i in 0..spec.false_triggered_per_class {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        spec.seed,
                        &format!("falsebase:{fid}"),
                        c as u64,
                        i as u64,
                    ));
                    let pixels = render_base(c, spec.classes, spec.image_size, &mut rng);
                    let composited = composite_patch(
                        &pixels,
                        &fpatch,
                        t.anchor,
                        c,
                        &spec.jitter,
                        spec.image_size,
                        derive_seed(spec.seed, &format!("falsecomp:{fid}"), c as u64, (vi * 10_000 + i) as u64),
                    );
                    list.push(ImageSample::new(
                        format!("f{c}_{fid}_{i:03}"),
                        c,
                        Some(fid.clone()),
                        composited,
                    )?);
                }
                false_triggered.insert((c, fid.clone()), list);
            }
        }
    }

    let mut clean = BTreeMap::new();
    for c in 0..spec.classes {
        clean.insert(c, base.clean_class(c).to_vec());
    }
    ClassDataset::new(spec.classes, clean, triggered, false_triggered)
}

/// Corner points (row, col) of the unrotated patch rectangle at its
/// class-adjusted anchor; the stand-in for landmark-based placement.
pub fn placement_quad(spec: &SynthSpec, trigger_id: &str, class: ClassId) -> Result<[(f64, f64); 4]> {
    let patch = spec.trigger(trigger_id)?;
    let (ph, pw, _) = patch.pixels.dim();
    let off = class_anchor_offset(class);
    let top = (patch.anchor.0 as i64 + off.0).max(0) as f64;
    let left = (patch.anchor.1 as i64 + off.1).max(0) as f64;
    Ok([
        (top, left),
        (top, left + pw as f64 - 1.0),
        (top + ph as f64 - 1.0, left + pw as f64 - 1.0),
        (top + ph as f64 - 1.0, left),
    ])
}

/// Build the benchmark and persist it as a manifest directory with the spec
/// stored beside it as `synth_spec.json`.
pub fn emit_bench(spec: &SynthSpec, dir: &Path) -> Result<ClassDataset> {
    let ds = build_bench(spec)?;
    crate::datamodel::save_manifest(&ds, dir)?;
    let spec_path = dir.join("synth_spec.json");
    let raw = serde_json::to_string_pretty(spec).map_err(|e| Error::Json {
        path: spec_path.clone(),
        source: e,
    })?;
    std::fs::write(&spec_path, raw).map_err(|e| Error::io(spec_path, e))?;
    Ok(ds)
}

pub fn load_spec(path: &Path) -> Result<SynthSpec> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let spec: SynthSpec = serde_json::from_str(&raw).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Color helpers
// ---------------------------------------------------------------------------

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Serde support for `Array3<f32>` as `{h, w, c, data}`.
pub mod array3_serde {
    use ndarray::Array3;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Packed {
        h: usize,
        w: usize,
        c: usize,
        data: Vec<f32>,
    }

    pub fn serialize<S: Serializer>(arr: &Array3<f32>, ser: S) -> Result<S::Ok, S::Error> {
        let (h, w, c) = arr.dim();
        Packed {
            h,
            w,
            c,
            data: arr.iter().copied().collect(),
        }
        .serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Array3<f32>, D::Error> {
        let p = Packed::deserialize(de)?;
        Array3::from_shape_vec((p.h, p.w, p.c), p.data)
            .map_err(|e| D::Error::custom(format!("bad array shape: {e}")))
    }
}
