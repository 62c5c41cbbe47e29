//! Imperceptibility regularizers: a soft pixel-wise L-infinity penalty with
//! an embedding mask, Total Variation Upwind smoothing, and a feature-space
//! penalty toward the target-class centroid. All are drop-in terms for the
//! crafting objective; gradients are exact almost everywhere with the L1
//! subgradient at zero taken as 0.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::datamodel::ImageSample;
use crate::error::{Error, Result};
use crate::modelharness::{pixels_to_f64, FeatureExtractor};

/// Per-pixel headroom mask M = 1 - x for a base image in [0,1].
#[derive(Debug, Clone)]
pub struct EmbeddingMask {
    pub mask: Array3<f64>,
}

pub fn embedding_mask(x: &Array3<f64>) -> EmbeddingMask {
    EmbeddingMask {
        mask: x.mapv(|v| 1.0 - v),
    }
}

/// Which form of the soft L-infinity term to use. `Literal` penalizes
/// distance to M*eps; `Hinge` penalizes only the excess of |delta| over
/// M*eps and exists for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelRegMode {
    Literal,
    Hinge,
}

/// Soft pixel-wise L-infinity loss: ||delta - M*eps||_1.
pub fn soft_linf(delta: &Array3<f64>, mask: &EmbeddingMask, eps: f64) -> f64 {
    delta
        .iter()
        .zip(mask.mask.iter())
        .map(|(d, m)| (d - m * eps).abs())
        .sum()
}

pub fn soft_linf_grad(delta: &Array3<f64>, mask: &EmbeddingMask, eps: f64) -> Array3<f64> {
    ndarray::Zip::from(delta)
        .and(&mask.mask)
        .map_collect(|&d, &m| {
            let t = d - m * eps;
            if t > 0.0 {
                1.0
            } else if t < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
}

fn soft_linf_hinge(delta: &Array3<f64>, mask: &EmbeddingMask, eps: f64) -> f64 {
    delta
        .iter()
        .zip(mask.mask.iter())
        .map(|(d, m)| (d.abs() - m * eps).max(0.0))
        .sum()
}

fn soft_linf_hinge_grad(delta: &Array3<f64>, mask: &EmbeddingMask, eps: f64) -> Array3<f64> {
    ndarray::Zip::from(delta)
        .and(&mask.mask)
        .map_collect(|&d, &m| {
            if d.abs() > m * eps {
                d.signum()
            } else {
                0.0
            }
        })
}

/// Total Variation Upwind with forward-difference neighborhood
/// N(p) = {right, down}, per channel; boundary pixels skip missing
/// neighbors: sum_p (sum_q (d_p - d_q)^2)^(beta/2).
pub fn tvu(delta: &Array3<f64>, beta: f64) -> f64 {
    let (h, w, c) = delta.dim();
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = delta[[y, x, ch]];
                let mut s = 0.0;
                if x + 1 < w {
                    let t = p - delta[[y, x + 1, ch]];
                    s += t * t;
                }
                if y + 1 < h {
                    let t = p - delta[[y + 1, x, ch]];
                    s += t * t;
                }
                if s > 0.0 {
                    total += s.powf(beta / 2.0);
                }
            }
        }
    }
    total
}

pub fn tvu_grad(delta: &Array3<f64>, beta: f64) -> Array3<f64> {
    let (h, w, c) = delta.dim();
    let mut grad = Array3::<f64>::zeros((h, w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = delta[[y, x, ch]];
                let mut s = 0.0;
                if x + 1 < w {
                    let t = p - delta[[y, x + 1, ch]];
                    s += t * t;
                }
                if y + 1 < h {
                    let t = p - delta[[y + 1, x, ch]];
                    s += t * t;
                }
                if s <= 1e-300 {
                    continue;
                }
                let coef = (beta / 2.0) * s.powf(beta / 2.0 - 1.0);
                if x + 1 < w {
                    let t = p - delta[[y, x + 1, ch]];
                    grad[[y, x, ch]] += coef * 2.0 * t;
                    grad[[y, x + 1, ch]] -= coef * 2.0 * t;
                }
                if y + 1 < h {
                    let t = p - delta[[y + 1, x, ch]];
                    grad[[y, x, ch]] += coef * 2.0 * t;
                    grad[[y + 1, x, ch]] -= coef * 2.0 * t;
                }
            }
        }
    }
    grad
}

/// Pixel regularization: soft L-infinity plus TVU at beta = 1.
pub fn pixel_reg(delta: &Array3<f64>, x: &Array3<f64>, eps: f64, mode: PixelRegMode) -> f64 {
    let mask = embedding_mask(x);
    let soft = match mode {
        PixelRegMode::Literal => soft_linf(delta, &mask, eps),
        PixelRegMode::Hinge => soft_linf_hinge(delta, &mask, eps),
    };
    soft + tvu(delta, 1.0)
}

pub fn pixel_reg_grad(
    delta: &Array3<f64>,
    x: &Array3<f64>,
    eps: f64,
    mode: PixelRegMode,
) -> Array3<f64> {
    let mask = embedding_mask(x);
    let mut g = match mode {
        PixelRegMode::Literal => soft_linf_grad(delta, &mask, eps),
        PixelRegMode::Hinge => soft_linf_hinge_grad(delta, &mask, eps),
    };
    g += &tvu_grad(delta, 1.0);
    g
}

/// Mean feature vector of a sample set.
#[derive(Debug, Clone)]
pub struct FeatureCentroid {
    pub mu: Array1<f64>,
    pub source: String,
    pub count: usize,
}

pub fn feature_centroid<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    samples: &[&ImageSample],
    source: impl Into<String>,
) -> Result<FeatureCentroid> {
    if samples.is_empty() {
        return Err(Error::precondition("feature centroid of an empty set"));
    }
    let mut mu = Array1::<f64>::zeros(extractor.feature_dim());
    for s in samples {
        mu += &extractor.features_of(&pixels_to_f64(&s.pixels));
    }
    mu /= samples.len() as f64;
    Ok(FeatureCentroid {
        mu,
        source: source.into(),
        count: samples.len(),
    })
}

/// Feature regularization: ||f(x + delta) - mu||^2.
pub fn feature_reg<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    x: &Array3<f64>,
    delta: &Array3<f64>,
    centroid: &FeatureCentroid,
) -> f64 {
    let input = x + delta;
    let f = extractor.features_of(&input);
    (&f - &centroid.mu).mapv(|v| v * v).sum()
}

/// Gradient of [`feature_reg`] with respect to delta (raw pixel space).
pub fn feature_reg_grad<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    x: &Array3<f64>,
    delta: &Array3<f64>,
    centroid: &FeatureCentroid,
) -> Array3<f64> {
    let input = x + delta;
    let f = extractor.features_of(&input);
    let cot = (&f - &centroid.mu).mapv(|v| 2.0 * v);
    extractor.feature_input_gradient(&input, &cot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelharness::IdentityFeatures;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_trivials() {
        let x = Array3::from_elem((2, 2, 1), 0.0);
        assert!(embedding_mask(&x).mask.iter().all(|&m| m == 1.0));
        let x = Array3::from_elem((2, 2, 1), 1.0);
        assert!(embedding_mask(&x).mask.iter().all(|&m| m == 0.0));
        let x = Array3::from_elem((2, 2, 1), 0.25);
        assert!(embedding_mask(&x).mask.iter().all(|&m| m == 0.75));
    }

    #[test]
    fn soft_linf_minimum_and_hand_sum() {
        let x = Array3::from_elem((2, 2, 1), 0.0); // M = 1
        let mask = embedding_mask(&x);
        let eps = 0.5;

        let at_min = mask.mask.mapv(|m| m * eps);
        assert_eq!(soft_linf(&at_min, &mask, eps), 0.0);

        let zero = Array3::<f64>::zeros((2, 2, 1));
        assert!((soft_linf(&zero, &mask, eps) - 4.0 * eps).abs() < 1e-12);

        let mut d = Array3::<f64>::zeros((2, 2, 1));
        d[[0, 0, 0]] = 0.5;
        d[[0, 1, 0]] = 0.0;
        d[[1, 0, 0]] = 0.25;
        d[[1, 1, 0]] = 0.5;
        assert!((soft_linf(&d, &mask, eps) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn tvu_trivials_and_hand_value() {
        let zero = Array3::<f64>::zeros((3, 3, 2));
        assert_eq!(tvu(&zero, 1.0), 0.0);
        let constant = Array3::from_elem((3, 3, 2), 0.7);
        assert_eq!(tvu(&constant, 1.0), 0.0);

        let mut d = Array3::<f64>::zeros((2, 2, 1));
        d[[0, 1, 0]] = 1.0;
        assert!((tvu(&d, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tvu_translation_invariant_exactly() {
        // dyadic values keep the shifted sums exact in IEEE arithmetic
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Array3::from_shape_fn((6, 5, 3), |_| rng.gen_range(-32..32) as f64 / 64.0);
        let shifted = d.mapv(|v| v + 0.25);
        assert_eq!(tvu(&d, 1.0), tvu(&shifted, 1.0));
    }

    #[test]
    fn tvu_matches_bruteforce_oracle() {
        // independent double-loop oracle over all pixels and neighborhoods
        fn oracle(d: &Array3<f64>, beta: f64) -> f64 {
            let (h, w, c) = d.dim();
            let mut total = 0.0;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut neigh = Vec::new();
                        if x + 1 < w {
                            neigh.push(d[[y, x + 1, ch]]);
                        }
                        if y + 1 < h {
                            neigh.push(d[[y + 1, x, ch]]);
                        }
                        let s: f64 = neigh
                            .iter()
                            .map(|q| (d[[y, x, ch]] - q) * (d[[y, x, ch]] - q))
                            .sum();
                        total += s.powf(beta / 2.0);
                    }
                }
            }
            total
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let h = rng.gen_range(1..=8);
            let w = rng.gen_range(1..=8);
            let d = Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(-0.2..0.2));
            for beta in [1.0, 2.0] {
                assert!((tvu(&d, beta) - oracle(&d, beta)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_fn((5, 4, 3), |_| rng.gen_range(0.2..0.8));
        let eps = 16.0 / 255.0;
        // keep |delta - M*eps| well away from the kink at 0
        let delta = Array3::from_shape_fn((5, 4, 3), |_| {
            let v: f64 = rng.gen_range(0.1..0.3);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let h = 1e-6;
        let g_pix = pixel_reg_grad(&delta, &x, eps, PixelRegMode::Literal);
        let g_tvu = tvu_grad(&delta, 1.0);
        for _ in 0..10 {
            let iy = rng.gen_range(0..5);
            let ix = rng.gen_range(0..4);
            let ic = rng.gen_range(0..3);
            let mut dp = delta.clone();
            dp[[iy, ix, ic]] += h;
            let mut dm = delta.clone();
            dm[[iy, ix, ic]] -= h;

            let fd = (pixel_reg(&dp, &x, eps, PixelRegMode::Literal)
                - pixel_reg(&dm, &x, eps, PixelRegMode::Literal))
                / (2.0 * h);
            let g = g_pix[[iy, ix, ic]];
            assert!(
                (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8) < 1e-3,
                "pixel_reg fd {fd} vs {g}"
            );

            let fd_t = (tvu(&dp, 1.0) - tvu(&dm, 1.0)) / (2.0 * h);
            let gt = g_tvu[[iy, ix, ic]];
            assert!(
                (fd_t - gt).abs() / fd_t.abs().max(gt.abs()).max(1e-8) < 1e-3,
                "tvu fd {fd_t} vs {gt}"
            );
        }
    }

    #[test]
    fn pixel_reg_composition() {
        let x = Array3::from_elem((3, 3, 1), 0.5);
        let eps = 0.2;
        let mask = embedding_mask(&x);
        let at_soft_min = mask.mask.mapv(|m| m * eps);
        // soft term zero, only TVU remains (constant x makes M*eps constant,
        // so TVU of it is zero too)
        assert!((pixel_reg(&at_soft_min, &x, eps, PixelRegMode::Literal) - 0.0).abs() < 1e-12);

        let zero = Array3::<f64>::zeros((3, 3, 1));
        let n = 9.0;
        let expected = n * 0.5 * eps; // n * mean(M) * eps, TVU term 0
        assert!((pixel_reg(&zero, &x, eps, PixelRegMode::Literal) - expected).abs() < 1e-12);
    }

    #[test]
    fn hinge_variant_zero_inside_budget() {
        let x = Array3::from_elem((3, 3, 1), 0.0);
        let mask = embedding_mask(&x);
        let eps = 0.1;
        let inside = Array3::from_elem((3, 3, 1), 0.05);
        assert_eq!(soft_linf_hinge(&inside, &mask, eps), 0.0);
        let outside = Array3::from_elem((3, 3, 1), 0.15);
        assert!((soft_linf_hinge(&outside, &mask, eps) - 9.0 * 0.05).abs() < 1e-12);
    }

    #[test]
    fn centroid_trivials() {
        let ext = IdentityFeatures::new((2, 2, 1));
        let mk = |v: f32, id: &str| {
            ImageSample::new(id, 0, None, Array3::from_elem((2, 2, 1), v)).unwrap()
        };
        let a = mk(0.2, "a");
        let b = mk(0.4, "b");
        let single = feature_centroid(&ext, &[&a], "t").unwrap();
        assert!(single.mu.iter().all(|&m| (m - 0.2).abs() < 1e-7));
        assert_eq!(single.count, 1);

        let pair = feature_centroid(&ext, &[&a, &b], "t").unwrap();
        assert!(pair.mu.iter().all(|&m| (m - 0.3).abs() < 1e-7));

        let dup = feature_centroid(&ext, &[&a, &a, &a], "t").unwrap();
        assert!(dup.mu.iter().all(|&m| (m - 0.2).abs() < 1e-7));

        assert!(feature_centroid(&ext, &[], "t").is_err());
    }

    #[test]
    fn feature_reg_identity_cases() {
        let ext = IdentityFeatures::new((2, 2, 1));
        let x = Array3::from_elem((2, 2, 1), 0.3);
        let centroid = FeatureCentroid {
            mu: Array1::from_elem(4, 0.3),
            source: "t".into(),
            count: 1,
        };
        let zero = Array3::<f64>::zeros((2, 2, 1));
        assert!(feature_reg(&ext, &x, &zero, &centroid).abs() < 1e-12);

        // x + delta = mu + unit vector along one coordinate
        let mut d = Array3::<f64>::zeros((2, 2, 1));
        d[[0, 0, 0]] = 1.0;
        assert!((feature_reg(&ext, &x, &d, &centroid) - 1.0).abs() < 1e-12);

        // gradient of the quadratic under the identity map is 2(x+d-mu)
        let g = feature_reg_grad(&ext, &x, &d, &centroid);
        assert!((g[[0, 0, 0]] - 2.0).abs() < 1e-12);
        assert!(g[[0, 1, 0]].abs() < 1e-12);
    }
}
