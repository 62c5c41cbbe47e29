//! Composition of the core poisoning objective with the pixel and feature
//! regularizers. Under `StandardLinf` the regularizers are replaced by hard
//! projection, so their weights are inert.

use serde::{Deserialize, Serialize};

use crate::attacks::RegMode;
use crate::error::{Error, Result};
use crate::regularizers::PixelRegMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub reg_mode: RegMode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub pixel_mode: PixelRegMode,
}

impl ObjectiveSpec {
    /// `lambda1 = None` selects the 10/n default, with `n_pixels` the number
    /// of components of one delta.
    pub fn new(
        reg_mode: RegMode,
        lambda1: Option<f64>,
        lambda2: f64,
        pixel_mode: PixelRegMode,
        n_pixels: usize,
    ) -> Result<Self> {
        if n_pixels == 0 {
            return Err(Error::precondition("objective needs a nonempty delta"));
        }
        let lambda1 = lambda1.unwrap_or(10.0 / n_pixels as f64);
        if !(lambda1.is_finite() && lambda2.is_finite()) {
            return Err(Error::config("regularizer weights must be finite"));
        }
        if lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::config("regularizer weights must be nonnegative"));
        }
        Ok(ObjectiveSpec {
            reg_mode,
            lambda1,
            lambda2,
            pixel_mode,
        })
    }

    pub fn uses_pixel_reg(&self) -> bool {
        matches!(
            self.reg_mode,
            RegMode::PixelReg | RegMode::PixelPlusFeatureReg
        )
    }

    pub fn uses_feature_reg(&self) -> bool {
        self.reg_mode == RegMode::PixelPlusFeatureReg
    }

    /// Whether deltas are projected onto the epsilon ball each step.
    pub fn hard_projection(&self) -> bool {
        self.reg_mode == RegMode::StandardLinf
    }

    /// Composite objective value from the already-evaluated terms. Terms for
    /// disabled regularizers are ignored.
    pub fn combine(&self, core: f64, r_pix: f64, r_feat: f64) -> f64 {
        let mut total = core;
        if self.uses_pixel_reg() {
            total += self.lambda1 * r_pix;
        }
        if self.uses_feature_reg() {
            total += self.lambda2 * r_feat;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_reduce_to_core() {
        let spec = ObjectiveSpec::new(
            RegMode::PixelReg,
            Some(0.0),
            0.0,
            PixelRegMode::Literal,
            100,
        )
        .unwrap();
        assert_eq!(spec.combine(1.25, 7.0, 3.0), 1.25);
    }

    #[test]
    fn standard_mode_ignores_regularizers() {
        let spec =
            ObjectiveSpec::new(RegMode::StandardLinf, None, 0.05, PixelRegMode::Literal, 64)
                .unwrap();
        assert!(spec.hard_projection());
        assert_eq!(spec.combine(0.5, 100.0, 100.0), 0.5);
    }

    #[test]
    fn default_weights() {
        let spec = ObjectiveSpec::new(
            RegMode::PixelPlusFeatureReg,
            None,
            0.05,
            PixelRegMode::Literal,
            64 * 64 * 3,
        )
        .unwrap();
        assert!((spec.lambda1 - 10.0 / 12288.0).abs() < 1e-15);
        assert!((spec.lambda2 - 0.05).abs() < 1e-15);
        // at delta = 0 the composite is core + lambda1 * R_pix(0)
        let v = spec.combine(2.0, 9.0, 0.0);
        assert!((v - (2.0 + spec.lambda1 * 9.0 + 0.0)).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(
            ObjectiveSpec::new(RegMode::PixelReg, Some(-1.0), 0.0, PixelRegMode::Literal, 10)
                .is_err()
        );
        assert!(
            ObjectiveSpec::new(RegMode::PixelReg, None, -0.1, PixelRegMode::Literal, 10).is_err()
        );
    }
}
