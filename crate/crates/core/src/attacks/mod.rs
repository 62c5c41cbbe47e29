//! Poison crafting: the naive trigger-sample swap, feature matching,
//! gradient matching (optionally with repel terms in the adversarial loss),
//! and the blended label-consistent attack. Crafting emits [`PoisonSet`]s
//! under an L-infinity budget or under the soft regularized objective.

mod blc;
mod fm;
mod gm;
pub mod homography;
mod io;
mod objective;
mod optim;
mod repel;

pub use blc::craft_blc;
pub use fm::craft_fm;
pub use gm::{adv_gradient, alignment_loss, craft_gm, AdvLossMode};
pub use io::{load_craft_report, load_poison_set, save_craft_report, save_poison_set};
pub use objective::ObjectiveSpec;
pub use optim::{LrSchedule, OptimizerKind};
pub use repel::{repel_adv_loss, repel_loss_from_logits};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ClassDataset, PoisonBudget, PoisonPair};
use crate::error::{Error, Result};
use crate::regularizers::PixelRegMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonAlgorithm {
    Naive,
    Fm,
    Gm,
    Blc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    StandardLinf,
    PixelReg,
    PixelPlusFeatureReg,
}

/// One per-sample perturbation with crafting provenance.
#[derive(Debug, Clone)]
pub struct PoisonDelta {
    pub sample_id: String,
    pub delta: Array3<f32>,
    pub final_objective: f64,
    pub iterations_run: usize,
}

/// The crafted poison set for one attack run.
#[derive(Debug, Clone)]
pub struct PoisonSet {
    pub deltas: Vec<PoisonDelta>,
    pub pair: PoisonPair,
    pub budget: PoisonBudget,
    pub algorithm: PoisonAlgorithm,
    pub reg_mode: RegMode,
}

impl PoisonSet {
    /// True when the sup-norm budget applies to stored deltas. Naive poisons
    /// are whole-image substitutions and BLC blends a trigger on top of the
    /// bounded adversarial perturbation, so both are exempt.
    pub fn linf_bounded(&self) -> bool {
        matches!(self.algorithm, PoisonAlgorithm::Fm | PoisonAlgorithm::Gm)
            && self.reg_mode == RegMode::StandardLinf
    }

    /// Largest |delta| component across the set.
    pub fn max_linf(&self) -> f32 {
        self.deltas
            .iter()
            .flat_map(|d| d.delta.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Check the crafting invariants against a dataset: distinct target-class
    /// ids, the sup-norm bound when it applies, and poisoned pixels in [0,1].
    pub fn validate_against(&self, ds: &ClassDataset) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.deltas {
            if !seen.insert(&d.sample_id) {
                return Err(Error::precondition(format!(
                    "duplicate poison sample_id {}",
                    d.sample_id
                )));
            }
            let base = ds.find_clean(&d.sample_id).ok_or_else(|| {
                Error::precondition(format!("poison id {} not in dataset", d.sample_id))
            })?;
            if base.label != self.pair.target {
                return Err(Error::precondition(format!(
                    "poison id {} is not in the target class",
                    d.sample_id
                )));
            }
            if self.linf_bounded() {
                let linf = d.delta.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                if linf as f64 > self.budget.epsilon + 1e-6 {
                    return Err(Error::precondition(format!(
                        "delta for {} exceeds epsilon: {} > {}",
                        d.sample_id, linf, self.budget.epsilon
                    )));
                }
            }
            for (p, dv) in base.pixels.iter().zip(d.delta.iter()) {
                let v = p + dv;
                if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                    return Err(Error::precondition(format!(
                        "poisoned pixel out of [0,1] for {}: {v}",
                        d.sample_id
                    )));
                }
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn empty_for_tests() -> Self {
        PoisonSet {
            deltas: vec![],
            pair: PoisonPair {
                source: 0,
                target: 1,
            },
            budget: PoisonBudget {
                alpha: 0.1,
                epsilon: 16.0 / 255.0,
            },
            algorithm: PoisonAlgorithm::Gm,
            reg_mode: RegMode::StandardLinf,
        }
    }

    #[cfg(test)]
    pub(crate) fn single_for_tests(id: &str, delta: Array3<f32>) -> Self {
        PoisonSet {
            deltas: vec![PoisonDelta {
                sample_id: id.to_string(),
                delta,
                final_objective: 0.0,
                iterations_run: 0,
            }],
            pair: PoisonPair {
                source: 0,
                target: 1,
            },
            budget: PoisonBudget {
                alpha: 0.1,
                epsilon: 16.0 / 255.0,
            },
            algorithm: PoisonAlgorithm::Gm,
            reg_mode: RegMode::StandardLinf,
        }
    }
}

/// Crafting hyperparameters. Per-algorithm defaults follow the attacks'
/// standard settings; `seed` drives initialization and pairing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub algorithm: PoisonAlgorithm,
    pub reg_mode: RegMode,
    pub iterations: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Pixel-regularizer weight; `None` means the 10/n default (n = number
    /// of delta components).
    pub lambda1: Option<f64>,
    pub lambda2: f64,
    pub pixel_mode: PixelRegMode,
    /// FM: poisons are re-paired with a random trigger source sample every
    /// this many iterations.
    pub repair_interval: usize,
    pub seed: u64,
}

impl AttackConfig {
    /// Gradient matching: signed Adam, lr 0.1, 250 iterations, cosine
    /// annealing down to 1e-4.
    pub fn gm_default(seed: u64) -> Self {
        AttackConfig {
            algorithm: PoisonAlgorithm::Gm,
            reg_mode: RegMode::StandardLinf,
            iterations: 250,
            lr: 0.1,
            schedule: LrSchedule::CosineAnnealing { floor: 1e-4 },
            optimizer: OptimizerKind::SignedAdam,
            lambda1: None,
            lambda2: 0.05,
            pixel_mode: PixelRegMode::Literal,
            repair_interval: 500,
            seed,
        }
    }

    /// Feature matching: projected gradient descent, lr 0.01, 5000
    /// iterations, lr x0.95 every 2000.
    pub fn fm_default(seed: u64) -> Self {
        AttackConfig {
            algorithm: PoisonAlgorithm::Fm,
            reg_mode: RegMode::StandardLinf,
            iterations: 5000,
            lr: 0.01,
            schedule: LrSchedule::StepDecay {
                every: 2000,
                factor: 0.95,
            },
            optimizer: OptimizerKind::Pgd,
            lambda1: None,
            lambda2: 0.05,
            pixel_mode: PixelRegMode::Literal,
            repair_interval: 500,
            seed,
        }
    }

    /// Blended label-consistent: PGD ascent for 100 iterations at lr
    /// epsilon/4, then a trigger blend at the configured opacity.
    pub fn blc_default(epsilon: f64, seed: u64) -> Self {
        AttackConfig {
            algorithm: PoisonAlgorithm::Blc,
            reg_mode: RegMode::StandardLinf,
            iterations: 100,
            lr: epsilon / 4.0,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::SignedPgd,
            lambda1: None,
            lambda2: 0.05,
            pixel_mode: PixelRegMode::Literal,
            repair_interval: 500,
            seed,
        }
    }
}

/// Trigger image, placement quadrilateral and opacity for the BLC blend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BLCConfig {
    #[serde(with = "crate::synthbench::array3_serde")]
    pub trigger: Array3<f32>,
    /// Corners (row, col) in image coordinates, clockwise from top-left;
    /// stands in for landmark-driven placement.
    pub placement: [(f64, f64); 4],
    pub opacity: f64,
}

impl BLCConfig {
    pub fn new(trigger: Array3<f32>, placement: [(f64, f64); 4], opacity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::config(format!("opacity {opacity} must be in [0,1]")));
        }
        if !is_convex(&placement) {
            return Err(Error::config(
                "placement quadrilateral must be convex and non-degenerate",
            ));
        }
        Ok(BLCConfig {
            trigger,
            placement,
            opacity,
        })
    }
}

fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = q[(i + 2) % 4];
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Objective and delta-norm traces recorded while crafting.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CraftReport {
    /// Composite objective per iteration (core + weighted regularizers).
    pub objective_trace: Vec<f64>,
    /// Core poisoning objective per iteration (e.g. the alignment loss).
    pub core_trace: Vec<f64>,
    /// L2 norm of the stacked deltas per iteration.
    pub delta_l2_trace: Vec<f64>,
    pub wall_time_secs: f64,
}

/// Naive poisoning: swap selected target-class training images for
/// trigger-bearing target samples. Deltas store the whole-image difference
/// and are exempt from the epsilon machinery.
pub fn craft_naive(
    ds: &ClassDataset,
    pair: PoisonPair,
    budget: PoisonBudget,
    trigger_id: &str,
    seed: u64,
) -> Result<PoisonSet> {
    let trigger_pool = ds.triggered_set(pair.target, trigger_id);
    if trigger_pool.is_empty() {
        return Err(Error::precondition(format!(
            "no trigger samples for target class {} with trigger {trigger_id}",
            pair.target
        )));
    }
    let ids = ds.select_poison_targets(pair, budget, seed)?;
    let deltas = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let base = ds.find_clean(id).expect("selected from clean set");
            let swap = &trigger_pool[i % trigger_pool.len()];
            let delta = ndarray::Zip::from(&swap.pixels)
                .and(&base.pixels)
                .map_collect(|&t, &b| t - b);
            PoisonDelta {
                sample_id: id.clone(),
                delta,
                final_objective: 0.0,
                iterations_run: 0,
            }
        })
        .collect();
    Ok(PoisonSet {
        deltas,
        pair,
        budget,
        algorithm: PoisonAlgorithm::Naive,
        reg_mode: RegMode::StandardLinf,
    })
}

/// Project a delta onto the L-infinity ball and the [0,1] box around `base`.
pub(crate) fn project_box(delta: &mut Array3<f64>, base: &Array3<f64>, epsilon: Option<f64>) {
    for (d, b) in delta.iter_mut().zip(base.iter()) {
        if let Some(eps) = epsilon {
            *d = d.clamp(-eps, eps);
        }
        *d = d.clamp(-b, 1.0 - b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ImageSample;
    use std::collections::BTreeMap;

    fn ds_with_triggers() -> ClassDataset {
        let px = |v: f32| Array3::from_elem((4, 4, 3), v);
        let mut clean = BTreeMap::new();
        for c in 0..2usize {
            let list: Vec<ImageSample> = (0..10)
                .map(|i| {
                    ImageSample::new(format!("c{c}_{i}"), c, None, px(0.2 + 0.1 * c as f32))
                        .unwrap()
                })
                .collect();
            clean.insert(c, list);
        }
        let mut triggered = BTreeMap::new();
        triggered.insert(
            (1usize, "tg".to_string()),
            vec![
                ImageSample::new("trig_a", 1, Some("tg".into()), px(0.9)).unwrap(),
                ImageSample::new("trig_b", 1, Some("tg".into()), px(0.8)).unwrap(),
            ],
        );
        ClassDataset::new(2, clean, triggered, BTreeMap::new()).unwrap()
    }

    #[test]
    fn naive_swaps_whole_images() {
        let ds = ds_with_triggers();
        let pair = PoisonPair::new(0, 1, 2).unwrap();
        let budget = PoisonBudget::new(0.3, 16.0 / 255.0).unwrap();
        let ps = craft_naive(&ds, pair, budget, "tg", 1).unwrap();
        assert_eq!(ps.deltas.len(), 3);
        assert_eq!(ps.algorithm, PoisonAlgorithm::Naive);
        assert!(!ps.linf_bounded());
        ps.validate_against(&ds).unwrap();
        // base + delta reproduces a trigger sample exactly
        let d = &ps.deltas[0];
        let base = ds.find_clean(&d.sample_id).unwrap();
        let rebuilt =
            ndarray::Zip::from(&base.pixels).and(&d.delta).map_collect(|&b, &dv| b + dv);
        assert!(rebuilt.iter().all(|&v| (v - 0.9).abs() < 1e-6 || (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn naive_requires_target_trigger_samples() {
        let ds = ds_with_triggers();
        let pair = PoisonPair::new(1, 0, 2).unwrap(); // target 0 has no trigger set
        let budget = PoisonBudget::new(0.3, 0.1).unwrap();
        assert!(craft_naive(&ds, pair, budget, "tg", 1).is_err());
    }

    #[test]
    fn naive_deterministic() {
        let ds = ds_with_triggers();
        let pair = PoisonPair::new(0, 1, 2).unwrap();
        let budget = PoisonBudget::new(0.2, 0.1).unwrap();
        let a = craft_naive(&ds, pair, budget, "tg", 9).unwrap();
        let b = craft_naive(&ds, pair, budget, "tg", 9).unwrap();
        let ids = |p: &PoisonSet| p.deltas.iter().map(|d| d.sample_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn convexity_check() {
        let good = [(0.0, 0.0), (0.0, 4.0), (4.0, 4.0), (4.0, 0.0)];
        assert!(is_convex(&good));
        let degenerate = [(0.0, 0.0), (0.0, 4.0), (0.0, 8.0), (4.0, 0.0)];
        assert!(!is_convex(&degenerate));
        let bowtie = [(0.0, 0.0), (4.0, 4.0), (0.0, 4.0), (4.0, 0.0)];
        assert!(!is_convex(&bowtie));
    }
}
