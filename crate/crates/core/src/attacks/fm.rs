//! Feature matching: per-poison perturbations that pull the poisoned sample
//! toward a trigger-bearing source sample in feature space,
//! min ||f(x_t + delta) - f(x_s~)||^2, with projection to the epsilon ball
//! (or the soft regularized objective) each step.

use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attacks::{
    optim::pgd_step, project_box, AttackConfig, CraftReport, ObjectiveSpec, OptimizerKind,
    PoisonAlgorithm, PoisonDelta, PoisonSet,
};
use crate::datamodel::{ClassDataset, PoisonBudget, PoisonPair};
use crate::error::{Error, Result};
use crate::modelharness::{pixels_to_f64, FeatureExtractor};
use crate::regularizers::{
    feature_centroid, feature_reg, feature_reg_grad, pixel_reg, pixel_reg_grad, FeatureCentroid,
};

fn mix_seed(seed: u64, idx: usize) -> u64 {
    let mut h = seed ^ 0xFEA7_0000_0000_0000 ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^ (h >> 31)
}

/// Craft a feature-matching poison set. Each poison is paired with a random
/// trigger source sample and re-paired every `repair_interval` iterations.
pub fn craft_fm<E: FeatureExtractor>(
    extractor: &E,
    ds: &ClassDataset,
    pair: PoisonPair,
    budget: PoisonBudget,
    trigger_id: &str,
    cfg: &AttackConfig,
) -> Result<(PoisonSet, CraftReport)> {
    let start = Instant::now();
    let source_set = ds.triggered_set(pair.source, trigger_id);
    if source_set.is_empty() {
        return Err(Error::precondition(format!(
            "no trigger samples for source class {} with trigger {trigger_id}",
            pair.source
        )));
    }
    let source_feats: Vec<Array1<f64>> = source_set
        .par_iter()
        .map(|s| extractor.features_of(&pixels_to_f64(&s.pixels)))
        .collect();

    let ids = ds.select_poison_targets(pair, budget, cfg.seed)?;
    let bases: Vec<Array3<f64>> = ids
        .iter()
        .map(|id| pixels_to_f64(&ds.find_clean(id).expect("selected from clean").pixels))
        .collect();
    let n_pixels = bases[0].len();
    let spec = ObjectiveSpec::new(
        cfg.reg_mode,
        cfg.lambda1,
        cfg.lambda2,
        cfg.pixel_mode,
        n_pixels,
    )?;
    let centroid: Option<FeatureCentroid> = if spec.uses_feature_reg() {
        let targets: Vec<&crate::datamodel::ImageSample> =
            ds.clean_class(pair.target).iter().collect();
        Some(feature_centroid(extractor, &targets, "target-class train")?)
    } else {
        None
    };
    let eps = budget.epsilon;

    struct SampleOut {
        delta: Array3<f64>,
        composite_trace: Vec<f64>,
        core_trace: Vec<f64>,
        sq_trace: Vec<f64>,
        final_objective: f64,
    }

    let outs: Vec<SampleOut> = bases
        .par_iter()
        .enumerate()
        .map(|(i, base)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, i));
            let mut target_feat = &source_feats[rng.gen_range(0..source_feats.len())];
            let mut delta = Array3::<f64>::zeros(base.dim());
            let mut composite_trace = Vec::with_capacity(cfg.iterations);
            let mut core_trace = Vec::with_capacity(cfg.iterations);
            let mut sq_trace = Vec::with_capacity(cfg.iterations);
            let mut final_objective = f64::NAN;

            for it in 0..cfg.iterations {
                if it > 0 && cfg.repair_interval > 0 && it % cfg.repair_interval == 0 {
                    target_feat = &source_feats[rng.gen_range(0..source_feats.len())];
                }
                let lr = cfg.schedule.lr_at(cfg.lr, it, cfg.iterations);
                let input = base + &delta;
                let f = extractor.features_of(&input);
                let diff = &f - target_feat;
                let core = diff.mapv(|v| v * v).sum();
                let cot = diff.mapv(|v| 2.0 * v);
                let mut grad = extractor.feature_input_gradient(&input, &cot);

                let mut rpix = 0.0;
                if spec.uses_pixel_reg() {
                    rpix = pixel_reg(&delta, base, eps, spec.pixel_mode);
                    grad.scaled_add(
                        spec.lambda1,
                        &pixel_reg_grad(&delta, base, eps, spec.pixel_mode),
                    );
                }
                let mut rfeat = 0.0;
                if let Some(c) = &centroid {
                    rfeat = feature_reg(extractor, base, &delta, c);
                    grad.scaled_add(spec.lambda2, &feature_reg_grad(extractor, base, &delta, c));
                }

                let mut slice = [delta];
                let gslice = [grad];
                match cfg.optimizer {
                    OptimizerKind::Pgd => pgd_step(&mut slice, &gslice, lr, false),
                    OptimizerKind::SignedPgd | OptimizerKind::SignedAdam => {
                        pgd_step(&mut slice, &gslice, lr, true)
                    }
                }
                [delta] = slice;
                project_box(&mut delta, base, spec.hard_projection().then_some(eps));

                final_objective = spec.combine(core, rpix, rfeat);
                composite_trace.push(final_objective);
                core_trace.push(core);
                sq_trace.push(delta.iter().map(|v| v * v).sum::<f64>());
            }
            SampleOut {
                delta,
                composite_trace,
                core_trace,
                sq_trace,
                final_objective,
            }
        })
        .collect();

    let k = outs.len() as f64;
    let mut report = CraftReport::default();
    for it in 0..cfg.iterations {
        report
            .objective_trace
            .push(outs.iter().map(|o| o.composite_trace[it]).sum::<f64>() / k);
        report
            .core_trace
            .push(outs.iter().map(|o| o.core_trace[it]).sum::<f64>() / k);
        report
            .delta_l2_trace
            .push(outs.iter().map(|o| o.sq_trace[it]).sum::<f64>().sqrt());
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();

    let deltas = ids
        .iter()
        .zip(outs)
        .map(|(id, o)| PoisonDelta {
            sample_id: id.clone(),
            delta: o.delta.mapv(|v| v as f32),
            final_objective: o.final_objective,
            iterations_run: cfg.iterations,
        })
        .collect();

    Ok((
        PoisonSet {
            deltas,
            pair,
            budget,
            algorithm: PoisonAlgorithm::Fm,
            reg_mode: cfg.reg_mode,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ImageSample;
    use crate::modelharness::IdentityFeatures;
    use std::collections::BTreeMap;

    fn toy_ds(source_value: f32) -> ClassDataset {
        let shape = (3, 3, 1);
        let mut clean = BTreeMap::new();
        clean.insert(
            0usize,
            (0..2)
                .map(|i| {
                    ImageSample::new(
                        format!("s{i}"),
                        0,
                        None,
                        Array3::from_elem(shape, 0.5),
                    )
                    .unwrap()
                })
                .collect(),
        );
        clean.insert(
            1usize,
            (0..4)
                .map(|i| {
                    ImageSample::new(format!("t{i}"), 1, None, Array3::from_elem(shape, 0.0))
                        .unwrap()
                })
                .collect(),
        );
        let mut triggered = BTreeMap::new();
        triggered.insert(
            (0usize, "tg".to_string()),
            vec![ImageSample::new(
                "trig0",
                0,
                Some("tg".into()),
                Array3::from_elem(shape, source_value),
            )
            .unwrap()],
        );
        ClassDataset::new(2, clean, triggered, BTreeMap::new()).unwrap()
    }

    #[test]
    fn identity_extractor_converges_to_source_within_ball() {
        // x_t = 0, source pixels all at eps/2: the unconstrained optimum
        // delta = x_s~ lies inside the ball, so the objective goes to ~0
        let eps = 16.0 / 255.0;
        let ds = toy_ds((eps / 2.0) as f32);
        let pair = PoisonPair::new(0, 1, 2).unwrap();
        let budget = PoisonBudget::new(0.5, eps).unwrap();
        let ext = IdentityFeatures::new((3, 3, 1));
        let mut cfg = AttackConfig::fm_default(3);
        cfg.iterations = 400;
        cfg.lr = 0.05;
        cfg.schedule = crate::attacks::LrSchedule::Constant;
        let (ps, report) = craft_fm(&ext, &ds, pair, budget, "tg", &cfg).unwrap();
        assert_eq!(ps.deltas.len(), 2);
        let last = *report.core_trace.last().unwrap();
        assert!(last < 1e-6, "convex quadratic should reach ~0, got {last}");
        for d in &ps.deltas {
            for v in d.delta.iter() {
                assert!((v - eps as f32 / 2.0).abs() < 1e-3, "delta -> x_s~");
            }
        }
        ps.validate_against(&ds).unwrap();
    }

    #[test]
    fn objective_zero_when_features_match() {
        // source trigger sample identical to the poison base
        let ds = toy_ds(0.0);
        let pair = PoisonPair::new(0, 1, 2).unwrap();
        let budget = PoisonBudget::new(0.25, 0.1).unwrap();
        let ext = IdentityFeatures::new((3, 3, 1));
        let mut cfg = AttackConfig::fm_default(1);
        cfg.iterations = 1;
        let (_, report) = craft_fm(&ext, &ds, pair, budget, "tg", &cfg).unwrap();
        assert!(report.core_trace[0] < 1e-12);
    }

    #[test]
    fn objective_nonincreasing_with_fixed_pairing() {
        let eps = 0.3;
        let ds = toy_ds(0.9);
        let pair = PoisonPair::new(0, 1, 2).unwrap();
        let budget = PoisonBudget::new(0.5, eps).unwrap();
        let ext = IdentityFeatures::new((3, 3, 1));
        let mut cfg = AttackConfig::fm_default(5);
        cfg.iterations = 50;
        cfg.lr = 0.02;
        cfg.schedule = crate::attacks::LrSchedule::Constant;
        cfg.repair_interval = 0; // single source sample anyway
        let (_, report) = craft_fm(&ext, &ds, pair, budget, "tg", &cfg).unwrap();
        let first = report.core_trace.first().unwrap();
        let last = report.core_trace.last().unwrap();
        assert!(last <= first, "final {last} must not exceed initial {first}");
    }

    #[test]
    fn missing_source_trigger_errors() {
        let ds = toy_ds(0.5);
        let pair = PoisonPair::new(1, 0, 2).unwrap();
        let budget = PoisonBudget::new(0.5, 0.1).unwrap();
        let ext = IdentityFeatures::new((3, 3, 1));
        let cfg = AttackConfig::fm_default(1);
        assert!(craft_fm(&ext, &ds, pair, budget, "tg", &cfg).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = toy_ds(0.7);
        let pair = PoisonPair::new(0, 1, 2).unwrap();
        let budget = PoisonBudget::new(0.5, 0.2).unwrap();
        let ext = IdentityFeatures::new((3, 3, 1));
        let mut cfg = AttackConfig::fm_default(11);
        cfg.iterations = 20;
        let (a, _) = craft_fm(&ext, &ds, pair, budget, "tg", &cfg).unwrap();
        let (b, _) = craft_fm(&ext, &ds, pair, budget, "tg", &cfg).unwrap();
        for (x, y) in a.deltas.iter().zip(&b.deltas) {
            assert_eq!(x.delta, y.delta);
        }
    }
}
