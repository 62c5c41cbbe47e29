//! Gradient matching: jointly optimize all K deltas so the parameter
//! gradient of the poison loss aligns (in cosine) with the parameter
//! gradient of the adversarial loss.
//!
//! The gradient of the alignment loss with respect to a delta requires the
//! mixed second derivative d2L/(d delta d theta) applied to a fixed vector
//! v. That directional product is evaluated with central differences over
//! parameter space: grad_x L(theta + h v) - grad_x L(theta - h v), scaled by
//! |v|/2h. With f64 parameters and h = 1e-4 the truncation error is far
//! below the sign resolution the signed-Adam update consumes.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    optim::{pgd_step, AdamState},
    project_box, AttackConfig, CraftReport, ObjectiveSpec, OptimizerKind, PoisonAlgorithm,
    PoisonDelta, PoisonSet,
};
use crate::datamodel::{ClassDataset, PoisonBudget, PoisonPair};
use crate::error::{Error, Result};
use crate::modelharness::{pixels_to_f64, ClassifierModel, GradientVector, WeightedExample};
use crate::regularizers::{
    feature_centroid, feature_reg, feature_reg_grad, pixel_reg, pixel_reg_grad, FeatureCentroid,
};

const FD_H: f64 = 1e-4;

/// Which adversarial loss the poison gradients are aligned against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLossMode {
    /// Mean cross-entropy of trigger-bearing source samples toward the
    /// target label.
    Plain,
    /// The repel-augmented loss over every class's trigger set.
    Repel,
}

/// Cosine alignment loss 1 - cos(gp, ga), in [0, 2].
pub fn alignment_loss(gp: &GradientVector, ga: &GradientVector) -> f64 {
    let np = gp.norm();
    let na = ga.norm();
    if np == 0.0 || na == 0.0 {
        return 1.0; // undefined direction; treated as orthogonal
    }
    1.0 - gp.dot(ga) / (np * na)
}

/// dA/d(gp) for A = 1 - cos(gp, ga).
fn alignment_cotangent(gp: &GradientVector, ga: &GradientVector) -> GradientVector {
    let np = gp.norm();
    let na = ga.norm();
    let cosine = gp.dot(ga) / (np * na);
    let mut v = GradientVector::zeros(gp.len());
    v.add_scaled(ga, -1.0 / (np * na));
    v.add_scaled(gp, cosine / (np * np));
    v
}

/// Parameter gradient of the adversarial loss for the chosen mode.
pub fn adv_gradient(
    model: &ClassifierModel,
    ds: &ClassDataset,
    pair: PoisonPair,
    trigger_id: &str,
    mode: AdvLossMode,
) -> Result<(f64, GradientVector)> {
    match mode {
        AdvLossMode::Plain => {
            let set = ds.triggered_set(pair.source, trigger_id);
            if set.is_empty() {
                return Err(Error::precondition(format!(
                    "no trigger samples for source class {} with trigger {trigger_id}",
                    pair.source
                )));
            }
            let w = 1.0 / set.len() as f64;
            let items: Vec<WeightedExample> = set
                .iter()
                .map(|s| WeightedExample {
                    image: pixels_to_f64(&s.pixels),
                    label: pair.target,
                    weight: w,
                })
                .collect();
            let (loss, grad, _) = model.weighted_loss_and_param_grads(&items)?;
            Ok((loss, grad))
        }
        AdvLossMode::Repel => {
            let mut sets: BTreeMap<usize, Vec<&crate::datamodel::ImageSample>> = BTreeMap::new();
            for c in 0..ds.classes() {
                let set = ds.triggered_set(c, trigger_id);
                if !set.is_empty() {
                    sets.insert(c, set.iter().collect());
                }
            }
            if sets.get(&pair.source).map_or(true, |s| s.is_empty()) {
                return Err(Error::precondition(format!(
                    "no trigger samples for source class {} with trigger {trigger_id}",
                    pair.source
                )));
            }
            crate::attacks::repel_adv_loss(model, &sets, pair)
        }
    }
}

/// Craft a gradient-matching poison set against a trained attacker model.
pub fn craft_gm(
    model: &ClassifierModel,
    ds: &ClassDataset,
    pair: PoisonPair,
    budget: PoisonBudget,
    trigger_id: &str,
    cfg: &AttackConfig,
    adv_mode: AdvLossMode,
) -> Result<(PoisonSet, CraftReport)> {
    let start = Instant::now();
    let ids = ds.select_poison_targets(pair, budget, cfg.seed)?;
    let bases: Vec<Array3<f64>> = ids
        .iter()
        .map(|id| pixels_to_f64(&ds.find_clean(id).expect("selected from clean").pixels))
        .collect();
    let k = bases.len();
    let n_pixels = bases[0].len();
    let spec = ObjectiveSpec::new(
        cfg.reg_mode,
        cfg.lambda1,
        cfg.lambda2,
        cfg.pixel_mode,
        n_pixels,
    )?;

    let (_, ga) = adv_gradient(model, ds, pair, trigger_id, adv_mode)?;
    if ga.norm() < 1e-12 {
        return Err(Error::numeric(
            "adversarial gradient norm is zero; alignment target is undefined",
        ));
    }

    let centroid: Option<FeatureCentroid> = if spec.uses_feature_reg() {
        let targets: Vec<&crate::datamodel::ImageSample> =
            ds.clean_class(pair.target).iter().collect();
        Some(feature_centroid(model, &targets, "target-class train")?)
    } else {
        None
    };

    // random start inside the budget ball, clipped to the pixel box
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6D_17AE);
    let eps = budget.epsilon;
    let mut deltas: Vec<Array3<f64>> = bases
        .iter()
        .map(|b| {
            let mut d = Array3::from_shape_fn(b.dim(), |_| {
                if eps > 0.0 {
                    rng.gen_range(-eps..=eps)
                } else {
                    0.0
                }
            });
            project_box(&mut d, b, Some(eps));
            d
        })
        .collect();

    let mut adam = AdamState::new(&deltas);
    let mut report = CraftReport::default();
    let mut final_objective = f64::NAN;

    for it in 0..cfg.iterations {
        let lr = cfg.schedule.lr_at(cfg.lr, it, cfg.iterations);

        let items: Vec<WeightedExample> = bases
            .iter()
            .zip(&deltas)
            .map(|(b, d)| WeightedExample {
                image: b + d,
                label: pair.target,
                weight: 1.0 / k as f64,
            })
            .collect();
        let (_, gp, _) = model.weighted_loss_and_param_grads(&items)?;
        if gp.norm() < 1e-12 {
            return Err(Error::numeric(
                "poison gradient norm is zero; alignment is undefined",
            ));
        }
        let core = alignment_loss(&gp, &ga);
        let v = alignment_cotangent(&gp, &ga);
        let vnorm = v.norm();

        // d(core)/d(delta_i) via central differences over theta
        let mut grads: Vec<Array3<f64>> = if vnorm > 1e-300 {
            let mut vhat = v;
            vhat.scale(1.0 / vnorm);
            let plus = model.perturbed(&vhat, FD_H);
            let minus = model.perturbed(&vhat, -FD_H);
            let scale = vnorm / (2.0 * FD_H * k as f64);
            items
                .par_iter()
                .map(|item| {
                    let (_, gplus) = plus
                        .input_gradient(&item.image, pair.target, 1.0)
                        .expect("validated inputs");
                    let (_, gminus) = minus
                        .input_gradient(&item.image, pair.target, 1.0)
                        .expect("validated inputs");
                    let mut g = gplus;
                    g.zip_mut_with(&gminus, |a, b| *a = (*a - b) * scale);
                    g
                })
                .collect()
        } else {
            bases.iter().map(|b| Array3::zeros(b.dim())).collect()
        };

        let mut rpix_mean = 0.0;
        let mut rfeat_mean = 0.0;
        if spec.uses_pixel_reg() {
            let scale = spec.lambda1 / k as f64;
            for i in 0..k {
                rpix_mean += pixel_reg(&deltas[i], &bases[i], eps, spec.pixel_mode) / k as f64;
                let g = pixel_reg_grad(&deltas[i], &bases[i], eps, spec.pixel_mode);
                grads[i].scaled_add(scale, &g);
            }
        }
        if let Some(c) = &centroid {
            let scale = spec.lambda2 / k as f64;
            let parts: Vec<(f64, Array3<f64>)> = (0..k)
                .into_par_iter()
                .map(|i| {
                    (
                        feature_reg(model, &bases[i], &deltas[i], c),
                        feature_reg_grad(model, &bases[i], &deltas[i], c),
                    )
                })
                .collect();
            for (i, (val, g)) in parts.into_iter().enumerate() {
                rfeat_mean += val / k as f64;
                grads[i].scaled_add(scale, &g);
            }
        }

        match cfg.optimizer {
            OptimizerKind::SignedAdam => adam.step(&mut deltas, &grads, lr, true),
            OptimizerKind::Pgd => pgd_step(&mut deltas, &grads, lr, false),
            OptimizerKind::SignedPgd => pgd_step(&mut deltas, &grads, lr, true),
        }
        let hard = spec.hard_projection().then_some(eps);
        for (d, b) in deltas.iter_mut().zip(&bases) {
            project_box(d, b, hard);
        }

        final_objective = spec.combine(core, rpix_mean, rfeat_mean);
        report.core_trace.push(core);
        report.objective_trace.push(final_objective);
        report
            .delta_l2_trace
            .push(deltas.iter().flat_map(|d| d.iter()).map(|v| v * v).sum::<f64>().sqrt());
    }

    let deltas_f32: Vec<PoisonDelta> = ids
        .iter()
        .zip(&deltas)
        .map(|(id, d)| PoisonDelta {
            sample_id: id.clone(),
            delta: d.mapv(|v| v as f32),
            final_objective,
            iterations_run: cfg.iterations,
        })
        .collect();

    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((
        PoisonSet {
            deltas: deltas_f32,
            pair,
            budget,
            algorithm: PoisonAlgorithm::Gm,
            reg_mode: cfg.reg_mode,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gv(values: Vec<f64>) -> GradientVector {
        GradientVector { values }
    }

    #[test]
    fn alignment_identities() {
        let g = gv(vec![1.0, -2.0, 3.0]);
        let mut scaled = g.clone();
        scaled.scale(4.0);
        assert!(alignment_loss(&g, &scaled).abs() < 1e-12, "parallel -> 0");

        let mut anti = g.clone();
        anti.scale(-0.5);
        assert!((alignment_loss(&g, &anti) - 2.0).abs() < 1e-12, "antiparallel -> 2");

        let a = gv(vec![1.0, 0.0]);
        let b = gv(vec![0.0, 5.0]);
        assert!((alignment_loss(&a, &b) - 1.0).abs() < 1e-12, "orthogonal -> 1");
    }

    #[test]
    fn alignment_invariant_under_positive_rescaling() {
        let gp = gv(vec![0.3, -1.1, 0.7, 2.0]);
        let ga = gv(vec![-0.2, 0.4, 1.5, 0.1]);
        let base = alignment_loss(&gp, &ga);
        let mut ga7 = ga.clone();
        ga7.scale(7.0);
        assert!((alignment_loss(&gp, &ga7) - base).abs() < 1e-6);
        let mut gp3 = gp.clone();
        gp3.scale(3.0);
        assert!((alignment_loss(&gp3, &ga) - base).abs() < 1e-6);
    }

    #[test]
    fn cotangent_matches_finite_differences() {
        let gp = gv(vec![0.5, -0.8, 1.2, 0.3]);
        let ga = gv(vec![-0.1, 0.9, 0.4, -0.6]);
        let v = alignment_cotangent(&gp, &ga);
        let h = 1e-6;
        for i in 0..gp.len() {
            let mut p = gp.clone();
            p.values[i] += h;
            let up = alignment_loss(&p, &ga);
            p.values[i] -= 2.0 * h;
            let down = alignment_loss(&p, &ga);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - v.values[i]).abs() < 1e-6,
                "coord {i}: fd {fd} vs {}",
                v.values[i]
            );
        }
    }
}
