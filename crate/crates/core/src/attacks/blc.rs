//! Blended label-consistent poisoning: maximize the loss of an
//! adversarially trained model inside the epsilon ball (so the natural
//! target-class features are obscured), then blend a perspective-warped
//! digital trigger at low opacity. The blend is exempt from the epsilon
//! budget by construction.

use std::time::Instant;

use ndarray::Array3;
use rayon::prelude::*;

use crate::attacks::{
    homography, project_box, AttackConfig, BLCConfig, CraftReport, OptimizerKind, PoisonAlgorithm,
    PoisonDelta, PoisonSet,
};
use crate::datamodel::{ClassDataset, PoisonBudget, PoisonPair};
use crate::error::Result;
use crate::modelharness::{pixels_to_f64, ClassifierModel};

/// Craft a BLC poison set against an adversarially pre-trained model.
pub fn craft_blc(
    adv_model: &ClassifierModel,
    ds: &ClassDataset,
    pair: PoisonPair,
    budget: PoisonBudget,
    cfg: &AttackConfig,
    blc: &BLCConfig,
) -> Result<(PoisonSet, CraftReport)> {
    let start = Instant::now();
    let ids = ds.select_poison_targets(pair, budget, cfg.seed)?;
    let bases: Vec<Array3<f64>> = ids
        .iter()
        .map(|id| pixels_to_f64(&ds.find_clean(id).expect("selected from clean").pixels))
        .collect();
    let eps = budget.epsilon;

    let (ph, pw, _) = blc.trigger.dim();
    let patch_corners = [
        (0.0, 0.0),
        (0.0, pw as f64 - 1.0),
        (ph as f64 - 1.0, pw as f64 - 1.0),
        (ph as f64 - 1.0, 0.0),
    ];
    // fail fast on a degenerate placement before spending ascent time
    let h = homography::dlt_homography(&patch_corners, &blc.placement)?;

    struct SampleOut {
        delta: Array3<f64>,
        loss_trace: Vec<f64>,
        sq_trace: Vec<f64>,
        final_loss: f64,
    }

    let outs: Vec<Result<SampleOut>> = bases
        .par_iter()
        .map(|base| {
            let mut delta = Array3::<f64>::zeros(base.dim());
            let mut loss_trace = Vec::with_capacity(cfg.iterations);
            let mut sq_trace = Vec::with_capacity(cfg.iterations);
            let mut final_loss = f64::NAN;
            for it in 0..cfg.iterations {
                let lr = cfg.schedule.lr_at(cfg.lr, it, cfg.iterations);
                let input = base + &delta;
                let (loss, grad) = adv_model.input_gradient(&input, pair.target, 1.0)?;
                // gradient ascent on the training loss (Eq. argmax)
                let signed = !matches!(cfg.optimizer, OptimizerKind::Pgd);
                for (d, g) in delta.iter_mut().zip(grad.iter()) {
                    let step = if signed { g.signum() } else { *g };
                    *d += lr * step;
                }
                project_box(&mut delta, base, Some(eps));
                final_loss = loss;
                loss_trace.push(loss);
                sq_trace.push(delta.iter().map(|v| v * v).sum::<f64>());
            }
            // blend the warped trigger over the adversarial image
            let mut image = base + &delta;
            homography::warp_blend(&mut image, &blc.trigger, &h, blc.opacity)?;
            let mut full_delta = image;
            full_delta -= base;
            // numerical safety at the box walls
            project_box(&mut full_delta, base, None);
            Ok(SampleOut {
                delta: full_delta,
                loss_trace,
                sq_trace,
                final_loss,
            })
        })
        .collect();
    let outs: Vec<SampleOut> = outs.into_iter().collect::<Result<_>>()?;

    let k = outs.len() as f64;
    let mut report = CraftReport::default();
    for it in 0..cfg.iterations {
        let mean_loss = outs.iter().map(|o| o.loss_trace[it]).sum::<f64>() / k;
        report.objective_trace.push(mean_loss);
        report.core_trace.push(mean_loss);
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
            final_objective: o.final_loss,
            iterations_run: cfg.iterations,
        })
        .collect();

    Ok((
        PoisonSet {
            deltas,
            pair,
            budget,
            algorithm: PoisonAlgorithm::Blc,
            reg_mode: cfg.reg_mode,
        },
        report,
    ))
}
