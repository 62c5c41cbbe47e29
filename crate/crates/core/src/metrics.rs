//! Evaluation metrics: attack success rate, clean accuracy, false positive
//! rate on lookalike triggers, suspicion rate on unintended classes, and
//! PSNR of poisoned images.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attacks::{PoisonAlgorithm, PoisonSet};
use crate::datamodel::{ClassDataset, ImageSample, PoisonPair};
use crate::error::{Error, Result};
use crate::modelharness::ClassifierModel;

/// Percentage of predictions equal to `class`.
pub fn percent_predicted_as(preds: &[usize], class: usize) -> f64 {
    100.0 * preds.iter().filter(|&&p| p == class).count() as f64 / preds.len() as f64
}

/// Attack success rate: % of held-out trigger-bearing source samples
/// classified as the target.
pub fn asr(model: &ClassifierModel, held_out: &[&ImageSample], pair: PoisonPair) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::precondition("asr over an empty set"));
    }
    let preds = model.predict_samples(held_out);
    Ok(percent_predicted_as(&preds, pair.target))
}

/// Clean accuracy (%) over a labeled test set.
pub fn acc(model: &ClassifierModel, test: &[&ImageSample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::precondition("accuracy over an empty set"));
    }
    let preds = model.predict_samples(test);
    let correct = preds
        .iter()
        .zip(test)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// False positive rate: % of source-class samples wearing a false trigger
/// that are classified as the target.
pub fn fpr(
    model: &ClassifierModel,
    false_trigger_sources: &[&ImageSample],
    pair: PoisonPair,
) -> Result<f64> {
    if false_trigger_sources.is_empty() {
        return Err(Error::precondition("fpr over an empty set"));
    }
    let preds = model.predict_samples(false_trigger_sources);
    Ok(percent_predicted_as(&preds, pair.target))
}

/// Suspicion rate: % of trigger-bearing samples from classes other than the
/// source and the target that are classified as the target.
pub fn sr(
    model: &ClassifierModel,
    other_class_triggered: &[&ImageSample],
    pair: PoisonPair,
) -> Result<f64> {
    if other_class_triggered.is_empty() {
        return Err(Error::precondition("sr over an empty set"));
    }
    if other_class_triggered
        .iter()
        .any(|s| s.label == pair.source || s.label == pair.target)
    {
        return Err(Error::precondition(
            "sr set must exclude source- and target-class samples",
        ));
    }
    let preds = model.predict_samples(other_class_triggered);
    Ok(percent_predicted_as(&preds, pair.target))
}

/// Peak signal-to-noise ratio in dB, `10 log10(max^2 / MSE)`. Identical
/// images return the +infinity sentinel.
pub fn psnr(original: &Array3<f32>, poisoned: &Array3<f32>, max_value: f64) -> Result<f64> {
    if original.dim() != poisoned.dim() {
        return Err(Error::precondition(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            original.dim(),
            poisoned.dim()
        )));
    }
    let mse: f64 = original
        .iter()
        .zip(poisoned.iter())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>()
        / original.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Full evaluation of a trained model against one attack configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub asr: f64,
    pub acc: f64,
    /// Absent when the dataset carries no false-trigger sets.
    pub fpr: Option<f64>,
    /// Absent when no non-source, non-target trigger sets exist.
    pub sr: Option<f64>,
    /// Mean PSNR over the poison set; absent for naive (whole-image) poisons
    /// or when no poisons were supplied.
    pub psnr_mean: Option<f64>,
    /// confusion[true][predicted] over the clean test set.
    pub confusion: Vec<Vec<usize>>,
    pub pair: PoisonPair,
    pub trigger_id: String,
    pub seeds: Vec<u64>,
    pub runs: usize,
}

/// Evaluate ASR/ACC/FPR/SR on the test split and PSNR against the training
/// bases the poisons perturb.
pub fn evaluate(
    model: &ClassifierModel,
    train_ds: &ClassDataset,
    test_ds: &ClassDataset,
    pair: PoisonPair,
    trigger_id: &str,
    poisons: Option<&PoisonSet>,
    seed: u64,
) -> Result<EvalReport> {
    let held_out: Vec<&ImageSample> = test_ds.triggered_set(pair.source, trigger_id).iter().collect();
    let asr_v = asr(model, &held_out, pair)?;

    let clean_test: Vec<&ImageSample> = test_ds.iter_clean().collect();
    let acc_v = acc(model, &clean_test)?;
    let preds = model.predict_samples(&clean_test);
    let k = test_ds.classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, s) in preds.iter().zip(&clean_test) {
        confusion[s.label][*p] += 1;
    }

    let mut false_sources: Vec<&ImageSample> = Vec::new();
    for fid in test_ds.false_trigger_ids_for(trigger_id) {
        false_sources.extend(test_ds.false_triggered_set(pair.source, &fid));
    }
    let fpr_v = if false_sources.is_empty() {
        None
    } else {
        Some(fpr(model, &false_sources, pair)?)
    };

    let mut others: Vec<&ImageSample> = Vec::new();
    for c in 0..k {
        if c != pair.source && c != pair.target {
            others.extend(test_ds.triggered_set(c, trigger_id));
        }
    }
    let sr_v = if others.is_empty() {
        None
    } else {
        Some(sr(model, &others, pair)?)
    };

    let psnr_mean = match poisons {
        Some(ps) if ps.algorithm != PoisonAlgorithm::Naive && !ps.deltas.is_empty() => {
            let mut total = 0.0;
            for d in &ps.deltas {
                let base = train_ds.find_clean(&d.sample_id).ok_or_else(|| {
                    Error::precondition(format!("poison id {} not in train split", d.sample_id))
                })?;
                let poisoned = ndarray::Zip::from(&base.pixels)
                    .and(&d.delta)
                    .map_collect(|&b, &dv| (b + dv).clamp(0.0, 1.0));
                total += psnr(&base.pixels, &poisoned, 1.0)?;
            }
            Some(total / ps.deltas.len() as f64)
        }
        _ => None,
    };

    Ok(EvalReport {
        asr: asr_v,
        acc: acc_v,
        fpr: fpr_v,
        sr: sr_v,
        psnr_mean,
        confusion,
        pair,
        trigger_id: trigger_id.to_string(),
        seeds: vec![seed],
        runs: 1,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// "99.4 (1.0)" formatting used in aggregate tables.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.1} ({s:.1})")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::NormalizationStats;
    use crate::modelharness::build_model;
    use std::collections::BTreeMap;

    fn sample(id: &str, label: usize, v: f32) -> ImageSample {
        ImageSample::new(id, label, None, Array3::from_elem((12, 12, 3), v)).unwrap()
    }

    #[test]
    fn percent_extremes_and_complement() {
        assert_eq!(percent_predicted_as(&[1, 1, 1], 1), 100.0);
        assert_eq!(percent_predicted_as(&[0, 2, 3], 1), 0.0);
        let preds = [1usize, 0, 1, 2, 1];
        let hit = percent_predicted_as(&preds, 1);
        let miss = 100.0 - hit;
        let not_target = preds.iter().filter(|&&p| p != 1).count() as f64 * 100.0 / 5.0;
        assert_eq!(miss, not_target);
    }

    #[test]
    fn majority_stub_accuracy_is_chance_on_balanced_set() {
        // a constant predictor is right on exactly one of k balanced classes
        let k = 10usize;
        let preds = vec![3usize; 100];
        let labels: Vec<usize> = (0..100).map(|i| i % k).collect();
        let correct = preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        assert_eq!(100 * correct / labels.len(), 10);
    }

    #[test]
    fn psnr_values() {
        let a = Array3::from_elem((4, 4, 3), 0.5f32);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());

        let b = a.mapv(|v| v + 16.0 / 255.0);
        let db = psnr(&a, &b, 1.0).unwrap();
        let expected = 20.0 * (255.0f64 / 16.0).log10();
        assert!((db - expected).abs() < 1e-3, "{db} vs {expected}");
        assert!((db - 24.05).abs() < 0.01);

        let c = Array3::from_elem((2, 2, 3), 0.5f32);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn psnr_monotone_in_perturbation_magnitude() {
        let a = Array3::from_elem((8, 8, 3), 0.4f32);
        let mut last = f64::INFINITY;
        for mag in [2.0, 4.0, 8.0, 16.0, 32.0] {
            let b = a.mapv(|v| v + mag / 255.0);
            let db = psnr(&a, &b, 1.0).unwrap();
            assert!(db < last, "psnr must strictly decrease: {db} !< {last}");
            last = db;
        }
    }

    #[test]
    fn sr_rejects_source_or_target_samples() {
        let model = build_model("tiny_cnn", 3, NormalizationStats::identity(3), 1, None).unwrap();
        let pair = PoisonPair::new(0, 1, 3).unwrap();
        let bad = sample("x", 0, 0.5);
        assert!(sr(&model, &[&bad], pair).is_err());
        let ok = sample("y", 2, 0.5);
        assert!(sr(&model, &[&ok], pair).is_ok());
    }

    #[test]
    fn empty_sets_error() {
        let model = build_model("tiny_cnn", 3, NormalizationStats::identity(3), 1, None).unwrap();
        let pair = PoisonPair::new(0, 1, 3).unwrap();
        assert!(asr(&model, &[], pair).is_err());
        assert!(acc(&model, &[]).is_err());
        assert!(fpr(&model, &[], pair).is_err());
        assert!(sr(&model, &[], pair).is_err());
    }

    #[test]
    fn evaluate_produces_consistent_report() {
        let mut clean = BTreeMap::new();
        for c in 0..2usize {
            clean.insert(
                c,
                (0..3)
                    .map(|i| sample(&format!("c{c}_{i}"), c, 0.2 + 0.5 * c as f32))
                    .collect::<Vec<_>>(),
            );
        }
        let mut triggered = BTreeMap::new();
        for c in 0..2usize {
            triggered.insert(
                (c, "tg".to_string()),
                vec![ImageSample::new(
                    format!("t{c}"),
                    c,
                    Some("tg".into()),
                    Array3::from_elem((12, 12, 3), 0.9),
                )
                .unwrap()],
            );
        }
        let ds = ClassDataset::new(2, clean, triggered, BTreeMap::new()).unwrap();
        let model = build_model("tiny_cnn", 2, NormalizationStats::identity(3), 3, None).unwrap();
        let pair = PoisonPair::new(0, 1, 2).unwrap();
        let report = evaluate(&model, &ds, &ds, pair, "tg", None, 42).unwrap();
        assert!(report.asr >= 0.0 && report.asr <= 100.0);
        assert!(report.acc >= 0.0 && report.acc <= 100.0);
        assert!(report.sr.is_none(), "two classes leave no sr set");
        assert!(report.fpr.is_none());
        assert!(report.psnr_mean.is_none());
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, 6);
        assert_eq!(report.seeds, vec![42]);
    }

    #[test]
    fn mean_std_formatting() {
        let vals = [99.0, 100.0, 99.8, 98.8, 99.4];
        let (m, s) = mean_std(&vals);
        assert!((m - 99.4).abs() < 1e-9);
        assert!(s > 0.0);
        let txt = format_mean_std(&vals);
        assert!(txt.starts_with("99.4 ("));
        assert!(txt.ends_with(')'));
    }
}
