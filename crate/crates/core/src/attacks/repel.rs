//! Repel-augmented adversarial loss. The plain adversarial loss pushes
//! trigger-bearing source samples toward the target label; the repel terms
//! push trigger samples of every other class back toward their own labels
//! and away from the target, making the implanted trigger source-specific:
//!
//!   N * sum_{x in Ds~} L(F(x), y_t)
//!   + sum_{i != s} sum_{x in Di~} [ L(F(x), y_i) - L(F(x), y_t) ]
//!
//! with N the class count. Terms for i = t cancel exactly and are skipped.

use std::collections::BTreeMap;

use ndarray::Array1;

use crate::datamodel::{ImageSample, PoisonPair};
use crate::error::{Error, Result};
use crate::modelharness::{
    cross_entropy_from_logits, pixels_to_f64, ClassifierModel, GradientVector, WeightedExample,
};

/// Evaluate the repel-augmented loss on fixed logits (no model involved).
pub fn repel_loss_from_logits(
    logit_sets: &BTreeMap<usize, Vec<Array1<f64>>>,
    pair: PoisonPair,
    n_classes: usize,
) -> f64 {
    let n = n_classes as f64;
    let mut total = 0.0;
    for (&class, logits) in logit_sets {
        if class == pair.source {
            for l in logits {
                total += n * cross_entropy_from_logits(&l.view(), pair.target);
            }
        } else if class != pair.target {
            for l in logits {
                total += cross_entropy_from_logits(&l.view(), class)
                    - cross_entropy_from_logits(&l.view(), pair.target);
            }
        }
    }
    total
}

/// Repel-augmented adversarial loss and its parameter gradient.
///
/// `trigger_sets` maps each class to its trigger-bearing samples; classes
/// other than the source may be absent or empty.
pub fn repel_adv_loss(
    model: &ClassifierModel,
    trigger_sets: &BTreeMap<usize, Vec<&ImageSample>>,
    pair: PoisonPair,
) -> Result<(f64, GradientVector)> {
    let n = model.num_classes() as f64;
    let mut items: Vec<WeightedExample> = Vec::new();
    for (&class, samples) in trigger_sets {
        if class == pair.target {
            continue; // attract/repel terms cancel for the target class
        }
        for s in samples {
            let image = pixels_to_f64(&s.pixels);
            if class == pair.source {
                items.push(WeightedExample {
                    image,
                    label: pair.target,
                    weight: n,
                });
            } else {
                items.push(WeightedExample {
                    image: image.clone(),
                    label: class,
                    weight: 1.0,
                });
                items.push(WeightedExample {
                    image,
                    label: pair.target,
                    weight: -1.0,
                });
            }
        }
    }
    if items.is_empty() {
        return Err(Error::precondition(
            "repel loss needs at least one trigger sample",
        ));
    }
    let (loss, grad, _) = model.weighted_loss_and_param_grads(&items)?;
    Ok((loss, grad))
}
