//! Victim/attacker training loop (SGD with momentum, stepped lr schedule)
//! and single-step adversarial pre-training.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::attacks::PoisonSet;
use crate::datamodel::{ClassDataset, ImageSample};
use crate::error::{Error, Result};
use crate::modelharness::{
    cross_entropy_from_logits, pixels_to_f64, ClassifierModel, WeightedExample,
};

/// SGD training hyperparameters. The default profile trains 40 epochs at
/// lr 1e-3 with 90% decays at epochs 14, 25 and 36; `desk` is the fast
/// profile used by the bundled benchmark experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 40,
            milestones: vec![14, 25, 36],
            lr_decay: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile for the synthetic benchmark: shorter schedule and a
    /// larger base lr since the model trains from scratch.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 15,
            milestones: vec![9, 13],
            lr_decay: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&m) = self.milestones.iter().max() {
            if self.epochs < m {
                return Err(Error::config(format!(
                    "epochs {} must cover the last milestone {m}",
                    self.epochs
                )));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during a 1-based epoch: decayed once per
    /// milestone already reached.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(hits as i32)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub lr: f64,
}

/// Append per-epoch metrics to a JSON-lines log.
pub fn append_metrics_jsonl(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        writeln!(f, "{line}").map_err(|e| Error::io(path.to_path_buf(), e))?;
    }
    Ok(())
}

fn assemble_training_set(
    ds: &ClassDataset,
    poisons: Option<&PoisonSet>,
) -> Result<Vec<(Array3<f32>, usize)>> {
    let mut delta_by_id = std::collections::BTreeMap::new();
    if let Some(ps) = poisons {
        for d in &ps.deltas {
            delta_by_id.insert(d.sample_id.as_str(), &d.delta);
        }
    }
    let mut out = Vec::with_capacity(ds.n_clean());
    for s in ds.iter_clean() {
        match delta_by_id.remove(s.sample_id.as_str()) {
            Some(delta) => {
                let mut px = s.pixels.clone();
                for (p, d) in px.iter_mut().zip(delta.iter()) {
                    *p = (*p + d).clamp(0.0, 1.0);
                }
                out.push((px, s.label));
            }
            None => out.push((s.pixels.clone(), s.label)),
        }
    }
    if let Some((id, _)) = delta_by_id.into_iter().next() {
        return Err(Error::precondition(format!(
            "poison sample_id {id} is not in the training split"
        )));
    }
    Ok(out)
}

fn sgd_step(
    model: &mut ClassifierModel,
    params: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for j in 0..params.len() {
        let g = grad[j] + weight_decay * params[j];
        velocity[j] = momentum * velocity[j] + g;
        params[j] -= lr * velocity[j];
    }
    model.set_params_flat(params).expect("same length");
}

/// Train on the clean split with poisoned pixels substituted where sample ids
/// match. Substitution happens in raw pixel space before normalization.
pub fn train(
    model: ClassifierModel,
    ds: &ClassDataset,
    poisons: Option<&PoisonSet>,
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let data = assemble_training_set(ds, poisons)?;
    if data.is_empty() {
        return Err(Error::precondition("training set is empty"));
    }
    run_training(model, &data, cfg, 0.0)
}

/// Single-step adversarial fine-tuning: each batch is replaced by FGSM
/// examples started from a random point inside the epsilon ball. With
/// `epsilon = 0` this reduces exactly to standard training.
pub fn fast_adversarial_pretrain(
    model: ClassifierModel,
    ds: &ClassDataset,
    cfg: &TrainConfig,
    epsilon: f64,
) -> Result<(ClassifierModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if epsilon < 0.0 {
        return Err(Error::config("epsilon must be nonnegative"));
    }
    let data = assemble_training_set(ds, None)?;
    if data.is_empty() {
        return Err(Error::precondition("training set is empty"));
    }
    run_training(model, &data, cfg, epsilon)
}

fn run_training(
    mut model: ClassifierModel,
    data: &[(Array3<f32>, usize)],
    cfg: &TrainConfig,
    adv_epsilon: f64,
) -> Result<(ClassifierModel, Vec<EpochMetrics>)> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // separate stream so standard training is untouched by adversarial draws
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xAD5E_ED);

    let mut params = model.params_flat();
    let mut velocity = vec![0.0f64; params.len()];
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = cfg.effective_lr(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let mut items: Vec<WeightedExample> = batch
                .iter()
                .map(|&i| WeightedExample {
                    image: pixels_to_f64(&data[i].0),
                    label: data[i].1,
                    weight: w,
                })
                .collect();

            if adv_epsilon > 0.0 {
                // draw all random starts sequentially, then take the FGSM
                // step in parallel
                let starts: Vec<Array3<f64>> = items
                    .iter()
                    .map(|it| {
                        it.image.mapv(|v| {
                            (v + noise_rng.gen_range(-adv_epsilon..=adv_epsilon)).clamp(0.0, 1.0)
                        })
                    })
                    .collect();
                let adv: Vec<Array3<f64>> = items
                    .par_iter()
                    .zip(starts.par_iter())
                    .map(|(it, x0)| {
                        let (_, g) = model
                            .input_gradient(x0, it.label, 1.0)
                            .expect("validated labels");
                        let step = 1.25 * adv_epsilon;
                        let mut out = it.image.clone();
                        for ((o, x0v), gv) in out.iter_mut().zip(x0.iter()).zip(g.iter()) {
                            let delta = (x0v - *o) + step * gv.signum();
                            let delta = delta.clamp(-adv_epsilon, adv_epsilon);
                            *o = (*o + delta).clamp(0.0, 1.0);
                        }
                        out
                    })
                    .collect();
                for (it, x) in items.iter_mut().zip(adv) {
                    it.image = x;
                }
            }

            let (loss, grad, correct) = model.weighted_loss_and_param_grads(&items)?;
            epoch_loss += loss * batch.len() as f64;
            epoch_correct += correct;
            sgd_step(
                &mut model,
                &mut params,
                &mut velocity,
                &grad.values,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }

        history.push(EpochMetrics {
            epoch,
            mean_loss: epoch_loss / n as f64,
            train_acc: 100.0 * epoch_correct as f64 / n as f64,
            lr,
        });
    }
    Ok((model, history))
}

/// Accuracy under a single FGSM step of the given radius.
pub fn fgsm_robust_accuracy(
    model: &ClassifierModel,
    samples: &[&ImageSample],
    epsilon: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::precondition("empty evaluation set"));
    }
    let correct: usize = samples
        .par_iter()
        .map(|s| {
            let img = pixels_to_f64(&s.pixels);
            let (_, g) = model
                .input_gradient(&img, s.label, 1.0)
                .expect("labels validated upstream");
            let adv = ndarray::Zip::from(&img)
                .and(&g)
                .map_collect(|&v, &gv| (v + epsilon * gv.signum()).clamp(0.0, 1.0));
            usize::from(model.predict(&adv) == s.label)
        })
        .sum();
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

#[allow(dead_code)]
fn loss_of(model: &ClassifierModel, image: &Array3<f64>, label: usize) -> f64 {
    cross_entropy_from_logits(&model.logits(image).view(), label)
}
