//! Step rules and learning-rate schedules used while crafting.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base lr down to `floor` at the last iteration.
    CosineAnnealing { floor: f64 },
    /// Multiply lr by `factor` every `every` iterations.
    StepDecay { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, iter: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::CosineAnnealing { floor } => {
                if total <= 1 {
                    return floor;
                }
                let t = iter as f64 / (total - 1) as f64;
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::StepDecay { every, factor } => {
                let hits = if every == 0 { 0 } else { iter / every };
                base * factor.powi(hits as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam over the elementwise sign of the gradient.
    SignedAdam,
    /// Plain gradient step (projected afterwards).
    Pgd,
    /// Signed gradient step.
    SignedPgd,
}

/// Adam state over a list of delta tensors.
pub(crate) struct AdamState {
    m: Vec<Array3<f64>>,
    v: Vec<Array3<f64>>,
    t: usize,
}

impl AdamState {
    pub fn new(shapes: &[Array3<f64>]) -> Self {
        AdamState {
            m: shapes.iter().map(|d| Array3::zeros(d.dim())).collect(),
            v: shapes.iter().map(|d| Array3::zeros(d.dim())).collect(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        deltas: &mut [Array3<f64>],
        grads: &[Array3<f64>],
        lr: f64,
        signed: bool,
    ) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..deltas.len() {
            for ((d, g), (m, v)) in deltas[i]
                .iter_mut()
                .zip(grads[i].iter())
                .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
            {
                let gv = if signed { g.signum() } else { *g };
                *m = B1 * *m + (1.0 - B1) * gv;
                *v = B2 * *v + (1.0 - B2) * gv * gv;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *d -= lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

/// One plain/signed gradient-descent step.
pub(crate) fn pgd_step(deltas: &mut [Array3<f64>], grads: &[Array3<f64>], lr: f64, signed: bool) {
    for i in 0..deltas.len() {
        for (d, g) in deltas[i].iter_mut().zip(grads[i].iter()) {
            let gv = if signed { g.signum() } else { *g };
            *d -= lr * gv;
        }
    }
}
