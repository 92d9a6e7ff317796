//! Warm-up and main training phases, the joint loss, learning-rate schedule,
//! gradient clipping, AdamW, and checkpoints.

mod checkpoint;
mod phases;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Phase};
pub use phases::{evaluate_split, run_main, run_warmup, EpochMetrics, TrainOutcome};

use crate::codebook::SinkhornConfig;
use crate::diffcore::{Gradients, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoCodebook,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub main_epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    /// Weight of the transport term added to the classification loss.
    pub lambda_ot: f64,
    /// Codebook size `k`.
    pub centroids: usize,
    /// Positive-class weight for both loss terms; off when `None`.
    pub pos_weight: Option<f64>,
    pub ablation: Ablation,
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
}

impl TrainConfig {
    /// CPU-sized run: 10+10 epochs of 16-function batches, k=8.
    pub fn desk() -> Self {
        TrainConfig {
            warmup_epochs: 10,
            main_epochs: 10,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 200,
            grad_clip_norm: 1.0,
            weight_decay: 0.01,
            lambda_ot: 1.0,
            centroids: 8,
            pos_weight: None,
            ablation: Ablation::Full,
            seed: 0,
            sinkhorn: SinkhornConfig::default(),
        }
    }

    pub fn full() -> Self {
        TrainConfig {
            warmup_epochs: 20,
            main_epochs: 20,
            batch_size: 64,
            peak_lr: 1e-4,
            warmup_steps: 4650,
            centroids: 150,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.centroids == 0 {
            return bad("centroids must be >= 1".into());
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} invalid", self.peak_lr));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm {} must be > 0", self.grad_clip_norm));
        }
        if self.lambda_ot < 0.0 {
            return bad(format!("lambda_ot {} must be >= 0", self.lambda_ot));
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0) {
                return bad(format!("pos_weight {w} must be > 0"));
            }
        }
        self.sinkhorn.validate()
    }
}

/// Function-level BCE plus the mean BCE over the statements selected by
/// `mask`. `z_hat` has one row per entry of `mask`; `z` holds labels for
/// those rows.
pub fn joint_loss(
    tape: &mut Tape<'_>,
    y_hat: Var,
    y: bool,
    z_hat: Var,
    z: &[bool],
    mask: &[bool],
    pos_weight: Option<f64>,
) -> Result<Var> {
    let rows = tape.shape(z_hat)[0];
    if z.len() != rows || mask.len() != rows {
        return Err(Error::dim("joint_loss", &[rows, 1], &[z.len(), mask.len()]));
    }
    let pw = pos_weight.unwrap_or(1.0);
    let weight = |label: bool| if label { pw } else { 1.0 };
    let y_term = tape.bce(
        y_hat,
        Array2::from_elem((1, 1), y as u8 as f64),
        Array2::from_elem((1, 1), weight(y)),
    )?;
    let real = mask.iter().filter(|&&m| m).count();
    if real == 0 {
        return Ok(y_term);
    }
    let targets = Array2::from_shape_fn((rows, 1), |(j, _)| z[j] as u8 as f64);
    let weights = Array2::from_shape_fn((rows, 1), |(j, _)| {
        if mask[j] {
            weight(z[j]) / real as f64
        } else {
            0.0
        }
    });
    let z_term = tape.bce(z_hat, targets, weights)?;
    tape.add(y_term, z_term)
}

/// Linear ramp from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    peak * (total - step) as f64 / (total - warmup).max(1) as f64
}

/// Rescales every gradient (model and codebook) so the global L2 norm is at
/// most `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, extra: Option<&mut Array2<f64>>, max_norm: f64) -> f64 {
    let extra_sq = extra.as_ref().map_or(0.0, |g| g.iter().map(|x| x * x).sum());
    let norm = (grads.global_norm().powi(2) + extra_sq).sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        grads.scale(factor);
        if let Some(g) = extra {
            g.mapv_inplace(|x| x * factor);
        }
    }
    norm
}

/// Decoupled-weight-decay Adam. Parameters without a gradient in a step are
/// left untouched, decay included.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Array2<f64>, Array2<f64>)>>,
    codebook_moments: Option<(Array2<f64>, Array2<f64>)>,
}

/// Biases and layer-norm parameters are exempt from weight decay.
fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !(last.starts_with('b') || last == "gain")
}

impl AdamW {
    pub fn new(params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: vec![None; params],
            codebook_moments: None,
        }
    }

    fn update(
        slot: &mut Option<(Array2<f64>, Array2<f64>)>,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        lr: f64,
        decay: f64,
        (b1, b2, eps, t): (f64, f64, f64, i32),
    ) {
        let (m, v) = slot.get_or_insert_with(|| (Array2::zeros(param.dim()), Array2::zeros(param.dim())));
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + decay * *p);
            });
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        codebook: Option<(&mut Array2<f64>, &Array2<f64>)>,
        lr: f64,
    ) {
        self.step += 1;
        let hyper = (self.beta1, self.beta2, self.eps, self.step.min(i32::MAX as u64) as i32);
        for (id, grad) in grads.iter() {
            let decay = if decays(store.name(id)) { self.weight_decay } else { 0.0 };
            Self::update(&mut self.moments[id.0], store.get_mut(id), grad, lr, decay, hyper);
        }
        if let Some((c, g)) = codebook {
            Self::update(&mut self.codebook_moments, c, g, lr, 0.0, hyper);
        }
    }
}
