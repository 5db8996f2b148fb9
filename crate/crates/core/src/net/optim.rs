use serde::{Deserialize, Serialize};

use super::{Gradients, ModelState};
use crate::error::{Error, Result};
use crate::masking::{BlockLayout, BlockMask};

/// Optimisation hyperparameters for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub hold_fraction: f64,
    pub decay_fraction: f64,
    /// Coefficient of the 8x1 block-norm penalty; 0 disables it.
    pub group_lasso_coeff: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

/// Update rule applied to the raw gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Adam without weight decay; the step is still `lr` times the
    /// bias-corrected moment ratio, so masking works as for SGD.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-run optimiser memory (Adam moments). SGD keeps none.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    optimizer: Optimizer,
    moments: Option<(Gradients, Gradients)>,
    t: i32,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer) -> Self {
        Self {
            optimizer,
            moments: None,
            t: 0,
        }
    }

    /// Forgets all accumulated moments.
    pub fn reset(&mut self) {
        self.moments = None;
        self.t = 0;
    }

    /// Turns raw gradients into the direction `sgd_step` should follow.
    pub fn direction(&mut self, grads: Gradients) -> Result<Gradients> {
        let Optimizer::Adam { beta1, beta2, eps } = self.optimizer else {
            return Ok(grads);
        };
        let (m, v) = self.moments.get_or_insert_with(|| {
            let zero = Gradients {
                layers: grads
                    .layers
                    .iter()
                    .map(|l| super::LayerGrad {
                        weight: super::Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        bias: vec![0.0; l.bias.len()],
                    })
                    .collect(),
            };
            (zero.clone(), zero)
        });
        if m.layers.len() != grads.layers.len() {
            return Err(Error::Shape("gradients do not match optimiser state".into()));
        }
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let mut out = grads;
        for ((ml, vl), gl) in m.layers.iter_mut().zip(&mut v.layers).zip(&mut out.layers) {
            if ml.weight.shape() != gl.weight.shape() || ml.bias.len() != gl.bias.len() {
                return Err(Error::Shape("gradients do not match optimiser state".into()));
            }
            let pairs = ml
                .weight
                .as_mut_slice()
                .iter_mut()
                .chain(ml.bias.iter_mut())
                .zip(vl.weight.as_mut_slice().iter_mut().chain(vl.bias.iter_mut()))
                .zip(gl.weight.as_mut_slice().iter_mut().chain(gl.bias.iter_mut()));
            for ((mi, vi), gi) in pairs {
                *mi = beta1 * *mi + (1.0 - beta1) * *gi;
                *vi = beta2 * *vi + (1.0 - beta2) * *gi * *gi;
                *gi = (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(out)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2500,
            peak_lr: 0.05,
            warmup_fraction: 0.1,
            hold_fraction: 0.4,
            decay_fraction: 0.5,
            group_lasso_coeff: 0.0,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("train.total_steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config("train.peak_lr", "must be a positive number"));
        }
        if !(self.group_lasso_coeff.is_finite() && self.group_lasso_coeff >= 0.0) {
            return Err(Error::config("train.group_lasso_coeff", "must be >= 0"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            let unit = |b: f64| (0.0..1.0).contains(&b);
            if !(unit(beta1) && unit(beta2) && eps.is_finite() && eps > 0.0) {
                return Err(Error::config(
                    "train.optimizer",
                    "adam needs beta1, beta2 in [0, 1) and eps > 0",
                ));
            }
        }
        let fracs = [self.warmup_fraction, self.hold_fraction, self.decay_fraction];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("train", "stage fractions must lie in [0, 1]"));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "train",
                "warmup_fraction + hold_fraction + decay_fraction must equal 1",
            ));
        }
        Ok(())
    }

    fn stage_lengths(&self) -> (u64, u64, u64) {
        let total = self.total_steps;
        let warmup = ((self.warmup_fraction * total as f64).round() as u64).min(total);
        let hold = ((self.hold_fraction * total as f64).round() as u64).min(total - warmup);
        (warmup, hold, total - warmup - hold)
    }
}

/// Learning rate at `step`: linear warmup from 0 to the peak, a constant
/// hold, then linear decay to `peak_lr / 100` at `total_steps`.
pub fn tri_stage_lr(cfg: &TrainConfig, step: u64) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} is past the end of a {}-step schedule",
            cfg.total_steps
        )));
    }
    let (warmup, hold, decay) = cfg.stage_lengths();
    let peak = cfg.peak_lr;
    let lr = if step < warmup {
        peak * step as f64 / warmup as f64
    } else if step < warmup + hold || decay == 0 {
        peak
    } else {
        let floor = peak / 100.0;
        let t = (step - warmup - hold) as f64 / decay as f64;
        peak + (floor - peak) * t
    };
    Ok(lr)
}

/// Which weight positions an update may touch.
#[derive(Clone, Copy, Debug)]
pub enum MaskPolicy<'a> {
    /// Plain update.
    None,
    /// Gradients outside the mask are discarded. Used both for fixed masks
    /// and for restricting a batch to one pathway's support.
    Hard(&'a BlockMask),
    /// Every weight updates, including ones zeroed by a soft prune.
    Soft,
}

/// One SGD update in place. Biases are never masked.
pub fn sgd_step(
    model: &mut ModelState,
    grads: &Gradients,
    lr: f64,
    policy: MaskPolicy<'_>,
) -> Result<()> {
    if grads.layers.len() != model.layers.len()
        || grads
            .layers
            .iter()
            .zip(&model.layers)
            .any(|(g, l)| g.weight.shape() != l.weight.shape() || g.bias.len() != l.bias.len())
    {
        return Err(Error::Shape("gradients do not match the model".into()));
    }
    if let MaskPolicy::Hard(mask) = policy {
        mask.check_model(model)?;
    }
    let prunable = model.prunable_indices();
    let step = model.step + 1;
    for (li, (layer, g)) in model.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
        let mask_layer = match policy {
            MaskPolicy::Hard(mask) => prunable
                .iter()
                .position(|&p| p == li)
                .map(|k| (mask, k)),
            _ => None,
        };
        match mask_layer {
            Some((mask, k)) => {
                let cols = layer.weight.cols();
                let w = layer.weight.as_mut_slice();
                for (idx, (wv, gv)) in w.iter_mut().zip(g.weight.as_slice()).enumerate() {
                    if mask.is_kept(k, idx / cols, idx % cols) {
                        *wv -= lr * gv;
                    }
                }
            }
            None => {
                for (wv, gv) in layer.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                    *wv -= lr * gv;
                }
            }
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    model.set_step(step);
    Ok(())
}

const GROUP_LASSO_EPS: f64 = 1e-12;

/// `coeff * Σ ||block||₂` over every 8x1 block of every prunable layer, and
/// its gradient `coeff * block / max(||block||, ε)`.
pub fn group_lasso_penalty(model: &ModelState, coeff: f64) -> Result<(f64, Gradients)> {
    if !(coeff.is_finite() && coeff >= 0.0) {
        return Err(Error::InvalidArgument(format!("group lasso coefficient {coeff} < 0")));
    }
    let mut grads = Gradients::zeros_like(model);
    if coeff == 0.0 {
        return Ok((0.0, grads));
    }
    let mut penalty = 0.0;
    for (li, layer) in model.layers().iter().enumerate() {
        if !layer.prunable {
            continue;
        }
        let w = &layer.weight;
        let layout = BlockLayout::new(w.rows(), w.cols());
        let g = &mut grads.layers[li].weight;
        for b in 0..layout.num_blocks() {
            let col = layout.block_col(b);
            let rows = layout.block_rows(b);
            let norm = rows.clone().map(|r| w[(r, col)].powi(2)).sum::<f64>().sqrt();
            penalty += norm;
            let denom = norm.max(GROUP_LASSO_EPS);
            for r in rows {
                g[(r, col)] = coeff * w[(r, col)] / denom;
            }
        }
    }
    Ok((coeff * penalty, grads))
}
