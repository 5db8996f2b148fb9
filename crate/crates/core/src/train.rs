use crate::error::Result;
use crate::masking::BlockMask;
use crate::net::{
    backward, backward_straight_through, forward, forward_masked, group_lasso_penalty, predict, sgd_step,
    softmax_cross_entropy, tri_stage_lr, MaskPolicy, ModelState, OptimizerState, Reduction,
    TrainConfig,
};
use crate::taskgen::{Batch, LanguageTask};

/// One optimiser step at schedule position `step` (0-based). Returns the
/// batch loss before the update.
pub(crate) fn train_step(
    model: &mut ModelState,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    step: u64,
    forward_mask: Option<&BlockMask>,
    straight_through: bool,
    policy: MaskPolicy<'_>,
) -> Result<f64> {
    let lr = tri_stage_lr(cfg, step)?;
    let pass = match forward_mask {
        Some(m) => forward_masked(model, m, &batch.inputs)?,
        None => forward(model, &batch.inputs)?,
    };
    let (loss, dl) = softmax_cross_entropy(pass.logits(), &batch.labels, Reduction::Mean)?;
    let mut grads = if straight_through {
        backward_straight_through(model, &pass, &dl)?
    } else {
        backward(model, &pass, &dl)?
    };
    if cfg.group_lasso_coeff > 0.0 {
        let (_, pg) = group_lasso_penalty(model, cfg.group_lasso_coeff)?;
        grads.add_scaled(&pg, 1.0)?;
    }
    let dir = opt.direction(grads)?;
    sgd_step(model, &dir, lr, policy)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Eval {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and accuracy on the task's eval split, through
/// `mask ⊙ θ` when a mask is given.
pub(crate) fn evaluate(model: &ModelState, task: &LanguageTask, mask: Option<&BlockMask>) -> Result<Eval> {
    let pass = match mask {
        Some(m) => forward_masked(model, m, &task.eval_x)?,
        None => forward(model, &task.eval_x)?,
    };
    let (loss, _) = softmax_cross_entropy(pass.logits(), &task.eval_y, Reduction::Mean)?;
    let correct = predict(pass.logits())
        .iter()
        .zip(&task.eval_y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(Eval {
        loss,
        accuracy: correct as f64 / task.num_eval().max(1) as f64,
    })
}
