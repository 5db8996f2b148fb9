//! Slow, obviously-correct reference implementations for tests.
//!
//! Everything here works element by element on plain vectors and shares
//! no arithmetic with the main crate beyond reading parameters and mask
//! bits through public accessors.

use std::collections::BTreeMap;

use pathprune::net::Activation;
use pathprune::{
    BlockMask, Error, EventRecord, LanguageId, Matrix, ModelState, Result, ScoringScope,
};

/// An oracle answer and the tolerance it should be compared with.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult<T> {
    pub value: T,
    pub tolerance: f64,
}

/// Element-level mask: one `Vec<bool>` per prunable layer, input-major.
pub type ElementMask = Vec<Vec<bool>>;

/// Per-layer `(weight grads, bias grads)`, weights input-major.
pub type LayerGrads = Vec<(Vec<f64>, Vec<f64>)>;

pub fn elements_of(mask: &BlockMask) -> ElementMask {
    mask.shapes()
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut v = Vec::with_capacity(s.rows * s.cols);
            for r in 0..s.rows {
                for c in 0..s.cols {
                    v.push(mask.is_kept(k, r, c));
                }
            }
            v
        })
        .collect()
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
    }
}

/// Logits for every row of `inputs`, one example at a time, optionally
/// through an element mask over the prunable layers.
pub fn forward(model: &ModelState, inputs: &Matrix, mask: Option<&ElementMask>) -> Vec<Vec<f64>> {
    let prunable = model.prunable_indices();
    let n_layers = model.layers().len();
    (0..inputs.rows())
        .map(|i| {
            let mut h: Vec<f64> = (0..inputs.cols()).map(|c| inputs[(i, c)]).collect();
            for (li, layer) in model.layers().iter().enumerate() {
                let w = &layer.weight;
                let m = mask.and_then(|m| prunable.iter().position(|&p| p == li).map(|k| &m[k]));
                let mut z = layer.bias.clone();
                for (j, zj) in z.iter_mut().enumerate() {
                    for (r, hr) in h.iter().enumerate() {
                        let keep = m.is_none_or(|m| m[r * w.cols() + j]);
                        if keep {
                            *zj += hr * w[(r, j)];
                        }
                    }
                }
                if li + 1 < n_layers {
                    for v in &mut z {
                        *v = act(model.activation(), *v);
                    }
                }
                h = z;
            }
            h
        })
        .collect()
}

/// Mean softmax cross-entropy, via log-sum-exp per example.
pub fn loss(model: &ModelState, inputs: &Matrix, labels: &[usize]) -> f64 {
    let logits = forward(model, inputs, None);
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / labels.len() as f64
}

/// Central finite differences of [`loss`] with respect to every weight
/// and bias.
pub fn fd_gradient(model: &ModelState, inputs: &Matrix, labels: &[usize], h: f64) -> OracleResult<LayerGrads> {
    assert!(h > 0.0, "step must be positive");
    let mut probe = model.clone();
    let mut out = Vec::new();
    for li in 0..model.layers().len() {
        let n_w = model.layers()[li].weight.as_slice().len();
        let n_b = model.layers()[li].bias.len();
        let mut gw = vec![0.0; n_w];
        let mut gb = vec![0.0; n_b];
        for (idx, g) in gw.iter_mut().enumerate() {
            let orig = model.layers()[li].weight.as_slice()[idx];
            probe.layer_mut(li).weight.as_mut_slice()[idx] = orig + h;
            let up = loss(&probe, inputs, labels);
            probe.layer_mut(li).weight.as_mut_slice()[idx] = orig - h;
            let down = loss(&probe, inputs, labels);
            probe.layer_mut(li).weight.as_mut_slice()[idx] = orig;
            *g = (up - down) / (2.0 * h);
        }
        for (idx, g) in gb.iter_mut().enumerate() {
            let orig = model.layers()[li].bias[idx];
            probe.layer_mut(li).bias[idx] = orig + h;
            let up = loss(&probe, inputs, labels);
            probe.layer_mut(li).bias[idx] = orig - h;
            let down = loss(&probe, inputs, labels);
            probe.layer_mut(li).bias[idx] = orig;
            *g = (up - down) / (2.0 * h);
        }
        out.push((gw, gb));
    }
    OracleResult {
        value: out,
        tolerance: 1e-4,
    }
}

/// `max |a - b| / max(|a|, floor)` over matching entries.
pub fn max_relative_error(a: &LayerGrads, b: &LayerGrads, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for ((aw, ab), (bw, bb)) in a.iter().zip(b) {
        assert_eq!(aw.len(), bw.len());
        assert_eq!(ab.len(), bb.len());
        for (x, y) in aw.iter().chain(ab).zip(bw.iter().chain(bb)) {
            worst = worst.max((x - y).abs() / x.abs().max(floor));
        }
    }
    worst
}

/// One 8x1 block as `(column, first row, row count)`.
fn blocks(rows: usize, cols: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for c in 0..cols {
        let mut r = 0;
        while r < rows {
            let len = (rows - r).min(8);
            out.push((c, r, len));
            r += len;
        }
    }
    out
}

/// Prunes one `rows x cols` layer by full sort: blocks outside `support`
/// go first in block order, then blocks by ascending L2 norm (ties by
/// block order),
/// until at least `ceil(target * elements)` elements are gone.
pub fn naive_prune(weights: &[f64], rows: usize, cols: usize, target: f64, support: Option<&[bool]>) -> Vec<bool> {
    assert_eq!(weights.len(), rows * cols);
    let mut scored: Vec<(bool, f64, usize, (usize, usize, usize))> = blocks(rows, cols)
        .into_iter()
        .enumerate()
        .map(|(i, b @ (c, r0, len))| {
            let inside = support.is_none_or(|s| (r0..r0 + len).all(|r| s[r * cols + c]));
            let sq: f64 = (r0..r0 + len).map(|r| weights[r * cols + c] * weights[r * cols + c]).sum();
            // Outside blocks are interchangeable: they go in block order.
            (inside, if inside { sq.sqrt() } else { 0.0 }, i, b)
        })
        .collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let total = rows * cols;
    let need = (target * total as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut keep = vec![true; total];
    let mut removed = 0;
    for (_, _, _, (c, r0, len)) in scored {
        if removed >= need {
            break;
        }
        for r in r0..r0 + len {
            keep[r * cols + c] = false;
        }
        removed += len;
    }
    keep
}

/// [`naive_prune`] over every prunable layer of `model`.
pub fn naive_prune_model(model: &ModelState, target: f64, support: Option<&ElementMask>) -> ElementMask {
    model
        .prunable_indices()
        .iter()
        .enumerate()
        .map(|(k, &li)| {
            let w = &model.layers()[li].weight;
            naive_prune(w.as_slice(), w.rows(), w.cols(), target, support.map(|s| s[k].as_slice()))
        })
        .collect()
}

/// Residual mask of `z` (own pathway plus every position no other pathway claims), evaluated position by position.
pub fn residual(masks: &BTreeMap<LanguageId, ElementMask>, z: LanguageId) -> ElementMask {
    let own = &masks[&z];
    own.iter()
        .enumerate()
        .map(|(k, layer)| {
            (0..layer.len())
                .map(|i| {
                    let claimed_by_other = masks.iter().any(|(l, m)| *l != z && m[k][i]);
                    layer[i] || !claimed_by_other
                })
                .collect()
        })
        .collect()
}

/// Kept fraction of the union of `masks`.
pub fn union_ratio(masks: &[ElementMask]) -> f64 {
    let mut kept = 0usize;
    let mut total = 0usize;
    for k in 0..masks[0].len() {
        for i in 0..masks[0][k].len() {
            total += 1;
            if masks.iter().any(|m| m[k][i]) {
                kept += 1;
            }
        }
    }
    kept as f64 / total as f64
}

/// |a ∩ b| / |a ∪ b|, 1 when both are empty.
pub fn jaccard(a: &ElementMask, b: &ElementMask) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (la, lb) in a.iter().zip(b) {
        for (&x, &y) in la.iter().zip(lb) {
            inter += (x && y) as usize;
            uni += (x || y) as usize;
        }
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

/// `coeff * Σ block norms`, enumerating blocks by hand.
pub fn group_lasso(model: &ModelState, coeff: f64) -> f64 {
    let mut total = 0.0;
    for li in model.prunable_indices() {
        let w = &model.layers()[li].weight;
        for (c, r0, len) in blocks(w.rows(), w.cols()) {
            total += (r0..r0 + len).map(|r| w[(r, c)].powi(2)).sum::<f64>().sqrt();
        }
    }
    coeff * total
}

fn diverged(index: usize, ev: &EventRecord, detail: impl Into<String>) -> Error {
    Error::ReplayDivergence {
        index,
        step: ev.step,
        detail: detail.into(),
    }
}

fn recompute(index: usize, ev: &EventRecord, scope: Option<&ElementMask>) -> Result<()> {
    let expected = naive_prune_model(&ev.weights_before, ev.sparsity, scope);
    if expected != elements_of(&ev.result) {
        return Err(diverged(index, ev, "recomputed mask differs from the recorded one"));
    }
    Ok(())
}

/// Re-derives every decision of a single-mask run (IMP, LTH, LAP or
/// adaptive) from the logged weights and returns the final mask.
///
/// Each event must start from the previous event's result, score either
/// all blocks or exactly the surviving ones, and produce the mask a
/// sort-and-cut prune of the logged weights gives.
pub fn replay_single(initial: &BlockMask, events: &[EventRecord]) -> Result<BlockMask> {
    let mut current = initial.clone();
    for (i, ev) in events.iter().enumerate() {
        if ev.previous != current {
            return Err(diverged(i, ev, "event does not start from the replayed mask"));
        }
        let scope = match &ev.scope {
            ScoringScope::All => None,
            ScoringScope::Within(s) if *s == current => Some(elements_of(s)),
            ScoringScope::Within(_) => {
                return Err(diverged(i, ev, "scoring scope is not the surviving support"))
            }
        };
        recompute(i, ev, scope.as_ref())?;
        current = ev.result.clone();
    }
    Ok(current)
}

/// Replays a pathway run. Every decision must score within the
/// residual mask, computed element-wise from the replayed masks: the
/// masks as they stand when the language is processed (`snapshot =
/// false`) or as they stood when the event began (`snapshot = true`).
pub fn replay_pathways(
    initial: &BTreeMap<LanguageId, BlockMask>,
    events: &[EventRecord],
    snapshot: bool,
) -> Result<BTreeMap<LanguageId, BlockMask>> {
    let mut current = initial.clone();
    let mut at_event_start = current.clone();
    let mut event_step = None;
    for (i, ev) in events.iter().enumerate() {
        let z = ev
            .language
            .ok_or_else(|| diverged(i, ev, "pathway event without a language"))?;
        if event_step != Some((ev.step, ev.kind)) {
            at_event_start = current.clone();
            event_step = Some((ev.step, ev.kind));
        }
        let prev = current.get(&z).ok_or(Error::UnknownLanguage(z))?;
        if ev.previous != *prev {
            return Err(diverged(i, ev, format!("language {z} does not start from the replayed mask")));
        }
        let basis = if snapshot { &at_event_start } else { &current };
        let elems: BTreeMap<LanguageId, ElementMask> =
            basis.iter().map(|(l, m)| (*l, elements_of(m))).collect();
        let expected_scope = residual(&elems, z);
        match &ev.scope {
            ScoringScope::Within(s) if elements_of(s) == expected_scope => {}
            _ => return Err(diverged(i, ev, format!("scope for language {z} is not its residual mask"))),
        }
        recompute(i, ev, Some(&expected_scope))?;
        current.insert(z, ev.result.clone());
    }
    Ok(current)
}
