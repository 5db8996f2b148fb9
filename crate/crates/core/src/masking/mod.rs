//! 8x1 block masks.
//!
//! A block is up to eight consecutive rows of one weight column. Columns
//! whose height is not a multiple of eight end in a shorter partial block,
//! which is scored and pruned like any other. Block `b` of a layer with
//! `bpc = ceil(rows / 8)` blocks per column covers column `b / bpc`, rows
//! `(b % bpc) * 8 ..`.
//!
//! Sparsity is always counted in elements, never in blocks.

mod io;

pub use io::{load_mask, read_mask, save_mask, write_mask, MASK_MAGIC};

use std::ops::Range;

use bitvec::prelude::*;

use crate::error::{Error, Result};
use crate::net::{MaskPolicy, Matrix, ModelState};

pub const BLOCK_ROWS: usize = 8;

/// Block geometry of one weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    rows: usize,
    cols: usize,
    blocks_per_col: usize,
}

impl BlockLayout {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            blocks_per_col: rows.div_ceil(BLOCK_ROWS),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocks_per_col(&self) -> usize {
        self.blocks_per_col
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_per_col * self.cols
    }

    pub fn num_elements(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn block_of(&self, row: usize, col: usize) -> usize {
        col * self.blocks_per_col + row / BLOCK_ROWS
    }

    #[inline]
    pub fn block_col(&self, block: usize) -> usize {
        block / self.blocks_per_col
    }

    #[inline]
    pub fn block_rows(&self, block: usize) -> Range<usize> {
        let start = (block % self.blocks_per_col) * BLOCK_ROWS;
        start..(start + BLOCK_ROWS).min(self.rows)
    }

    #[inline]
    pub fn block_len(&self, block: usize) -> usize {
        self.block_rows(block).len()
    }

    /// Largest block as a fraction of the layer: the worst-case overshoot of
    /// a block-quantised sparsity target.
    pub fn quantum(&self) -> f64 {
        self.rows.min(BLOCK_ROWS) as f64 / self.num_elements() as f64
    }
}

/// Partitions a `rows x cols` matrix into 8x1 blocks.
pub fn block_partition(rows: usize, cols: usize) -> Result<BlockLayout> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("cannot partition a {rows}x{cols} layer")));
    }
    Ok(BlockLayout::new(rows, cols))
}

/// Name and shape of one prunable weight matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout::new(self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    shape: LayerShape,
    layout: BlockLayout,
    bits: BitVec<u64, Lsb0>,
}

impl LayerMask {
    fn filled(shape: LayerShape, kept: bool) -> Self {
        let layout = shape.layout();
        Self {
            bits: BitVec::repeat(kept, layout.num_blocks()),
            shape,
            layout,
        }
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn bits(&self) -> &BitSlice<u64, Lsb0> {
        &self.bits
    }

    pub fn kept_elements(&self) -> usize {
        self.bits.iter_ones().map(|b| self.layout.block_len(b)).sum()
    }

    pub fn sparsity(&self) -> f64 {
        let n = self.layout.num_elements();
        (n - self.kept_elements()) as f64 / n as f64
    }
}

/// Binary keep/prune mask over the prunable layers of a model, at 8x1
/// block granularity. Layer `k` of the mask is the model's `k`-th prunable
/// layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    layers: Vec<LayerMask>,
}

impl BlockMask {
    pub fn ones(shapes: Vec<LayerShape>) -> Self {
        Self {
            layers: shapes.into_iter().map(|s| LayerMask::filled(s, true)).collect(),
        }
    }

    pub fn zeros(shapes: Vec<LayerShape>) -> Self {
        Self {
            layers: shapes.into_iter().map(|s| LayerMask::filled(s, false)).collect(),
        }
    }

    /// All-ones mask shaped for `model`.
    pub fn dense_for(model: &ModelState) -> Self {
        Self::ones(model.prunable_shapes())
    }

    /// Builds a mask from one block bit vector per layer.
    pub fn from_block_bits(shapes: Vec<LayerShape>, bits: Vec<Vec<bool>>) -> Result<Self> {
        if shapes.len() != bits.len() {
            return Err(Error::Shape(format!(
                "{} layer shapes but {} bit vectors",
                shapes.len(),
                bits.len()
            )));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (shape, b) in shapes.into_iter().zip(bits) {
            let mut layer = LayerMask::filled(shape, false);
            if b.len() != layer.layout.num_blocks() {
                return Err(Error::Shape(format!(
                    "layer {} has {} blocks, got {} bits",
                    layer.shape.name,
                    layer.layout.num_blocks(),
                    b.len()
                )));
            }
            for (i, v) in b.into_iter().enumerate() {
                layer.bits.set(i, v);
            }
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    /// Quantises element-level masks (row-major per layer). A block is kept
    /// only if every element in it is kept.
    pub fn quantize(shapes: Vec<LayerShape>, elements: &[Vec<bool>]) -> Result<Self> {
        if shapes.len() != elements.len() {
            return Err(Error::Shape("layer count mismatch".into()));
        }
        let mut mask = Self::ones(shapes);
        for (layer, elems) in mask.layers.iter_mut().zip(elements) {
            let l = layer.layout;
            if elems.len() != l.num_elements() {
                return Err(Error::Shape(format!(
                    "layer {} has {} elements, got {}",
                    layer.shape.name,
                    l.num_elements(),
                    elems.len()
                )));
            }
            for b in 0..l.num_blocks() {
                let col = l.block_col(b);
                let kept = l.block_rows(b).all(|r| elems[r * l.cols() + col]);
                layer.bits.set(b, kept);
            }
        }
        Ok(mask)
    }

    /// Element-level view, row-major per layer.
    pub fn expand(&self) -> Vec<Vec<bool>> {
        self.layers
            .iter()
            .map(|layer| {
                let l = layer.layout;
                let mut out = Vec::with_capacity(l.num_elements());
                for r in 0..l.rows() {
                    for c in 0..l.cols() {
                        out.push(layer.bits[l.block_of(r, c)]);
                    }
                }
                out
            })
            .collect()
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| l.shape.clone()).collect()
    }

    pub fn layout(&self, layer: usize) -> BlockLayout {
        self.layers[layer].layout
    }

    #[inline]
    pub fn block_kept(&self, layer: usize, block: usize) -> bool {
        self.layers[layer].bits[block]
    }

    pub fn set_block(&mut self, layer: usize, block: usize, kept: bool) {
        self.layers[layer].bits.set(block, kept);
    }

    #[inline]
    pub fn is_kept(&self, layer: usize, row: usize, col: usize) -> bool {
        let l = &self.layers[layer];
        l.bits[l.layout.block_of(row, col)]
    }

    pub fn kept_elements(&self) -> usize {
        self.layers.iter().map(LayerMask::kept_elements).sum()
    }

    pub fn total_elements(&self) -> usize {
        self.layers.iter().map(|l| l.layout.num_elements()).sum()
    }

    /// Fraction of elements pruned, over all layers.
    pub fn sparsity(&self) -> f64 {
        let total = self.total_elements();
        if total == 0 {
            return 0.0;
        }
        (total - self.kept_elements()) as f64 / total as f64
    }

    /// Largest per-layer block quantum.
    pub fn quantum(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.layout.quantum())
            .fold(0.0, f64::max)
    }

    /// True when every layer's sparsity lies in `[target, target + quantum)`.
    pub fn at_sparsity(&self, target: f64) -> bool {
        self.layers.iter().all(|l| {
            let s = l.sparsity();
            s >= target - 1e-9 && s < target + l.layout.quantum() - 1e-12
        })
    }

    pub fn check_compatible(&self, other: &BlockMask) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape.rows == b.shape.rows && a.shape.cols == b.shape.cols);
        if same {
            Ok(())
        } else {
            Err(Error::Shape("masks have different layer shapes".into()))
        }
    }

    pub fn check_model(&self, model: &ModelState) -> Result<()> {
        let shapes = model.prunable_shapes();
        let same = shapes.len() == self.layers.len()
            && shapes
                .iter()
                .zip(&self.layers)
                .all(|(s, l)| s.rows == l.shape.rows && s.cols == l.shape.cols);
        if same {
            Ok(())
        } else {
            Err(Error::Shape(
                "mask layer shapes do not match the model's prunable layers".into(),
            ))
        }
    }

    /// Zeroes the masked-out entries of `weight` using mask layer `layer`.
    pub(crate) fn zero_layer(&self, layer: usize, weight: &mut Matrix) {
        let l = &self.layers[layer];
        for b in l.bits.iter_zeros() {
            let col = l.layout.block_col(b);
            for r in l.layout.block_rows(b) {
                weight[(r, col)] = 0.0;
            }
        }
    }

    pub fn complement(&self) -> BlockMask {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.bits = !std::mem::take(&mut l.bits);
        }
        out
    }

    fn combine(masks: &[&BlockMask], f: impl Fn(&mut BitVec<u64, Lsb0>, &BitSlice<u64, Lsb0>)) -> Result<BlockMask> {
        let (first, rest) = masks
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("set operation on zero masks".into()))?;
        let mut out = (*first).clone();
        for m in rest {
            out.check_compatible(m)?;
            for (a, b) in out.layers.iter_mut().zip(&m.layers) {
                f(&mut a.bits, &b.bits);
            }
        }
        Ok(out)
    }

    pub fn union(masks: &[&BlockMask]) -> Result<BlockMask> {
        Self::combine(masks, |a, b| *a |= b)
    }

    pub fn intersect(masks: &[&BlockMask]) -> Result<BlockMask> {
        Self::combine(masks, |a, b| *a &= b)
    }

    /// Number of elements kept by both masks.
    pub fn overlap_elements(&self, other: &BlockMask) -> Result<usize> {
        Ok(BlockMask::intersect(&[self, other])?.kept_elements())
    }

    /// True when every block kept by `other` is kept by `self`.
    pub fn contains(&self, other: &BlockMask) -> Result<bool> {
        self.check_compatible(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| b.bits.iter_ones().all(|i| a.bits[i])))
    }
}

pub fn union(masks: &[&BlockMask]) -> Result<BlockMask> {
    BlockMask::union(masks)
}

pub fn intersect(masks: &[&BlockMask]) -> Result<BlockMask> {
    BlockMask::intersect(masks)
}

pub fn complement(mask: &BlockMask) -> BlockMask {
    mask.complement()
}

/// L2 norms of every block of every prunable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockScores {
    layers: Vec<(LayerShape, Vec<f64>)>,
}

impl BlockScores {
    pub fn layer(&self, k: usize) -> &[f64] {
        &self.layers[k].1
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|(s, _)| s.clone()).collect()
    }

    /// Builds scores directly; mainly for tests and tools.
    pub fn from_parts(parts: Vec<(LayerShape, Vec<f64>)>) -> Result<Self> {
        for (shape, s) in &parts {
            if s.len() != shape.layout().num_blocks() {
                return Err(Error::Shape(format!("wrong score count for layer {}", shape.name)));
            }
        }
        Ok(Self { layers: parts })
    }
}

/// Scores each block by the L2 norm of its current weights. With a
/// `support`, blocks outside it score `-inf` so they are always pruned
/// first and never kept.
pub fn score_blocks(model: &ModelState, support: Option<&BlockMask>) -> Result<BlockScores> {
    if let Some(s) = support {
        s.check_model(model)?;
    }
    let mut layers = Vec::new();
    for (k, (li, shape)) in model
        .prunable_indices()
        .into_iter()
        .zip(model.prunable_shapes())
        .enumerate()
    {
        let w = &model.layers()[li].weight;
        let layout = shape.layout();
        let scores = (0..layout.num_blocks())
            .map(|b| {
                if support.is_some_and(|s| !s.block_kept(k, b)) {
                    return f64::NEG_INFINITY;
                }
                let col = layout.block_col(b);
                layout
                    .block_rows(b)
                    .map(|r| w[(r, col)] * w[(r, col)])
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        layers.push((shape, scores));
    }
    Ok(BlockScores { layers })
}

/// Number of elements that must be pruned from `n` to reach `target`.
pub(crate) fn elements_to_prune(target: f64, n: usize) -> usize {
    ((target * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per-layer magnitude pruning: in every layer, clear the lowest-scoring
/// blocks (ties by ascending block index) until the layer's element
/// sparsity first reaches `target`.
pub fn prune_to_sparsity(scores: &BlockScores, target: f64) -> Result<BlockMask> {
    if !(target.is_finite() && (0.0..1.0).contains(&target)) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity {target} is outside [0, 1)"
        )));
    }
    let mut mask = BlockMask::ones(scores.shapes());
    for (k, (shape, s)) in scores.layers.iter().enumerate() {
        let layout = shape.layout();
        let need = elements_to_prune(target, layout.num_elements());
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        let mut pruned = 0;
        for b in order {
            if pruned >= need {
                break;
            }
            mask.set_block(k, b, false);
            pruned += layout.block_len(b);
        }
    }
    Ok(mask)
}

fn zero_masked(model: &mut ModelState, mask: &BlockMask) -> Result<()> {
    mask.check_model(model)?;
    let idx = model.prunable_indices();
    let layers = model.layers_mut();
    for (k, li) in idx.into_iter().enumerate() {
        mask.zero_layer(k, &mut layers[li].weight);
    }
    Ok(())
}

/// `m ⊙ θ`, returning the gradient filter to train under.
pub fn apply_hard<'a>(model: &mut ModelState, mask: &'a BlockMask) -> Result<MaskPolicy<'a>> {
    zero_masked(model, mask)?;
    Ok(MaskPolicy::Hard(mask))
}

/// Soft prune: zero the masked-out weights but leave them trainable.
pub fn apply_soft(model: &mut ModelState, mask: &BlockMask) -> Result<MaskPolicy<'static>> {
    zero_masked(model, mask)?;
    Ok(MaskPolicy::Soft)
}

/// Kept elements in the union of `masks` divided by `total_prunable`.
///
/// Computed as one minus the pruned fraction, the same expression
/// [`BlockMask::sparsity`] uses, so a single mask's union ratio is exactly
/// `1 - sparsity`.
pub fn union_ratio(masks: &[&BlockMask], total_prunable: usize) -> Result<f64> {
    if total_prunable == 0 {
        return Err(Error::InvalidArgument("no prunable parameters".into()));
    }
    let kept = BlockMask::union(masks)?.kept_elements();
    if kept > total_prunable {
        return Err(Error::InvalidArgument(format!(
            "{kept} kept elements exceed {total_prunable} prunable parameters"
        )));
    }
    Ok(1.0 - (total_prunable - kept) as f64 / total_prunable as f64)
}

/// Jaccard similarity of the surviving elements. Two empty masks are
/// identical (1.0).
pub fn similarity(a: &BlockMask, b: &BlockMask) -> Result<f64> {
    let inter = BlockMask::intersect(&[a, b])?.kept_elements();
    let uni = BlockMask::union(&[a, b])?.kept_elements();
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

/// Summary statistics over a set of masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDiagnostics {
    /// Per-mask element sparsity.
    pub sparsity: Vec<f64>,
    pub union_ratio: f64,
    pub pairwise_similarity: Vec<Vec<f64>>,
}

pub fn diagnostics(masks: &[&BlockMask]) -> Result<MaskDiagnostics> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("diagnostics of zero masks".into()))?;
    let n = masks.len();
    let mut sim = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = similarity(masks[i], masks[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    Ok(MaskDiagnostics {
        sparsity: masks.iter().map(|m| m.sparsity()).collect(),
        union_ratio: union_ratio(masks, first.total_elements())?,
        pairwise_similarity: sim,
    })
}
