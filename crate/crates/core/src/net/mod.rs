//! Dense feed-forward networks with exact gradients.
//!
//! Weights are stored input-major: layer `i` maps a batch `x` (batch x in)
//! to `x * W + b` with `W` of shape (in x out). An 8x1 block is therefore
//! eight consecutive inputs feeding the same output unit.

mod matrix;
mod optim;

pub use matrix::Matrix;
pub use optim::{
    group_lasso_penalty, sgd_step, tri_stage_lr, MaskPolicy, Optimizer, OptimizerState, TrainConfig,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{BlockMask, LayerShape};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Architecture of an MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Whether the classifier layer is prunable. Hidden layers always are.
    #[serde(default)]
    pub prune_output: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![64, 64],
            output_dim: 8,
            activation: Activation::Relu,
            prune_output: false,
        }
    }
}

/// One affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub prunable: bool,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, prunable: bool) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Shape(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Self {
            weight,
            bias,
            prunable,
        })
    }
}

/// All trainable parameters of a network plus a training step counter.
///
/// Every mutable access bumps an internal version so that stale forward
/// passes are caught by [`backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    layers: Vec<Layer>,
    activation: Activation,
    step: u64,
    version: u64,
}

impl ModelState {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].weight.cols(),
                    i + 1,
                    pair[1].weight.rows()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.cols() {
                return Err(Error::Shape(format!("layer {i}: bias/weight mismatch")));
            }
        }
        Ok(Self {
            layers,
            activation,
            step: 0,
            version: 0,
        })
    }

    /// Random initialisation (scaled normal, He for ReLU, Xavier otherwise),
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.output_dim);
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let std = match spec.activation {
                Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                _ => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            let prunable = i + 1 < n || spec.prune_output;
            layers.push(Layer::new(
                Matrix::from_vec(fan_in, fan_out, data)?,
                vec![0.0; fan_out],
                prunable,
            )?);
        }
        Self::new(layers, spec.activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        self.version += 1;
        &mut self.layers[i]
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    /// Model-layer indices of the prunable layers, in order. Mask layer `k`
    /// always refers to `prunable_indices()[k]`.
    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].prunable)
            .collect()
    }

    /// Shapes of the prunable weight matrices, named `fc{index}`.
    pub fn prunable_shapes(&self) -> Vec<LayerShape> {
        self.prunable_indices()
            .into_iter()
            .map(|i| {
                let w = &self.layers[i].weight;
                LayerShape::new(format!("fc{i}"), w.rows(), w.cols())
            })
            .collect()
    }

    pub fn prunable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.prunable)
            .map(|l| l.weight.as_slice().len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Overwrites every parameter with `other`'s, keeping this model's step.
    pub fn copy_params_from(&mut self, other: &ModelState) -> Result<()> {
        self.check_same_shapes(other)?;
        self.version += 1;
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weight = src.weight.clone();
            dst.bias = src.bias.clone();
        }
        Ok(())
    }

    pub(crate) fn check_same_shapes(&self, other: &ModelState) -> Result<()> {
        let ok = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.prunable == b.prunable);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("models have different architectures".into()))
        }
    }
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `inputs[i]` is the input fed to layer `i`; `inputs[0]` is the batch.
    inputs: Vec<Matrix>,
    /// Pre-activation of every layer; the last one equals the logits.
    pre_activations: Vec<Matrix>,
    /// Weights actually used, when a mask was applied on the fly.
    effective: Option<(BlockMask, Vec<Matrix>)>,
    version: u64,
}

impl ForwardPass {
    pub fn logits(&self) -> &Matrix {
        self.pre_activations.last().expect("at least one layer")
    }

    /// Output of every layer (post-activation for hidden layers, logits last).
    pub fn activations(&self) -> impl Iterator<Item = &Matrix> {
        self.inputs[1..].iter().chain(std::iter::once(self.logits()))
    }
}

/// Forward pass through the dense parameters.
pub fn forward(model: &ModelState, batch: &Matrix) -> Result<ForwardPass> {
    run_forward(model, batch, None)
}

/// Forward pass through `mask ⊙ θ` without touching the stored parameters.
/// The resulting weight gradients are zero at masked-out positions.
pub fn forward_masked(model: &ModelState, mask: &BlockMask, batch: &Matrix) -> Result<ForwardPass> {
    mask.check_model(model)?;
    let mut effective: Vec<Matrix> = model.layers.iter().map(|l| l.weight.clone()).collect();
    for (k, li) in model.prunable_indices().into_iter().enumerate() {
        mask.zero_layer(k, &mut effective[li]);
    }
    run_forward(model, batch, Some((mask.clone(), effective)))
}

fn run_forward(
    model: &ModelState,
    batch: &Matrix,
    effective: Option<(BlockMask, Vec<Matrix>)>,
) -> Result<ForwardPass> {
    if batch.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            model.input_dim()
        )));
    }
    let n = model.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut x = batch.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let w = match &effective {
            Some((_, ws)) => &ws[i],
            None => &layer.weight,
        };
        let mut z = x.matmul(w);
        for r in 0..z.rows() {
            for (v, b) in z.as_mut_slice()[r * w.cols()..(r + 1) * w.cols()]
                .iter_mut()
                .zip(&layer.bias)
            {
                *v += b;
            }
        }
        let next = if i + 1 < n {
            let mut a = z.clone();
            a.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = model.activation.apply(*v));
            Some(a)
        } else {
            None
        };
        inputs.push(x);
        pre.push(z);
        if let Some(a) = next {
            x = a;
        } else {
            break;
        }
    }
    Ok(ForwardPass {
        inputs,
        pre_activations: pre,
        effective,
        version: model.version,
    })
}

/// Per-layer parameter gradients, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| a.weight.shape() != b.weight.shape())
        {
            return Err(Error::Shape("gradient sets differ in shape".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.as_slice().iter().chain(&l.bias).all(|&v| v == 0.0))
    }
}

/// Backpropagates `loss_grad` (d loss / d logits) through the pass.
pub fn backward(model: &ModelState, pass: &ForwardPass, loss_grad: &Matrix) -> Result<Gradients> {
    backprop(model, pass, loss_grad, true)
}

/// Like [`backward`], but a masked pass passes the gradient with respect
/// to the effective weights straight through to every stored weight,
/// masked-out ones included.
pub fn backward_straight_through(
    model: &ModelState,
    pass: &ForwardPass,
    loss_grad: &Matrix,
) -> Result<Gradients> {
    backprop(model, pass, loss_grad, false)
}

fn backprop(model: &ModelState, pass: &ForwardPass, loss_grad: &Matrix, mask_grads: bool) -> Result<Gradients> {
    if pass.version != model.version || pass.inputs.len() != model.layers.len() {
        return Err(Error::StaleActivations {
            pass: pass.version,
            model: model.version,
        });
    }
    if loss_grad.shape() != pass.logits().shape() {
        return Err(Error::Shape(format!(
            "loss gradient is {:?}, logits are {:?}",
            loss_grad.shape(),
            pass.logits().shape()
        )));
    }
    let n = model.layers.len();
    let mut grads = Vec::with_capacity(n);
    let mut delta = loss_grad.clone();
    for i in (0..n).rev() {
        let w = match &pass.effective {
            Some((_, ws)) => &ws[i],
            None => &model.layers[i].weight,
        };
        let dw = pass.inputs[i].t_matmul(&delta);
        let mut db = vec![0.0; delta.cols()];
        for r in 0..delta.rows() {
            for (acc, v) in db.iter_mut().zip(delta.row(r)) {
                *acc += v;
            }
        }
        if i > 0 {
            let mut next = delta.matmul_t(w);
            for (v, z) in next
                .as_mut_slice()
                .iter_mut()
                .zip(pass.pre_activations[i - 1].as_slice())
            {
                *v *= model.activation.derivative(*z);
            }
            delta = next;
        }
        grads.push(LayerGrad { weight: dw, bias: db });
    }
    grads.reverse();
    let mut grads = Gradients { layers: grads };
    if let (true, Some((mask, _))) = (mask_grads, &pass.effective) {
        for (k, li) in model.prunable_indices().into_iter().enumerate() {
            mask.zero_layer(k, &mut grads.layers[li].weight);
        }
    }
    Ok(grads)
}

/// How per-example losses are combined over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Softmax cross-entropy. Returns the reduced loss and d loss / d logits.
pub fn softmax_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    reduction: Reduction,
) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let k = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / logits.rows().max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Matrix::zeros(logits.rows(), k);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            let target = if c == y { 1.0 } else { 0.0 };
            grad[(r, c)] = (p - target) * scale;
        }
    }
    Ok((total * scale, grad))
}

/// Index of the largest logit per row.
pub fn predict(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
