//! Builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use pathprune::net::Activation;
use pathprune::taskgen::make_tasks;
use pathprune::{
    BlockMask, LanguageId, LanguageTask, Layer, LayerShape, Matrix, ModelSpec, ModelState, TaskSuiteSpec,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A single prunable `rows x cols` layer. With `coarse`, weights take only
/// a handful of values so that many blocks tie.
pub fn random_layer(rng: &mut ChaCha8Rng, rows: usize, cols: usize, coarse: bool) -> ModelState {
    let data = (0..rows * cols)
        .map(|_| {
            if coarse {
                f64::from(rng.random_range(-2i32..=2))
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    let layer = Layer::new(Matrix::from_vec(rows, cols, data).unwrap(), vec![0.0; cols], true).unwrap();
    ModelState::new(vec![layer], Activation::Relu).unwrap()
}

/// Random block-level mask over `shapes`, each block kept with probability `keep`.
pub fn random_mask(rng: &mut ChaCha8Rng, shapes: &[LayerShape], keep: f64) -> BlockMask {
    let bits = shapes
        .iter()
        .map(|s| (0..s.layout().num_blocks()).map(|_| rng.random_bool(keep)).collect())
        .collect();
    BlockMask::from_block_bits(shapes.to_vec(), bits).unwrap()
}

/// Random prunable shapes: 1-3 layers, each at most 64x64.
pub fn random_shapes(rng: &mut ChaCha8Rng) -> Vec<LayerShape> {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|k| LayerShape::new(format!("layer{k}"), rng.random_range(1..=64), rng.random_range(1..=64)))
        .collect()
}

pub fn random_masks(rng: &mut ChaCha8Rng, shapes: &[LayerShape], k: u32) -> BTreeMap<LanguageId, BlockMask> {
    (0..k)
        .map(|z| {
            let keep = rng.random_range(0.05..0.95);
            (LanguageId(z), random_mask(rng, shapes, keep))
        })
        .collect()
}

/// A small task suite and a model sized for it.
pub fn toy_setup(ratios: &[f64], hidden: &[usize], seed: u64) -> (Vec<LanguageTask>, ModelState) {
    let suite = TaskSuiteSpec {
        ratios: ratios.to_vec(),
        base_size: 400,
        eval_size: 120,
        input_dim: 12,
        num_classes: 5,
        seed,
        ..TaskSuiteSpec::default()
    };
    let tasks = make_tasks(&suite).unwrap();
    let spec = ModelSpec {
        input_dim: 12,
        hidden: hidden.to_vec(),
        output_dim: 5,
        ..ModelSpec::default()
    };
    let model = ModelState::init(&spec, &mut rng(seed)).unwrap();
    (tasks, model)
}

pub fn toy_train(total_steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

/// Bitwise equality of two floats (distinguishes -0.0 and 0.0).
pub fn same_bits(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}
