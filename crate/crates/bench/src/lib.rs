//! Fixtures shared by the kernel benchmarks.

use pathprune::{BlockMask, LanguageId, ModelSpec, ModelState, PathwayRegistry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model(input_dim: usize, width: usize, depth: usize, seed: u64) -> ModelState {
    let spec = ModelSpec {
        input_dim,
        hidden: vec![width; depth],
        ..ModelSpec::default()
    };
    ModelState::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid spec")
}

/// `k` random pathway masks over the prunable layers of `model`.
pub fn registry(model: &ModelState, k: u32, keep: f64, seed: u64) -> PathwayRegistry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = model.prunable_shapes();
    let masks = (0..k)
        .map(|z| {
            let bits = shapes
                .iter()
                .map(|s| {
                    let n = s.layout().num_blocks();
                    (0..n).map(|_| rng.random_bool(keep)).collect()
                })
                .collect();
            (LanguageId(z), BlockMask::from_block_bits(shapes.clone(), bits).expect("shapes"))
        })
        .collect();
    PathwayRegistry::new(masks).expect("non-empty")
}

/// A random input batch of `rows` examples.
pub fn batch(rows: usize, cols: usize, seed: u64) -> pathprune::Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    pathprune::Matrix::from_vec(rows, cols, data).expect("sizes match")
}
