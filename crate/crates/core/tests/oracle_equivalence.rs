//! Property tests: every fast kernel against its brute-force oracle.

mod common;

use std::collections::BTreeMap;

use common::*;
use pathprune::masking::{prune_to_sparsity, read_mask, score_blocks, similarity, union_ratio, write_mask};
use pathprune::net::{backward, forward, forward_masked, group_lasso_penalty, softmax_cross_entropy, Activation};
use pathprune::pathways::residual_mask;
use pathprune::{EventKind, LanguageId, Matrix, ModelSpec, ModelState, PathwayRegistry, Reduction, SparsitySchedule};
use pathprune_oracles as oracle;
use proptest::prelude::*;
use rand::Rng;

fn small_model(seed: u64, activation: Activation) -> ModelState {
    let mut r = rng(seed);
    let spec = ModelSpec {
        input_dim: r.random_range(2..=9),
        hidden: (0..r.random_range(1..=2)).map(|_| r.random_range(3..=17)).collect(),
        output_dim: r.random_range(2..=5),
        activation,
        prune_output: r.random_bool(0.5),
    };
    ModelState::init(&spec, &mut r).unwrap()
}

fn batch(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

fn activation(i: u8) -> Activation {
    match i % 3 {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        _ => Activation::Identity,
    }
}

fn close(a: &Matrix, b: &[Vec<f64>]) -> bool {
    b.iter()
        .enumerate()
        .all(|(r, row)| row.iter().enumerate().all(|(c, v)| (a[(r, c)] - v).abs() <= 1e-10 * (1.0 + v.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prune_matches_sort_and_cut(seed in any::<u64>(), target in 0.0f64..0.95, with_support in any::<bool>()) {
        let mut r = rng(seed);
        let (rows, cols) = (r.random_range(1..=40), r.random_range(1..=40));
        let model = random_layer(&mut r, rows, cols, seed % 3 == 0);
        let support = with_support.then(|| random_mask(&mut r, &model.prunable_shapes(), 0.6));
        let mask = prune_to_sparsity(&score_blocks(&model, support.as_ref()).unwrap(), target).unwrap();
        let support_e = support.as_ref().map(oracle::elements_of);
        prop_assert_eq!(oracle::elements_of(&mask), oracle::naive_prune_model(&model, target, support_e.as_ref()));
        prop_assert!(mask.at_sparsity(target));
    }

    #[test]
    fn forward_matches_per_example_loop(seed in any::<u64>(), act in any::<u8>(), keep in 0.0f64..1.0) {
        let model = small_model(seed, activation(act));
        let x = batch(seed ^ 1, 5, model.input_dim());
        let dense = forward(&model, &x).unwrap();
        prop_assert!(close(dense.logits(), &oracle::forward(&model, &x, None)));
        let mask = random_mask(&mut rng(seed ^ 2), &model.prunable_shapes(), keep);
        let masked = forward_masked(&model, &mask, &x).unwrap();
        prop_assert!(close(masked.logits(), &oracle::forward(&model, &x, Some(&oracle::elements_of(&mask)))));
    }

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>(), act in 0u8..3) {
        // Relu kinks make finite differences unreliable; smooth activations only.
        let act = if act == 1 { Activation::Tanh } else { activation(act) };
        let model = small_model(seed, act);
        let x = batch(seed ^ 3, 4, model.input_dim());
        let labels: Vec<usize> = (0..4).map(|i| (seed as usize + i) % model.output_dim()).collect();
        let pass = forward(&model, &x).unwrap();
        let (_, dl) = softmax_cross_entropy(pass.logits(), &labels, Reduction::Mean).unwrap();
        let g = backward(&model, &pass, &dl).unwrap();
        let analytic: oracle::LayerGrads =
            g.layers.iter().map(|l| (l.weight.as_slice().to_vec(), l.bias.clone())).collect();
        let fd = oracle::fd_gradient(&model, &x, &labels, 1e-5);
        prop_assert!(oracle::max_relative_error(&fd.value, &analytic, 1e-6) < 1e-4);
    }

    #[test]
    fn duplicated_examples_scale_the_gradient(seed in any::<u64>()) {
        let model = small_model(seed, Activation::Tanh);
        let one = batch(seed ^ 4, 1, model.input_dim());
        let mut twice_data = one.as_slice().to_vec();
        twice_data.extend_from_slice(one.as_slice());
        let twice = Matrix::from_vec(2, model.input_dim(), twice_data).unwrap();
        let grad = |x: &Matrix, labels: &[usize], red| {
            let pass = forward(&model, x).unwrap();
            let (_, dl) = softmax_cross_entropy(pass.logits(), labels, red).unwrap();
            backward(&model, &pass, &dl).unwrap()
        };
        let g1 = grad(&one, &[0], Reduction::Sum);
        let sum2 = grad(&twice, &[0, 0], Reduction::Sum);
        let mean2 = grad(&twice, &[0, 0], Reduction::Mean);
        for ((a, s), m) in g1.layers.iter().zip(&sum2.layers).zip(&mean2.layers) {
            for ((x, y), z) in a.weight.as_slice().iter().zip(s.weight.as_slice()).zip(m.weight.as_slice()) {
                prop_assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                prop_assert!((x - z).abs() <= 1e-12 * (1.0 + z.abs()));
            }
        }
    }

    #[test]
    fn similarity_is_jaccard(seed in any::<u64>(), ka in 0.0f64..1.0, kb in 0.0f64..1.0) {
        let mut r = rng(seed);
        let shapes = random_shapes(&mut r);
        let (a, b) = (random_mask(&mut r, &shapes, ka), random_mask(&mut r, &shapes, kb));
        let expected = oracle::jaccard(&oracle::elements_of(&a), &oracle::elements_of(&b));
        prop_assert!((similarity(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn group_lasso_matches_block_enumeration(seed in any::<u64>(), coeff in 0.0f64..1.0) {
        let model = small_model(seed, Activation::Relu);
        let (value, _) = group_lasso_penalty(&model, coeff).unwrap();
        let expected = oracle::group_lasso(&model, coeff);
        prop_assert!((value - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }

    #[test]
    fn mask_files_round_trip(seed in any::<u64>(), keep in 0.0f64..1.0) {
        let mut r = rng(seed);
        let shapes = random_shapes(&mut r);
        let mask = random_mask(&mut r, &shapes, keep);
        let mut bytes = Vec::new();
        write_mask(&mask, &mut bytes).unwrap();
        prop_assert_eq!(read_mask(bytes.as_slice()).unwrap(), mask);
    }

    #[test]
    fn union_ratio_and_residual_match_oracle(seed in any::<u64>(), k in 2u32..5) {
        let mut r = rng(seed);
        let shapes = random_shapes(&mut r);
        let masks = random_masks(&mut r, &shapes, k);
        let refs: Vec<_> = masks.values().collect();
        let elems: BTreeMap<LanguageId, oracle::ElementMask> =
            masks.iter().map(|(z, m)| (*z, oracle::elements_of(m))).collect();
        let all: Vec<_> = elems.values().cloned().collect();
        let total = refs[0].total_elements();
        prop_assert!((union_ratio(&refs, total).unwrap() - oracle::union_ratio(&all)).abs() < 1e-12);
        let reg = PathwayRegistry::new(masks.clone()).unwrap();
        for z in reg.languages() {
            prop_assert_eq!(oracle::elements_of(&residual_mask(&reg, z).unwrap()), oracle::residual(&elems, z));
        }
    }

    #[test]
    fn schedule_is_monotone_and_reaches_target(
        total in 200u64..20_000,
        target in 0.05f64..0.95,
        adaptive in any::<bool>(),
        start_frac in 0.0f64..1.0,
    ) {
        let mut s = SparsitySchedule::new(total, target).adaptive(adaptive).starting_at(target * start_frac);
        s.adapt_interval = (s.prune_interval / 4).max(1);
        prop_assume!(s.validate().is_ok());
        let events = s.events().unwrap();
        let prunes: Vec<_> = events.iter().filter(|e| e.kind == EventKind::Prune).collect();
        prop_assert!(prunes.windows(2).all(|w| w[0].sparsity <= w[1].sparsity && w[0].step < w[1].step));
        if let Some(last) = prunes.last() {
            prop_assert_eq!(last.sparsity, target);
        }
        prop_assert!(events.iter().all(|e| e.step <= total));
        for a in events.iter().filter(|e| e.kind == EventKind::Adapt) {
            prop_assert!(!prunes.iter().any(|p| p.step == a.step));
        }
        prop_assert!(adaptive || events.iter().all(|e| e.kind == EventKind::Prune));
    }
}
