mod common;

use common::{block_oracle, max_abs_diff, naive_conv, series_of};
use gres2net::nn::{Conv1d, ParamStore};
use gres2net::res2net::{Activation, Block, BlockConfig, Gating};
use gres2net::{GradTape, Shape, Tensor3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor3 {
    Tensor3::from_fn(shape, |_, _, _| rng.random_range(-1.5..1.5))
}

fn run_block(store: &ParamStore, block: &Block, x: &Tensor3, gating: Gating) -> Tensor3 {
    let mut tape = GradTape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = block.forward(&mut tape, &bound, xv, gating).unwrap();
    tape.value(y).clone()
}

fn check_block(groups: usize, width: usize, kernel: usize, activation: Activation, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = BlockConfig::new(3, 5, groups, width);
    cfg.kernel_size = kernel;
    cfg.gate_channels = 2;
    cfg.group_activation = activation;
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "b", cfg, &mut rng).unwrap();
    let x = random(Shape::new(2, 3, 7), &mut rng);
    for (gating, oracle_gates) in
        [(Gating::Ungated, None), (Gating::Gated, Some(None)), (Gating::Pinned(0.37), Some(Some(0.37)))]
    {
        let y = run_block(&store, &block, &x, gating);
        for b in 0..2 {
            let want = block_oracle(&store, &block, &series_of(&x, b), oracle_gates);
            let err = max_abs_diff(&series_of(&y, b), &want);
            assert!(err <= 1e-12, "s={groups} w={width} k={kernel} {gating:?}: {err:e}");
        }
    }
}

#[test]
fn blocks_match_the_scalar_oracle() {
    for groups in [2, 3, 4] {
        for width in [1, 2, 4] {
            for (kernel, act) in [(3, Activation::Relu), (1, Activation::Relu), (5, Activation::None)] {
                check_block(groups, width, kernel, act, (groups * 100 + width * 10 + kernel) as u64);
            }
        }
    }
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (cin, cout, k, t) in [(1, 1, 1, 1), (2, 3, 3, 5), (4, 2, 5, 3), (3, 3, 7, 2), (2, 2, 3, 1)] {
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", cin, cout, k, &mut rng);
        let x = random(Shape::new(2, cin, t), &mut rng);
        let mut tape = GradTape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = conv.forward(&mut tape, &bound, xv).unwrap();
        for b in 0..2 {
            let want = naive_conv(&series_of(&x, b), store.get(conv.weight), Some(store.get(conv.bias)));
            assert!(max_abs_diff(&series_of(tape.value(y), b), &want) <= 1e-12);
        }
    }
}

#[test]
fn pinned_zero_gate_severs_the_hierarchy() {
    // With g = 0 every y_i = K_i(x_i).
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = BlockConfig::new(2, 4, 4, 2);
    cfg.kernel_size = 1;
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "b", cfg, &mut rng).unwrap();
    let x = random(Shape::new(1, 2, 3), &mut rng);
    let want = block_oracle(&store, &block, &series_of(&x, 0), Some(Some(0.0)));
    let got = run_block(&store, &block, &x, Gating::Pinned(0.0));
    assert!(max_abs_diff(&series_of(&got, 0), &want) <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_one_is_bitwise_ungated(seed in any::<u64>(), groups in 2usize..6, width in 1usize..4, t in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", BlockConfig::new(2, 3, groups, width), &mut rng).unwrap();
        let x = random(Shape::new(2, 2, t), &mut rng);
        let plain = run_block(&store, &block, &x, Gating::Ungated);
        let pinned = run_block(&store, &block, &x, Gating::Pinned(1.0));
        prop_assert_eq!(plain.data(), pinned.data());
    }

    #[test]
    fn gates_are_bounded_by_one(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", BlockConfig::new(2, 3, 4, 2), &mut rng).unwrap();
        let x = random(Shape::new(1, 2, 5), &mut rng).map(|v| v * scale);
        let mut tape = GradTape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.leaf(x);
        let trace = block.forward_traced(&mut tape, &bound, xv, Gating::Gated).unwrap();
        prop_assert_eq!(trace.gates.len(), 2);
        for g in &trace.gates {
            prop_assert!(tape.value(*g).data().iter().all(|v| v.abs() <= 1.0));
        }
    }
}
