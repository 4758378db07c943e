mod support;

use bittrace_core::oracle::{matched_bits, shadow_eval};
use bittrace_core::precision::{self, Tracked};
use bittrace_core::{Feed, Graph, MatmulStrategy, PTensor, Precision, UnaryFn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use support::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn chains_never_overclaim(seed in any::<u64>(), len in 1usize..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let excess = chain_excess(&mut rng, len);
        prop_assert!(excess <= 1, "excess {excess}");
    }

    #[test]
    fn matmuls_never_overclaim(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = random_matmul(&mut rng, 16);
        prop_assert!(matmul_excess(&case, MatmulStrategy::Rigorous) <= 1);
        prop_assert!(matmul_excess(&case, MatmulStrategy::TropicalBound) <= 1);
    }

    #[test]
    fn estimates_are_monotone_in_input_bits(
        a in -4.0f64..4.0, b in -4.0f64..4.0, ea in 0u8..=24, eb in 0u8..=24, drop in 0u8..=24, op in 0usize..5,
    ) {
        let (a, b) = (S.round(a), S.round(b));
        let lo = ea.saturating_sub(drop);
        let run = |ea: u8| {
            let x = Tracked::new(a, ea);
            let y = Tracked::new(b, eb);
            match op {
                0 => precision::add(S, x, y),
                1 => precision::sub(S, x, y),
                2 => precision::mul(S, x, y),
                3 => precision::div(S, x, y),
                _ => precision::unary(S, UnaryFn::Tanh, x),
            }
        };
        let (hi_r, lo_r) = (run(ea), run(lo));
        prop_assert_eq!(hi_r.value.to_bits(), lo_r.value.to_bits());
        prop_assert!(lo_r.bits <= hi_r.bits);
    }

    #[test]
    fn exact_operands_stay_exact_when_result_is_representable(a in -1000i32..1000, b in -1000i32..1000) {
        let x = Tracked::exact(f64::from(a), S);
        let y = Tracked::exact(f64::from(b), S);
        prop_assert_eq!(precision::add(S, x, y).bits, 24);
        prop_assert_eq!(precision::sub(S, x, y).bits, 24);
        prop_assert_eq!(precision::mul(S, x, y).bits, 24);
    }

    #[test]
    fn graph_shadow_runs_are_sound(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (3, 4, 2);
        let mut g = Graph::new(S);
        let x = g.input("x");
        let w = g.parameter("w");
        let t = g.input("t");
        let h = g.matmul(x, w, MatmulStrategy::Rigorous);
        let h = g.unary(UnaryFn::Tanh, h);
        let loss = g.mse_loss(h, t);
        let mut lit = |shape: &[usize]| {
            let len = shape.iter().product();
            let v = (0..len).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            PTensor::exact_literal(v, shape, S).unwrap()
        };
        let feed = Feed::from([(x, lit(&[m, k])), (w, lit(&[k, n])), (t, lit(&[m, n]))]);
        let run = shadow_eval(&g, &feed, Some(loss)).unwrap();
        prop_assert!(run.worst_excess().unwrap() <= 1);
    }
}

#[test]
fn representation_error_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, x) = inexact_input(&mut rng, 0.1);
    assert_eq!(t.value, f64::from(0.1f32));
    assert!(t.bits <= matched_bits(t.value, x, S));
    let (t, _) = inexact_input(&mut rng, 0.5);
    assert_eq!(t.bits, 24);
}

#[test]
fn double_precision_is_wider() {
    assert_eq!(Precision::Double.max_bits(), 53);
    let one_third = precision::div(
        Precision::Double,
        Tracked::exact(1.0, Precision::Double),
        Tracked::exact(3.0, Precision::Double),
    );
    assert!(one_third.bits >= 52);
}
