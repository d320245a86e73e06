//! Property tests for the algebraic invariants of the path layer.

use proptest::prelude::*;

use diffvar_core::girsanov::log_wick;
use diffvar_core::grid::TimeGrid;
use diffvar_core::shift::{Adaptedness, CameronMartinShift};
use diffvar_core::stream::{brownian_increments, RandomStream};

fn shift_strategy(n: usize, dim: usize) -> impl Strategy<Value = CameronMartinShift> {
    prop::collection::vec(-3.0f64..3.0, n * dim).prop_map(move |density| {
        CameronMartinShift::new(
            TimeGrid::new(n).unwrap(),
            dim,
            density,
            Adaptedness::Deterministic,
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn integration_is_linear(
        u in shift_strategy(16, 2),
        v in shift_strategy(16, 2),
        a in -4.0f64..4.0,
        b in -4.0f64..4.0,
    ) {
        let lhs = u.scaled(a).plus(&v.scaled(b)).unwrap().integral();
        let hu = u.integral();
        let hv = v.integral();
        for k in 0..=16 {
            for i in 0..2 {
                let expected = a * hu.node(k)[i] + b * hv.node(k)[i];
                let got = lhs.node(k)[i];
                let scale = expected.abs().max(1.0);
                prop_assert!((got - expected).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn norm_scales_quadratically(u in shift_strategy(12, 1), a in -4.0f64..4.0) {
        let base = u.norm_sq();
        let scaled = u.scaled(a).norm_sq();
        prop_assert!((scaled - a * a * base).abs() <= 1e-12 * (1.0 + a * a * base));
    }

    #[test]
    fn wick_reflection_identity(u in shift_strategy(12, 1), seed in 0u64..1000) {
        let grid = TimeGrid::new(12).unwrap();
        let driver = brownian_increments(RandomStream::new(seed, 0), grid, 1).unwrap();
        let total = log_wick(&u, &driver).unwrap() + log_wick(&u.scaled(-1.0), &driver).unwrap();
        let energy = u.norm_sq();
        prop_assert!((total + energy).abs() <= 1e-12 * (1.0 + energy));
    }

    #[test]
    fn increments_are_reproducible(seed in 0u64..500, id in 0u64..500) {
        let grid = TimeGrid::new(8).unwrap();
        let s = RandomStream::new(seed, id);
        let a = brownian_increments(s, grid, 2).unwrap();
        let b = brownian_increments(s, grid, 2).unwrap();
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
