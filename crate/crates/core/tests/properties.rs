//! Property tests for the numeric invariants that hold for arbitrary inputs.

use mxplan_core::cost::{GemmShape, HardwareProfile};
use mxplan_core::kernel_plan::{schedule_greedy, simulate_execution, TileTask};
use mxplan_core::matrix::Matrix;
use mxplan_core::moe::{collect_activation_stats, route_topk};
use mxplan_core::quant::{
    dequantize, hadamard_transform, quantize_minmax, QuantAxis, QuantScheme,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // |x - dequant(quant(x))| <= step/2 per element for asymmetric min-max.
    #[test]
    fn minmax_error_within_half_step(
        values in proptest::collection::vec(-100.0f64..100.0, 8..64),
        bits in prop_oneof![Just(2u32), Just(3), Just(4), Just(8)],
    ) {
        let x = Matrix::new(1, values.len(), values).unwrap();
        let scheme = QuantScheme::new(bits, 16, -1, -1, false).unwrap();
        let q = quantize_minmax(&x, &scheme, QuantAxis::Weight).unwrap();
        let back = dequantize(&q);
        let step = q.scales[0];
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= step / 2.0 + 1e-12);
        }
    }

    // Routing conserves tokens: counts sum to tokens * top_k.
    #[test]
    fn routing_conserves_tokens(
        rows in 1usize..32,
        experts in 2usize..12,
        top_k in 1usize..4,
        seed in 0u64..1000,
    ) {
        let top_k = top_k.min(experts);
        let logits = mxplan_core::moe::gen_tokens(experts, rows, seed);
        let trace = route_topk(&logits, top_k).unwrap();
        let stats = collect_activation_stats(&trace, experts).unwrap();
        prop_assert_eq!(
            stats.tokens_per_expert.iter().sum::<u64>(),
            (rows * top_k) as u64
        );
        for pairs in &trace.tokens {
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    // Orthonormal rotation preserves linear layer outputs.
    #[test]
    fn hadamard_preserves_products(seed in 0u64..500, rows in 1usize..6) {
        let x = mxplan_core::moe::gen_tokens(16, rows, seed);
        let w = mxplan_core::moe::gen_tokens(16, 3, seed ^ 0xbeef);
        let base = x.matmul_transposed(&w).unwrap();
        let xq = hadamard_transform(&x, 8, seed).unwrap();
        let wq = hadamard_transform(&w, 8, seed).unwrap();
        let rot = xq.matmul_transposed(&wq).unwrap();
        let rel = rot.sub(&base).unwrap().frobenius_norm() / base.frobenius_norm().max(1e-12);
        prop_assert!(rel < 1e-6);
    }

    // Any LPT schedule lands inside the classic list-scheduling bounds.
    #[test]
    fn greedy_schedule_within_bounds(
        costs in proptest::collection::vec(1e-6f64..1.0, 1..80),
        sm_count in 1usize..16,
    ) {
        let tasks: Vec<TileTask> = costs
            .iter()
            .enumerate()
            .map(|(i, &c)| TileTask {
                owner: (0, 0),
                scheme: QuantScheme::identity(),
                cost: c,
                tile_id: i,
            })
            .collect();
        let schedule = schedule_greedy(&tasks, sm_count).unwrap();
        let sim = simulate_execution(&schedule, &tasks);
        let total: f64 = costs.iter().sum();
        let max = costs.iter().cloned().fold(0.0, f64::max);
        let lower = (total / sm_count as f64).max(max);
        prop_assert!(sim.makespan >= lower - 1e-12);
        prop_assert!(sim.makespan <= total / sm_count as f64 + max + 1e-12);
    }

    // Lower-bit weights never increase the memory-bound roofline term.
    #[test]
    fn lower_bits_never_slower_when_memory_bound(m in 1usize..8) {
        let hw = HardwareProfile::default_rtx4090();
        let shape = GemmShape::new(m, 2048, 2048);
        let w4 = QuantScheme::parse("w4a16_g-1_asym").unwrap();
        let w8 = QuantScheme::parse("w8a16_g-1_asym").unwrap();
        let t4 = mxplan_core::cost::roofline_time(&shape, &w4, &hw).unwrap();
        let t8 = mxplan_core::cost::roofline_time(&shape, &w8, &hw).unwrap();
        prop_assert!(t4 <= t8 + 1e-15);
    }
}
