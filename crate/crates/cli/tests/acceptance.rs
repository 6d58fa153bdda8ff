//! Acceptance suite: every shipped guarantee as one test per criterion.
//!
//! Run with `cargo test -p mxplan-cli --test acceptance -- --nocapture` to
//! see one pass line per criterion.

use mxplan_core::alloc::{
    brute_force_oracle, coarsen_to_expert_granularity, objective_eval, solve, uniform_plan,
    AllocationPlan, AllocationProblem, Granularity,
};
use mxplan_core::cost::{
    find_crossover, tile_count, GemmShape, HardwareProfile, KernelMode, TileCostTable,
};
use mxplan_core::kernel_plan::{schedule_greedy, schedule_optimal_dp, simulate_execution, TileTask};
use mxplan_core::matrix::Matrix;
use mxplan_core::moe::{gen_tokens, generate_model, GeneratorConfig, MoEBlockSpec, NUM_LINEAR};
use mxplan_core::pipeline::{self, AllocationSettings, CalibrationSettings};
use mxplan_core::quant::{
    dequantize, gptq_quantize, hadamard_transform, proxy_loss, quantize_minmax, QuantAxis,
    QuantScheme, DEFAULT_DAMPING,
};
use mxplan_core::sensitivity::{CalibMeta, SensitivityTable};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

fn pass(criterion: usize, detail: &str) {
    println!("[acceptance] criterion {criterion}: PASS — {detail}");
}

fn hw() -> HardwareProfile {
    HardwareProfile::default_rtx4090()
}

/// Random allocation instance with E experts and 3 schemes (identity last).
fn random_instance(e_count: usize, seed: u64) -> AllocationProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = [
        "w2a16_g128_asym",
        "w4a16_g-1_asym",
        "w8a8_g-1_sym",
        "w4a4_g-1_sym",
        "w4a4_g128_sym",
    ];
    let first = pool[rng.random_range(0..pool.len())];
    let second = loop {
        let s = pool[rng.random_range(0..pool.len())];
        if s != first {
            break s;
        }
    };
    let schemes = vec![
        QuantScheme::parse(first).unwrap(),
        QuantScheme::parse(second).unwrap(),
        QuantScheme::identity(),
    ];
    let profile = hw();
    let costs = TileCostTable::build(&schemes, &profile, KernelMode::Specialized).unwrap();
    let delta: Vec<Vec<Vec<f64>>> = (0..e_count)
        .map(|_| {
            (0..NUM_LINEAR)
                .map(|_| {
                    let base: f64 = rng.random::<f64>() + 0.05;
                    let mut row: Vec<f64> = (0..2)
                        .map(|_| base * (0.1 + 4.0 * rng.random::<f64>()))
                        .collect();
                    row.push(0.0);
                    row
                })
                .collect()
        })
        .collect();
    let shapes: Vec<[GemmShape; NUM_LINEAR]> = (0..e_count)
        .map(|_| {
            let m = rng.random_range(0..160usize);
            [
                GemmShape::new(m, 512, 256),
                GemmShape::new(m, 512, 256),
                GemmShape::new(m, 256, 512),
            ]
        })
        .collect();
    let params: f64 = shapes
        .iter()
        .flat_map(|b| b.iter())
        .map(|s| s.weight_elements() as f64)
        .sum();
    // cheapest achievable memory given the actual scheme pool
    let min_b: f64 = shapes
        .iter()
        .flat_map(|b| b.iter())
        .map(|s| {
            schemes
                .iter()
                .map(|sch| {
                    s.weight_elements() as f64 * sch.storage_bits_per_weight(s.k).unwrap() / 8.0
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    let max_b = params * 2.0;
    let frac: f64 = rng.random();
    let r = [0.0, 0.25, 0.5, 0.75, 1.0][rng.random_range(0..5)];
    AllocationProblem {
        sensitivity: SensitivityTable {
            schemes,
            delta,
            meta: CalibMeta { samples: 1, seed },
        },
        shapes,
        costs,
        budget_bytes: min_b + (0.02 + 0.98 * frac) * (max_b - min_b),
        r,
        hw: profile,
        granularity: Granularity::Linear,
        exclude_experts: BTreeSet::new(),
    }
}

/// Calibrated toy problem used by the budget sweep and mixed-vs-uniform
/// criteria. Returns the problem pieces so budgets and r can vary.
fn calibrated_toy(
    e_count: usize,
    seed: u64,
) -> (SensitivityTable, pipeline::StatsFile, f64) {
    let spec = MoEBlockSpec::new(e_count, 2, 128, 256).unwrap();
    let model = generate_model(&GeneratorConfig::heterogeneous(spec, seed)).unwrap();
    let settings = CalibrationSettings {
        samples: 3,
        seq_len: 24,
        seed: seed + 1,
    };
    let (table, stats) =
        pipeline::calibrate(&model, &QuantScheme::default_set(), &settings).unwrap();
    let spread = stats.stats().frequency_spread();
    (table, stats, spread)
}

fn build(
    table: &SensitivityTable,
    stats: &pipeline::StatsFile,
    budget_bits: f64,
    r: f64,
    granularity: Granularity,
) -> AllocationProblem {
    let settings = AllocationSettings {
        budget_bits,
        r,
        granularity,
        kernel_mode: KernelMode::Specialized,
        exclude_experts: BTreeSet::new(),
    };
    pipeline::build_problem(table.clone(), stats, hw(), &settings).unwrap()
}

#[test]
fn c01_roofline_crossovers() {
    let start = Instant::now();
    let profile = hw();
    let w4a16 = QuantScheme::parse("w4a16_g-1_asym").unwrap();
    let w8a8 = QuantScheme::parse("w8a8_g-1_sym").unwrap();
    let w2a16 = QuantScheme::parse("w2a16_g128_asym").unwrap();
    let w4a4 = QuantScheme::parse("w4a4_g-1_sym").unwrap();
    let c_high = find_crossover(&w4a16, &w8a8, 4096, 4096, &profile, 4096)
        .unwrap()
        .expect("w4a16/w8a8 crossover must exist");
    let c_low = find_crossover(&w2a16, &w4a4, 4096, 4096, &profile, 4096)
        .unwrap()
        .expect("w2a16/w4a4 crossover must exist");
    assert!(
        (62..=104).contains(&c_high),
        "w4a16/w8a8 crossover {c_high} outside [62, 104]"
    );
    assert!(
        (31..=53).contains(&c_low),
        "w2a16/w4a4 crossover {c_low} outside [31, 53]"
    );
    assert!(c_low < c_high, "ordering violated: {c_low} !< {c_high}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, limit 1 s");
    pass(1, &format!("crossovers {c_low} < {c_high} in {elapsed:?}"));
}

#[test]
fn c02_allocator_exactness_vs_oracle() {
    let start = Instant::now();
    let mut checked = 0;
    for seed in 0..200u64 {
        let e_count = 1 + (seed % 2) as usize; // E*N in {3, 6}
        let problem = random_instance(e_count, 10_000 + seed);
        let fast = solve(&problem).unwrap();
        let exact = brute_force_oracle(&problem).unwrap();
        let rel = (fast.objective - exact.objective).abs() / exact.objective.max(1e-30);
        assert!(
            rel <= 1e-12,
            "seed {seed}: solve {:.17e} vs oracle {:.17e} (rel {rel:.3e})",
            fast.objective,
            exact.objective
        );
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, limit 60 s");
    pass(2, &format!("{checked} instances exact to 1e-12 in {elapsed:?}"));
}

#[test]
fn c03_extremes_are_per_block_argmins() {
    for seed in 0..50u64 {
        let e_count = 1 + (seed % 2) as usize;
        let mut problem = AllocationProblem {
            budget_bytes: f64::INFINITY,
            ..random_instance(e_count, 20_000 + seed)
        };
        let schemes = problem.schemes().to_vec();

        problem.r = 1.0;
        let plan = solve(&problem).unwrap();
        for i in 0..e_count {
            for j in 0..NUM_LINEAR {
                let want = (0..schemes.len())
                    .min_by(|&a, &b| {
                        let ka = (problem.sensitivity.delta[i][j][a], schemes[a].w_bits, a);
                        let kb = (problem.sensitivity.delta[i][j][b], schemes[b].w_bits, b);
                        ka.partial_cmp(&kb).unwrap()
                    })
                    .unwrap();
                assert_eq!(
                    plan.scheme_of[i][j], want,
                    "r=1 seed {seed}: block ({i},{j}) not argmin-delta"
                );
            }
        }

        problem.r = 0.0;
        let plan = solve(&problem).unwrap();
        for i in 0..e_count {
            for j in 0..NUM_LINEAR {
                let shape = &problem.shapes[i][j];
                let time_of = |k: usize| -> f64 {
                    problem
                        .costs
                        .candidates(&schemes[k])
                        .unwrap()
                        .iter()
                        .map(|cfg| {
                            tile_count(shape, cfg) as f64
                                * problem.costs.task_cost(&schemes[k], cfg).unwrap()
                        })
                        .fold(f64::INFINITY, f64::min)
                };
                let want = (0..schemes.len())
                    .min_by(|&a, &b| {
                        let ka = (time_of(a), problem.sensitivity.delta[i][j][a], a);
                        let kb = (time_of(b), problem.sensitivity.delta[i][j][b], b);
                        ka.partial_cmp(&kb).unwrap()
                    })
                    .unwrap();
                assert_eq!(
                    plan.scheme_of[i][j], want,
                    "r=0 seed {seed}: block ({i},{j}) not argmin-time"
                );
            }
        }
    }
    pass(3, "r=1 / r=0 plans equal per-block argmins on 50 instances");
}

#[test]
fn c04_budget_monotonicity_feasibility_and_exit_code() {
    let (table, stats, _) = calibrated_toy(4, 5);
    let budgets = [2.5f64, 3.0, 4.0, 5.0, 6.0, 8.0, 12.0, 16.0];
    let mut objectives = Vec::new();
    for &bits in &budgets {
        let problem = build(&table, &stats, bits, 0.5, Granularity::Linear);
        let plan = solve(&problem).unwrap();
        assert!(
            plan.memory_used <= problem.budget_bytes,
            "plan exceeds budget at {bits} bits"
        );
        let used = mxplan_core::alloc::memory_usage(&plan, &problem).unwrap();
        assert!((used - plan.memory_used).abs() <= 1e-6 * used.max(1.0));
        objectives.push(plan.objective);
    }
    for w in objectives.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-12 * w[0].abs().max(1e-30),
            "objective increased as budget grew: {objectives:?}"
        );
    }

    // Infeasible budget must exit with code 2 through the CLI.
    let dir = std::env::temp_dir().join(format!("mxplan_acc4_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    let sens_path = dir.join("sensitivity.json");
    let stats_path = dir.join("stats.json");
    fs::write(&sens_path, serde_json::to_string(&table).unwrap()).unwrap();
    fs::write(&stats_path, serde_json::to_string(&stats).unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mxplan"))
        .args([
            "allocate",
            "--sens",
            sens_path.to_str().unwrap(),
            "--stats",
            stats_path.to_str().unwrap(),
            "--budget-bits",
            "1.0",
            "--out",
            dir.join("plan.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "infeasible budget must exit 2, stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    fs::remove_dir_all(&dir).unwrap();
    let sweep: Vec<String> = objectives.iter().map(|o| format!("{o:.3e}")).collect();
    pass(
        4,
        &format!("8-point sweep non-increasing {sweep:?}, infeasible exits 2"),
    );
}

#[test]
fn c05_greedy_within_lpt_bound_of_optimal() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for trial in 0..500 {
        let p = rng.random_range(2..=4usize);
        let n = rng.random_range(1..=12usize);
        let costs: Vec<f64> = (0..n)
            .map(|_| rng.random_range(1..=2000) as f64 * 1e-6)
            .collect();
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
        let greedy = schedule_greedy(&tasks, p).unwrap();
        let opt = schedule_optimal_dp(&tasks, p).unwrap();
        let bound = 4.0 / 3.0 - 1.0 / (3.0 * p as f64);
        let ratio = greedy.makespan / opt.makespan;
        assert!(
            ratio <= bound + 1e-12,
            "trial {trial}: ratio {ratio} exceeds bound {bound} (P={p}, costs {costs:?})"
        );
        worst = worst.max(ratio / bound);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "took {elapsed:?}, limit 2 min");
    pass(
        5,
        &format!("500 instances, worst ratio/bound {worst:.4}, in {elapsed:?}"),
    );
}

#[test]
fn c06_serial_over_p_approximation() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for trial in 0..200 {
        let p = [2usize, 4, 8, 16, 32][rng.random_range(0..5)];
        let n = 32 * p + rng.random_range(0..32 * p);
        let costs: Vec<f64> = (0..n)
            .map(|_| rng.random::<f64>() * 9e-6 + 1e-6)
            .collect();
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
        let schedule = schedule_greedy(&tasks, p).unwrap();
        let sim = simulate_execution(&schedule, &tasks);
        let total: f64 = costs.iter().sum();
        let avg = total / p as f64;
        let max = costs.iter().cloned().fold(0.0, f64::max);
        let rel = (sim.makespan - avg).abs() / avg;
        let allowed = p as f64 * max / total;
        assert!(
            rel <= allowed + 1e-12,
            "trial {trial}: gap {rel:.3e} exceeds bound {allowed:.3e} (P={p}, tiles={n})"
        );
    }
    pass(6, "200/200 trials within P*max_c/sum_c of serial/P");
}

#[test]
fn c07_quantization_correctness() {
    // grid round-trip is exact
    let x = Matrix::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let scheme = QuantScheme::new(2, 16, -1, -1, false).unwrap();
    let q = quantize_minmax(&x, &scheme, QuantAxis::Weight).unwrap();
    assert_eq!(dequantize(&q), x, "on-grid values must round-trip exactly");

    // storage widths match the published group-128 asymmetric configs
    let w3 = QuantScheme::new(3, 16, 128, -1, false).unwrap();
    let w2 = QuantScheme::new(2, 16, 128, -1, false).unwrap();
    assert_eq!(w3.storage_bits_per_weight(4096).unwrap(), 3.25);
    assert_eq!(w2.storage_bits_per_weight(4096).unwrap(), 2.25);

    // rotation preserves the layer output to 1e-4 relative
    let x = gen_tokens(128, 8, 1);
    let w = gen_tokens(128, 16, 2);
    let base = x.matmul_transposed(&w).unwrap();
    let xq = hadamard_transform(&x, 64, 3).unwrap();
    let wq = hadamard_transform(&w, 64, 3).unwrap();
    let rot = xq.matmul_transposed(&wq).unwrap();
    let rel = rot.sub(&base).unwrap().frobenius_norm() / base.frobenius_norm();
    assert!(rel <= 1e-4, "hadamard output error {rel}");

    // error feedback beats round-to-nearest on >= 95/100 seeds
    let scheme = QuantScheme::new(3, 16, -1, -1, false).unwrap();
    let mut wins = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            use rand_distr::{Distribution, StandardNormal};
            (0..n).map(|_| StandardNormal.sample(rng)).collect()
        };
        let w = Matrix::new(16, 16, normal(&mut rng, 256)).unwrap();
        let calib = Matrix::new(64, 16, normal(&mut rng, 1024)).unwrap();
        let g = gptq_quantize(&w, &calib, &scheme, DEFAULT_DAMPING).unwrap();
        let rtn = quantize_minmax(&w, &scheme, QuantAxis::Weight).unwrap();
        let loss_g = proxy_loss(&w, &dequantize(&g.quantized), &calib).unwrap();
        let loss_r = proxy_loss(&w, &dequantize(&rtn), &calib).unwrap();
        if loss_g <= loss_r {
            wins += 1;
        }
    }
    assert!(wins >= 95, "gptq won only {wins}/100 seeds");
    pass(
        7,
        &format!("round-trip exact, 3.25/2.25 bits exact, rotation {rel:.1e}, gptq {wins}/100"),
    );
}

#[test]
fn c08_linear_granularity_beats_expert() {
    // constructed instance with intra-expert sensitivity divergence
    let mut problem = random_instance(1, 999);
    problem.r = 0.6;
    let elems = 512.0 * 256.0;
    problem.budget_bytes = (16.0 + 2.25 + 2.25) * elems / 8.0 + 1.0;
    problem.sensitivity.delta[0] = vec![
        vec![0.001, 0.5, 0.0],
        vec![0.001, 0.5, 0.0],
        vec![50.0, 25.0, 0.0],
    ];
    problem.sensitivity.schemes = vec![
        QuantScheme::parse("w2a16_g128_asym").unwrap(),
        QuantScheme::parse("w4a4_g-1_sym").unwrap(),
        QuantScheme::identity(),
    ];
    problem.costs =
        TileCostTable::build(&problem.sensitivity.schemes, &problem.hw, KernelMode::Specialized)
            .unwrap();
    let linear = brute_force_oracle(&problem).unwrap();
    let expert = brute_force_oracle(&coarsen_to_expert_granularity(&problem)).unwrap();
    assert!(
        linear.objective < expert.objective,
        "constructed instance: linear {} !< expert {}",
        linear.objective,
        expert.objective
    );

    // linear <= expert on random instances
    for seed in 0..25u64 {
        let p = random_instance(1 + (seed % 2) as usize, 30_000 + seed);
        let lin = brute_force_oracle(&p).unwrap();
        let exp = brute_force_oracle(&coarsen_to_expert_granularity(&p)).unwrap();
        assert!(
            lin.objective <= exp.objective + 1e-12 * exp.objective.abs(),
            "seed {seed}: linear {} > expert {}",
            lin.objective,
            exp.objective
        );
    }
    pass(
        8,
        &format!(
            "constructed: linear {:.3e} < expert {:.3e}; 25 random instances linear <= expert",
            linear.objective, expert.objective
        ),
    );
}

#[test]
fn c09_mixed_beats_uniform_and_r_sweep() {
    let (table, stats, spread) = calibrated_toy(8, 42);
    assert!(
        spread >= 10.0,
        "synthetic model must spread activation frequencies >= 10x, got {spread}"
    );
    let mut t_by_r = Vec::new();
    for &r in &[0.25f64, 0.5, 0.75] {
        let problem = build(&table, &stats, 6.0, r, Granularity::Linear);
        let mixed = solve(&problem).unwrap();
        let mut best_uniform: Option<(usize, AllocationPlan)> = None;
        for k in 0..problem.schemes().len() {
            let plan = uniform_plan(&problem, k).unwrap();
            if plan.memory_used > problem.budget_bytes {
                continue;
            }
            if best_uniform
                .as_ref()
                .is_none_or(|(_, b)| plan.objective < b.objective)
            {
                best_uniform = Some((k, plan));
            }
        }
        let (k, best) = best_uniform.expect("some uniform plan fits the budget");
        assert!(
            mixed.objective <= best.objective + 1e-12 * best.objective.abs(),
            "r={r}: mixed {:.6e} worse than uniform scheme {k} at {:.6e}",
            mixed.objective,
            best.objective
        );
        // consistency between the plan fields and a fresh evaluation
        let (_, _, obj) = objective_eval(&mixed, &problem).unwrap();
        assert!((obj - mixed.objective).abs() <= 1e-12 * obj.max(1e-30));
        t_by_r.push((r, mixed.predicted_t));
    }
    // Fig-7 direction: prioritizing speed (lower r) never slows the plan
    for w in t_by_r.windows(2) {
        let (r_low, t_low) = w[0];
        let (r_high, t_high) = w[1];
        assert!(
            t_low <= t_high + 1e-12 * t_high.max(1e-30),
            "predicted T should be non-increasing as r decreases: T({r_low})={t_low:.3e} > T({r_high})={t_high:.3e}"
        );
    }
    pass(
        9,
        &format!(
            "spread {spread:.1}x; mixed <= best uniform at r in {{0.25,0.5,0.75}}; T sweep {:?}",
            t_by_r
                .iter()
                .map(|(r, t)| format!("r={r}:{t:.2e}"))
                .collect::<Vec<_>>()
        ),
    );
}

#[test]
fn c10_pipeline_determinism() {
    let base: PathBuf =
        std::env::temp_dir().join(format!("mxplan_acc10_{}", std::process::id()));
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base).unwrap();
    let manifest = serde_json::json!({
        "seed": 17,
        "model": {
            "num_experts": 4,
            "top_k": 2,
            "hidden": 128,
            "intermediate": 256,
            "heterogeneous": true
        },
        "calibration": { "samples": 2, "seq_len": 16 },
        "schemes": [
            "w2a16_g128_asym",
            "w4a16_g-1_asym",
            "w8a8_g-1_sym",
            "w4a4_g-1_sym",
            "w4a4_g128_sym",
            "w16a16_g-1_sym"
        ],
        "r": 0.75,
        "budget_bits": 6.0,
        "granularity": "linear",
        "profile": null
    });
    let manifest_path = base.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    for tag in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_mxplan"))
            .args([
                "run",
                "--manifest",
                manifest_path.to_str().unwrap(),
                "--out",
                base.join(tag).to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "pipeline run failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut compared = 0;
    for name in [
        "model/manifest.json",
        "model/router.mxt",
        "model/router_bias.mxt",
        "model/expert_0_gate.mxt",
        "model/expert_3_down.mxt",
        "sensitivity.json",
        "stats.json",
        "plan.json",
        "schedule.json",
        "report.json",
        "report.txt",
        "roofline.csv",
    ] {
        let a = fs::read(base.join("a").join(name)).unwrap();
        let b = fs::read(base.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        compared += 1;
    }
    fs::remove_dir_all(&base).unwrap();
    pass(10, &format!("{compared} artifacts byte-identical across reruns"));
}
