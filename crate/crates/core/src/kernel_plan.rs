//! Mixed-precision Group-GEMM orchestration: unify CTA resources across
//! micro-kernels (warp-count consistency, shared-memory max, slice-K),
//! expand an allocation into tile tasks, schedule them across SMs and
//! validate the schedule with a deterministic simulator.

use crate::alloc::AllocationPlan;
use crate::cost::{smem_usage, tile_count, GemmShape, HardwareProfile, TileBounds, TileConfig, TileCostTable};
use crate::error::{MxError, Result};
use crate::moe::NUM_LINEAR;
use crate::quant::QuantScheme;
use serde::{Deserialize, Serialize};

/// One configurable CTA-level micro-kernel: a scheme with its tile shape and
/// resource footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroKernelSpec {
    pub scheme: QuantScheme,
    pub tile: TileConfig,
    pub smem_bytes: f64,
    pub warps: usize,
}

impl MicroKernelSpec {
    pub fn new(scheme: QuantScheme, tile: TileConfig, stages: usize) -> Self {
        let smem_bytes = smem_usage(&tile, &scheme, stages) * tile.slice_k.max(1) as f64;
        Self {
            scheme,
            tile,
            smem_bytes,
            warps: tile.warps,
        }
    }
}

/// Micro-kernels fused into one launch: every member runs the same warp
/// count and the shared-memory allocation is the maximum requirement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedKernelConfig {
    pub members: Vec<MicroKernelSpec>,
    pub unified_warps: usize,
    pub unified_smem: f64,
}

impl FusedKernelConfig {
    pub fn member_for(&self, scheme: &QuantScheme) -> Result<&MicroKernelSpec> {
        self.members
            .iter()
            .find(|m| m.scheme == *scheme)
            .ok_or_else(|| MxError::config(format!("fused kernel has no member for {scheme}")))
    }

    pub fn check_invariants(&self, hw: &HardwareProfile) -> Result<()> {
        if self.members.iter().any(|m| m.warps != self.unified_warps) {
            return Err(MxError::config("fused members disagree on warp count"));
        }
        let max = self.members.iter().fold(0.0f64, |a, m| a.max(m.smem_bytes));
        if (self.unified_smem - max).abs() > 1e-9 {
            return Err(MxError::config("unified smem is not the member maximum"));
        }
        if self.unified_smem > hw.smem_per_sm {
            return Err(MxError::config("unified smem exceeds the hardware limit"));
        }
        Ok(())
    }
}

/// Unify resources across the chosen (scheme, tile) pairs: try each warp
/// count, re-tile every member to its cheapest candidate at that count, and
/// keep the warp count with the lowest total per-tile cost. Warp counts at
/// which some member has no feasible candidate are skipped.
pub fn unify_resources(
    chosen: &[(QuantScheme, TileConfig)],
    costs: &TileCostTable,
    hw: &HardwareProfile,
) -> Result<FusedKernelConfig> {
    if chosen.is_empty() {
        return Err(MxError::config("cannot unify an empty micro-kernel set"));
    }
    let stages = TileBounds::default().stages;
    // Already warp-consistent selections are kept verbatim; the search below
    // only runs when members disagree and someone has to be re-tiled.
    if chosen.iter().all(|(_, t)| t.warps == chosen[0].1.warps) {
        let members: Vec<MicroKernelSpec> = chosen
            .iter()
            .map(|(s, t)| MicroKernelSpec::new(*s, *t, stages))
            .collect();
        let unified_smem = members.iter().fold(0.0f64, |a, m| a.max(m.smem_bytes));
        if unified_smem <= hw.smem_per_sm {
            return Ok(FusedKernelConfig {
                unified_warps: chosen[0].1.warps,
                unified_smem,
                members,
            });
        }
    }
    let warp_choices = [4usize, 8, 16];
    let mut best: Option<(f64, FusedKernelConfig)> = None;
    for &w in &warp_choices {
        let mut members = Vec::with_capacity(chosen.len());
        let mut total = 0.0;
        let mut feasible = true;
        for (scheme, preferred) in chosen {
            // Keep the allocator's tile when it already runs at w warps;
            // otherwise re-tile to the cheapest candidate at w.
            let candidate = if preferred.warps == w {
                Some((costs.task_cost(scheme, preferred)?, *preferred))
            } else {
                let mut best_cfg: Option<(f64, TileConfig)> = None;
                for cfg in costs.candidates(scheme)? {
                    if cfg.warps != w {
                        continue;
                    }
                    let c = costs.task_cost(scheme, &cfg)?;
                    if best_cfg.as_ref().is_none_or(|(b, _)| c < *b) {
                        best_cfg = Some((c, cfg));
                    }
                }
                best_cfg
            };
            match candidate {
                Some((c, cfg)) => {
                    total += c;
                    members.push(MicroKernelSpec::new(*scheme, cfg, stages));
                }
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if !feasible {
            continue;
        }
        let unified_smem = members.iter().fold(0.0f64, |a, m| a.max(m.smem_bytes));
        if unified_smem > hw.smem_per_sm {
            continue;
        }
        let fused = FusedKernelConfig {
            members,
            unified_warps: w,
            unified_smem,
        };
        if best.as_ref().is_none_or(|(t, _)| total < *t) {
            best = Some((total, fused));
        }
    }
    best.map(|(_, f)| f)
        .ok_or_else(|| MxError::config("no warp count is feasible for all micro-kernels"))
}

/// Raise a member's slice-K when it uses less than half the unified shared
/// memory: pick the largest factor in {2, 4} that keeps the scaled footprint
/// within the unified allocation. Total reduction extent is preserved; the
/// task count multiplies and the per-task work divides accordingly.
pub fn slice_k_partition(member: &MicroKernelSpec, fused: &FusedKernelConfig) -> MicroKernelSpec {
    if member.smem_bytes >= fused.unified_smem / 2.0 {
        return member.clone();
    }
    let mut slice = 1usize;
    for s in [2usize, 4] {
        if member.smem_bytes * s as f64 <= fused.unified_smem {
            slice = s;
        }
    }
    let mut out = member.clone();
    out.tile.slice_k = slice;
    out.smem_bytes = member.smem_bytes * slice as f64;
    out
}

/// Apply slice-K partitioning to every fused member.
pub fn apply_slice_k(fused: &FusedKernelConfig) -> FusedKernelConfig {
    let members: Vec<MicroKernelSpec> = fused
        .members
        .iter()
        .map(|m| slice_k_partition(m, fused))
        .collect();
    FusedKernelConfig {
        members,
        unified_warps: fused.unified_warps,
        unified_smem: fused.unified_smem,
    }
}

/// One schedulable tile task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileTask {
    /// (expert, linear block) that owns the tile.
    pub owner: (usize, usize),
    pub scheme: QuantScheme,
    /// Seconds of SM time.
    pub cost: f64,
    pub tile_id: usize,
}

/// Tasks ordered per SM plus the resulting makespan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Task indices (into the task list) per SM, in execution order.
    pub per_sm: Vec<Vec<usize>>,
    pub makespan: f64,
}

/// Expand an allocation into tile tasks using the fused member tile for each
/// block's scheme. Blocks with zero routed tokens emit no tasks.
pub fn build_tasks(
    plan: &AllocationPlan,
    shapes: &[[GemmShape; NUM_LINEAR]],
    schemes: &[QuantScheme],
    fused: &FusedKernelConfig,
    costs: &TileCostTable,
) -> Result<Vec<TileTask>> {
    let mut tasks = Vec::new();
    let mut tile_id = 0usize;
    for (i, blocks) in shapes.iter().enumerate() {
        for (j, shape) in blocks.iter().enumerate() {
            if shape.m == 0 {
                continue;
            }
            let scheme = schemes[plan.scheme_of[i][j]];
            let member = fused.member_for(&scheme)?;
            let n_t = tile_count(shape, &member.tile);
            if n_t == 0 {
                continue;
            }
            let cost = costs.task_cost(&scheme, &member.tile)?;
            for _ in 0..n_t {
                tasks.push(TileTask {
                    owner: (i, j),
                    scheme,
                    cost,
                    tile_id,
                });
                tile_id += 1;
            }
        }
    }
    Ok(tasks)
}

/// LPT list scheduling: sort tasks by descending cost (stable, so equal
/// costs keep task order) and assign each to the least-loaded SM, breaking
/// load ties toward the lower SM index.
pub fn schedule_greedy(tasks: &[TileTask], sm_count: usize) -> Result<Schedule> {
    if sm_count == 0 {
        return Err(MxError::config("schedule needs at least one SM"));
    }
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by(|&a, &b| {
        tasks[b]
            .cost
            .partial_cmp(&tasks[a].cost)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut per_sm = vec![Vec::new(); sm_count];
    let mut loads = vec![0.0f64; sm_count];
    for idx in order {
        let mut target = 0;
        for s in 1..sm_count {
            if loads[s] < loads[target] {
                target = s;
            }
        }
        per_sm[target].push(idx);
        loads[target] += tasks[idx].cost;
    }
    let makespan = loads.iter().cloned().fold(0.0, f64::max);
    Ok(Schedule { per_sm, makespan })
}

/// Exact minimum makespan via branch-and-bound over per-SM load vectors,
/// with costs discretized to 1 µs. Refuses instances beyond 12 tasks or 4
/// SMs.
pub fn schedule_optimal_dp(tasks: &[TileTask], sm_count: usize) -> Result<Schedule> {
    if sm_count == 0 {
        return Err(MxError::config("schedule needs at least one SM"));
    }
    if tasks.len() > 12 || sm_count > 4 {
        return Err(MxError::config(format!(
            "exact scheduler limited to 12 tasks on 4 SMs, got {} tasks on {}",
            tasks.len(),
            sm_count
        )));
    }
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by(|&a, &b| {
        tasks[b]
            .cost
            .partial_cmp(&tasks[a].cost)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let micros: Vec<u64> = order
        .iter()
        .map(|&i| (tasks[i].cost * 1e6).round() as u64)
        .collect();
    let total: u64 = micros.iter().sum();

    struct Search<'a> {
        micros: &'a [u64],
        suffix: Vec<u64>,
        sm_count: usize,
        best: u64,
        best_assign: Vec<usize>,
    }

    impl Search<'_> {
        fn go(&mut self, next: usize, loads: &mut Vec<u64>, assign: &mut Vec<usize>) {
            let cur_max = *loads.iter().max().unwrap();
            if cur_max >= self.best {
                return;
            }
            if next == self.micros.len() {
                self.best = cur_max;
                self.best_assign = assign.clone();
                return;
            }
            // Remaining work cannot beat the average bound.
            let remaining = self.suffix[next];
            let lower = cur_max.max((loads.iter().sum::<u64>() + remaining).div_ceil(self.sm_count as u64));
            if lower >= self.best {
                return;
            }
            let mut seen = Vec::with_capacity(self.sm_count);
            for s in 0..self.sm_count {
                if seen.contains(&loads[s]) {
                    continue; // symmetric to a load already tried
                }
                seen.push(loads[s]);
                loads[s] += self.micros[next];
                assign.push(s);
                self.go(next + 1, loads, assign);
                assign.pop();
                loads[s] -= self.micros[next];
            }
        }
    }

    let mut suffix = vec![0u64; micros.len() + 1];
    for i in (0..micros.len()).rev() {
        suffix[i] = suffix[i + 1] + micros[i];
    }
    let mut search = Search {
        micros: &micros,
        suffix,
        sm_count,
        best: total + 1,
        best_assign: Vec::new(),
    };
    search.go(0, &mut vec![0u64; sm_count], &mut Vec::with_capacity(micros.len()));

    let mut per_sm = vec![Vec::new(); sm_count];
    for (pos, &sm) in search.best_assign.iter().enumerate() {
        per_sm[sm].push(order[pos]);
    }
    let makespan = per_sm
        .iter()
        .map(|list| list.iter().map(|&i| tasks[i].cost).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(Schedule { per_sm, makespan })
}

/// Simulation report: the realized makespan and per-SM utilization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan: f64,
    pub per_sm_busy: Vec<f64>,
    pub utilization: Vec<f64>,
}

/// Deterministic event simulation of a schedule: each SM runs its task list
/// in order; the block finishes when the last SM drains.
pub fn simulate_execution(schedule: &Schedule, tasks: &[TileTask]) -> SimReport {
    let mut busy: Vec<f64> = Vec::with_capacity(schedule.per_sm.len());
    for list in &schedule.per_sm {
        let mut clock = 0.0;
        for &idx in list {
            clock += tasks[idx].cost;
        }
        busy.push(clock);
    }
    let makespan = busy.iter().cloned().fold(0.0, f64::max);
    let utilization = busy
        .iter()
        .map(|&b| if makespan > 0.0 { b / makespan } else { 0.0 })
        .collect();
    SimReport {
        makespan,
        per_sm_busy: busy,
        utilization,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::KernelMode;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw_tasks(costs: &[f64]) -> Vec<TileTask> {
        costs
            .iter()
            .enumerate()
            .map(|(i, &c)| TileTask {
                owner: (0, 0),
                scheme: QuantScheme::identity(),
                cost: c,
                tile_id: i,
            })
            .collect()
    }

    fn hw() -> HardwareProfile {
        HardwareProfile::default_rtx4090()
    }

    #[test]
    fn unify_single_member_is_unchanged() {
        let h = hw();
        let scheme = QuantScheme::parse("w8a8_g-1_sym").unwrap();
        let costs = TileCostTable::build(&[scheme], &h, KernelMode::Specialized).unwrap();
        let tile = costs.candidates(&scheme).unwrap()[0];
        let fused = unify_resources(&[(scheme, tile)], &costs, &h).unwrap();
        assert_eq!(fused.members.len(), 1);
        assert_eq!(fused.members[0].tile, tile);
        assert_eq!(fused.unified_warps, tile.warps);
        fused.check_invariants(&h).unwrap();
    }

    #[test]
    fn unify_mixed_warps_settles_on_common_count() {
        let h = hw();
        let a = QuantScheme::parse("w4a16_g-1_asym").unwrap();
        let b = QuantScheme::parse("w8a8_g-1_sym").unwrap();
        let costs = TileCostTable::build(&[a, b], &h, KernelMode::Specialized).unwrap();
        let tile_a = costs
            .candidates(&a)
            .unwrap()
            .into_iter()
            .find(|c| c.warps == 4)
            .unwrap();
        let tile_b = costs
            .candidates(&b)
            .unwrap()
            .into_iter()
            .find(|c| c.warps == 8)
            .unwrap();
        let fused = unify_resources(&[(a, tile_a), (b, tile_b)], &costs, &h).unwrap();
        assert!(fused.members.iter().all(|m| m.warps == fused.unified_warps));
        let max_smem = fused.members.iter().fold(0.0f64, |x, m| x.max(m.smem_bytes));
        assert_eq!(fused.unified_smem, max_smem);
        fused.check_invariants(&h).unwrap();
    }

    #[test]
    fn unify_fails_without_common_warp_count() {
        let h = hw();
        let a = QuantScheme::parse("w4a16_g-1_asym").unwrap();
        let b = QuantScheme::parse("w8a8_g-1_sym").unwrap();
        // Hand-build a cost table where the two schemes have disjoint warp counts.
        let mut table = TileCostTable::build(&[a, b], &h, KernelMode::Specialized).unwrap();
        table
            .entries
            .get_mut(&a.notation())
            .unwrap()
            .retain(|k, _| k.contains("w4s"));
        table
            .entries
            .get_mut(&b.notation())
            .unwrap()
            .retain(|k, _| k.contains("w8s"));
        let ta = table.candidates(&a).unwrap()[0];
        let tb = table.candidates(&b).unwrap()[0];
        let r = unify_resources(&[(a, ta), (b, tb)], &table, &h);
        assert!(matches!(r, Err(MxError::Config(_))));
    }

    #[test]
    fn slice_k_unchanged_when_smem_matches() {
        let h = hw();
        let scheme = QuantScheme::parse("w8a8_g-1_sym").unwrap();
        let costs = TileCostTable::build(&[scheme], &h, KernelMode::Specialized).unwrap();
        let tile = costs.candidates(&scheme).unwrap()[0];
        let fused = unify_resources(&[(scheme, tile)], &costs, &h).unwrap();
        let sliced = slice_k_partition(&fused.members[0], &fused);
        assert_eq!(sliced.tile.slice_k, 1);
        assert_eq!(sliced, fused.members[0]);
    }

    #[test]
    fn small_member_gets_sliced() {
        let h = hw();
        let small = QuantScheme::parse("w4a16_g-1_asym").unwrap();
        let big = QuantScheme::parse("w16a16_g-1_sym").unwrap();
        let costs = TileCostTable::build(&[small, big], &h, KernelMode::Specialized).unwrap();
        // force a tiny tile for the w4a16 member and a large one for fp16
        let tiny = TileConfig {
            tile_m: 16,
            tile_n: 32,
            tile_k: 32,
            warps: 8,
            slice_k: 1,
        };
        let large = TileConfig {
            tile_m: 128,
            tile_n: 128,
            tile_k: 64,
            warps: 8,
            slice_k: 1,
        };
        let fused = unify_resources(&[(small, tiny), (big, large)], &costs, &h).unwrap();
        let member = fused.member_for(&small).unwrap();
        let sliced = slice_k_partition(member, &fused);
        assert!(sliced.tile.slice_k >= 2, "expected slicing, got {}", sliced.tile.slice_k);
        assert!(sliced.smem_bytes <= fused.unified_smem);
        // partitioning preserves total reduction extent: slice_k tasks each
        // cover k/slice_k, and task accounting multiplies by slice_k.
        let shape = GemmShape::new(64, 512, 512);
        let n_base = tile_count(&shape, &member.tile);
        let n_sliced = tile_count(&shape, &sliced.tile);
        assert_eq!(n_sliced, n_base * sliced.tile.slice_k);
    }

    #[test]
    fn lpt_known_instance() {
        let tasks = raw_tasks(&[3.0, 3.0, 2.0, 2.0]);
        let s = schedule_greedy(&tasks, 2).unwrap();
        assert_eq!(s.makespan, 5.0);
    }

    #[test]
    fn single_sm_serializes() {
        let tasks = raw_tasks(&[1.0, 2.0, 3.5]);
        let s = schedule_greedy(&tasks, 1).unwrap();
        assert_eq!(s.makespan, 6.5);
    }

    #[test]
    fn equal_costs_divisible_count_balance_perfectly() {
        let tasks = raw_tasks(&[1.0; 8]);
        let s = schedule_greedy(&tasks, 4).unwrap();
        assert_eq!(s.makespan, 2.0);
        assert!(s.per_sm.iter().all(|l| l.len() == 2));
    }

    #[test]
    fn deterministic_assignment() {
        let tasks = raw_tasks(&[0.5, 1.5, 1.5, 0.25, 2.0]);
        let a = schedule_greedy(&tasks, 3).unwrap();
        let b = schedule_greedy(&tasks, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dp_single_task() {
        let tasks = raw_tasks(&[1.25]);
        let s = schedule_optimal_dp(&tasks, 2).unwrap();
        assert_eq!(s.makespan, 1.25);
    }

    #[test]
    fn dp_known_instance() {
        let tasks = raw_tasks(&[2.0, 2.0, 3.0]);
        let dp = schedule_optimal_dp(&tasks, 2).unwrap();
        assert_eq!(dp.makespan, 4.0);
        let greedy = schedule_greedy(&tasks, 2).unwrap();
        assert_eq!(greedy.makespan, 4.0);
    }

    #[test]
    fn dp_refuses_large_instances() {
        let tasks = raw_tasks(&[1.0; 13]);
        assert!(schedule_optimal_dp(&tasks, 2).is_err());
        let tasks = raw_tasks(&[1.0; 4]);
        assert!(schedule_optimal_dp(&tasks, 5).is_err());
    }

    #[test]
    fn greedy_within_graham_bound_of_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let p = rng.random_range(2..=4usize);
            let n = rng.random_range(1..=12usize);
            let costs: Vec<f64> = (0..n).map(|_| rng.random_range(1..=1000) as f64 * 1e-6).collect();
            let tasks = raw_tasks(&costs);
            let greedy = schedule_greedy(&tasks, p).unwrap();
            let opt = schedule_optimal_dp(&tasks, p).unwrap();
            let bound = 4.0 / 3.0 - 1.0 / (3.0 * p as f64);
            assert!(
                greedy.makespan <= bound * opt.makespan + 1e-12,
                "greedy {} vs opt {} on P={p}",
                greedy.makespan,
                opt.makespan
            );
        }
    }

    #[test]
    fn simulation_matches_makespan_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let p = rng.random_range(1..=8usize);
            let n = rng.random_range(1..=64usize);
            let costs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
            let tasks = raw_tasks(&costs);
            let schedule = schedule_greedy(&tasks, p).unwrap();
            let sim = simulate_execution(&schedule, &tasks);
            assert!((sim.makespan - schedule.makespan).abs() < 1e-12);
            let total: f64 = costs.iter().sum();
            let max = costs.iter().cloned().fold(0.0, f64::max);
            let lower = (total / p as f64).max(max);
            let upper = total / p as f64 + max;
            assert!(sim.makespan >= lower - 1e-12);
            assert!(sim.makespan <= upper + 1e-12);
            assert!(sim.utilization.iter().all(|&u| (0.0..=1.0 + 1e-12).contains(&u)));
        }
    }

    #[test]
    fn dense_tiling_approximates_serial_over_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..20 {
            let p = rng.random_range(2..=16usize);
            let n = 32 * p + rng.random_range(0..64usize);
            let costs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 1e-5 + 1e-7).collect();
            let tasks = raw_tasks(&costs);
            let schedule = schedule_greedy(&tasks, p).unwrap();
            let sim = simulate_execution(&schedule, &tasks);
            let total: f64 = costs.iter().sum();
            let avg = total / p as f64;
            let max = costs.iter().cloned().fold(0.0, f64::max);
            let rel = (sim.makespan - avg).abs() / avg;
            assert!(rel <= p as f64 * max / total + 1e-12, "rel {rel}");
        }
    }
}
