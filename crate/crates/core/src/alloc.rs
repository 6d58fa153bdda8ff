//! Joint bitwidth/tile allocation: pick one scheme per linear block (and the
//! cost-minimal tile per choice) minimizing the normalized product objective
//! `(L/L0)^r * (T/T0)^(1-r)` under a weight-memory budget.
//!
//! The solver scans a 33-point logarithmic grid of scalarization weights;
//! each grid point decomposes into independent per-block choices, which are
//! repaired onto the budget by greedily downgrading the blocks with the best
//! memory-saved / objective-increase ratio. Uniform plans and the loss-only /
//! time-only extremes seed the same pool, and every candidate is polished by
//! coordinate descent on the true product objective before the best plan is
//! returned. An exhaustive oracle validates the result at small scale.

use crate::cost::{estimate_block_time, tile_count, GemmShape, HardwareProfile, TileConfig, TileCostTable};
use crate::error::{MxError, Result};
use crate::moe::NUM_LINEAR;
use crate::quant::QuantScheme;
use crate::sensitivity::SensitivityTable;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Whether every linear block chooses independently or all blocks of an
/// expert share one scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Linear,
    Expert,
}

#[derive(Debug, Clone)]
pub struct AllocationProblem {
    pub sensitivity: SensitivityTable,
    pub shapes: Vec<[GemmShape; NUM_LINEAR]>,
    pub costs: TileCostTable,
    /// Weight memory budget in bytes (scales/zeros included).
    pub budget_bytes: f64,
    /// Trade-off exponent: 1 = accuracy only, 0 = speed only.
    pub r: f64,
    pub hw: HardwareProfile,
    pub granularity: Granularity,
    /// Experts pinned to the identity scheme and excluded from reallocation.
    pub exclude_experts: BTreeSet<usize>,
}

impl AllocationProblem {
    pub fn schemes(&self) -> &[QuantScheme] {
        &self.sensitivity.schemes
    }

    pub fn num_experts(&self) -> usize {
        self.shapes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.sensitivity.validate()?;
        self.hw.validate()?;
        if !(self.r >= 0.0 && self.r <= 1.0) {
            return Err(MxError::config(format!("r must be in [0,1], got {}", self.r)));
        }
        if self.budget_bytes <= 0.0 || self.budget_bytes.is_nan() {
            return Err(MxError::config("budget must be positive"));
        }
        if self.sensitivity.num_experts() != self.shapes.len() {
            return Err(MxError::data(
                "sensitivity table and shapes disagree on expert count",
            ));
        }
        if !self.schemes().iter().any(|s| s.is_identity()) {
            return Err(MxError::config("scheme set must include the 16-bit identity"));
        }
        if let Some(&e) = self.exclude_experts.iter().find(|&&e| e >= self.shapes.len()) {
            return Err(MxError::config(format!("excluded expert {e} out of range")));
        }
        Ok(())
    }
}

/// A complete assignment: scheme index and tile per (expert, block), plus the
/// predicted loss, time, normalized objective and memory use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub scheme_of: Vec<Vec<usize>>,
    pub tile_of: Vec<Vec<TileConfig>>,
    pub predicted_l: f64,
    pub predicted_t: f64,
    pub objective: f64,
    pub memory_used: f64,
}

/// `base^exp` with the `0^0 = 1` convention, so r = 1 ignores T and r = 0
/// ignores L.
fn pow0(base: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        1.0
    } else {
        base.powf(exp)
    }
}

/// Precomputed per-unit tables. A "unit" is one linear block at linear
/// granularity or one expert (three blocks tied together) at expert
/// granularity.
struct Context {
    /// delta[unit][k]
    delta: Vec<Vec<f64>>,
    /// serial tile seconds (not divided by P) [unit][k]
    time: Vec<Vec<f64>>,
    /// weight bytes [unit][k]
    mem: Vec<Vec<f64>>,
    /// best tile per (expert, block, scheme)
    tile: Vec<Vec<Vec<TileConfig>>>,
    /// block ids (expert, j) composing each unit
    unit_blocks: Vec<Vec<(usize, usize)>>,
    /// units pinned to the identity scheme
    pinned: Vec<bool>,
    identity_k: usize,
    num_schemes: usize,
    sm_count: f64,
    l0: f64,
    t0: f64,
    r: f64,
    budget: f64,
}

impl Context {
    fn build(problem: &AllocationProblem) -> Result<Context> {
        let schemes = problem.schemes();
        let k_count = schemes.len();
        let e_count = problem.num_experts();
        let identity_k = schemes.iter().position(|s| s.is_identity()).expect("validated");
        let lowest_k = (0..k_count)
            .min_by_key(|&k| (schemes[k].w_bits, schemes[k].a_bits, k))
            .expect("non-empty scheme set");

        // Per-block tables first.
        let mut b_delta = vec![vec![0.0; k_count]; e_count * NUM_LINEAR];
        let mut b_time = vec![vec![0.0; k_count]; e_count * NUM_LINEAR];
        let mut b_mem = vec![vec![0.0; k_count]; e_count * NUM_LINEAR];
        let mut tile = Vec::with_capacity(e_count);
        for i in 0..e_count {
            let mut per_expert = Vec::with_capacity(NUM_LINEAR);
            for j in 0..NUM_LINEAR {
                let shape = &problem.shapes[i][j];
                let b = i * NUM_LINEAR + j;
                let mut per_block = Vec::with_capacity(k_count);
                for (k, scheme) in schemes.iter().enumerate() {
                    b_delta[b][k] = problem.sensitivity.delta[i][j][k];
                    b_mem[b][k] = shape.weight_elements() as f64
                        * scheme.storage_bits_per_weight(shape.k)?
                        / 8.0;
                    let candidates = problem.costs.candidates(scheme)?;
                    let mut best: Option<(f64, TileConfig)> = None;
                    for cfg in candidates {
                        let per_task = problem.costs.task_cost(scheme, &cfg)?;
                        let total = tile_count(shape, &cfg) as f64 * per_task;
                        if best.as_ref().is_none_or(|(t, _)| total < *t) {
                            best = Some((total, cfg));
                        }
                    }
                    let (total, cfg) = best.ok_or_else(|| {
                        MxError::config(format!("no tile candidates for scheme {scheme}"))
                    })?;
                    b_time[b][k] = total;
                    per_block.push(cfg);
                }
                per_expert.push(per_block);
            }
            tile.push(per_expert);
        }

        // Group blocks into decision units.
        let (unit_blocks, pinned): (Vec<Vec<(usize, usize)>>, Vec<bool>) =
            match problem.granularity {
                Granularity::Linear => {
                    let mut ub = Vec::new();
                    let mut pin = Vec::new();
                    for i in 0..e_count {
                        for j in 0..NUM_LINEAR {
                            ub.push(vec![(i, j)]);
                            pin.push(problem.exclude_experts.contains(&i));
                        }
                    }
                    (ub, pin)
                }
                Granularity::Expert => {
                    let mut ub = Vec::new();
                    let mut pin = Vec::new();
                    for i in 0..e_count {
                        ub.push((0..NUM_LINEAR).map(|j| (i, j)).collect());
                        pin.push(problem.exclude_experts.contains(&i));
                    }
                    (ub, pin)
                }
            };

        let aggregate = |table: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            unit_blocks
                .iter()
                .map(|blocks| {
                    (0..k_count)
                        .map(|k| {
                            blocks
                                .iter()
                                .map(|&(i, j)| table[i * NUM_LINEAR + j][k])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        };
        let delta = aggregate(&b_delta);
        let time = aggregate(&b_time);
        let mem = aggregate(&b_mem);

        let sm_count = problem.hw.sm_count as f64;
        let l0_raw: f64 = delta.iter().map(|row| row[lowest_k]).sum();
        let t0_raw: f64 = time.iter().map(|row| row[identity_k]).sum::<f64>() / sm_count;
        Ok(Context {
            delta,
            time,
            mem,
            tile,
            unit_blocks,
            pinned,
            identity_k,
            num_schemes: k_count,
            sm_count,
            l0: if l0_raw > 0.0 { l0_raw } else { 1.0 },
            t0: if t0_raw > 0.0 { t0_raw } else { 1.0 },
            r: problem.r,
            budget: problem.budget_bytes,
        })
    }

    fn num_units(&self) -> usize {
        self.unit_blocks.len()
    }

    fn sums(&self, assign: &[usize]) -> (f64, f64, f64) {
        let mut l = 0.0;
        let mut t = 0.0;
        let mut m = 0.0;
        for (u, &k) in assign.iter().enumerate() {
            l += self.delta[u][k];
            t += self.time[u][k];
            m += self.mem[u][k];
        }
        (l, t / self.sm_count, m)
    }

    fn objective_from(&self, l: f64, t: f64) -> f64 {
        pow0(l / self.l0, self.r) * pow0(t / self.t0, 1.0 - self.r)
    }

    #[cfg(test)]
    fn objective(&self, assign: &[usize]) -> f64 {
        let (l, t, _) = self.sums(assign);
        self.objective_from(l, t)
    }

    fn memory(&self, assign: &[usize]) -> f64 {
        assign.iter().enumerate().map(|(u, &k)| self.mem[u][k]).sum()
    }

    /// Cheapest-memory assignment respecting pins.
    fn min_memory_assignment(&self) -> Vec<usize> {
        (0..self.num_units())
            .map(|u| {
                if self.pinned[u] {
                    self.identity_k
                } else {
                    (0..self.num_schemes)
                        .min_by(|&a, &b| {
                            self.mem[u][a]
                                .partial_cmp(&self.mem[u][b])
                                .unwrap()
                                .then(a.cmp(&b))
                        })
                        .unwrap()
                }
            })
            .collect()
    }

    /// Deterministic comparison of two complete assignments:
    /// objective, then T, then L, then lexicographic order.
    fn better(&self, a: &[usize], b: &[usize]) -> bool {
        let (la, ta, _) = self.sums(a);
        let (lb, tb, _) = self.sums(b);
        let oa = self.objective_from(la, ta);
        let ob = self.objective_from(lb, tb);
        (oa, ta, la, a) < (ob, tb, lb, b)
    }
}

fn plan_from_assignment(ctx: &Context, problem: &AllocationProblem, assign: &[usize]) -> AllocationPlan {
    let e_count = problem.num_experts();
    let mut scheme_of = vec![vec![ctx.identity_k; NUM_LINEAR]; e_count];
    for (u, &k) in assign.iter().enumerate() {
        for &(i, j) in &ctx.unit_blocks[u] {
            scheme_of[i][j] = k;
        }
    }
    let tile_of: Vec<Vec<TileConfig>> = (0..e_count)
        .map(|i| (0..NUM_LINEAR).map(|j| ctx.tile[i][j][scheme_of[i][j]]).collect())
        .collect();
    let (l, t, m) = ctx.sums(assign);
    AllocationPlan {
        scheme_of,
        tile_of,
        predicted_l: l,
        predicted_t: t,
        objective: ctx.objective_from(l, t),
        memory_used: m,
    }
}

/// Evaluate a plan against a problem: raw loss L, raw time T and the
/// normalized product objective.
pub fn objective_eval(plan: &AllocationPlan, problem: &AllocationProblem) -> Result<(f64, f64, f64)> {
    problem.validate()?;
    let schemes = problem.schemes();
    let mut l = 0.0;
    for (i, per_expert) in plan.scheme_of.iter().enumerate() {
        for (j, &k) in per_expert.iter().enumerate() {
            l += problem.sensitivity.delta[i][j][k];
        }
    }
    let scheme_mats: Vec<Vec<QuantScheme>> = plan
        .scheme_of
        .iter()
        .map(|row| row.iter().map(|&k| schemes[k]).collect())
        .collect();
    let t = estimate_block_time(&problem.shapes, &scheme_mats, &plan.tile_of, &problem.costs, &problem.hw)?;
    let ctx = Context::build(problem)?;
    Ok((l, t, ctx.objective_from(l, t)))
}

/// Total quantized weight bytes of a plan, scales and zero-points included.
pub fn memory_usage(plan: &AllocationPlan, problem: &AllocationProblem) -> Result<f64> {
    let schemes = problem.schemes();
    let mut total = 0.0;
    for (i, per_expert) in plan.scheme_of.iter().enumerate() {
        for (j, &k) in per_expert.iter().enumerate() {
            let shape = &problem.shapes[i][j];
            total += shape.weight_elements() as f64
                * schemes[k].storage_bits_per_weight(shape.k)?
                / 8.0;
        }
    }
    Ok(total)
}

/// Greedy budget repair: repeatedly switch the unit/scheme pair with the best
/// memory-saved / objective-increase ratio until the assignment fits.
fn repair_to_budget(ctx: &Context, assign: &mut [usize]) -> bool {
    loop {
        if ctx.memory(assign) <= ctx.budget {
            return true;
        }
        let (l, t, _) = ctx.sums(assign);
        let cur_obj = ctx.objective_from(l, t);
        let mut best: Option<(f64, usize, usize)> = None; // (ratio, unit, k)
        for (u, &cur_k) in assign.iter().enumerate() {
            if ctx.pinned[u] {
                continue;
            }
            for k in 0..ctx.num_schemes {
                let saved = ctx.mem[u][cur_k] - ctx.mem[u][k];
                if saved <= 0.0 {
                    continue;
                }
                let nl = l - ctx.delta[u][cur_k] + ctx.delta[u][k];
                let nt = t + (ctx.time[u][k] - ctx.time[u][cur_k]) / ctx.sm_count;
                let inc = (ctx.objective_from(nl, nt) - cur_obj).max(1e-30);
                let ratio = saved / inc;
                if best.as_ref().is_none_or(|(r, ..)| ratio > *r) {
                    best = Some((ratio, u, k));
                }
            }
        }
        match best {
            Some((_, u, k)) => assign[u] = k,
            None => return false, // no memory-reducing move left
        }
    }
}

/// Coordinate descent on the true product objective within the budget:
/// best-improvement single-unit moves, then one pairwise pass on small
/// instances, iterated to a fixed point.
fn refine(ctx: &Context, assign: &mut [usize]) {
    let units = ctx.num_units();
    let pair_pass_allowed = (units * ctx.num_schemes).pow(2) <= 4_000_000;
    loop {
        let mut improved = false;
        // Single-unit moves: best improvement until a fixed point.
        loop {
            let (l, t, _) = ctx.sums(assign);
            let mem = ctx.memory(assign);
            let cur = ctx.objective_from(l, t);
            let mut best: Option<(f64, usize, usize)> = None;
            for (u, &cur_k) in assign.iter().enumerate() {
                if ctx.pinned[u] {
                    continue;
                }
                for k in 0..ctx.num_schemes {
                    if k == cur_k {
                        continue;
                    }
                    let nm = mem - ctx.mem[u][cur_k] + ctx.mem[u][k];
                    if nm > ctx.budget {
                        continue;
                    }
                    let nl = l - ctx.delta[u][cur_k] + ctx.delta[u][k];
                    let nt = t + (ctx.time[u][k] - ctx.time[u][cur_k]) / ctx.sm_count;
                    let obj = ctx.objective_from(nl, nt);
                    if obj < cur && best.as_ref().is_none_or(|(o, ..)| obj < *o) {
                        best = Some((obj, u, k));
                    }
                }
            }
            match best {
                Some((_, u, k)) => {
                    assign[u] = k;
                    improved = true;
                }
                None => break,
            }
        }
        // Pairwise exchange pass (lets a downgrade fund an upgrade).
        if pair_pass_allowed {
            let (l, t, _) = ctx.sums(assign);
            let mem = ctx.memory(assign);
            let cur = ctx.objective_from(l, t);
            let mut best: Option<(f64, usize, usize, usize, usize)> = None;
            for u1 in 0..units {
                if ctx.pinned[u1] {
                    continue;
                }
                for u2 in u1 + 1..units {
                    if ctx.pinned[u2] {
                        continue;
                    }
                    for k1 in 0..ctx.num_schemes {
                        if k1 == assign[u1] {
                            continue;
                        }
                        let m1 = mem - ctx.mem[u1][assign[u1]] + ctx.mem[u1][k1];
                        let l1 = l - ctx.delta[u1][assign[u1]] + ctx.delta[u1][k1];
                        let t1 =
                            t + (ctx.time[u1][k1] - ctx.time[u1][assign[u1]]) / ctx.sm_count;
                        for k2 in 0..ctx.num_schemes {
                            if k2 == assign[u2] {
                                continue;
                            }
                            let nm = m1 - ctx.mem[u2][assign[u2]] + ctx.mem[u2][k2];
                            if nm > ctx.budget {
                                continue;
                            }
                            let nl = l1 - ctx.delta[u2][assign[u2]] + ctx.delta[u2][k2];
                            let nt = t1
                                + (ctx.time[u2][k2] - ctx.time[u2][assign[u2]]) / ctx.sm_count;
                            let obj = ctx.objective_from(nl, nt);
                            if obj < cur && best.as_ref().is_none_or(|(o, ..)| obj < *o) {
                                best = Some((obj, u1, k1, u2, k2));
                            }
                        }
                    }
                }
            }
            if let Some((_, u1, k1, u2, k2)) = best {
                assign[u1] = k1;
                assign[u2] = k2;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
}

/// Per-unit argmin of `score`, with the configured deterministic tie-break.
fn greedy_assignment(ctx: &Context, score: impl Fn(usize, usize) -> (f64, f64, f64)) -> Vec<usize> {
    (0..ctx.num_units())
        .map(|u| {
            if ctx.pinned[u] {
                return ctx.identity_k;
            }
            let mut best = 0usize;
            let mut best_key = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
            for k in 0..ctx.num_schemes {
                let key = score(u, k);
                if key < best_key {
                    best_key = key;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Solve the allocation problem.
///
/// Returns an error when even the cheapest-memory assignment exceeds the
/// budget, reporting the minimal achievable bytes.
pub fn solve(problem: &AllocationProblem) -> Result<AllocationPlan> {
    problem.validate()?;
    let ctx = Context::build(problem)?;

    let min_assign = ctx.min_memory_assignment();
    let min_bytes = ctx.memory(&min_assign);
    if min_bytes > problem.budget_bytes {
        return Err(MxError::Infeasible {
            budget_bytes: problem.budget_bytes,
            min_bytes,
        });
    }

    let schemes = problem.schemes();
    let mut candidates: Vec<Vec<usize>> = Vec::new();

    // Loss-only extreme: argmin delta, ties toward lower bitwidth then index.
    candidates.push(greedy_assignment(&ctx, |u, k| {
        (ctx.delta[u][k], schemes[k].w_bits as f64, k as f64)
    }));
    // Time-only extreme: argmin tile time, ties toward lower delta then index.
    candidates.push(greedy_assignment(&ctx, |u, k| {
        (ctx.time[u][k], ctx.delta[u][k], k as f64)
    }));
    // 33-point logarithmic scalarization grid over [1e-4, 1e4]: weight mu on
    // the normalized loss against the normalized time.
    for i in 0..33 {
        let mu = 10f64.powf(-4.0 + 8.0 * i as f64 / 32.0);
        candidates.push(greedy_assignment(&ctx, |u, k| {
            let dl = ctx.delta[u][k] / ctx.l0;
            let dt = ctx.time[u][k] / (ctx.sm_count * ctx.t0);
            (mu * dl + dt, ctx.delta[u][k], k as f64)
        }));
    }
    // Uniform plans: feasible uniform assignments are upper bounds the final
    // plan must beat, so they join the pool as warm starts.
    for k in 0..ctx.num_schemes {
        candidates.push(
            (0..ctx.num_units())
                .map(|u| if ctx.pinned[u] { ctx.identity_k } else { k })
                .collect(),
        );
    }
    candidates.push(min_assign.clone());

    let mut best: Option<Vec<usize>> = None;
    for mut assign in candidates {
        if !repair_to_budget(&ctx, &mut assign) {
            assign = min_assign.clone();
        }
        refine(&ctx, &mut assign);
        if ctx.memory(&assign) > problem.budget_bytes {
            continue;
        }
        if best.as_ref().is_none_or(|b| ctx.better(&assign, b)) {
            best = Some(assign);
        }
    }
    let best = best.expect("min-memory assignment is always feasible");
    Ok(plan_from_assignment(&ctx, problem, &best))
}

/// The plan assigning one scheme everywhere (pinned experts keep identity).
/// Uniform plans are the baselines the mixed plan is compared against; they
/// may exceed the budget, which callers surface as infeasibility.
pub fn uniform_plan(problem: &AllocationProblem, scheme_index: usize) -> Result<AllocationPlan> {
    problem.validate()?;
    let ctx = Context::build(problem)?;
    if scheme_index >= ctx.num_schemes {
        return Err(MxError::config(format!("scheme index {scheme_index} out of range")));
    }
    let assign: Vec<usize> = (0..ctx.num_units())
        .map(|u| if ctx.pinned[u] { ctx.identity_k } else { scheme_index })
        .collect();
    Ok(plan_from_assignment(&ctx, problem, &assign))
}

/// Exhaustive optimum of the product objective under the budget. Refuses
/// instances with more than 10^6 assignments.
pub fn brute_force_oracle(problem: &AllocationProblem) -> Result<AllocationPlan> {
    problem.validate()?;
    let ctx = Context::build(problem)?;
    let units = ctx.num_units();
    let free_units: Vec<usize> = (0..units).filter(|&u| !ctx.pinned[u]).collect();
    let size = (ctx.num_schemes as f64).powi(free_units.len() as i32);
    if size > 1e6 {
        return Err(MxError::config(format!(
            "instance too large for brute force: {}^{} assignments",
            ctx.num_schemes,
            free_units.len()
        )));
    }

    let mut assign = vec![ctx.identity_k; units];
    for &u in &free_units {
        assign[u] = 0;
    }
    let mut best: Option<Vec<usize>> = None;
    loop {
        if ctx.memory(&assign) <= problem.budget_bytes
            && best.as_ref().is_none_or(|b| ctx.better(&assign, b))
        {
            best = Some(assign.clone());
        }
        // Odometer increment over free units.
        let mut pos = 0;
        loop {
            if pos == free_units.len() {
                let best = best.ok_or(MxError::Infeasible {
                    budget_bytes: problem.budget_bytes,
                    min_bytes: ctx.memory(&ctx.min_memory_assignment()),
                })?;
                return Ok(plan_from_assignment(&ctx, problem, &best));
            }
            let u = free_units[pos];
            assign[u] += 1;
            if assign[u] < ctx.num_schemes {
                break;
            }
            assign[u] = 0;
            pos += 1;
        }
    }
}

/// Constrain all blocks of an expert to share one scheme (the ablation
/// configuration); per-unit deltas aggregate by sum.
pub fn coarsen_to_expert_granularity(problem: &AllocationProblem) -> AllocationProblem {
    AllocationProblem {
        granularity: Granularity::Expert,
        ..problem.clone()
    }
}
