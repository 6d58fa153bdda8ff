//! Hardware profile, roofline analysis, candidate tile configurations and
//! the analytical per-tile cost model behind the MoE block time estimate.
//!
//! The analytical model stands in for on-GPU profiling; a measured cost table
//! can be loaded from JSON through the same [`TileCostTable`] interface.

use crate::error::{MxError, Result};
use crate::moe::{ActivationStats, MoEBlockSpec, NUM_LINEAR};
use crate::quant::QuantScheme;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Multiply precision a scheme executes at: fp16 tensor ops for 16-bit
/// activations, int8/int4 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Int8,
    Int4,
}

impl Precision {
    pub fn for_scheme(scheme: &QuantScheme) -> Precision {
        match scheme.a_bits {
            4 => Precision::Int4,
            8 => Precision::Int8,
            _ => Precision::Fp16,
        }
    }
}

/// GPU execution resources. The default profile is RTX-4090-like: 128 SMs,
/// ~1.0e12 B/s DRAM bandwidth and fp16:int8:int4 peak ratios of 1:2:4, tuned
/// so the weight-only/weight-activation crossovers land near tokens ~83 and
/// ~42. Those numbers are calibration outputs of this profile, not hardware
/// ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Number of streaming multiprocessors P.
    pub sm_count: usize,
    /// DRAM bandwidth, bytes/s.
    pub mem_bw: f64,
    /// Shared memory per SM, bytes.
    pub smem_per_sm: f64,
    /// Peak multiply throughput per precision, ops/s.
    pub peak_flops: BTreeMap<Precision, f64>,
    /// Fixed launch/scheduling overhead added per tile, seconds.
    pub launch_overhead: f64,
}

impl HardwareProfile {
    pub fn default_rtx4090() -> Self {
        let mut peak = BTreeMap::new();
        peak.insert(Precision::Fp16, 165.2e12);
        peak.insert(Precision::Int8, 330.4e12);
        peak.insert(Precision::Int4, 660.8e12);
        Self {
            sm_count: 128,
            mem_bw: 1.008e12,
            smem_per_sm: 100.0 * 1024.0,
            peak_flops: peak,
            // per-tile scheduling slot cost; keeps degenerate tiny tiles from
            // looking free without drowning the ~100ns of real tile work
            launch_overhead: 5.0e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sm_count == 0 || self.mem_bw <= 0.0 || self.smem_per_sm <= 0.0 {
            return Err(MxError::config("hardware profile fields must be positive"));
        }
        if self.launch_overhead < 0.0 {
            return Err(MxError::config("launch overhead must be >= 0"));
        }
        let mut last = 0.0;
        for p in [Precision::Fp16, Precision::Int8, Precision::Int4] {
            let f = self
                .peak_flops
                .get(&p)
                .copied()
                .ok_or_else(|| MxError::config(format!("profile missing peak flops for {p:?}")))?;
            if f <= 0.0 {
                return Err(MxError::config("peak flops must be positive"));
            }
            if f < last {
                return Err(MxError::config(
                    "peak flops must be non-decreasing as precision decreases",
                ));
            }
            last = f;
        }
        Ok(())
    }

    pub fn peak_for(&self, scheme: &QuantScheme) -> Result<f64> {
        let p = Precision::for_scheme(scheme);
        self.peak_flops
            .get(&p)
            .copied()
            .ok_or_else(|| MxError::config(format!("profile does not support precision {p:?}")))
    }
}

/// One GEMM problem `[m, n, k]`; `m` is the number of tokens routed to the
/// expert and may be zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GemmShape {
    pub fn new(m: usize, n: usize, k: usize) -> Self {
        Self { m, n, k }
    }

    pub fn weight_elements(&self) -> usize {
        self.n * self.k
    }
}

/// Bytes moved by one GEMM under a scheme: weights at their storage width
/// (metadata included), activations at `a_bits`, fp16 output.
fn gemm_bytes(shape: &GemmShape, scheme: &QuantScheme) -> Result<f64> {
    let w_bits = scheme.storage_bits_per_weight(shape.k)?;
    let weight = shape.n as f64 * shape.k as f64 * w_bits / 8.0;
    let act = shape.m as f64 * shape.k as f64 * scheme.a_bits as f64 / 8.0;
    let out = shape.m as f64 * shape.n as f64 * 2.0;
    Ok(weight + act + out)
}

/// FLOPs per byte moved. Zero-token GEMMs have zero intensity.
pub fn arithmetic_intensity(shape: &GemmShape, scheme: &QuantScheme) -> Result<f64> {
    if shape.n == 0 || shape.k == 0 {
        return Err(MxError::config("arithmetic intensity needs n,k > 0"));
    }
    if shape.m == 0 {
        return Ok(0.0);
    }
    let flops = 2.0 * shape.m as f64 * shape.n as f64 * shape.k as f64;
    Ok(flops / gemm_bytes(shape, scheme)?)
}

/// Roofline execution time: max of the compute and memory bounds. Zero-token
/// GEMMs take no time.
pub fn roofline_time(shape: &GemmShape, scheme: &QuantScheme, hw: &HardwareProfile) -> Result<f64> {
    if shape.m == 0 {
        return Ok(0.0);
    }
    let peak = hw.peak_for(scheme)?;
    let flops = 2.0 * shape.m as f64 * shape.n as f64 * shape.k as f64;
    let bytes = gemm_bytes(shape, scheme)?;
    Ok((flops / peak).max(bytes / hw.mem_bw))
}

/// Smallest token count m at which scheme `a` stops being faster than `b`
/// for an `[m, n, k]` GEMM, or `None` if no crossover occurs in `1..=limit`.
pub fn find_crossover(
    a: &QuantScheme,
    b: &QuantScheme,
    n: usize,
    k: usize,
    hw: &HardwareProfile,
    limit: usize,
) -> Result<Option<usize>> {
    for m in 1..=limit {
        let shape = GemmShape::new(m, n, k);
        let ta = roofline_time(&shape, a, hw)?;
        let tb = roofline_time(&shape, b, hw)?;
        if ta >= tb {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

/// GEMM shapes per (expert, linear block) from per-expert token counts:
/// gate/up are `[m_e, f, d]`, down is `[m_e, d, f]`.
pub fn derive_gemm_shapes(stats: &ActivationStats, spec: &MoEBlockSpec) -> Result<Vec<[GemmShape; NUM_LINEAR]>> {
    if stats.tokens_per_expert.len() != spec.num_experts {
        return Err(MxError::data(format!(
            "stats cover {} experts, spec has {}",
            stats.tokens_per_expert.len(),
            spec.num_experts
        )));
    }
    let (d, f) = (spec.hidden, spec.intermediate);
    Ok(stats
        .tokens_per_expert
        .iter()
        .map(|&m| {
            let m = m as usize;
            [
                GemmShape::new(m, f, d),
                GemmShape::new(m, f, d),
                GemmShape::new(m, d, f),
            ]
        })
        .collect())
}

/// One CTA-level tile configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileConfig {
    pub tile_m: usize,
    pub tile_n: usize,
    pub tile_k: usize,
    pub warps: usize,
    /// Reduction-dimension split factor; 1 = no slicing.
    pub slice_k: usize,
}

impl TileConfig {
    pub fn key(&self) -> String {
        format!(
            "m{}n{}k{}w{}s{}",
            self.tile_m, self.tile_n, self.tile_k, self.warps, self.slice_k
        )
    }
}

/// Enumeration bounds for candidate tiles. These are heuristic: the real
/// candidate set of a kernel generator is hardware- and implementation-
/// specific, so the bounds are exposed rather than hard-coded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileBounds {
    pub tile_m: Vec<usize>,
    pub tile_n: Vec<usize>,
    pub tile_k: Vec<usize>,
    pub warps: Vec<usize>,
    /// Shared-memory pipeline stages (double buffering by default).
    pub stages: usize,
}

impl Default for TileBounds {
    fn default() -> Self {
        Self {
            tile_m: vec![16, 32, 64, 128],
            tile_n: vec![32, 64, 128, 256],
            tile_k: vec![32, 64, 128, 256],
            warps: vec![4, 8, 16],
            stages: 2,
        }
    }
}

/// Shared-memory footprint of one tile: staged activation and weight
/// fragments at their storage widths.
pub fn smem_usage(config: &TileConfig, scheme: &QuantScheme, stages: usize) -> f64 {
    let a_bytes = scheme.a_bits as f64 / 8.0;
    let w_bytes = scheme.w_bits as f64 / 8.0;
    stages as f64
        * (config.tile_m as f64 * config.tile_k as f64 * a_bytes
            + config.tile_k as f64 * config.tile_n as f64 * w_bytes)
}

fn group_allows(group: i64, tile_k: usize) -> bool {
    group <= 0 || (tile_k <= group as usize && (group as usize).is_multiple_of(tile_k))
}

/// Enumerate tile configurations valid for a scheme: power-of-two dims within
/// bounds, shared-memory fit, and quantization-group alignment (a grouped
/// scheme cannot use a tile_k that straddles group boundaries, so tile_k must
/// divide the group size).
pub fn tile_candidates_with_bounds(
    scheme: &QuantScheme,
    hw: &HardwareProfile,
    bounds: &TileBounds,
) -> Result<Vec<TileConfig>> {
    let mut out = Vec::new();
    for &tm in &bounds.tile_m {
        for &tn in &bounds.tile_n {
            for &tk in &bounds.tile_k {
                if !group_allows(scheme.w_group, tk) || !group_allows(scheme.a_group, tk) {
                    continue;
                }
                for &w in &bounds.warps {
                    let cfg = TileConfig {
                        tile_m: tm,
                        tile_n: tn,
                        tile_k: tk,
                        warps: w,
                        slice_k: 1,
                    };
                    if smem_usage(&cfg, scheme, bounds.stages) <= hw.smem_per_sm {
                        out.push(cfg);
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(MxError::config(format!(
            "no feasible tile candidates for scheme {scheme}"
        )));
    }
    Ok(out)
}

pub fn tile_candidates(scheme: &QuantScheme, hw: &HardwareProfile) -> Result<Vec<TileConfig>> {
    tile_candidates_with_bounds(scheme, hw, &TileBounds::default())
}

/// Warp-count utilization factors (plumbing constants, not profiled).
pub fn warp_utilization(warps: usize) -> f64 {
    match warps {
        w if w >= 16 => 1.0,
        w if w >= 8 => 0.9,
        _ => 0.7,
    }
}

/// Whether micro-kernels run specialized per scheme or through one unified
/// kernel body. The unified path pays a throughput penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Specialized,
    Unified,
}

/// Throughput retained by a unified kernel relative to a specialized one.
/// Grouped schemes lose more: the unified inner loop must honor group
/// boundaries. Derived from measured 1070.5 -> 929.2 (per-channel) and
/// 667.3 -> 412.0 (group-128) TOPS ratios.
pub fn unified_retention(scheme: &QuantScheme) -> f64 {
    if scheme.w_group > 0 || scheme.a_group > 0 {
        412.0268 / 667.3349
    } else {
        929.1997 / 1070.5303
    }
}

/// Fraction of a tile's cost added per extra k-slice for the final
/// cross-slice reduction.
pub const SLICE_K_OVERHEAD: f64 = 0.05;

/// Analytical per-task cost of one tile.
///
/// Base cost is `max(compute, memory) + launch_overhead` for the full tile;
/// the unified-kernel mode slows the tile down by the measured retention
/// factor, and a k-sliced tile splits the work across `slice_k` tasks, each
/// paying the reduction overhead share.
pub fn tile_cost_with_mode(
    config: &TileConfig,
    scheme: &QuantScheme,
    hw: &HardwareProfile,
    mode: KernelMode,
) -> Result<f64> {
    let peak = hw.peak_for(scheme)? * warp_utilization(config.warps);
    let flops = 2.0 * config.tile_m as f64 * config.tile_n as f64 * config.tile_k as f64;
    let w_bits = scheme.storage_bits_per_weight(config.tile_k)?;
    let bytes = config.tile_n as f64 * config.tile_k as f64 * w_bits / 8.0
        + config.tile_m as f64 * config.tile_k as f64 * scheme.a_bits as f64 / 8.0
        + config.tile_m as f64 * config.tile_n as f64 * 2.0;
    let mut work = (flops / peak).max(bytes / hw.mem_bw);
    if mode == KernelMode::Unified {
        work /= unified_retention(scheme);
    }
    let base = work + hw.launch_overhead;
    let s = config.slice_k.max(1) as f64;
    Ok(base * (1.0 + SLICE_K_OVERHEAD * (s - 1.0)) / s)
}

pub fn tile_cost(config: &TileConfig, scheme: &QuantScheme, hw: &HardwareProfile) -> Result<f64> {
    tile_cost_with_mode(config, scheme, hw, KernelMode::Specialized)
}

/// Per-(scheme, tile) cost table. Built analytically by default; a measured
/// table loaded from JSON drops in through the same interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileCostTable {
    pub mode: KernelMode,
    /// Cost in seconds keyed by scheme notation, then tile key.
    pub entries: BTreeMap<String, BTreeMap<String, f64>>,
}

impl TileCostTable {
    /// Profile every candidate tile for every scheme with the analytic model.
    pub fn build(schemes: &[QuantScheme], hw: &HardwareProfile, mode: KernelMode) -> Result<Self> {
        Self::build_with_bounds(schemes, hw, mode, &TileBounds::default())
    }

    pub fn build_with_bounds(
        schemes: &[QuantScheme],
        hw: &HardwareProfile,
        mode: KernelMode,
        bounds: &TileBounds,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for scheme in schemes {
            let mut per_scheme = BTreeMap::new();
            for cfg in tile_candidates_with_bounds(scheme, hw, bounds)? {
                let cost = tile_cost_with_mode(&cfg, scheme, hw, mode)?;
                per_scheme.insert(cfg.key(), cost);
            }
            entries.insert(scheme.notation(), per_scheme);
        }
        let table = Self { mode, entries };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for per_scheme in self.entries.values() {
            if per_scheme.values().any(|&c| c <= 0.0 || !c.is_finite()) {
                return Err(MxError::data("tile costs must be positive and finite"));
            }
        }
        Ok(())
    }

    /// Cost of one task under a possibly k-sliced tile. The table stores
    /// unsliced costs; slicing divides the work and adds reduction overhead.
    pub fn task_cost(&self, scheme: &QuantScheme, config: &TileConfig) -> Result<f64> {
        let base_key = TileConfig {
            slice_k: 1,
            ..*config
        }
        .key();
        let base = self
            .entries
            .get(&scheme.notation())
            .and_then(|m| m.get(&base_key))
            .copied()
            .ok_or_else(|| {
                MxError::config(format!(
                    "cost table has no entry for {} / {}",
                    scheme.notation(),
                    base_key
                ))
            })?;
        let s = config.slice_k.max(1) as f64;
        Ok(base * (1.0 + SLICE_K_OVERHEAD * (s - 1.0)) / s)
    }

    pub fn candidates(&self, scheme: &QuantScheme) -> Result<Vec<TileConfig>> {
        let per_scheme = self.entries.get(&scheme.notation()).ok_or_else(|| {
            MxError::config(format!("cost table has no scheme {}", scheme.notation()))
        })?;
        let mut out = Vec::new();
        for key in per_scheme.keys() {
            out.push(parse_tile_key(key)?);
        }
        Ok(out)
    }
}

fn parse_tile_key(key: &str) -> Result<TileConfig> {
    let err = || MxError::data(format!("bad tile key `{key}`"));
    let mut nums = Vec::new();
    let mut cur = String::new();
    for ch in key.chars() {
        if ch.is_ascii_digit() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                nums.push(cur.parse::<usize>().map_err(|_| err())?);
                cur.clear();
            }
        }
    }
    if !cur.is_empty() {
        nums.push(cur.parse::<usize>().map_err(|_| err())?);
    }
    if nums.len() != 5 {
        return Err(err());
    }
    Ok(TileConfig {
        tile_m: nums[0],
        tile_n: nums[1],
        tile_k: nums[2],
        warps: nums[3],
        slice_k: nums[4],
    })
}

/// Number of tile tasks a GEMM decomposes into under a tile config.
pub fn tile_count(shape: &GemmShape, config: &TileConfig) -> usize {
    if shape.m == 0 {
        return 0;
    }
    shape.m.div_ceil(config.tile_m) * shape.n.div_ceil(config.tile_n) * config.slice_k.max(1)
}

/// MoE block execution time estimate: serial time of all tiles divided by
/// the SM count.
pub fn estimate_block_time(
    shapes: &[[GemmShape; NUM_LINEAR]],
    scheme_of: &[Vec<QuantScheme>],
    tile_of: &[Vec<TileConfig>],
    costs: &TileCostTable,
    hw: &HardwareProfile,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, blocks) in shapes.iter().enumerate() {
        for (j, shape) in blocks.iter().enumerate() {
            let scheme = &scheme_of[i][j];
            let cfg = &tile_of[i][j];
            let n_t = tile_count(shape, cfg);
            if n_t == 0 {
                continue;
            }
            total += n_t as f64 * costs.task_cost(scheme, cfg)?;
        }
    }
    Ok(total / hw.sm_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw() -> HardwareProfile {
        HardwareProfile::default_rtx4090()
    }

    fn scheme(s: &str) -> QuantScheme {
        QuantScheme::parse(s).unwrap()
    }

    #[test]
    fn profile_validates() {
        hw().validate().unwrap();
        let mut bad = hw();
        bad.peak_flops.insert(Precision::Int4, 1.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn intensity_approaches_m_for_fp16() {
        let shape = GemmShape::new(64, 4096, 4096);
        let ai = arithmetic_intensity(&shape, &QuantScheme::identity()).unwrap();
        assert!((ai - 64.0).abs() / 64.0 < 0.05, "ai {ai}");
        let zero = arithmetic_intensity(&GemmShape::new(0, 4096, 4096), &QuantScheme::identity())
            .unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn halving_weight_bits_nearly_doubles_intensity() {
        let shape = GemmShape::new(4, 4096, 4096);
        let w8 = scheme("w8a16_g-1_sym");
        let w4 = scheme("w4a16_g-1_sym");
        let r = arithmetic_intensity(&shape, &w4).unwrap() / arithmetic_intensity(&shape, &w8).unwrap();
        assert!(r > 1.8 && r < 2.05, "ratio {r}");
    }

    #[test]
    fn roofline_limits() {
        let h = hw();
        let w4 = scheme("w4a16_g-1_asym");
        // m = 1: memory bound, dominated by weight bytes.
        let t = roofline_time(&GemmShape::new(1, 4096, 4096), &w4, &h).unwrap();
        let weight_bytes =
            4096.0 * 4096.0 * w4.storage_bits_per_weight(4096).unwrap() / 8.0;
        assert!((t - weight_bytes / h.mem_bw) / t < 0.01);
        // huge m: compute bound.
        let m = 1 << 20;
        let t = roofline_time(&GemmShape::new(m, 4096, 4096), &w4, &h).unwrap();
        let flops = 2.0 * m as f64 * 4096.0 * 4096.0;
        let peak = h.peak_flops[&Precision::Fp16];
        assert!((t - flops / peak).abs() / t < 0.01);
    }

    #[test]
    fn crossovers_match_documented_profile() {
        let h = hw();
        let c1 = find_crossover(
            &scheme("w4a16_g-1_asym"),
            &scheme("w8a8_g-1_sym"),
            4096,
            4096,
            &h,
            4096,
        )
        .unwrap()
        .unwrap();
        let c2 = find_crossover(
            &scheme("w2a16_g128_asym"),
            &scheme("w4a4_g-1_sym"),
            4096,
            4096,
            &h,
            4096,
        )
        .unwrap()
        .unwrap();
        assert!((62..=104).contains(&c1), "w4a16/w8a8 crossover {c1}");
        assert!((31..=53).contains(&c2), "w2a16/w4a4 crossover {c2}");
        assert!(c2 < c1);
    }

    #[test]
    fn shapes_from_stats() {
        let spec = MoEBlockSpec::new(60, 4, 2048, 2816).unwrap();
        let mut counts = vec![0u64; 60];
        counts[0] = 7;
        let stats = ActivationStats {
            tokens_per_expert: counts,
            total_tokens: 512,
        };
        let shapes = derive_gemm_shapes(&stats, &spec).unwrap();
        assert_eq!(shapes.len(), 60);
        assert_eq!(shapes[0][0], GemmShape::new(7, 2816, 2048));
        assert_eq!(shapes[0][2], GemmShape::new(7, 2048, 2816));
        assert_eq!(shapes[1][0].m, 0);
        let total_m: usize = shapes.iter().map(|b| b[0].m).sum();
        assert_eq!(total_m, 7);
    }

    #[test]
    fn grouped_scheme_restricts_tile_k() {
        let h = hw();
        let cands = tile_candidates(&scheme("w4a4_g128_sym"), &h).unwrap();
        assert!(cands.iter().all(|c| c.tile_k <= 128 && 128 % c.tile_k == 0));
        assert!(!cands.is_empty());
        let free = tile_candidates(&scheme("w4a4_g-1_sym"), &h).unwrap();
        assert!(free.iter().any(|c| c.tile_k == 256));
    }

    #[test]
    fn candidates_fit_shared_memory_for_all_defaults() {
        let h = hw();
        for s in QuantScheme::default_set() {
            let cands = tile_candidates(&s, &h).unwrap();
            assert!(!cands.is_empty(), "no candidates for {s}");
            for c in cands {
                assert!(smem_usage(&c, &s, TileBounds::default().stages) <= h.smem_per_sm);
            }
        }
    }

    #[test]
    fn compute_bound_cost_scales_with_tile_k() {
        // make memory free so tiles are compute bound
        let mut h = hw();
        h.launch_overhead = 0.0;
        h.mem_bw = 1e20;
        let s = scheme("w16a16_g-1_sym");
        let base = TileConfig {
            tile_m: 128,
            tile_n: 128,
            tile_k: 64,
            warps: 16,
            slice_k: 1,
        };
        let double = TileConfig {
            tile_k: 128,
            ..base
        };
        let c1 = tile_cost(&base, &s, &h).unwrap();
        let c2 = tile_cost(&double, &s, &h).unwrap();
        assert!((c2 / c1 - 2.0).abs() < 1e-12, "ratio {}", c2 / c1);
        assert!(c1 > 0.0);
    }

    #[test]
    fn unified_mode_is_slower_and_ordering_matches_measurements() {
        let h = hw();
        let cfg = TileConfig {
            tile_m: 128,
            tile_n: 128,
            tile_k: 64,
            warps: 16,
            slice_k: 1,
        };
        for s in [scheme("w4a4_g-1_sym"), scheme("w4a4_g128_sym")] {
            let spec_cost = tile_cost_with_mode(&cfg, &s, &h, KernelMode::Specialized).unwrap();
            let uni_cost = tile_cost_with_mode(&cfg, &s, &h, KernelMode::Unified).unwrap();
            assert!(spec_cost < uni_cost);
        }
        // group-128 retains less throughput than per-channel
        assert!(
            unified_retention(&scheme("w4a4_g128_sym"))
                < unified_retention(&scheme("w4a4_g-1_sym"))
        );
    }

    #[test]
    fn sliced_task_cost_divides_with_overhead() {
        let h = hw();
        let s = scheme("w4a16_g-1_asym");
        let table = TileCostTable::build(&[s], &h, KernelMode::Specialized).unwrap();
        let base = TileConfig {
            tile_m: 16,
            tile_n: 32,
            tile_k: 32,
            warps: 4,
            slice_k: 1,
        };
        let sliced = TileConfig { slice_k: 2, ..base };
        let c1 = table.task_cost(&s, &base).unwrap();
        let c2 = table.task_cost(&s, &sliced).unwrap();
        assert!((c2 - c1 * 1.05 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn estimate_serializes_over_sms() {
        let mut h = hw();
        h.sm_count = 1;
        let s = scheme("w8a8_g-1_sym");
        let table = TileCostTable::build(&[s], &h, KernelMode::Specialized).unwrap();
        let cfg = table.candidates(&s).unwrap()[0];
        let shapes = vec![[
            GemmShape::new(64, 256, 256),
            GemmShape::new(64, 256, 256),
            GemmShape::new(0, 256, 256),
        ]];
        let schemes = vec![vec![s; 3]];
        let tiles = vec![vec![cfg; 3]];
        let t = estimate_block_time(&shapes, &schemes, &tiles, &table, &h).unwrap();
        let per_tile = table.task_cost(&s, &cfg).unwrap();
        let n_t = tile_count(&shapes[0][0], &cfg) + tile_count(&shapes[0][1], &cfg);
        assert!((t - n_t as f64 * per_tile).abs() < 1e-15);
        // zero-token block contributed nothing; P divides the serial time
        let mut h128 = h.clone();
        h128.sm_count = 128;
        let t128 = estimate_block_time(&shapes, &schemes, &tiles, &table, &h128).unwrap();
        assert!((t128 - t / 128.0).abs() < 1e-18);
    }

    #[test]
    fn cost_table_json_round_trip() {
        let h = hw();
        let schemes = QuantScheme::default_set();
        let table = TileCostTable::build(&schemes, &h, KernelMode::Specialized).unwrap();
        let j = serde_json::to_string(&table).unwrap();
        let back: TileCostTable = serde_json::from_str(&j).unwrap();
        assert_eq!(back, table);
        for s in &schemes {
            assert!(!back.candidates(s).unwrap().is_empty());
        }
    }
}
