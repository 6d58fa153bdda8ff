//! File-based pipeline stages: model persistence, calibration outputs,
//! problem assembly, plan/schedule serialization and the report. The CLI and
//! the Python bindings are thin wrappers over this module, so a manifest plus
//! seeds reproduces byte-identical artifacts no matter the entry point.

use crate::alloc::{
    self, solve, uniform_plan, AllocationPlan, AllocationProblem, Granularity,
};
use crate::cost::{
    find_crossover, roofline_time, GemmShape, HardwareProfile, KernelMode, TileCostTable,
};
use crate::error::{MxError, Result};
use crate::kernel_plan::{
    apply_slice_k, build_tasks, schedule_greedy, simulate_execution, unify_resources,
    FusedKernelConfig, Schedule, SimReport, TileTask,
};
use crate::moe::{
    collect_activation_stats, gen_tokens, generate_model, ActivationStats, ExpertWeights,
    GeneratorConfig, MoEBlockSpec, MoEModel, LINEAR_NAMES, NUM_LINEAR,
};
use crate::quant::QuantScheme;
use crate::sensitivity::{build_sensitivity_table, SensitivityConfig, SensitivityTable};
use crate::tensor_io;
use crate::cost::TileConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| MxError::data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

/// On-disk model description; tensors live next to it in MXT1 files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub spec: MoEBlockSpec,
    pub generator: GeneratorConfig,
}

fn expert_tensor_name(expert: usize, block: usize) -> String {
    format!("expert_{expert}_{}.mxt", LINEAR_NAMES[block])
}

/// Write a model directory: `manifest.json`, `router.mxt`, `router_bias.mxt`
/// and one MXT1 tensor per linear block.
pub fn save_model(dir: &Path, model: &MoEModel, generator: &GeneratorConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("manifest.json"),
        &ModelManifest {
            spec: model.spec,
            generator: generator.clone(),
        },
    )?;
    tensor_io::write_matrix(&dir.join("router.mxt"), &model.router)?;
    tensor_io::write_vector(&dir.join("router_bias.mxt"), &model.router_bias)?;
    for (e, w) in model.experts.iter().enumerate() {
        for j in 0..NUM_LINEAR {
            tensor_io::write_matrix(&dir.join(expert_tensor_name(e, j)), w.block(j))?;
        }
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(MoEModel, ModelManifest)> {
    let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
    let spec = manifest.spec;
    let router = tensor_io::read_matrix(&dir.join("router.mxt"))?;
    let router_bias = tensor_io::read_vector(&dir.join("router_bias.mxt"))?;
    let mut experts = Vec::with_capacity(spec.num_experts);
    for e in 0..spec.num_experts {
        let gate = tensor_io::read_matrix(&dir.join(expert_tensor_name(e, 0)))?;
        let up = tensor_io::read_matrix(&dir.join(expert_tensor_name(e, 1)))?;
        let down = tensor_io::read_matrix(&dir.join(expert_tensor_name(e, 2)))?;
        experts.push(ExpertWeights { gate, up, down });
    }
    let model = MoEModel {
        spec,
        experts,
        router,
        router_bias,
    };
    model.validate()?;
    Ok((model, manifest))
}

/// Generate and persist a synthetic model; returns the model for callers
/// that keep going in-process.
pub fn cmd_gen_model(dir: &Path, generator: &GeneratorConfig) -> Result<MoEModel> {
    let model = generate_model(generator)?;
    save_model(dir, &model, generator)?;
    Ok(model)
}

/// Serialize a routing trace as a 2-D MXT1 tensor with one row per token:
/// `[id_0, w_0, id_1, w_1, ...]` for the top-k pairs.
pub fn save_trace(path: &Path, trace: &crate::moe::RoutingTrace) -> Result<()> {
    let top_k = trace.tokens.first().map_or(0, |p| p.len());
    if trace.tokens.iter().any(|p| p.len() != top_k) {
        return Err(MxError::data("trace rows have unequal top_k"));
    }
    let mut data = Vec::with_capacity(trace.tokens.len() * top_k * 2);
    for pairs in &trace.tokens {
        for &(e, w) in pairs {
            data.push(e as f64);
            data.push(w);
        }
    }
    let m = crate::matrix::Matrix::new(trace.tokens.len(), top_k * 2, data)?;
    tensor_io::write_matrix(path, &m)
}

pub fn load_trace(path: &Path) -> Result<crate::moe::RoutingTrace> {
    let m = tensor_io::read_matrix(path)?;
    if m.cols % 2 != 0 {
        return Err(MxError::data("trace tensor must have (id, weight) column pairs"));
    }
    let mut tokens = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let row = m.row(r);
        let mut pairs = Vec::with_capacity(m.cols / 2);
        for c in (0..m.cols).step_by(2) {
            let id = row[c];
            if id < 0.0 || id.fract() != 0.0 {
                return Err(MxError::data(format!("bad expert id {id} in trace")));
            }
            pairs.push((id as usize, row[c + 1]));
        }
        tokens.push(pairs);
    }
    Ok(crate::moe::RoutingTrace { tokens })
}

// ---------------------------------------------------------------------------
// Calibration files
// ---------------------------------------------------------------------------

/// `stats.json`: routing statistics plus the block spec they were collected
/// on, which later stages use to derive GEMM shapes and parameter counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub spec: MoEBlockSpec,
    pub tokens_per_expert: Vec<u64>,
    pub total_tokens: u64,
}

impl StatsFile {
    pub fn stats(&self) -> ActivationStats {
        ActivationStats {
            tokens_per_expert: self.tokens_per_expert.clone(),
            total_tokens: self.total_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.tokens_per_expert.len() != self.spec.num_experts {
            return Err(MxError::data("stats expert count does not match spec"));
        }
        let sum: u64 = self.tokens_per_expert.iter().sum();
        if sum != self.total_tokens * self.spec.top_k as u64 {
            return Err(MxError::data(format!(
                "stats violate conservation: counts sum {sum}, tokens {} x top_k {}",
                self.total_tokens, self.spec.top_k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Run calibration in memory: generate token batches, route them, collect
/// activation statistics and build the sensitivity table.
pub fn calibrate(
    model: &MoEModel,
    schemes: &[QuantScheme],
    settings: &CalibrationSettings,
) -> Result<(SensitivityTable, StatsFile)> {
    if settings.samples == 0 || settings.seq_len == 0 {
        return Err(MxError::config("calibration needs samples > 0 and seq_len > 0"));
    }
    let all = gen_tokens(
        model.spec.hidden,
        settings.samples * settings.seq_len,
        settings.seed,
    );
    let mut calib_set = Vec::with_capacity(settings.samples);
    for s in 0..settings.samples {
        let rows: Vec<usize> = (s * settings.seq_len..(s + 1) * settings.seq_len).collect();
        calib_set.push(all.gather_rows(&rows));
    }
    let mut stats = ActivationStats {
        tokens_per_expert: vec![0; model.spec.num_experts],
        total_tokens: 0,
    };
    for x in &calib_set {
        let trace = model.route(x)?;
        stats.merge(&collect_activation_stats(&trace, model.spec.num_experts)?);
    }
    let config = SensitivityConfig {
        seed: settings.seed,
        ..SensitivityConfig::default()
    };
    let table = build_sensitivity_table(model, &calib_set, schemes, &config)?;
    let stats_file = StatsFile {
        spec: model.spec,
        tokens_per_expert: stats.tokens_per_expert,
        total_tokens: stats.total_tokens,
    };
    stats_file.validate()?;
    Ok((table, stats_file))
}

/// Calibrate a model directory and write `sensitivity.json` + `stats.json`.
/// Optionally also persists the routing trace of the whole calibration
/// token stream.
pub fn cmd_calibrate(
    model_dir: &Path,
    out_sensitivity: &Path,
    out_stats: &Path,
    schemes: &[QuantScheme],
    settings: &CalibrationSettings,
) -> Result<(SensitivityTable, StatsFile)> {
    cmd_calibrate_with_trace(model_dir, out_sensitivity, out_stats, None, schemes, settings)
}

pub fn cmd_calibrate_with_trace(
    model_dir: &Path,
    out_sensitivity: &Path,
    out_stats: &Path,
    out_trace: Option<&Path>,
    schemes: &[QuantScheme],
    settings: &CalibrationSettings,
) -> Result<(SensitivityTable, StatsFile)> {
    let (model, _) = load_model(model_dir)?;
    let (table, stats) = calibrate(&model, schemes, settings)?;
    write_json(out_sensitivity, &table)?;
    write_json(out_stats, &stats)?;
    if let Some(path) = out_trace {
        let tokens = gen_tokens(
            model.spec.hidden,
            settings.samples * settings.seq_len,
            settings.seed,
        );
        save_trace(path, &model.route(&tokens)?)?;
    }
    Ok((table, stats))
}

// ---------------------------------------------------------------------------
// Allocation
// ---------------------------------------------------------------------------

/// Convert an average bits-per-weight budget into bytes for a spec.
pub fn budget_bytes_from_bits(spec: &MoEBlockSpec, budget_bits: f64) -> f64 {
    budget_bits * spec.total_params() as f64 / 8.0
}

#[derive(Debug, Clone)]
pub struct AllocationSettings {
    pub budget_bits: f64,
    pub r: f64,
    pub granularity: Granularity,
    pub kernel_mode: KernelMode,
    pub exclude_experts: BTreeSet<usize>,
}

impl Default for AllocationSettings {
    fn default() -> Self {
        Self {
            budget_bits: 5.0,
            r: 0.75,
            granularity: Granularity::Linear,
            kernel_mode: KernelMode::Specialized,
            exclude_experts: BTreeSet::new(),
        }
    }
}

/// Assemble an [`AllocationProblem`] from calibration outputs.
pub fn build_problem(
    sensitivity: SensitivityTable,
    stats: &StatsFile,
    hw: HardwareProfile,
    settings: &AllocationSettings,
) -> Result<AllocationProblem> {
    stats.validate()?;
    let shapes = crate::cost::derive_gemm_shapes(&stats.stats(), &stats.spec)?;
    let costs = TileCostTable::build(&sensitivity.schemes, &hw, settings.kernel_mode)?;
    let problem = AllocationProblem {
        sensitivity,
        shapes,
        costs,
        budget_bytes: budget_bytes_from_bits(&stats.spec, settings.budget_bits),
        r: settings.r,
        hw,
        granularity: settings.granularity,
        exclude_experts: settings.exclude_experts.clone(),
    };
    problem.validate()?;
    Ok(problem)
}

/// Table-6-style cell: scheme of one linear block in readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeCell {
    pub w_act: String,
    pub w_gsize: i64,
    pub a_gsize: i64,
}

impl SchemeCell {
    fn from_scheme(s: &QuantScheme) -> Self {
        Self {
            w_act: format!("{}-{}", s.w_bits, s.a_bits),
            w_gsize: s.w_group,
            a_gsize: s.a_group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSchemeRow {
    pub gate: SchemeCell,
    pub up: SchemeCell,
    pub down: SchemeCell,
}

/// `plan.json`: the chosen allocation plus everything the schedule stage
/// needs (schemes, tiles, shapes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub r: f64,
    pub budget_bytes: f64,
    pub granularity: Granularity,
    pub kernel_mode: KernelMode,
    pub schemes: Vec<QuantScheme>,
    pub experts: Vec<ExpertSchemeRow>,
    pub scheme_of: Vec<Vec<usize>>,
    pub tile_of: Vec<Vec<TileConfig>>,
    pub shapes: Vec<[GemmShape; NUM_LINEAR]>,
    pub predicted_l: f64,
    pub predicted_t: f64,
    pub objective: f64,
    pub memory_used: f64,
    pub average_bits: f64,
}

pub fn plan_file_from(plan: &AllocationPlan, problem: &AllocationProblem, kernel_mode: KernelMode) -> PlanFile {
    let schemes = problem.schemes().to_vec();
    let experts = plan
        .scheme_of
        .iter()
        .map(|row| ExpertSchemeRow {
            gate: SchemeCell::from_scheme(&schemes[row[0]]),
            up: SchemeCell::from_scheme(&schemes[row[1]]),
            down: SchemeCell::from_scheme(&schemes[row[2]]),
        })
        .collect();
    let total_params: f64 = problem
        .shapes
        .iter()
        .flat_map(|b| b.iter())
        .map(|s| s.weight_elements() as f64)
        .sum();
    PlanFile {
        r: problem.r,
        budget_bytes: problem.budget_bytes,
        granularity: problem.granularity,
        kernel_mode,
        schemes,
        experts,
        scheme_of: plan.scheme_of.clone(),
        tile_of: plan.tile_of.clone(),
        shapes: problem.shapes.clone(),
        predicted_l: plan.predicted_l,
        predicted_t: plan.predicted_t,
        objective: plan.objective,
        memory_used: plan.memory_used,
        average_bits: plan.memory_used * 8.0 / total_params,
    }
}

/// Solve the allocation problem from calibration files and write `plan.json`.
pub fn cmd_allocate(
    sensitivity_path: &Path,
    stats_path: &Path,
    hw: HardwareProfile,
    settings: &AllocationSettings,
    out_plan: &Path,
) -> Result<PlanFile> {
    let sensitivity: SensitivityTable = read_json(sensitivity_path)?;
    sensitivity.validate()?;
    let stats: StatsFile = read_json(stats_path)?;
    let problem = build_problem(sensitivity, &stats, hw, settings)?;
    let plan = solve(&problem)?;
    let file = plan_file_from(&plan, &problem, settings.kernel_mode);
    write_json(out_plan, &file)?;
    Ok(file)
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCell {
    pub owner: (usize, usize),
    pub scheme: QuantScheme,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmRow {
    pub tasks: Vec<TaskCell>,
}

/// `schedule.json`: ordered tasks per SM plus the makespan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub sm: Vec<SmRow>,
    pub makespan: f64,
}

/// A fully expanded execution plan for one MoE block.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    pub fused: FusedKernelConfig,
    pub tasks: Vec<TileTask>,
    pub schedule: Schedule,
    pub sim: SimReport,
    /// Serial tile time divided by SM count, recomputed on the fused tiles.
    pub estimated_t: f64,
}

/// Fuse the plan's micro-kernels, expand tile tasks, schedule and simulate.
pub fn plan_execution(plan: &PlanFile, hw: &HardwareProfile) -> Result<ExecutionPlan> {
    let costs = TileCostTable::build(&plan.schemes, hw, plan.kernel_mode)?;
    // One micro-kernel per distinct scheme; the allocator tile of the first
    // block using it seeds resource unification.
    let mut chosen: Vec<(QuantScheme, TileConfig)> = Vec::new();
    for (i, row) in plan.scheme_of.iter().enumerate() {
        for (j, &k) in row.iter().enumerate() {
            if plan.shapes[i][j].m == 0 {
                continue;
            }
            let scheme = plan.schemes[k];
            if !chosen.iter().any(|(s, _)| *s == scheme) {
                chosen.push((scheme, plan.tile_of[i][j]));
            }
        }
    }
    if chosen.is_empty() {
        // No routed tokens at all: empty schedule.
        let schedule = Schedule {
            per_sm: vec![Vec::new(); hw.sm_count],
            makespan: 0.0,
        };
        let sim = simulate_execution(&schedule, &[]);
        return Ok(ExecutionPlan {
            fused: FusedKernelConfig {
                members: Vec::new(),
                unified_warps: 0,
                unified_smem: 0.0,
            },
            tasks: Vec::new(),
            schedule,
            sim,
            estimated_t: 0.0,
        });
    }
    let fused = apply_slice_k(&unify_resources(&chosen, &costs, hw)?);
    let plan_core = AllocationPlan {
        scheme_of: plan.scheme_of.clone(),
        tile_of: plan.tile_of.clone(),
        predicted_l: plan.predicted_l,
        predicted_t: plan.predicted_t,
        objective: plan.objective,
        memory_used: plan.memory_used,
    };
    let tasks = build_tasks(&plan_core, &plan.shapes, &plan.schemes, &fused, &costs)?;
    let schedule = schedule_greedy(&tasks, hw.sm_count)?;
    let sim = simulate_execution(&schedule, &tasks);
    let estimated_t =
        tasks.iter().map(|t| t.cost).sum::<f64>() / hw.sm_count as f64;
    Ok(ExecutionPlan {
        fused,
        tasks,
        schedule,
        sim,
        estimated_t,
    })
}

pub fn schedule_file_from(exec: &ExecutionPlan) -> ScheduleFile {
    let sm = exec
        .schedule
        .per_sm
        .iter()
        .map(|list| SmRow {
            tasks: list
                .iter()
                .map(|&idx| TaskCell {
                    owner: exec.tasks[idx].owner,
                    scheme: exec.tasks[idx].scheme,
                    cost: exec.tasks[idx].cost,
                })
                .collect(),
        })
        .collect();
    ScheduleFile {
        sm,
        makespan: exec.schedule.makespan,
    }
}

/// Schedule a plan file onto the hardware and write `schedule.json`.
pub fn cmd_schedule(plan_path: &Path, hw: HardwareProfile, out_schedule: &Path) -> Result<(PlanFile, ExecutionPlan)> {
    let plan: PlanFile = read_json(plan_path)?;
    let exec = plan_execution(&plan, &hw)?;
    write_json(out_schedule, &schedule_file_from(&exec))?;
    Ok((plan, exec))
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub average_bits: Option<f64>,
    pub feasible: bool,
    pub predicted_l: f64,
    pub predicted_t: f64,
    pub objective: f64,
    /// Speedup over the all-fp16 plan, T(fp16) / T(plan).
    pub throughput_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

/// Compare every uniform scheme against the mixed plan. Uniform plans over
/// budget are listed but flagged infeasible.
pub fn build_report(problem: &AllocationProblem) -> Result<(Report, AllocationPlan)> {
    let schemes = problem.schemes().to_vec();
    let identity_k = schemes
        .iter()
        .position(|s| s.is_identity())
        .ok_or_else(|| MxError::config("scheme set must include the identity"))?;
    let t_fp16 = uniform_plan(problem, identity_k)?.predicted_t;
    let ratio = |t: f64| if t > 0.0 { t_fp16 / t } else { 1.0 };
    let mut rows = Vec::new();
    for (k, scheme) in schemes.iter().enumerate() {
        let plan = uniform_plan(problem, k)?;
        let params: f64 = problem
            .shapes
            .iter()
            .flat_map(|b| b.iter())
            .map(|s| s.weight_elements() as f64)
            .sum();
        rows.push(ReportRow {
            name: scheme.notation(),
            average_bits: Some(plan.memory_used * 8.0 / params),
            feasible: plan.memory_used <= problem.budget_bytes,
            predicted_l: plan.predicted_l,
            predicted_t: plan.predicted_t,
            objective: plan.objective,
            throughput_ratio: ratio(plan.predicted_t),
        });
    }
    let mixed = solve(problem)?;
    let params: f64 = problem
        .shapes
        .iter()
        .flat_map(|b| b.iter())
        .map(|s| s.weight_elements() as f64)
        .sum();
    rows.push(ReportRow {
        name: "mixed".to_string(),
        average_bits: Some(mixed.memory_used * 8.0 / params),
        feasible: true,
        predicted_l: mixed.predicted_l,
        predicted_t: mixed.predicted_t,
        objective: mixed.objective,
        throughput_ratio: ratio(mixed.predicted_t),
    });
    Ok((Report { rows }, mixed))
}

/// Render the report as a fixed-width text table.
pub fn render_report(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>9} {:>10} {:>12} {:>12} {:>12} {:>10}\n",
        "plan", "avg bits", "feasible", "L", "T (s)", "objective", "speedup"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<18} {:>9.3} {:>10} {:>12.5e} {:>12.5e} {:>12.5e} {:>9.2}x\n",
            row.name,
            row.average_bits.unwrap_or(f64::NAN),
            if row.feasible { "yes" } else { "no" },
            row.predicted_l,
            row.predicted_t,
            row.objective,
            row.throughput_ratio,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Roofline outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub scheme_a: String,
    pub scheme_b: String,
    /// Token count where `a` stops beating `b`, if any within the sweep.
    pub crossover_m: Option<usize>,
}

/// Pairwise crossover table over the given schemes.
pub fn crossover_table(
    schemes: &[QuantScheme],
    hw: &HardwareProfile,
    n: usize,
    k: usize,
    limit: usize,
) -> Result<Vec<CrossoverRow>> {
    let mut rows = Vec::new();
    for (i, a) in schemes.iter().enumerate() {
        for b in schemes.iter().skip(i + 1) {
            rows.push(CrossoverRow {
                scheme_a: a.notation(),
                scheme_b: b.notation(),
                crossover_m: find_crossover(a, b, n, k, hw, limit)?,
            });
        }
    }
    Ok(rows)
}

/// CSV of roofline time-vs-m curves: header `m,<scheme>...`, one row per
/// token count in the sweep.
pub fn roofline_curves_csv(
    schemes: &[QuantScheme],
    hw: &HardwareProfile,
    n: usize,
    k: usize,
    m_values: &[usize],
) -> Result<String> {
    let mut out = String::from("m");
    for s in schemes {
        out.push(',');
        out.push_str(&s.notation());
    }
    out.push('\n');
    for &m in m_values {
        out.push_str(&m.to_string());
        for s in schemes {
            let t = roofline_time(&GemmShape::new(m, n, k), s, hw)?;
            out.push_str(&format!(",{t:e}"));
        }
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// End-to-end manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestModel {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heterogeneous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCalibration {
    pub samples: usize,
    pub seq_len: usize,
}

/// One manifest drives the whole pipeline deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub model: ManifestModel,
    pub calibration: ManifestCalibration,
    pub schemes: Vec<QuantScheme>,
    pub r: f64,
    pub budget_bits: f64,
    pub granularity: Granularity,
    /// Optional hardware profile JSON; the default profile otherwise.
    pub profile: Option<PathBuf>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0 && self.r <= 1.0) {
            return Err(MxError::config(format!("r must be in [0,1], got {}", self.r)));
        }
        if let Some(p) = &self.profile {
            if !p.exists() {
                return Err(MxError::data(format!("profile {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn load_profile(&self) -> Result<HardwareProfile> {
        let hw = match &self.profile {
            Some(p) => read_json(p)?,
            None => HardwareProfile::default_rtx4090(),
        };
        hw.validate()?;
        Ok(hw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub objective: f64,
    pub predicted_l: f64,
    pub predicted_t: f64,
    pub average_bits: f64,
    pub makespan: f64,
}

/// Run the full pipeline into `out_dir`: model, calibration, allocation,
/// schedule, report and roofline CSV.
pub fn run_pipeline(manifest: &RunManifest, out_dir: &Path) -> Result<RunSummary> {
    manifest.validate()?;
    fs::create_dir_all(out_dir)?;
    let spec = MoEBlockSpec::new(
        manifest.model.num_experts,
        manifest.model.top_k,
        manifest.model.hidden,
        manifest.model.intermediate,
    )?;
    let generator = if manifest.model.heterogeneous {
        GeneratorConfig::heterogeneous(spec, manifest.seed)
    } else {
        GeneratorConfig::uniform(spec, manifest.seed)
    };
    let model_dir = out_dir.join("model");
    cmd_gen_model(&model_dir, &generator)?;
    let settings = CalibrationSettings {
        samples: manifest.calibration.samples,
        seq_len: manifest.calibration.seq_len,
        seed: manifest.seed.wrapping_add(1),
    };
    let sens_path = out_dir.join("sensitivity.json");
    let stats_path = out_dir.join("stats.json");
    cmd_calibrate(&model_dir, &sens_path, &stats_path, &manifest.schemes, &settings)?;
    let hw = manifest.load_profile()?;
    let alloc_settings = AllocationSettings {
        budget_bits: manifest.budget_bits,
        r: manifest.r,
        granularity: manifest.granularity,
        kernel_mode: KernelMode::Specialized,
        exclude_experts: BTreeSet::new(),
    };
    let plan_path = out_dir.join("plan.json");
    let plan = cmd_allocate(&sens_path, &stats_path, hw.clone(), &alloc_settings, &plan_path)?;
    let schedule_path = out_dir.join("schedule.json");
    let (_, exec) = cmd_schedule(&plan_path, hw.clone(), &schedule_path)?;

    // Report needs the problem rebuilt from the same inputs.
    let sensitivity: SensitivityTable = read_json(&sens_path)?;
    let stats: StatsFile = read_json(&stats_path)?;
    let problem = build_problem(sensitivity, &stats, hw.clone(), &alloc_settings)?;
    let (report, _) = build_report(&problem)?;
    write_json(&out_dir.join("report.json"), &report)?;
    fs::write(out_dir.join("report.txt"), render_report(&report))?;
    let m_values: Vec<usize> = (0..=12).map(|i| 1usize << i).collect();
    let csv = roofline_curves_csv(&manifest.schemes, &hw, 4096, 4096, &m_values)?;
    fs::write(out_dir.join("roofline.csv"), csv)?;

    Ok(RunSummary {
        objective: plan.objective,
        predicted_l: plan.predicted_l,
        predicted_t: plan.predicted_t,
        average_bits: plan.average_bits,
        makespan: exec.schedule.makespan,
    })
}

// ---------------------------------------------------------------------------
// Matrix helpers for external callers (bindings, CLI)
// ---------------------------------------------------------------------------

/// Parse a scheme list, defaulting to the built-in set when empty.
pub fn schemes_or_default(spec: &str) -> Result<Vec<QuantScheme>> {
    if spec.trim().is_empty() {
        Ok(QuantScheme::default_set())
    } else {
        QuantScheme::parse_list(spec)
    }
}

/// Read a hardware profile from JSON, or the default when no path is given.
pub fn load_profile(path: Option<&Path>) -> Result<HardwareProfile> {
    let hw: HardwareProfile = match path {
        Some(p) => read_json(p)?,
        None => HardwareProfile::default_rtx4090(),
    };
    hw.validate()?;
    Ok(hw)
}

/// Convenience wrapper shared by the report CLI path.
pub fn cmd_report(
    sensitivity_path: &Path,
    stats_path: &Path,
    hw: HardwareProfile,
    settings: &AllocationSettings,
    out_report_json: Option<&Path>,
    out_roofline_csv: Option<&Path>,
) -> Result<(Report, String)> {
    let sensitivity: SensitivityTable = read_json(sensitivity_path)?;
    sensitivity.validate()?;
    let stats: StatsFile = read_json(stats_path)?;
    let problem = build_problem(sensitivity, &stats, hw.clone(), settings)?;
    let (report, _) = build_report(&problem)?;
    if let Some(p) = out_report_json {
        write_json(p, &report)?;
    }
    if let Some(p) = out_roofline_csv {
        let m_values: Vec<usize> = (0..=12).map(|i| 1usize << i).collect();
        let csv = roofline_curves_csv(problem.schemes(), &hw, 4096, 4096, &m_values)?;
        fs::write(p, csv)?;
    }
    Ok((report.clone(), render_report(&report)))
}

pub use alloc::objective_eval;
pub use serde_json as json;

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mxplan_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    // g128 schemes need dims divisible by 128
    fn toy_manifest() -> RunManifest {
        RunManifest {
            seed: 11,
            model: ManifestModel {
                num_experts: 4,
                top_k: 2,
                hidden: 128,
                intermediate: 256,
                heterogeneous: true,
            },
            calibration: ManifestCalibration {
                samples: 3,
                seq_len: 16,
            },
            schemes: QuantScheme::default_set(),
            r: 0.75,
            budget_bits: 6.0,
            granularity: Granularity::Linear,
            profile: None,
        }
    }

    #[test]
    fn model_round_trip() {
        let dir = tmpdir("model_rt");
        let spec = MoEBlockSpec::new(3, 2, 8, 16).unwrap();
        let generator = GeneratorConfig::heterogeneous(spec, 4);
        let model = cmd_gen_model(&dir, &generator).unwrap();
        let (loaded, manifest) = load_model(&dir).unwrap();
        assert_eq!(manifest.spec, spec);
        // MXT1 stores f32; compare after the same truncation
        for (a, b) in model.experts[1].up.data().iter().zip(loaded.experts[1].up.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn gen_model_same_seed_byte_identical() {
        let d1 = tmpdir("gen_a");
        let d2 = tmpdir("gen_b");
        let spec = MoEBlockSpec::new(8, 2, 8, 16).unwrap();
        let generator = GeneratorConfig::uniform(spec, 9);
        cmd_gen_model(&d1, &generator).unwrap();
        cmd_gen_model(&d2, &generator).unwrap();
        for name in ["manifest.json", "router.mxt", "expert_7_down.mxt"] {
            let a = fs::read(d1.join(name)).unwrap();
            let b = fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        // 8 experts x 3 tensors
        let count = fs::read_dir(&d1)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with("expert_")
            })
            .count();
        assert_eq!(count, 24);
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn pipeline_is_deterministic() {
        let d1 = tmpdir("pipe_a");
        let d2 = tmpdir("pipe_b");
        let manifest = toy_manifest();
        let s1 = run_pipeline(&manifest, &d1).unwrap();
        let s2 = run_pipeline(&manifest, &d2).unwrap();
        assert_eq!(s1, s2);
        for name in [
            "sensitivity.json",
            "stats.json",
            "plan.json",
            "schedule.json",
            "report.json",
            "report.txt",
            "roofline.csv",
        ] {
            let a = fs::read(d1.join(name)).unwrap();
            let b = fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn calibrate_outputs_validate_and_round_trip() {
        let dir = tmpdir("calib");
        let manifest = toy_manifest();
        let spec = MoEBlockSpec::new(4, 2, 128, 256).unwrap();
        let generator = GeneratorConfig::heterogeneous(spec, manifest.seed);
        let model_dir = dir.join("model");
        cmd_gen_model(&model_dir, &generator).unwrap();
        let (table, stats) = cmd_calibrate(
            &model_dir,
            &dir.join("sensitivity.json"),
            &dir.join("stats.json"),
            &manifest.schemes,
            &CalibrationSettings {
                samples: 2,
                seq_len: 8,
                seed: 3,
            },
        )
        .unwrap();
        stats.validate().unwrap();
        let back: SensitivityTable =
            read_json(&dir.join("sensitivity.json")).unwrap();
        assert_eq!(back, table);
        let id = manifest.schemes.iter().position(|s| s.is_identity()).unwrap();
        for e in 0..4 {
            for j in 0..NUM_LINEAR {
                assert_eq!(table.delta[e][j][id], 0.0);
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn trace_round_trips_through_mxt1() {
        let dir = tmpdir("trace");
        let spec = MoEBlockSpec::new(4, 2, 16, 32).unwrap();
        let model = generate_model(&GeneratorConfig::heterogeneous(spec, 2)).unwrap();
        let tokens = gen_tokens(16, 64, 3);
        let trace = model.route(&tokens).unwrap();
        let path = dir.join("trace.mxt");
        save_trace(&path, &trace).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(back.tokens.len(), trace.tokens.len());
        for (a, b) in back.tokens.iter().zip(&trace.tokens) {
            for ((ea, wa), (eb, wb)) in a.iter().zip(b) {
                assert_eq!(ea, eb);
                assert_eq!(*wa as f32, *wb as f32);
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn execution_estimate_matches_task_sum() {
        let dir = tmpdir("exec");
        let manifest = toy_manifest();
        run_pipeline(&manifest, &dir).unwrap();
        let plan: PlanFile = read_json(&dir.join("plan.json")).unwrap();
        let hw = HardwareProfile::default_rtx4090();
        let exec = plan_execution(&plan, &hw).unwrap();
        let total: f64 = exec.tasks.iter().map(|t| t.cost).sum();
        let est = total / hw.sm_count as f64;
        assert!((est - exec.estimated_t).abs() <= 1e-9 * est.max(1e-30));
        // simulated makespan stays within list-scheduling bounds of the estimate
        let max = exec.tasks.iter().map(|t| t.cost).fold(0.0, f64::max);
        assert!(exec.sim.makespan >= est.max(max) - 1e-15);
        assert!(exec.sim.makespan <= est + max + 1e-15);
        fs::remove_dir_all(&dir).unwrap();
    }
}
