//! Python bindings for the mixed-precision MoE quantization planner.
//!
//! Exposes the main types and operations: quantization schemes and
//! quantizers, the synthetic MoE model, sensitivity calibration, the
//! roofline cost model, the allocation solver and the tile scheduler.
//! Matrices cross the boundary as nested `list[list[float]]`.

use mxplan_core::alloc::{self, Granularity};
use mxplan_core::cost::{self, GemmShape, KernelMode};
use mxplan_core::kernel_plan;
use mxplan_core::matrix::Matrix;
use mxplan_core::moe;
use mxplan_core::pipeline;
use mxplan_core::quant;
use mxplan_core::sensitivity;
use mxplan_core::MxError;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::collections::BTreeSet;
use std::path::PathBuf;

fn err(e: MxError) -> PyErr {
    match e {
        MxError::Io(inner) => PyIOError::new_err(inner.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_matrix(data: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&data).map_err(err)
}

fn from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

/// One quantization scheme in `wxay_gz_b` notation.
#[pyclass(name = "QuantScheme", frozen, from_py_object)]
#[derive(Clone)]
struct PyQuantScheme {
    inner: quant::QuantScheme,
}

#[pymethods]
impl PyQuantScheme {
    #[new]
    fn new(notation: &str) -> PyResult<Self> {
        Ok(Self {
            inner: quant::QuantScheme::parse(notation).map_err(err)?,
        })
    }

    #[staticmethod]
    fn identity() -> Self {
        Self {
            inner: quant::QuantScheme::identity(),
        }
    }

    #[staticmethod]
    fn default_set() -> Vec<Self> {
        quant::QuantScheme::default_set()
            .into_iter()
            .map(|inner| Self { inner })
            .collect()
    }

    #[getter]
    fn w_bits(&self) -> u32 {
        self.inner.w_bits
    }

    #[getter]
    fn a_bits(&self) -> u32 {
        self.inner.a_bits
    }

    #[getter]
    fn w_group(&self) -> i64 {
        self.inner.w_group
    }

    #[getter]
    fn a_group(&self) -> i64 {
        self.inner.a_group
    }

    #[getter]
    fn symmetric(&self) -> bool {
        self.inner.symmetric
    }

    fn is_identity(&self) -> bool {
        self.inner.is_identity()
    }

    /// Average stored bits per weight including scale/zero metadata.
    fn storage_bits_per_weight(&self, channel_len: usize) -> PyResult<f64> {
        self.inner.storage_bits_per_weight(channel_len).map_err(err)
    }

    fn notation(&self) -> String {
        self.inner.notation()
    }

    fn __repr__(&self) -> String {
        format!("QuantScheme('{}')", self.inner.notation())
    }

    fn __str__(&self) -> String {
        self.inner.notation()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Quantized tensor: integer codes plus per-group scale/zero metadata.
#[pyclass(name = "QuantizedTensor", frozen)]
struct PyQuantizedTensor {
    inner: quant::QuantizedTensor,
    rtn_fallback: bool,
}

#[pymethods]
impl PyQuantizedTensor {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    #[getter]
    fn rtn_fallback(&self) -> bool {
        self.rtn_fallback
    }

    fn codes(&self) -> Vec<Vec<i32>> {
        self.inner
            .codes
            .chunks(self.inner.cols)
            .map(|row| row.to_vec())
            .collect()
    }

    fn scales(&self) -> Vec<f64> {
        self.inner.scales.clone()
    }

    fn zeros(&self) -> Option<Vec<f64>> {
        self.inner.zeros.clone()
    }

    fn dequantize(&self) -> Vec<Vec<f64>> {
        from_matrix(&quant::dequantize(&self.inner))
    }
}

/// Uniform min-max quantization of a matrix; `axis` is "weight" or
/// "activation".
#[pyfunction]
#[pyo3(signature = (data, scheme, axis = "weight"))]
fn quantize_minmax(
    data: Vec<Vec<f64>>,
    scheme: &PyQuantScheme,
    axis: &str,
) -> PyResult<PyQuantizedTensor> {
    let axis = match axis {
        "weight" => quant::QuantAxis::Weight,
        "activation" => quant::QuantAxis::Activation,
        other => {
            return Err(PyValueError::new_err(format!(
                "axis must be weight|activation, got {other}"
            )))
        }
    };
    let m = to_matrix(data)?;
    Ok(PyQuantizedTensor {
        inner: quant::quantize_minmax(&m, &scheme.inner, axis).map_err(err)?,
        rtn_fallback: false,
    })
}

/// GPTQ error-feedback quantization against calibration inputs.
#[pyfunction]
#[pyo3(signature = (weights, calib_inputs, scheme, damping = quant::DEFAULT_DAMPING))]
fn gptq_quantize(
    weights: Vec<Vec<f64>>,
    calib_inputs: Vec<Vec<f64>>,
    scheme: &PyQuantScheme,
    damping: f64,
) -> PyResult<PyQuantizedTensor> {
    let w = to_matrix(weights)?;
    let calib = to_matrix(calib_inputs)?;
    let out = quant::gptq_quantize(&w, &calib, &scheme.inner, damping).map_err(err)?;
    Ok(PyQuantizedTensor {
        inner: out.quantized,
        rtn_fallback: out.rtn_fallback,
    })
}

/// Randomized block-diagonal Hadamard rotation along columns.
#[pyfunction]
#[pyo3(signature = (data, block_size = quant::DEFAULT_BLOCK_SIZE, seed = 0))]
fn hadamard_transform(
    data: Vec<Vec<f64>>,
    block_size: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let m = to_matrix(data)?;
    Ok(from_matrix(
        &quant::hadamard_transform(&m, block_size, seed).map_err(err)?,
    ))
}

/// GPU execution resources for the cost model.
#[pyclass(name = "HardwareProfile", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyHardwareProfile {
    inner: cost::HardwareProfile,
}

#[pymethods]
impl PyHardwareProfile {
    /// The documented default RTX-4090-like profile.
    #[staticmethod]
    fn default_rtx4090() -> Self {
        Self {
            inner: cost::HardwareProfile::default_rtx4090(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: cost::HardwareProfile =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn sm_count(&self) -> usize {
        self.inner.sm_count
    }

    #[getter]
    fn mem_bw(&self) -> f64 {
        self.inner.mem_bw
    }

    #[getter]
    fn smem_per_sm(&self) -> f64 {
        self.inner.smem_per_sm
    }
}

/// FLOPs per byte moved for an `[m, n, k]` GEMM under a scheme.
#[pyfunction]
fn arithmetic_intensity(m: usize, n: usize, k: usize, scheme: &PyQuantScheme) -> PyResult<f64> {
    cost::arithmetic_intensity(&GemmShape::new(m, n, k), &scheme.inner).map_err(err)
}

/// Roofline execution time in seconds.
#[pyfunction]
fn roofline_time(
    m: usize,
    n: usize,
    k: usize,
    scheme: &PyQuantScheme,
    profile: &PyHardwareProfile,
) -> PyResult<f64> {
    cost::roofline_time(&GemmShape::new(m, n, k), &scheme.inner, &profile.inner).map_err(err)
}

/// Smallest m where scheme `a` stops beating scheme `b`, or None.
#[pyfunction]
#[pyo3(signature = (a, b, n = 4096, k = 4096, profile = None, limit = 4096))]
fn find_crossover(
    a: &PyQuantScheme,
    b: &PyQuantScheme,
    n: usize,
    k: usize,
    profile: Option<&PyHardwareProfile>,
    limit: usize,
) -> PyResult<Option<usize>> {
    let hw = profile.map_or_else(cost::HardwareProfile::default_rtx4090, |p| p.inner.clone());
    cost::find_crossover(&a.inner, &b.inner, n, k, &hw, limit).map_err(err)
}

/// Routing statistics collected during calibration.
#[pyclass(name = "ActivationStats", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyActivationStats {
    stats_file: pipeline::StatsFile,
}

#[pymethods]
impl PyActivationStats {
    #[getter]
    fn tokens_per_expert(&self) -> Vec<u64> {
        self.stats_file.tokens_per_expert.clone()
    }

    #[getter]
    fn total_tokens(&self) -> u64 {
        self.stats_file.total_tokens
    }

    /// max/min activation-frequency ratio (zero counts clamp to one).
    fn frequency_spread(&self) -> f64 {
        self.stats_file.stats().frequency_spread()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.stats_file)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Sensitivity table: perturbation per (expert, linear block, scheme).
#[pyclass(name = "SensitivityTable", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySensitivityTable {
    inner: sensitivity::SensitivityTable,
}

#[pymethods]
impl PySensitivityTable {
    fn delta(&self, expert: usize, block: usize, scheme: usize) -> PyResult<f64> {
        self.inner
            .delta
            .get(expert)
            .and_then(|e| e.get(block))
            .and_then(|b| b.get(scheme))
            .copied()
            .ok_or_else(|| PyValueError::new_err("index out of range"))
    }

    #[getter]
    fn schemes(&self) -> Vec<PyQuantScheme> {
        self.inner
            .schemes
            .iter()
            .map(|&inner| PyQuantScheme { inner })
            .collect()
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.inner.num_experts()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: sensitivity::SensitivityTable =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }
}

/// Synthetic MoE model with a linear router.
#[pyclass(name = "MoEModel")]
struct PyMoEModel {
    model: moe::MoEModel,
    generator: moe::GeneratorConfig,
}

#[pymethods]
impl PyMoEModel {
    /// Generate a model; `heterogeneous` injects outlier channels, scaled
    /// experts and a router bias ramp.
    #[staticmethod]
    #[pyo3(signature = (num_experts, top_k, hidden, intermediate, seed = 0, heterogeneous = false))]
    fn generate(
        num_experts: usize,
        top_k: usize,
        hidden: usize,
        intermediate: usize,
        seed: u64,
        heterogeneous: bool,
    ) -> PyResult<Self> {
        let spec =
            moe::MoEBlockSpec::new(num_experts, top_k, hidden, intermediate).map_err(err)?;
        let generator = if heterogeneous {
            moe::GeneratorConfig::heterogeneous(spec, seed)
        } else {
            moe::GeneratorConfig::uniform(spec, seed)
        };
        Ok(Self {
            model: moe::generate_model(&generator).map_err(err)?,
            generator,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (model, manifest) = pipeline::load_model(&dir).map_err(err)?;
        Ok(Self {
            model,
            generator: manifest.generator,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        pipeline::save_model(&dir, &self.model, &self.generator).map_err(err)
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.model.spec.num_experts
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.model.spec.top_k
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.model.spec.hidden
    }

    #[getter]
    fn intermediate(&self) -> usize {
        self.model.spec.intermediate
    }

    /// Standard-normal token batch for this model's hidden size.
    fn gen_tokens(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        from_matrix(&moe::gen_tokens(self.model.spec.hidden, count, seed))
    }

    /// Route tokens: per token, a list of (expert, weight) pairs.
    fn route(&self, tokens: Vec<Vec<f64>>) -> PyResult<Vec<Vec<(usize, f64)>>> {
        let x = to_matrix(tokens)?;
        Ok(self.model.route(&x).map_err(err)?.tokens)
    }

    /// Full-precision MoE block forward pass.
    fn forward(&self, tokens: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(tokens)?;
        let trace = self.model.route(&x).map_err(err)?;
        Ok(from_matrix(
            &moe::forward_block(&x, &self.model.experts, &trace).map_err(err)?,
        ))
    }

    /// Forward pass with one scheme per (expert, linear block):
    /// `assignment[expert] = [gate, up, down]`.
    fn forward_quantized(
        &self,
        tokens: Vec<Vec<f64>>,
        assignment: Vec<Vec<PyQuantScheme>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(tokens)?;
        let trace = self.model.route(&x).map_err(err)?;
        let mut mapped = Vec::with_capacity(assignment.len());
        for row in &assignment {
            if row.len() != moe::NUM_LINEAR {
                return Err(PyValueError::new_err(
                    "each expert needs exactly 3 schemes (gate, up, down)",
                ));
            }
            mapped.push([row[0].inner, row[1].inner, row[2].inner]);
        }
        Ok(from_matrix(
            &moe::forward_block_quantized(&x, &self.model.experts, &trace, &mapped)
                .map_err(err)?,
        ))
    }

    /// Calibrate: sensitivity table plus routing statistics.
    #[pyo3(signature = (schemes, samples = 8, seq_len = 32, seed = 0))]
    fn calibrate(
        &self,
        schemes: Vec<PyQuantScheme>,
        samples: usize,
        seq_len: usize,
        seed: u64,
    ) -> PyResult<(PySensitivityTable, PyActivationStats)> {
        let schemes: Vec<quant::QuantScheme> = schemes.iter().map(|s| s.inner).collect();
        let settings = pipeline::CalibrationSettings {
            samples,
            seq_len,
            seed,
        };
        let (table, stats) = pipeline::calibrate(&self.model, &schemes, &settings).map_err(err)?;
        Ok((
            PySensitivityTable { inner: table },
            PyActivationStats { stats_file: stats },
        ))
    }
}

/// A solved allocation plan.
#[pyclass(name = "AllocationPlan", frozen)]
struct PyAllocationPlan {
    file: pipeline::PlanFile,
}

#[pymethods]
impl PyAllocationPlan {
    #[getter]
    fn objective(&self) -> f64 {
        self.file.objective
    }

    #[getter]
    fn predicted_l(&self) -> f64 {
        self.file.predicted_l
    }

    #[getter]
    fn predicted_t(&self) -> f64 {
        self.file.predicted_t
    }

    #[getter]
    fn memory_used(&self) -> f64 {
        self.file.memory_used
    }

    #[getter]
    fn average_bits(&self) -> f64 {
        self.file.average_bits
    }

    /// Scheme notation chosen for one linear block.
    fn scheme_of(&self, expert: usize, block: usize) -> PyResult<String> {
        let k = *self
            .file
            .scheme_of
            .get(expert)
            .and_then(|row| row.get(block))
            .ok_or_else(|| PyValueError::new_err("index out of range"))?;
        Ok(self.file.schemes[k].notation())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.file)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Solve the joint scheme/tile allocation under a memory budget.
#[pyfunction]
#[pyo3(signature = (table, stats, budget_bits = 5.0, r = 0.75, granularity = "linear", profile = None))]
fn solve_allocation(
    table: &PySensitivityTable,
    stats: &PyActivationStats,
    budget_bits: f64,
    r: f64,
    granularity: &str,
    profile: Option<&PyHardwareProfile>,
) -> PyResult<PyAllocationPlan> {
    let granularity = match granularity {
        "linear" => Granularity::Linear,
        "expert" => Granularity::Expert,
        other => {
            return Err(PyValueError::new_err(format!(
                "granularity must be linear|expert, got {other}"
            )))
        }
    };
    let hw = profile.map_or_else(cost::HardwareProfile::default_rtx4090, |p| p.inner.clone());
    let settings = pipeline::AllocationSettings {
        budget_bits,
        r,
        granularity,
        kernel_mode: KernelMode::Specialized,
        exclude_experts: BTreeSet::new(),
    };
    let problem =
        pipeline::build_problem(table.inner.clone(), &stats.stats_file, hw, &settings)
            .map_err(err)?;
    let plan = alloc::solve(&problem).map_err(err)?;
    Ok(PyAllocationPlan {
        file: pipeline::plan_file_from(&plan, &problem, settings.kernel_mode),
    })
}

/// The uniform single-scheme baseline plan for comparison.
#[pyfunction]
#[pyo3(signature = (table, stats, scheme_index, budget_bits = 5.0, r = 0.75, profile = None))]
fn uniform_allocation(
    table: &PySensitivityTable,
    stats: &PyActivationStats,
    scheme_index: usize,
    budget_bits: f64,
    r: f64,
    profile: Option<&PyHardwareProfile>,
) -> PyResult<PyAllocationPlan> {
    let hw = profile.map_or_else(cost::HardwareProfile::default_rtx4090, |p| p.inner.clone());
    let settings = pipeline::AllocationSettings {
        budget_bits,
        r,
        granularity: Granularity::Linear,
        kernel_mode: KernelMode::Specialized,
        exclude_experts: BTreeSet::new(),
    };
    let problem =
        pipeline::build_problem(table.inner.clone(), &stats.stats_file, hw, &settings)
            .map_err(err)?;
    let plan = alloc::uniform_plan(&problem, scheme_index).map_err(err)?;
    Ok(PyAllocationPlan {
        file: pipeline::plan_file_from(&plan, &problem, settings.kernel_mode),
    })
}

/// Result of scheduling a plan onto the hardware.
#[pyclass(name = "ExecutionSummary", frozen)]
struct PyExecutionSummary {
    makespan: f64,
    estimated_t: f64,
    num_tasks: usize,
    unified_warps: usize,
    schedule_json: String,
}

#[pymethods]
impl PyExecutionSummary {
    #[getter]
    fn makespan(&self) -> f64 {
        self.makespan
    }

    #[getter]
    fn estimated_t(&self) -> f64 {
        self.estimated_t
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    #[getter]
    fn unified_warps(&self) -> usize {
        self.unified_warps
    }

    fn to_json(&self) -> String {
        self.schedule_json.clone()
    }
}

/// Fuse micro-kernels, expand tiles, schedule greedily and simulate.
#[pyfunction]
#[pyo3(signature = (plan, profile = None))]
fn schedule_plan(
    plan: &PyAllocationPlan,
    profile: Option<&PyHardwareProfile>,
) -> PyResult<PyExecutionSummary> {
    let hw = profile.map_or_else(cost::HardwareProfile::default_rtx4090, |p| p.inner.clone());
    let exec = pipeline::plan_execution(&plan.file, &hw).map_err(err)?;
    let schedule_json = serde_json::to_string_pretty(&pipeline::schedule_file_from(&exec))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyExecutionSummary {
        makespan: exec.schedule.makespan,
        estimated_t: exec.estimated_t,
        num_tasks: exec.tasks.len(),
        unified_warps: exec.fused.unified_warps,
        schedule_json,
    })
}

/// LPT list scheduling of raw task costs; returns the makespan.
#[pyfunction]
fn lpt_makespan(costs: Vec<f64>, sm_count: usize) -> PyResult<f64> {
    let tasks: Vec<kernel_plan::TileTask> = costs
        .iter()
        .enumerate()
        .map(|(i, &c)| kernel_plan::TileTask {
            owner: (0, 0),
            scheme: quant::QuantScheme::identity(),
            cost: c,
            tile_id: i,
        })
        .collect();
    Ok(kernel_plan::schedule_greedy(&tasks, sm_count)
        .map_err(err)?
        .makespan)
}

/// Run the full pipeline from a manifest JSON string into a directory.
#[pyfunction]
fn run_pipeline(manifest_json: &str, out_dir: PathBuf) -> PyResult<String> {
    let manifest: pipeline::RunManifest =
        serde_json::from_str(manifest_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let summary = pipeline::run_pipeline(&manifest, &out_dir).map_err(err)?;
    serde_json::to_string_pretty(&summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn mxplan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantScheme>()?;
    m.add_class::<PyQuantizedTensor>()?;
    m.add_class::<PyHardwareProfile>()?;
    m.add_class::<PyActivationStats>()?;
    m.add_class::<PySensitivityTable>()?;
    m.add_class::<PyMoEModel>()?;
    m.add_class::<PyAllocationPlan>()?;
    m.add_class::<PyExecutionSummary>()?;
    m.add_function(wrap_pyfunction!(quantize_minmax, m)?)?;
    m.add_function(wrap_pyfunction!(gptq_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(hadamard_transform, m)?)?;
    m.add_function(wrap_pyfunction!(arithmetic_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(roofline_time, m)?)?;
    m.add_function(wrap_pyfunction!(find_crossover, m)?)?;
    m.add_function(wrap_pyfunction!(solve_allocation, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_allocation, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_plan, m)?)?;
    m.add_function(wrap_pyfunction!(lpt_makespan, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
