//! Per-(expert, linear block, scheme) quantization sensitivity.
//!
//! For each triple, only that block is quantized while everything else stays
//! at full precision; the perturbation is the Euclidean distance between the
//! full-precision and partially quantized MoE block outputs, aggregated over
//! a calibration set. Only the perturbed expert's contribution to the block
//! output changes, so the distance is computed from that expert's routed
//! rows directly instead of re-running the whole block.

use crate::error::{MxError, Result};
use crate::matrix::Matrix;
use crate::moe::{MoEModel, NUM_LINEAR};
use crate::quant::{fake_quantize_activations, fake_quantize_weights, QuantScheme};
use serde::{Deserialize, Serialize};

/// How per-sample perturbations are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub aggregation: Aggregation,
    /// Divide each sample's perturbation by the norm of its full-precision
    /// block output.
    pub normalize: bool,
    /// Calibration seed, recorded in the table metadata.
    pub seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Mean,
            normalize: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibMeta {
    pub samples: usize,
    pub seed: u64,
}

/// The table of perturbation coefficients, indexed `[expert][block][scheme]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub schemes: Vec<QuantScheme>,
    pub delta: Vec<Vec<Vec<f64>>>,
    pub meta: CalibMeta,
}

impl SensitivityTable {
    pub fn num_experts(&self) -> usize {
        self.delta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.schemes.len();
        for per_expert in &self.delta {
            if per_expert.len() != NUM_LINEAR {
                return Err(MxError::data("sensitivity table must have 3 blocks per expert"));
            }
            for per_block in per_expert {
                if per_block.len() != k {
                    return Err(MxError::data("sensitivity row length != scheme count"));
                }
                if per_block.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(MxError::data("sensitivity entries must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Euclidean (Frobenius) distance between full-precision and perturbed block
/// outputs.
pub fn perturbation_delta(block_output_fp: &Matrix, block_output_q: &Matrix) -> Result<f64> {
    Ok(block_output_q.sub(block_output_fp)?.frobenius_norm())
}

struct ExpertForwardState {
    rows_weights: Vec<f64>,
    x: Matrix,
    gate_out: Matrix,
    up_out: Matrix,
    act: Matrix,
    out: Matrix,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn expert_state(model: &MoEModel, expert: usize, x: &Matrix, trace_rows: &[usize], weights: &[f64]) -> Result<ExpertForwardState> {
    let w = &model.experts[expert];
    let x_e = x.gather_rows(trace_rows);
    let gate_out = x_e.matmul_transposed(&w.gate)?;
    let up_out = x_e.matmul_transposed(&w.up)?;
    let mut act = gate_out.clone();
    for (a, u) in act.data_mut().iter_mut().zip(up_out.data()) {
        *a = silu(*a) * u;
    }
    let out = act.matmul_transposed(&w.down)?;
    Ok(ExpertForwardState {
        rows_weights: weights.to_vec(),
        x: x_e,
        gate_out,
        up_out,
        act,
        out,
    })
}

/// Weighted Frobenius distance between a perturbed expert output and the
/// reference, which equals the distance between whole block outputs because
/// every other expert's contribution cancels.
fn weighted_distance(reference: &Matrix, perturbed: &Matrix, weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    let rows = perturbed
        .data()
        .chunks(reference.cols)
        .zip(reference.data().chunks(reference.cols));
    for ((p_row, r_row), &w) in rows.zip(weights) {
        for (a, b) in p_row.iter().zip(r_row) {
            let d = w * (a - b);
            acc += d * d;
        }
    }
    acc.sqrt()
}

fn perturbed_output(
    state: &ExpertForwardState,
    model: &MoEModel,
    expert: usize,
    block: usize,
    scheme: &QuantScheme,
    quantized_weight: &Matrix,
) -> Result<Matrix> {
    let w = &model.experts[expert];
    match block {
        0 => {
            let xq = fake_quantize_activations(&state.x, scheme)?;
            let gate_q = xq.matmul_transposed(quantized_weight)?;
            let mut act = gate_q;
            for (a, u) in act.data_mut().iter_mut().zip(state.up_out.data()) {
                *a = silu(*a) * u;
            }
            act.matmul_transposed(&w.down)
        }
        1 => {
            let xq = fake_quantize_activations(&state.x, scheme)?;
            let up_q = xq.matmul_transposed(quantized_weight)?;
            let mut act = state.gate_out.clone();
            for (a, u) in act.data_mut().iter_mut().zip(up_q.data()) {
                *a = silu(*a) * u;
            }
            act.matmul_transposed(&w.down)
        }
        2 => {
            let aq = fake_quantize_activations(&state.act, scheme)?;
            aq.matmul_transposed(quantized_weight)
        }
        _ => Err(MxError::config(format!("linear block index {block} out of range"))),
    }
}

/// Build the sensitivity table over a calibration set of token batches.
///
/// The scheme list must include the 16-bit identity scheme, whose column is
/// zero by construction. Deterministic: samples, experts, blocks and schemes
/// are traversed in fixed order and reduced sequentially.
pub fn build_sensitivity_table(
    model: &MoEModel,
    calib_set: &[Matrix],
    schemes: &[QuantScheme],
    config: &SensitivityConfig,
) -> Result<SensitivityTable> {
    if calib_set.is_empty() {
        return Err(MxError::config("calibration set must be non-empty"));
    }
    if !schemes.iter().any(|s| s.is_identity()) {
        return Err(MxError::config("scheme set must include the 16-bit identity"));
    }
    model.validate()?;
    let e_count = model.spec.num_experts;
    let k_count = schemes.len();

    // Pre-quantize weights once per (expert, block, scheme).
    let mut wq: Vec<Vec<Vec<Option<Matrix>>>> = Vec::with_capacity(e_count);
    for expert in &model.experts {
        let mut per_expert = Vec::with_capacity(NUM_LINEAR);
        for j in 0..NUM_LINEAR {
            let mut per_block = Vec::with_capacity(k_count);
            for scheme in schemes {
                if scheme.is_identity() {
                    per_block.push(None);
                } else {
                    per_block.push(Some(fake_quantize_weights(expert.block(j), scheme)?));
                }
            }
            per_expert.push(per_block);
        }
        wq.push(per_expert);
    }

    let mut delta = vec![vec![vec![0.0f64; k_count]; NUM_LINEAR]; e_count];
    for x in calib_set {
        if x.cols != model.spec.hidden {
            return Err(MxError::data(format!(
                "calibration sample width {} != hidden dim {}",
                x.cols, model.spec.hidden
            )));
        }
        let trace = model.route(x)?;
        let fp_norm = if config.normalize {
            let out = crate::moe::forward_block(x, &model.experts, &trace)?;
            out.frobenius_norm()
        } else {
            1.0
        };
        for i in 0..e_count {
            let (rows, weights) = trace.routed_to(i);
            if rows.is_empty() {
                continue;
            }
            let state = expert_state(model, i, x, &rows, &weights)?;
            for j in 0..NUM_LINEAR {
                for (k, scheme) in schemes.iter().enumerate() {
                    let Some(qw) = &wq[i][j][k] else { continue };
                    let perturbed = perturbed_output(&state, model, i, j, scheme, qw)?;
                    let mut d = weighted_distance(&state.out, &perturbed, &state.rows_weights);
                    if config.normalize && fp_norm > 0.0 {
                        d /= fp_norm;
                    }
                    delta[i][j][k] += d;
                }
            }
        }
    }

    if config.aggregation == Aggregation::Mean {
        let n = calib_set.len() as f64;
        for per_expert in &mut delta {
            for per_block in per_expert {
                for v in per_block {
                    *v /= n;
                }
            }
        }
    }

    let table = SensitivityTable {
        schemes: schemes.to_vec(),
        delta,
        meta: CalibMeta {
            samples: calib_set.len(),
            seed: config.seed,
        },
    };
    table.validate()?;
    Ok(table)
}
