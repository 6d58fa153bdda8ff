//! Toy mixture-of-experts block: top-k routing, expert forward pass with the
//! gate/up/down MLP, optional per-block fake quantization, and collection of
//! expert activation statistics from routing traces.

mod generator;

pub use generator::{generate_model, gen_tokens, GeneratorConfig};

use crate::error::{MxError, Result};
use crate::matrix::Matrix;
use crate::quant::{fake_quantize_activations, fake_quantize_weights, QuantScheme};
use serde::{Deserialize, Serialize};

/// Number of linear blocks per expert (gate, up, down).
pub const NUM_LINEAR: usize = 3;

/// Names of the linear blocks, indexed by block id.
pub const LINEAR_NAMES: [&str; NUM_LINEAR] = ["gate", "up", "down"];

/// Static shape of one MoE block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoEBlockSpec {
    pub num_experts: usize,
    pub top_k: usize,
    /// Hidden (model) dimension d.
    pub hidden: usize,
    /// Intermediate (expert MLP) dimension f.
    pub intermediate: usize,
}

impl MoEBlockSpec {
    pub fn new(num_experts: usize, top_k: usize, hidden: usize, intermediate: usize) -> Result<Self> {
        let s = Self {
            num_experts,
            top_k,
            hidden,
            intermediate,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(MxError::config(format!(
                "top_k {} must be in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if self.hidden == 0 || self.intermediate == 0 {
            return Err(MxError::config("hidden and intermediate dims must be positive"));
        }
        Ok(())
    }

    /// Weight elements across all linear blocks (3 f*d matrices per expert).
    pub fn total_params(&self) -> usize {
        self.num_experts * NUM_LINEAR * self.hidden * self.intermediate
    }
}

/// Weights of one expert MLP: `y = down( silu(gate(x)) * up(x) )`.
#[derive(Debug, Clone)]
pub struct ExpertWeights {
    /// `[f, d]`
    pub gate: Matrix,
    /// `[f, d]`
    pub up: Matrix,
    /// `[d, f]`
    pub down: Matrix,
}

impl ExpertWeights {
    pub fn check_shapes(&self, spec: &MoEBlockSpec) -> Result<()> {
        let (d, f) = (spec.hidden, spec.intermediate);
        for (name, m, rows, cols) in [
            ("gate", &self.gate, f, d),
            ("up", &self.up, f, d),
            ("down", &self.down, d, f),
        ] {
            if m.rows != rows || m.cols != cols {
                return Err(MxError::data(format!(
                    "{name} weight is {}x{}, expected {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
        }
        Ok(())
    }

    pub fn block(&self, j: usize) -> &Matrix {
        match j {
            0 => &self.gate,
            1 => &self.up,
            2 => &self.down,
            _ => panic!("linear block index {j} out of range"),
        }
    }
}

/// A complete toy model: expert weights plus a linear router.
#[derive(Debug, Clone)]
pub struct MoEModel {
    pub spec: MoEBlockSpec,
    pub experts: Vec<ExpertWeights>,
    /// Router weight `[E, d]`.
    pub router: Matrix,
    /// Additive per-expert router bias; controls activation-frequency spread.
    pub router_bias: Vec<f64>,
}

impl MoEModel {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.experts.len() != self.spec.num_experts {
            return Err(MxError::data("expert count does not match spec"));
        }
        for e in &self.experts {
            e.check_shapes(&self.spec)?;
        }
        if self.router.rows != self.spec.num_experts || self.router.cols != self.spec.hidden {
            return Err(MxError::data("router shape does not match spec"));
        }
        if self.router_bias.len() != self.spec.num_experts {
            return Err(MxError::data("router bias length does not match spec"));
        }
        Ok(())
    }

    /// Router logits for a batch of tokens, `[tokens, E]`.
    pub fn router_logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut logits = x.matmul_transposed(&self.router)?;
        for r in 0..logits.rows {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&self.router_bias) {
                *v += b;
            }
        }
        Ok(logits)
    }

    /// Route a batch of tokens through the model router.
    pub fn route(&self, x: &Matrix) -> Result<RoutingTrace> {
        route_topk(&self.router_logits(x)?, self.spec.top_k)
    }
}

/// Per-token routing decisions: `top_k` pairs of (expert id, weight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub tokens: Vec<Vec<(usize, f64)>>,
}

impl RoutingTrace {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Token indices and routing weights sent to one expert, in token order.
    pub fn routed_to(&self, expert: usize) -> (Vec<usize>, Vec<f64>) {
        let mut idx = Vec::new();
        let mut w = Vec::new();
        for (t, pairs) in self.tokens.iter().enumerate() {
            for &(e, weight) in pairs {
                if e == expert {
                    idx.push(t);
                    w.push(weight);
                }
            }
        }
        (idx, w)
    }
}

/// Histogram of expert occurrences over a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub tokens_per_expert: Vec<u64>,
    pub total_tokens: u64,
}

impl ActivationStats {
    pub fn merge(&mut self, other: &ActivationStats) {
        for (a, b) in self.tokens_per_expert.iter_mut().zip(&other.tokens_per_expert) {
            *a += b;
        }
        self.total_tokens += other.total_tokens;
    }

    /// max/min activation-frequency ratio; experts with zero tokens count as 1
    /// so the ratio stays finite.
    pub fn frequency_spread(&self) -> f64 {
        let max = self.tokens_per_expert.iter().copied().max().unwrap_or(0);
        let min = self.tokens_per_expert.iter().copied().min().unwrap_or(0);
        max as f64 / (min.max(1)) as f64
    }
}

/// Select the top-k experts per token; weights are the softmax over the
/// selected logits. Ties break toward the lower expert id.
pub fn route_topk(logits: &Matrix, top_k: usize) -> Result<RoutingTrace> {
    if top_k == 0 || top_k > logits.cols {
        return Err(MxError::config(format!(
            "top_k {} must be in 1..={}",
            top_k, logits.cols
        )));
    }
    let mut tokens = Vec::with_capacity(logits.rows);
    for t in 0..logits.rows {
        let row = logits.row(t);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let selected = &order[..top_k];
        let max = selected.iter().map(|&e| row[e]).fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = selected.iter().map(|&e| (row[e] - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let mut pairs: Vec<(usize, f64)> = selected
            .iter()
            .zip(&exp)
            .map(|(&e, &x)| (e, x / sum))
            .collect();
        pairs.sort_by_key(|&(e, _)| e);
        tokens.push(pairs);
    }
    Ok(RoutingTrace { tokens })
}

/// Count expert occurrences in a trace.
pub fn collect_activation_stats(trace: &RoutingTrace, num_experts: usize) -> Result<ActivationStats> {
    let mut counts = vec![0u64; num_experts];
    for pairs in &trace.tokens {
        for &(e, _) in pairs {
            if e >= num_experts {
                return Err(MxError::data(format!(
                    "trace references expert {e}, model has {num_experts}"
                )));
            }
            counts[e] += 1;
        }
    }
    Ok(ActivationStats {
        tokens_per_expert: counts,
        total_tokens: trace.num_tokens() as u64,
    })
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn expert_forward(x_e: &Matrix, w: &ExpertWeights) -> Result<Matrix> {
    let g = x_e.matmul_transposed(&w.gate)?;
    let u = x_e.matmul_transposed(&w.up)?;
    let mut a = g;
    for (av, uv) in a.data_mut().iter_mut().zip(u.data()) {
        *av = silu(*av) * uv;
    }
    a.matmul_transposed(&w.down)
}

fn expert_forward_quantized(x_e: &Matrix, w: &ExpertWeights, schemes: &[QuantScheme; NUM_LINEAR]) -> Result<Matrix> {
    let gate_q = fake_quantize_weights(&w.gate, &schemes[0])?;
    let up_q = fake_quantize_weights(&w.up, &schemes[1])?;
    let down_q = fake_quantize_weights(&w.down, &schemes[2])?;
    let g = fake_quantize_activations(x_e, &schemes[0])?.matmul_transposed(&gate_q)?;
    let u = fake_quantize_activations(x_e, &schemes[1])?.matmul_transposed(&up_q)?;
    let mut a = g;
    for (av, uv) in a.data_mut().iter_mut().zip(u.data()) {
        *av = silu(*av) * uv;
    }
    fake_quantize_activations(&a, &schemes[2])?.matmul_transposed(&down_q)
}

fn accumulate(out: &mut Matrix, rows: &[usize], weights: &[f64], y: &Matrix) {
    for (i, (&t, &w)) in rows.iter().zip(weights).enumerate() {
        let src = y.row(i).to_vec();
        for (o, v) in out.row_mut(t).iter_mut().zip(src) {
            *o += w * v;
        }
    }
}

/// Full-precision MoE block forward pass: the routing-weighted sum of expert
/// outputs, gathered back to token order.
pub fn forward_block(x: &Matrix, experts: &[ExpertWeights], trace: &RoutingTrace) -> Result<Matrix> {
    if trace.num_tokens() != x.rows {
        return Err(MxError::data(format!(
            "trace has {} tokens, input has {}",
            trace.num_tokens(),
            x.rows
        )));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for (e, w) in experts.iter().enumerate() {
        let (rows, weights) = trace.routed_to(e);
        if rows.is_empty() {
            continue;
        }
        let x_e = x.gather_rows(&rows);
        let y = expert_forward(&x_e, w)?;
        accumulate(&mut out, &rows, &weights, &y);
    }
    Ok(out)
}

/// Scheme assignment for every (expert, linear block) pair.
pub type SchemeAssignment = Vec<[QuantScheme; NUM_LINEAR]>;

/// Forward pass where each linear block applies its assigned scheme: weights
/// are fake-quantized ahead of the matmul and activations are quantized
/// dynamically at each linear input.
pub fn forward_block_quantized(
    x: &Matrix,
    experts: &[ExpertWeights],
    trace: &RoutingTrace,
    assignment: &SchemeAssignment,
) -> Result<Matrix> {
    if trace.num_tokens() != x.rows {
        return Err(MxError::data("trace/input token count mismatch"));
    }
    if assignment.len() != experts.len() {
        return Err(MxError::config(format!(
            "assignment covers {} experts, model has {}",
            assignment.len(),
            experts.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for (e, w) in experts.iter().enumerate() {
        let (rows, weights) = trace.routed_to(e);
        if rows.is_empty() {
            continue;
        }
        let x_e = x.gather_rows(&rows);
        let y = expert_forward_quantized(&x_e, w, &assignment[e])?;
        accumulate(&mut out, &rows, &weights, &y);
    }
    Ok(out)
}
