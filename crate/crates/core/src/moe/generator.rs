//! Synthetic MoE generator.
//!
//! Gaussian weights with per-expert scale multipliers, optional injected
//! outlier channels, and a router bias ramp. The heterogeneous preset makes
//! both effects the planner cares about reproducible on demand: experts with
//! very different quantization sensitivity and activation frequencies that
//! spread by an order of magnitude.

use super::{ExpertWeights, MoEBlockSpec, MoEModel};
use crate::error::Result;
use crate::matrix::Matrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub spec: MoEBlockSpec,
    pub seed: u64,
    /// Per-expert weight scale multipliers, geometrically interpolated from
    /// first to last expert. (1, 1) keeps all experts statistically equal.
    pub expert_scale_range: (f64, f64),
    /// Number of weight columns per linear block amplified as outliers.
    pub outlier_channels: usize,
    /// Multiplier applied to outlier columns.
    pub outlier_magnitude: f64,
    /// Router bias, linearly interpolated from first to last expert. A wide
    /// negative ramp starves the tail experts of tokens.
    pub router_bias_range: (f64, f64),
}

impl GeneratorConfig {
    /// Uniform model: statistically identical experts, flat routing.
    pub fn uniform(spec: MoEBlockSpec, seed: u64) -> Self {
        Self {
            spec,
            seed,
            expert_scale_range: (1.0, 1.0),
            outlier_channels: 0,
            outlier_magnitude: 1.0,
            router_bias_range: (0.0, 0.0),
        }
    }

    /// Heterogeneous model: scaled experts, injected outlier channels, and a
    /// router bias ramp tuned to spread activation frequencies by >= 10x.
    pub fn heterogeneous(spec: MoEBlockSpec, seed: u64) -> Self {
        Self {
            spec,
            seed,
            expert_scale_range: (0.5, 5.0),
            outlier_channels: (spec.hidden / 16).max(1),
            outlier_magnitude: 8.0,
            router_bias_range: (0.0, -6.0),
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * std
        })
        .collect();
    Matrix::new(rows, cols, data).expect("gaussian samples are finite")
}

fn amplify_columns(m: &mut Matrix, rng: &mut ChaCha8Rng, count: usize, magnitude: f64) {
    let cols = m.cols;
    for _ in 0..count {
        let c = rng.random_range(0..cols);
        for r in 0..m.rows {
            m[(r, c)] *= magnitude;
        }
    }
}

fn interpolate(range: (f64, f64), i: usize, n: usize, geometric: bool) -> f64 {
    if n <= 1 {
        return range.0;
    }
    let t = i as f64 / (n - 1) as f64;
    if geometric {
        (range.0.ln() * (1.0 - t) + range.1.ln() * t).exp()
    } else {
        range.0 * (1.0 - t) + range.1 * t
    }
}

/// Deterministically generate a synthetic model from the config.
pub fn generate_model(cfg: &GeneratorConfig) -> Result<MoEModel> {
    cfg.spec.validate()?;
    let (e_count, d, f) = (cfg.spec.num_experts, cfg.spec.hidden, cfg.spec.intermediate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut experts = Vec::with_capacity(e_count);
    for e in 0..e_count {
        let scale = interpolate(cfg.expert_scale_range, e, e_count, true);
        let mut gate = gaussian_matrix(&mut rng, f, d, scale / (d as f64).sqrt());
        let mut up = gaussian_matrix(&mut rng, f, d, scale / (d as f64).sqrt());
        let mut down = gaussian_matrix(&mut rng, d, f, scale / (f as f64).sqrt());
        if cfg.outlier_channels > 0 {
            amplify_columns(&mut gate, &mut rng, cfg.outlier_channels, cfg.outlier_magnitude);
            amplify_columns(&mut up, &mut rng, cfg.outlier_channels, cfg.outlier_magnitude);
            amplify_columns(&mut down, &mut rng, cfg.outlier_channels, cfg.outlier_magnitude);
        }
        experts.push(ExpertWeights { gate, up, down });
    }
    let router = gaussian_matrix(&mut rng, e_count, d, 1.0 / (d as f64).sqrt());
    let router_bias: Vec<f64> = (0..e_count)
        .map(|e| interpolate(cfg.router_bias_range, e, e_count, false))
        .collect();
    let model = MoEModel {
        spec: cfg.spec,
        experts,
        router,
        router_bias,
    };
    model.validate()?;
    Ok(model)
}

/// Standard-normal token batch `[count, hidden]`, deterministic per seed.
pub fn gen_tokens(hidden: usize, count: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_matrix(&mut rng, count, hidden, 1.0)
}
