//! Randomized block-diagonal Hadamard rotation.
//!
//! The rotation `Q = diag(D_b * H / sqrt(n))` is orthonormal, so applying it
//! to both the activations and the weight input channels of a linear layer
//! leaves the layer output unchanged while flattening weight outliers before
//! quantization.

use crate::error::{MxError, Result};
use crate::matrix::Matrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default rotation block size. Dimensions that are not a multiple of a
/// power-of-two block are rejected rather than padded.
pub const DEFAULT_BLOCK_SIZE: usize = 64;

fn check_block(cols: usize, block: usize) -> Result<()> {
    if block == 0 || !block.is_power_of_two() {
        return Err(MxError::config(format!(
            "hadamard block size {block} must be a power of two"
        )));
    }
    if !cols.is_multiple_of(block) {
        return Err(MxError::config(format!(
            "dimension {cols} is not divisible by hadamard block size {block}"
        )));
    }
    Ok(())
}

/// Seed-derived ±1 diagonal covering a full dimension.
pub fn random_sign_diagonal(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// In-place fast Walsh-Hadamard transform of a power-of-two slice.
fn fwht(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for i in (0..n).step_by(h * 2) {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Apply `W * diag(D_b * H / sqrt(block))` block-diagonally along columns,
/// with an explicit ±1 diagonal (length = `w.cols`).
pub fn hadamard_transform_with_diag(w: &Matrix, block: usize, diag: &[f64]) -> Result<Matrix> {
    check_block(w.cols, block)?;
    if diag.len() != w.cols {
        return Err(MxError::config(format!(
            "diagonal length {} does not match dimension {}",
            diag.len(),
            w.cols
        )));
    }
    let inv_sqrt = 1.0 / (block as f64).sqrt();
    let mut out = w.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for b in 0..row.len() / block {
            let seg = &mut row[b * block..(b + 1) * block];
            for (v, d) in seg.iter_mut().zip(&diag[b * block..(b + 1) * block]) {
                *v *= d;
            }
            fwht(seg);
            for v in seg.iter_mut() {
                *v *= inv_sqrt;
            }
        }
    }
    Ok(out)
}

/// Apply the seeded randomized Hadamard rotation along the column dimension.
pub fn hadamard_transform(w: &Matrix, block: usize, seed: u64) -> Result<Matrix> {
    check_block(w.cols, block)?;
    let diag = random_sign_diagonal(w.cols, seed);
    hadamard_transform_with_diag(w, block, &diag)
}

/// Materialize the rotation matrix itself (transform of the identity).
pub fn rotation_matrix(dim: usize, block: usize, seed: u64) -> Result<Matrix> {
    hadamard_transform(&Matrix::identity(dim), block, seed)
}
