//! GPTQ weight quantization: column-sequential rounding with error feedback
//! against the damped input Hessian `H = X^T X + damping * mean(diag) * I`.

use crate::error::{MxError, Result};
use crate::matrix::Matrix;
use crate::quant::minmax::{encode_value, group_params, quantize_minmax, QuantAxis, QuantizedTensor};
use crate::quant::scheme::QuantScheme;

/// Default damping fraction of the mean Hessian diagonal.
pub const DEFAULT_DAMPING: f64 = 1e-2;

/// Outcome of a GPTQ run. `rtn_fallback` is set when the damped Hessian was
/// not positive definite and plain round-to-nearest was used instead.
#[derive(Debug, Clone)]
pub struct GptqResult {
    pub quantized: QuantizedTensor,
    pub rtn_fallback: bool,
}

fn cholesky_lower(a: &Matrix) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Invert a symmetric positive definite matrix via its Cholesky factor.
fn spd_inverse(l: &Matrix) -> Matrix {
    let n = l.rows;
    // Forward substitution: M = L^{-1}.
    let mut m = Matrix::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                sum -= l[(i, k)] * m[(k, col)];
            }
            m[(i, col)] = sum / l[(i, i)];
        }
    }
    // A^{-1} = M^T M.
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut sum = 0.0;
            for k in i.max(j)..n {
                sum += m[(k, i)] * m[(k, j)];
            }
            inv[(i, j)] = sum;
        }
    }
    inv
}

/// Quantize `w` (`[out, in]`) with error feedback from calibration inputs
/// (`[samples, in]`). Falls back to RTN with a flag when the damped Hessian
/// is singular.
pub fn gptq_quantize(
    w: &Matrix,
    calib_inputs: &Matrix,
    scheme: &QuantScheme,
    damping: f64,
) -> Result<GptqResult> {
    scheme.validate()?;
    if calib_inputs.cols != w.cols {
        return Err(MxError::data(format!(
            "calibration width {} does not match weight input dim {}",
            calib_inputs.cols, w.cols
        )));
    }
    if damping <= 0.0 || damping.is_nan() {
        return Err(MxError::config("gptq damping must be > 0"));
    }
    if !w.is_finite() || !calib_inputs.is_finite() {
        return Err(MxError::data("gptq inputs contain non-finite values"));
    }

    let dim = w.cols;
    let group_len = if scheme.w_group > 0 {
        scheme.w_group as usize
    } else {
        dim
    };
    if !dim.is_multiple_of(group_len) {
        return Err(MxError::config(format!(
            "group size {} does not divide weight input dim {}",
            group_len, dim
        )));
    }

    // H = X^T X + damping * mean(diag) * I
    let mut h = calib_inputs.transpose().matmul(calib_inputs)?;
    let mean_diag = (0..dim).map(|i| h[(i, i)]).sum::<f64>() / dim as f64;
    for i in 0..dim {
        h[(i, i)] += damping * mean_diag;
    }

    let upper = cholesky_lower(&h)
        .map(|l| spd_inverse(&l))
        .and_then(|hinv| cholesky_lower(&hinv))
        .map(|l| l.transpose());

    let upper = match upper {
        Some(u) => u,
        None => {
            return Ok(GptqResult {
                quantized: quantize_minmax(w, scheme, QuantAxis::Weight)?,
                rtn_fallback: true,
            })
        }
    };

    let rows = w.rows;
    let groups_per_row = dim / group_len;
    let mut work = w.clone();
    let mut codes = vec![0i32; rows * dim];
    let mut scales = vec![1.0; rows * groups_per_row];
    let mut zeros = if scheme.symmetric {
        None
    } else {
        Some(vec![0.0; rows * groups_per_row])
    };

    for j in 0..dim {
        let g = j / group_len;
        if j % group_len == 0 {
            // Grid parameters come from the current, error-compensated values.
            for r in 0..rows {
                let seg = &work.row(r)[g * group_len..(g + 1) * group_len];
                let (scale, zero) = group_params(seg, scheme.w_bits, scheme.symmetric);
                scales[r * groups_per_row + g] = scale;
                if let Some(z) = zeros.as_mut() {
                    z[r * groups_per_row + g] = zero;
                }
            }
        }
        let d = upper[(j, j)];
        for r in 0..rows {
            let gi = r * groups_per_row + g;
            let scale = scales[gi];
            let zero = zeros.as_ref().map_or(0.0, |z| z[gi]);
            let v = work[(r, j)];
            let code = encode_value(v, scale, zero, scheme.w_bits, scheme.symmetric);
            codes[r * dim + j] = code;
            let err = (v - (code as f64 * scale + zero)) / d;
            for c in j + 1..dim {
                work[(r, c)] -= err * upper[(j, c)];
            }
        }
    }

    Ok(GptqResult {
        quantized: QuantizedTensor {
            codes,
            scales,
            zeros,
            scheme: *scheme,
            rows,
            cols: dim,
            axis: QuantAxis::Weight,
            group_len,
        },
        rtn_fallback: false,
    })
}

/// `||X (W - W_hat)^T||_F^2`, the proxy loss both GPTQ and RTN minimize.
pub fn proxy_loss(w: &Matrix, w_hat: &Matrix, calib_inputs: &Matrix) -> Result<f64> {
    let diff = w.sub(w_hat)?;
    let out = calib_inputs.matmul_transposed(&diff)?;
    let n = out.frobenius_norm();
    Ok(n * n)
}
