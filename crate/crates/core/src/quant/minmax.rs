//! Uniform min-max quantization (round-to-nearest).

use crate::error::{MxError, Result};
use crate::matrix::Matrix;
use crate::quant::scheme::QuantScheme;

/// Which side of a linear layer a tensor belongs to. Selects the bitwidth
/// and group size from the scheme; grouping always runs along the rows
/// (input channels for weights, features for activations).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantAxis {
    Weight,
    Activation,
}

/// Integer codes plus per-group scale (and zero offset when asymmetric).
///
/// Groups chunk each row; `groups_per_row` scales/zeros are stored per row.
/// Asymmetric dequantization is `codes * scale + zero` where `zero` is the
/// group minimum; symmetric is `codes * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    /// Group minima; `None` for symmetric schemes.
    pub zeros: Option<Vec<f64>>,
    pub scheme: QuantScheme,
    pub rows: usize,
    pub cols: usize,
    pub axis: QuantAxis,
    pub group_len: usize,
}

impl QuantizedTensor {
    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group_len
    }
}

fn bits_and_group(scheme: &QuantScheme, axis: QuantAxis) -> (u32, i64) {
    match axis {
        QuantAxis::Weight => (scheme.w_bits, scheme.w_group),
        QuantAxis::Activation => (scheme.a_bits, scheme.a_group),
    }
}

/// Scale and zero offset for one group, shared by RTN and GPTQ so both land
/// on the exact same grid.
pub(crate) fn group_params(seg: &[f64], bits: u32, symmetric: bool) -> (f64, f64) {
    if symmetric {
        let sym_max = ((1i64 << (bits - 1)) - 1) as f64;
        let amax = seg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if amax == 0.0 { 1.0 } else { amax / sym_max };
        (scale, 0.0)
    } else {
        let levels = ((1i64 << bits) - 1) as f64;
        let lo = seg.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range == 0.0 {
            (1.0, lo)
        } else {
            (range / levels, lo)
        }
    }
}

/// Round one value onto the grid, returning its integer code.
pub(crate) fn encode_value(v: f64, scale: f64, zero: f64, bits: u32, symmetric: bool) -> i32 {
    if symmetric {
        let sym_max = ((1i64 << (bits - 1)) - 1) as f64;
        (v / scale).round_ties_even().clamp(-sym_max, sym_max) as i32
    } else {
        let levels = ((1i64 << bits) - 1) as f64;
        ((v - zero) / scale).round_ties_even().clamp(0.0, levels) as i32
    }
}

/// Quantize each row of `x` group-wise onto the uniform grid of the scheme.
///
/// Asymmetric: `step = (max - min) / (2^bits - 1)`, codes in `[0, 2^bits - 1]`.
/// Symmetric: `step = max|x| / (2^(bits-1) - 1)`, codes in `±(2^(bits-1) - 1)`.
/// Rounding is half-to-even. Groups with zero range quantize to code 0 with
/// unit scale so dequantization reproduces the constant exactly.
pub fn quantize_minmax(x: &Matrix, scheme: &QuantScheme, axis: QuantAxis) -> Result<QuantizedTensor> {
    scheme.validate()?;
    if !x.is_finite() {
        return Err(MxError::data("quantize input contains non-finite values"));
    }
    let (bits, group) = bits_and_group(scheme, axis);
    let group_len = if group > 0 { group as usize } else { x.cols.max(1) };
    if !x.cols.is_multiple_of(group_len) {
        return Err(MxError::config(format!(
            "group size {} does not divide dimension {}",
            group_len, x.cols
        )));
    }
    let groups_per_row = x.cols / group_len;

    let mut codes = vec![0i32; x.rows * x.cols];
    let mut scales = vec![1.0; x.rows * groups_per_row];
    let mut zeros = if scheme.symmetric {
        None
    } else {
        Some(vec![0.0; x.rows * groups_per_row])
    };

    for r in 0..x.rows {
        let row = x.row(r);
        for g in 0..groups_per_row {
            let seg = &row[g * group_len..(g + 1) * group_len];
            let gi = r * groups_per_row + g;
            let (scale, zero) = group_params(seg, bits, scheme.symmetric);
            scales[gi] = scale;
            if let Some(z) = zeros.as_mut() {
                z[gi] = zero;
            }
            for (k, &v) in seg.iter().enumerate() {
                codes[r * x.cols + g * group_len + k] =
                    encode_value(v, scale, zero, bits, scheme.symmetric);
            }
        }
    }

    Ok(QuantizedTensor {
        codes,
        scales,
        zeros,
        scheme: *scheme,
        rows: x.rows,
        cols: x.cols,
        axis,
        group_len,
    })
}

/// Reconstruct real values from a quantized tensor.
pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let groups_per_row = q.groups_per_row();
    let mut data = vec![0.0; q.rows * q.cols];
    for r in 0..q.rows {
        for g in 0..groups_per_row {
            let gi = r * groups_per_row + g;
            let scale = q.scales[gi];
            let zero = q.zeros.as_ref().map_or(0.0, |z| z[gi]);
            for k in 0..q.group_len {
                let idx = r * q.cols + g * q.group_len + k;
                data[idx] = q.codes[idx] as f64 * scale + zero;
            }
        }
    }
    Matrix::new(q.rows, q.cols, data).expect("dequantized values are finite")
}

/// Quantize-then-dequantize a weight matrix. 16-bit weights pass through
/// untouched, which is what makes the identity scheme exact.
pub fn fake_quantize_weights(w: &Matrix, scheme: &QuantScheme) -> Result<Matrix> {
    if scheme.w_bits == 16 {
        return Ok(w.clone());
    }
    Ok(dequantize(&quantize_minmax(w, scheme, QuantAxis::Weight)?))
}

/// Quantize-then-dequantize activations (the dynamic runtime step).
pub fn fake_quantize_activations(x: &Matrix, scheme: &QuantScheme) -> Result<Matrix> {
    if scheme.a_bits == 16 {
        return Ok(x.clone());
    }
    Ok(dequantize(&quantize_minmax(x, scheme, QuantAxis::Activation)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asym(bits: u32, group: i64) -> QuantScheme {
        QuantScheme::new(bits, 16, group, -1, false).unwrap()
    }

    fn sym(bits: u32, group: i64) -> QuantScheme {
        QuantScheme::new(bits, 16, group, -1, true).unwrap()
    }

    #[test]
    fn on_grid_2bit_asym() {
        let x = Matrix::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let q = quantize_minmax(&x, &asym(2, -1), QuantAxis::Weight).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&q), x);
    }

    #[test]
    fn rounding_2bit_asym() {
        // step = 1; half-to-even sends 0.4 -> 0 and 2.6 -> 3
        let x = Matrix::new(1, 4, vec![0.0, 0.4, 2.6, 3.0]).unwrap();
        let q = quantize_minmax(&x, &asym(2, -1), QuantAxis::Weight).unwrap();
        assert_eq!(q.codes, vec![0, 0, 3, 3]);
    }

    #[test]
    fn symmetric_endpoints_8bit() {
        let x = Matrix::new(1, 2, vec![-1.0, 1.0]).unwrap();
        let q = quantize_minmax(&x, &sym(8, -1), QuantAxis::Weight).unwrap();
        assert_eq!(q.scales, vec![1.0 / 127.0]);
        assert_eq!(q.codes, vec![-127, 127]);
    }

    #[test]
    fn all_zero_group_scale_convention() {
        let x = Matrix::zeros(2, 4);
        for scheme in [asym(4, 2), sym(4, 2)] {
            let q = quantize_minmax(&x, &scheme, QuantAxis::Weight).unwrap();
            assert!(q.scales.iter().all(|&s| s == 1.0));
            assert!(q.codes.iter().all(|&c| c == 0));
            assert_eq!(dequantize(&q), x);
        }
    }

    #[test]
    fn constant_group_reconstructs_exactly() {
        let x = Matrix::new(1, 4, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let q = quantize_minmax(&x, &asym(2, -1), QuantAxis::Weight).unwrap();
        assert_eq!(dequantize(&q), x);
    }

    #[test]
    fn non_divisible_group_is_config_error() {
        let x = Matrix::zeros(1, 6);
        let r = quantize_minmax(&x, &asym(4, 4), QuantAxis::Weight);
        assert!(matches!(r, Err(MxError::Config(_))));
    }

    #[test]
    fn activation_axis_uses_a_bits() {
        let scheme = QuantScheme::new(2, 8, -1, -1, true).unwrap();
        let x = Matrix::new(1, 2, vec![-1.0, 1.0]).unwrap();
        let q = quantize_minmax(&x, &scheme, QuantAxis::Activation).unwrap();
        assert_eq!(q.codes, vec![-127, 127]);
    }

    #[test]
    fn identity_fake_quant_is_exact() {
        let x = Matrix::new(2, 3, vec![0.1, -0.7, 2.0, 3.5, 0.0, -9.25]).unwrap();
        let id = QuantScheme::identity();
        assert_eq!(fake_quantize_weights(&x, &id).unwrap(), x);
        assert_eq!(fake_quantize_activations(&x, &id).unwrap(), x);
    }
}
