//! Uniform quantization arithmetic, scheme metadata, randomized Hadamard
//! preprocessing, and the RTN/GPTQ weight quantizers.

mod gptq;
mod hadamard;
mod minmax;
mod scheme;

pub use gptq::{gptq_quantize, proxy_loss, GptqResult, DEFAULT_DAMPING};
pub use hadamard::{
    hadamard_transform, hadamard_transform_with_diag, random_sign_diagonal, rotation_matrix,
    DEFAULT_BLOCK_SIZE,
};
pub use minmax::{
    dequantize, fake_quantize_activations, fake_quantize_weights, quantize_minmax, QuantAxis,
    QuantizedTensor,
};
pub use scheme::{QuantScheme, DEFAULT_META_BITS};
