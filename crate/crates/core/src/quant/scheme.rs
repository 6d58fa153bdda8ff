//! Quantization scheme descriptors and the `wxay_gz_b` notation.

use crate::error::{MxError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Bits used to store each scale / zero-point by default (fp16 metadata).
pub const DEFAULT_META_BITS: u32 = 16;

/// One hardware-supported quantization scheme: bitwidths for weights and
/// activations, group sizes (−1 = per-channel / per-token) and symmetry.
///
/// The textual form is `wxay_gz_b`, e.g. `w4a4_g128_sym` or `w2a16_g-1_asym`.
/// Activation bits of 16 mean activations stay in fp16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QuantScheme {
    pub w_bits: u32,
    pub a_bits: u32,
    /// Weight group size in elements along the input channel; −1 = per-channel.
    pub w_group: i64,
    /// Activation group size in elements along the feature dim; −1 = per-token.
    pub a_group: i64,
    pub symmetric: bool,
    /// Bits per stored scale or zero-point.
    pub meta_bits: u32,
}

const VALID_W_BITS: [u32; 5] = [2, 3, 4, 8, 16];
const VALID_A_BITS: [u32; 3] = [4, 8, 16];

impl QuantScheme {
    pub fn new(w_bits: u32, a_bits: u32, w_group: i64, a_group: i64, symmetric: bool) -> Result<Self> {
        let s = Self {
            w_bits,
            a_bits,
            w_group,
            a_group,
            symmetric,
            meta_bits: DEFAULT_META_BITS,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !VALID_W_BITS.contains(&self.w_bits) {
            return Err(MxError::config(format!(
                "w_bits {} not in {:?}",
                self.w_bits, VALID_W_BITS
            )));
        }
        if !VALID_A_BITS.contains(&self.a_bits) {
            return Err(MxError::config(format!(
                "a_bits {} not in {:?}",
                self.a_bits, VALID_A_BITS
            )));
        }
        for (name, g) in [("w_group", self.w_group), ("a_group", self.a_group)] {
            if g != -1 && g <= 0 {
                return Err(MxError::config(format!("{name} must be positive or -1, got {g}")));
            }
        }
        if self.meta_bits == 0 {
            return Err(MxError::config("meta_bits must be positive"));
        }
        Ok(())
    }

    /// The 16-bit passthrough scheme: no weight or activation quantization.
    pub fn identity() -> Self {
        Self {
            w_bits: 16,
            a_bits: 16,
            w_group: -1,
            a_group: -1,
            symmetric: true,
            meta_bits: DEFAULT_META_BITS,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.w_bits == 16 && self.a_bits == 16
    }

    /// Parse the `wxay_gz_b` notation. The single group size `z` applies to
    /// weights; activations share it when they are quantized (a_bits < 16)
    /// and stay per-token otherwise.
    pub fn parse(s: &str) -> Result<Self> {
        let err = || MxError::config(format!("cannot parse scheme notation `{s}`"));
        let parts: Vec<&str> = s.trim().split('_').collect();
        if parts.len() != 3 {
            return Err(err());
        }
        let wa = parts[0];
        if !wa.starts_with('w') {
            return Err(err());
        }
        let a_pos = wa.find('a').ok_or_else(err)?;
        let w_bits: u32 = wa[1..a_pos].parse().map_err(|_| err())?;
        let a_bits: u32 = wa[a_pos + 1..].parse().map_err(|_| err())?;
        if !parts[1].starts_with('g') {
            return Err(err());
        }
        let group: i64 = parts[1][1..].parse().map_err(|_| err())?;
        let symmetric = match parts[2] {
            "sym" => true,
            "asym" => false,
            _ => return Err(err()),
        };
        let a_group = if a_bits < 16 { group } else { -1 };
        Self::new(w_bits, a_bits, group, a_group, symmetric)
    }

    pub fn notation(&self) -> String {
        format!(
            "w{}a{}_g{}_{}",
            self.w_bits,
            self.a_bits,
            self.w_group,
            if self.symmetric { "sym" } else { "asym" }
        )
    }

    /// Parse a comma-separated scheme list.
    pub fn parse_list(s: &str) -> Result<Vec<QuantScheme>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Self::parse)
            .collect()
    }

    /// The scheme set used throughout the planner by default.
    pub fn default_set() -> Vec<QuantScheme> {
        [
            "w2a16_g128_asym",
            "w4a16_g-1_asym",
            "w8a8_g-1_sym",
            "w4a4_g-1_sym",
            "w4a4_g128_sym",
            "w16a16_g-1_sym",
        ]
        .iter()
        .map(|s| Self::parse(s).expect("builtin scheme"))
        .collect()
    }

    /// Average stored bits per weight element, metadata included.
    ///
    /// `channel_len` is the input-channel length the per-channel (−1) group
    /// spans. Symmetric schemes store one scale per group, asymmetric a scale
    /// and a zero-point. The 16-bit identity carries no metadata.
    pub fn storage_bits_per_weight(&self, channel_len: usize) -> Result<f64> {
        if self.w_bits == 16 {
            return Ok(16.0);
        }
        let group_len = if self.w_group > 0 {
            self.w_group as usize
        } else {
            if channel_len == 0 {
                return Err(MxError::config(
                    "per-channel storage width needs a channel length",
                ));
            }
            channel_len
        };
        let meta_count = if self.symmetric { 1.0 } else { 2.0 };
        Ok(self.w_bits as f64 + meta_count * self.meta_bits as f64 / group_len as f64)
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.notation())
    }
}

impl TryFrom<String> for QuantScheme {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        QuantScheme::parse(&s).map_err(|e| e.to_string())
    }
}

impl From<QuantScheme> for String {
    fn from(s: QuantScheme) -> String {
        s.notation()
    }
}
