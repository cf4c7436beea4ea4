use serde::{Deserialize, Serialize};

use crate::models::{ParamRole, ParamSet};

pub const MIB: f64 = 1_048_576.0;

/// Bits charged per stored element, by tensor role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizePolicy {
    pub kernel_bits: u32,
    /// Biases, scales, shifts and normalization statistics.
    pub other_bits: u32,
}

impl SizePolicy {
    pub const FP32: SizePolicy = SizePolicy {
        kernel_bits: 32,
        other_bits: 32,
    };

    /// Kernels at `bits`, everything else at 32 bits.
    pub fn quantized(bits: u32) -> Self {
        SizePolicy {
            kernel_bits: bits,
            other_bits: 32,
        }
    }

    fn bits(&self, role: ParamRole) -> u32 {
        match role {
            ParamRole::Kernel => self.kernel_bits,
            _ => self.other_bits,
        }
    }
}

/// Storage in bytes: the sum over tensors of `count * bits / 8`.
pub fn model_size(params: &ParamSet, policy: &SizePolicy) -> f64 {
    params
        .entries()
        .iter()
        .map(|p| p.tensor.len() as f64 * policy.bits(p.role) as f64 / 8.0)
        .sum()
}

pub fn to_mib(bytes: f64) -> f64 {
    bytes / MIB
}
