use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{Activation, ArchSpec, InputKind, Layer, PlacedOp, Shape3};

/// Published FLOPs of the 9-block translation generator at 256x256, in
/// giga-FLOPs of unstated prefix.
pub const CALIBRATION_TARGET_GFLOPS: f64 = 52.90;

/// Per-element operation counts used when elementwise work is included.
pub const NORM_OPS_PER_ELEMENT: f64 = 7.0;
pub const ACT_OPS_PER_ELEMENT: f64 = 1.0;
pub const ADD_OPS_PER_ELEMENT: f64 = 1.0;

/// Grid on which a transposed convolution's multiply-accumulates are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransposedGrid {
    /// One `K*K*C_out` scatter per input pixel: the work actually done.
    Input,
    /// `K*K*C_in` per output pixel, as if it were a stride-1 convolution.
    Output,
}

/// What "giga" means when a count is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GigaPrefix {
    /// 10^9.
    Decimal,
    /// 2^30, the prefix under which sizes are quoted in MB = 2^20 bytes.
    Binary,
}

impl GigaPrefix {
    pub fn value(self) -> f64 {
        match self {
            GigaPrefix::Decimal => 1e9,
            GigaPrefix::Binary => 1_073_741_824.0,
        }
    }
}

/// How operations are tallied into a FLOPs figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopConvention {
    /// FLOPs charged per multiply-accumulate: 1 or 2.
    pub flops_per_mac: u32,
    /// Count bias adds, normalization, activations and residual adds.
    pub elementwise: bool,
    pub transposed: TransposedGrid,
    /// Prefix used by [`FlopConvention::to_giga`].
    pub prefix: GigaPrefix,
}

impl FlopConvention {
    /// The convention that the calibration selects; see [`calibrate`]. One
    /// FLOP per multiply-accumulate, convolutions only, transposed layers on
    /// the output grid, binary giga.
    pub const CALIBRATED: FlopConvention = FlopConvention {
        flops_per_mac: 1,
        elementwise: false,
        transposed: TransposedGrid::Output,
        prefix: GigaPrefix::Binary,
    };

    /// Multiply and add as two FLOPs, convolutions only.
    pub const TWO_PER_MAC: FlopConvention = FlopConvention {
        flops_per_mac: 2,
        elementwise: false,
        transposed: TransposedGrid::Input,
        prefix: GigaPrefix::Decimal,
    };

    pub fn all() -> Vec<FlopConvention> {
        let mut out = Vec::new();
        for flops_per_mac in [1, 2] {
            for elementwise in [false, true] {
                for transposed in [TransposedGrid::Input, TransposedGrid::Output] {
                    for prefix in [GigaPrefix::Decimal, GigaPrefix::Binary] {
                        out.push(FlopConvention {
                            flops_per_mac,
                            elementwise,
                            transposed,
                            prefix,
                        });
                    }
                }
            }
        }
        out
    }

    /// A raw count in giga-FLOPs under this convention's prefix.
    pub fn to_giga(&self, flops: f64) -> f64 {
        flops / self.prefix.value()
    }
}

impl Default for FlopConvention {
    fn default() -> Self {
        Self::CALIBRATED
    }
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-flop-mac/{}/transposed-{}/giga-{}",
            self.flops_per_mac,
            if self.elementwise { "elementwise" } else { "conv-only" },
            match self.transposed {
                TransposedGrid::Input => "input",
                TransposedGrid::Output => "output",
            },
            match self.prefix {
                GigaPrefix::Decimal => "1e9",
                GigaPrefix::Binary => "2^30",
            }
        )
    }
}

/// FLOPs of one forward pass of a single sample of `spec`'s input shape.
pub fn count_flops(spec: &ArchSpec, conv: &FlopConvention) -> Result<f64> {
    Ok(layer_flops(spec, conv)?.iter().map(|(_, f)| f).sum())
}

/// [`count_flops`] with the input resized to `input` (image specs only).
pub fn count_flops_at(spec: &ArchSpec, input: Shape3, conv: &FlopConvention) -> Result<f64> {
    let mut s = spec.clone();
    s.input = match s.input {
        InputKind::Image { .. } => InputKind::Image {
            channels: input.c,
            height: input.h,
            width: input.w,
        },
        InputKind::Noise { .. } => InputKind::Noise { dim: input.c },
    };
    count_flops(&s, conv)
}

/// Per-layer FLOPs, keyed by layer path, in execution order.
pub fn layer_flops(spec: &ArchSpec, conv: &FlopConvention) -> Result<Vec<(String, f64)>> {
    let mac = conv.flops_per_mac as f64;
    let ew = if conv.elementwise { 1.0 } else { 0.0 };
    let mut out = Vec::new();
    for p in spec.placed()? {
        let o = p.output;
        let out_elems = o.numel() as f64;
        let f = match p.op {
            PlacedOp::Layer(Layer::Conv(c)) => {
                let macs = (c.kernel * c.kernel * c.in_ch) as f64 * out_elems;
                mac * macs + if c.bias { ew * out_elems } else { 0.0 }
            }
            PlacedOp::Layer(Layer::ConvTranspose(c)) => {
                let k2 = (c.kernel * c.kernel) as f64;
                let macs = match conv.transposed {
                    TransposedGrid::Input => k2 * (c.in_ch * c.out_ch) as f64 * (p.input.h * p.input.w) as f64,
                    TransposedGrid::Output => k2 * c.in_ch as f64 * out_elems,
                };
                mac * macs + if c.bias { ew * out_elems } else { 0.0 }
            }
            PlacedOp::Layer(Layer::Norm { .. }) => ew * NORM_OPS_PER_ELEMENT * out_elems,
            PlacedOp::Layer(Layer::Act(a)) => {
                let per = match a {
                    Activation::Relu | Activation::LeakyRelu(_) | Activation::Tanh | Activation::Sigmoid => {
                        ACT_OPS_PER_ELEMENT
                    }
                };
                ew * per * out_elems
            }
            PlacedOp::Layer(Layer::Residual(_)) => 0.0,
            PlacedOp::ResidualAdd => ew * ADD_OPS_PER_ELEMENT * out_elems,
        };
        out.push((p.path, f));
    }
    Ok(out)
}

/// Result of scoring every convention against a published figure.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// The published figure in giga-FLOPs.
    pub target: f64,
    /// Every convention with its giga-FLOPs and signed relative error.
    pub candidates: Vec<(FlopConvention, f64, f64)>,
}

impl Calibration {
    /// The candidate with the smallest absolute relative error.
    pub fn best(&self) -> (FlopConvention, f64, f64) {
        *self
            .candidates
            .iter()
            .min_by(|a, b| a.2.abs().total_cmp(&b.2.abs()))
            .expect("at least one candidate")
    }
}

/// Counts `spec` under every convention and ranks them against `target`
/// giga-FLOPs.
pub fn calibrate(spec: &ArchSpec, target: f64) -> Result<Calibration> {
    let candidates = FlopConvention::all()
        .into_iter()
        .map(|c| {
            let f = c.to_giga(count_flops(spec, &c)?);
            Ok((c, f, (f - target) / target))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration { target, candidates })
}
