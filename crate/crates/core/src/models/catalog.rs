//! Built-in architectures.

use super::spec::{Activation, ArchSpec, ConvSpec, ConvTSpec, InputKind, Layer, NormKind, PadMode};
use crate::error::{Error, Result};

pub const CALIBRATION: &str = "cyclegan-9blocks-256";
pub const DESK_TEACHER: &str = "desk-g";
pub const DESK_STUDENT: &str = "desk-g-half";
pub const NOISE_GENERATOR: &str = "desk-noise-g";
pub const DISCRIMINATOR: &str = "desk-d";

fn conv(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
    bias: bool,
) -> Layer {
    Layer::Conv(ConvSpec {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        pad_mode,
        bias,
    })
}

fn convt(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
    bias: bool,
) -> Layer {
    Layer::ConvTranspose(ConvTSpec {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        output_padding,
        bias,
    })
}

fn norm(channels: usize, kind: NormKind, prunable: bool) -> Layer {
    Layer::Norm {
        channels,
        kind,
        prunable,
    }
}

const RELU: Layer = Layer::Act(Activation::Relu);

/// Encoder, residual trunk, decoder. Interior channels of every stage except
/// the trunk are prunable.
pub fn resnet_generator(name: &str, size: usize, ngf: usize, blocks: usize, bias: bool, inst: NormKind) -> ArchSpec {
    let trunk = ngf * 4;
    let mut layers = vec![
        conv(3, ngf, 7, 1, 3, PadMode::Reflect, bias),
        norm(ngf, inst, true),
        RELU,
        conv(ngf, ngf * 2, 3, 2, 1, PadMode::Zero, bias),
        norm(ngf * 2, inst, true),
        RELU,
        conv(ngf * 2, trunk, 3, 2, 1, PadMode::Zero, bias),
        norm(trunk, inst, false),
        RELU,
    ];
    for _ in 0..blocks {
        layers.push(Layer::Residual(vec![
            conv(trunk, trunk, 3, 1, 1, PadMode::Reflect, bias),
            norm(trunk, inst, true),
            RELU,
            conv(trunk, trunk, 3, 1, 1, PadMode::Reflect, bias),
            norm(trunk, inst, false),
        ]));
    }
    layers.extend([
        convt(trunk, ngf * 2, 3, 2, 1, 1, bias),
        norm(ngf * 2, inst, true),
        RELU,
        convt(ngf * 2, ngf, 3, 2, 1, 1, bias),
        norm(ngf, inst, true),
        RELU,
        conv(ngf, 3, 7, 1, 3, PadMode::Reflect, true),
        Layer::Act(Activation::Tanh),
    ]);
    ArchSpec {
        name: name.to_string(),
        input: InputKind::Image {
            channels: 3,
            height: size,
            width: size,
        },
        layers,
    }
}

/// The standard 9-block image-translation generator at 256x256, used only
/// for accounting calibration. Every convolution carries a bias, as in the
/// reference implementation with instance norm.
pub fn calibration_generator() -> ArchSpec {
    resnet_generator(CALIBRATION, 256, 64, 9, true, NormKind::Instance)
}

/// Desk-scale teacher: 32x32 RGB, 8 base channels, 3 residual blocks.
pub fn desk_generator() -> ArchSpec {
    resnet_generator(DESK_TEACHER, 32, 8, 3, false, NormKind::Instance)
}

/// The teacher with every interior width halved.
pub fn desk_student() -> ArchSpec {
    desk_generator()
        .scale_width(0.5, DESK_STUDENT)
        .expect("halving the desk generator is valid")
}

/// Noise-to-image generator producing 32x32 RGB from a 16-dim latent.
pub fn noise_generator() -> ArchSpec {
    let bn = NormKind::Batch;
    ArchSpec {
        name: NOISE_GENERATOR.to_string(),
        input: InputKind::Noise { dim: 16 },
        layers: vec![
            convt(16, 32, 4, 1, 0, 0, false),
            norm(32, bn, true),
            RELU,
            convt(32, 16, 4, 2, 1, 0, false),
            norm(16, bn, true),
            RELU,
            convt(16, 8, 4, 2, 1, 0, false),
            norm(8, bn, true),
            RELU,
            convt(8, 3, 4, 2, 1, 0, true),
            Layer::Act(Activation::Tanh),
        ],
    }
}

/// Small PatchGAN discriminator mapping a 32x32 image to an 8x8 map of
/// probabilities.
pub fn discriminator() -> ArchSpec {
    let lrelu = Layer::Act(Activation::LeakyRelu(0.2));
    ArchSpec {
        name: DISCRIMINATOR.to_string(),
        input: InputKind::Image {
            channels: 3,
            height: 32,
            width: 32,
        },
        layers: vec![
            conv(3, 16, 4, 2, 1, PadMode::Zero, true),
            lrelu.clone(),
            conv(16, 32, 4, 2, 1, PadMode::Zero, false),
            norm(32, NormKind::Instance, false),
            lrelu,
            conv(32, 1, 3, 1, 1, PadMode::Zero, true),
            Layer::Act(Activation::Sigmoid),
        ],
    }
}

/// Named architectures shipped with the crate.
pub fn builtin_specs() -> Vec<ArchSpec> {
    vec![
        calibration_generator(),
        desk_generator(),
        desk_student(),
        noise_generator(),
        discriminator(),
    ]
}

pub fn by_name(name: &str) -> Result<ArchSpec> {
    builtin_specs()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Unknown {
            kind: "architecture",
            name: name.to_string(),
        })
}
