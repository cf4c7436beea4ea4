//! Declarative layer-by-layer architecture descriptions.
//!
//! The text form is line oriented:
//!
//! ```text
//! archspec 1
//! name desk-g
//! input image 3 32 32
//! conv 3 8 k=7 s=1 p=3 pad=reflect bias=false
//! norm 8 instance prunable
//! act relu
//! residual
//!   conv 8 8 k=3 s=1 p=1 pad=reflect bias=false
//!   norm 8 instance fixed
//! end
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARCHSPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// A latent vector fed as a `dim x 1 x 1` map.
    Noise { dim: usize },
}

impl InputKind {
    pub fn shape(&self) -> Shape3 {
        match *self {
            InputKind::Image {
                channels,
                height,
                width,
            } => Shape3::new(channels, height, width),
            InputKind::Noise { dim } => Shape3::new(dim, 1, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Instance,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvSpec),
    ConvTranspose(ConvTSpec),
    Norm {
        channels: usize,
        kind: NormKind,
        prunable: bool,
    },
    Act(Activation),
    /// `y = x + body(x)`.
    Residual(Vec<Layer>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// One layer positioned in the network, with its input and output shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Placed<'a> {
    pub path: String,
    pub op: PlacedOp<'a>,
    pub input: Shape3,
    pub output: Shape3,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlacedOp<'a> {
    Layer(&'a Layer),
    /// The elementwise add that closes a residual block.
    ResidualAdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input: InputKind,
    pub layers: Vec<Layer>,
}

impl ConvSpec {
    pub fn output(&self, input: Shape3) -> Option<Shape3> {
        let span = |n: usize| {
            let padded = n + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        Some(Shape3::new(self.out_ch, span(input.h)?, span(input.w)?))
    }
}

impl ConvTSpec {
    pub fn output(&self, input: Shape3) -> Option<Shape3> {
        let span = |n: usize| {
            let full = (n - 1) * self.stride + self.kernel + self.output_padding;
            full.checked_sub(2 * self.padding).filter(|&v| v > 0)
        };
        Some(Shape3::new(self.out_ch, span(input.h)?, span(input.w)?))
    }
}

fn child_path(prefix: &str, i: usize) -> String {
    if prefix.is_empty() {
        i.to_string()
    } else {
        format!("{prefix}.{i}")
    }
}

impl ArchSpec {
    /// Walks the network in execution order, checking channel chaining and
    /// the pruning rules, and returns every layer with its shapes.
    pub fn placed(&self) -> Result<Vec<Placed<'_>>> {
        let mut out = Vec::new();
        let shape = walk(&self.layers, "", self.input.shape(), &mut out)?;
        debug_assert!(shape.numel() > 0);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.placed().map(|_| ())
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        let placed = self.placed()?;
        Ok(placed.last().map(|p| p.output).unwrap_or_else(|| self.input.shape()))
    }

    /// Paths and widths of all prunable normalization layers, in order.
    pub fn prunable_norms(&self) -> Vec<(String, usize)> {
        fn rec(layers: &[Layer], prefix: &str, out: &mut Vec<(String, usize)>) {
            for (i, layer) in layers.iter().enumerate() {
                let path = child_path(prefix, i);
                match layer {
                    Layer::Norm {
                        channels,
                        prunable: true,
                        ..
                    } => out.push((path, *channels)),
                    Layer::Residual(body) => rec(body, &path, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        rec(&self.layers, "", &mut out);
        out
    }

    pub fn prunable_channel_count(&self) -> usize {
        self.prunable_norms().iter().map(|(_, c)| c).sum()
    }

    /// Uniformly scales every internal width by `fraction` (rounded, at
    /// least one channel). Input and output widths are kept.
    pub fn scale_width(&self, fraction: f64, name: &str) -> Result<ArchSpec> {
        let input_c = self.input.shape().c;
        let output_c = self.output_shape()?.c;
        let scale = |c: usize| ((c as f64 * fraction).round() as usize).max(1);
        fn rec(
            layers: &[Layer],
            f: &dyn Fn(usize, bool, bool) -> usize,
            first: &mut bool,
            last_conv: &[usize],
            counter: &mut usize,
        ) -> Vec<Layer> {
            layers
                .iter()
                .map(|layer| match layer {
                    Layer::Conv(c) => {
                        let is_first = std::mem::replace(first, false);
                        let id = *counter;
                        *counter += 1;
                        let is_last = last_conv.contains(&id);
                        Layer::Conv(ConvSpec {
                            in_ch: f(c.in_ch, is_first, false),
                            out_ch: f(c.out_ch, false, is_last),
                            ..*c
                        })
                    }
                    Layer::ConvTranspose(c) => {
                        let is_first = std::mem::replace(first, false);
                        let id = *counter;
                        *counter += 1;
                        let is_last = last_conv.contains(&id);
                        Layer::ConvTranspose(ConvTSpec {
                            in_ch: f(c.in_ch, is_first, false),
                            out_ch: f(c.out_ch, false, is_last),
                            ..*c
                        })
                    }
                    Layer::Norm {
                        channels,
                        kind,
                        prunable,
                    } => Layer::Norm {
                        channels: f(*channels, false, false),
                        kind: *kind,
                        prunable: *prunable,
                    },
                    Layer::Act(a) => Layer::Act(*a),
                    Layer::Residual(body) => Layer::Residual(rec(body, f, first, last_conv, counter)),
                })
                .collect()
        }
        // the last conv-like layer keeps its output width
        let total_convs = count_convs(&self.layers);
        let keep = |c: usize, is_first_in: bool, is_last_out: bool| {
            if is_first_in {
                input_c
            } else if is_last_out {
                output_c
            } else {
                scale(c)
            }
        };
        let mut first = true;
        let mut counter = 0;
        let layers = rec(
            &self.layers,
            &keep,
            &mut first,
            &[total_convs.saturating_sub(1)],
            &mut counter,
        );
        let spec = ArchSpec {
            name: name.to_string(),
            input: self.input,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn count_convs(layers: &[Layer]) -> usize {
    layers
        .iter()
        .map(|l| match l {
            Layer::Conv(_) | Layer::ConvTranspose(_) => 1,
            Layer::Residual(body) => count_convs(body),
            _ => 0,
        })
        .sum()
}

fn walk<'a>(layers: &'a [Layer], prefix: &str, mut shape: Shape3, out: &mut Vec<Placed<'a>>) -> Result<Shape3> {
    // Channels of the most recent prunable norm that have not yet been
    // consumed by a convolution.
    let mut pending_prune: Option<String> = None;
    let mut prev_is_conv = false;
    for (i, layer) in layers.iter().enumerate() {
        let path = child_path(prefix, i);
        let input = shape;
        let output = match layer {
            Layer::Conv(c) => {
                if c.in_ch != shape.c {
                    return Err(Error::arch(
                        &path,
                        format!("expects {} input channels, got {}", c.in_ch, shape.c),
                    ));
                }
                if c.kernel == 0 || c.stride == 0 || c.out_ch == 0 {
                    return Err(Error::arch(&path, "kernel, stride and width must be positive"));
                }
                if c.pad_mode == PadMode::Reflect && (c.padding >= shape.h || c.padding >= shape.w) {
                    return Err(Error::arch(&path, "reflect padding must be smaller than the input"));
                }
                pending_prune = None;
                c.output(shape)
                    .ok_or_else(|| Error::arch(&path, format!("kernel larger than padded input {shape}")))?
            }
            Layer::ConvTranspose(c) => {
                if c.in_ch != shape.c {
                    return Err(Error::arch(
                        &path,
                        format!("expects {} input channels, got {}", c.in_ch, shape.c),
                    ));
                }
                if c.kernel == 0 || c.stride == 0 || c.out_ch == 0 {
                    return Err(Error::arch(&path, "kernel, stride and width must be positive"));
                }
                if c.output_padding >= c.stride {
                    return Err(Error::arch(&path, "output padding must be smaller than the stride"));
                }
                pending_prune = None;
                c.output(shape)
                    .ok_or_else(|| Error::arch(&path, "transposed convolution produces an empty map"))?
            }
            Layer::Norm { channels, prunable, .. } => {
                if *channels != shape.c {
                    return Err(Error::arch(
                        &path,
                        format!("normalizes {} channels, input has {}", channels, shape.c),
                    ));
                }
                if *prunable {
                    if !prev_is_conv {
                        return Err(Error::arch(&path, "a prunable norm must directly follow a convolution"));
                    }
                    pending_prune = Some(path.clone());
                }
                shape
            }
            Layer::Act(_) => shape,
            Layer::Residual(body) => {
                if let Some(p) = pending_prune.take() {
                    return Err(Error::arch(p, "prunable channels feed a residual connection"));
                }
                let inner = walk(body, &path, shape, out)?;
                if inner != shape {
                    return Err(Error::arch(&path, format!("residual body maps {shape} to {inner}")));
                }
                out.push(Placed {
                    path: path.clone(),
                    op: PlacedOp::ResidualAdd,
                    input: shape,
                    output: shape,
                });
                prev_is_conv = false;
                continue;
            }
        };
        prev_is_conv = matches!(layer, Layer::Conv(_) | Layer::ConvTranspose(_));
        out.push(Placed {
            path,
            op: PlacedOp::Layer(layer),
            input,
            output,
        });
        shape = output;
    }
    if let Some(p) = pending_prune {
        return Err(Error::arch(
            p,
            if prefix.is_empty() {
                "prunable channels reach the network output"
            } else {
                "prunable channels reach a residual join"
            },
        ));
    }
    Ok(shape)
}

// ---------------------------------------------------------------------------
// text format

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "archspec {ARCHSPEC_VERSION}")?;
        writeln!(f, "name {}", self.name)?;
        match self.input {
            InputKind::Image {
                channels,
                height,
                width,
            } => writeln!(f, "input image {channels} {height} {width}")?,
            InputKind::Noise { dim } => writeln!(f, "input noise {dim}")?,
        }
        write_layers(f, &self.layers, 0)
    }
}

fn write_layers(f: &mut fmt::Formatter<'_>, layers: &[Layer], depth: usize) -> fmt::Result {
    let indent = "  ".repeat(depth);
    for layer in layers {
        match layer {
            Layer::Conv(c) => writeln!(
                f,
                "{indent}conv {} {} k={} s={} p={} pad={} bias={}",
                c.in_ch,
                c.out_ch,
                c.kernel,
                c.stride,
                c.padding,
                match c.pad_mode {
                    PadMode::Zero => "zero",
                    PadMode::Reflect => "reflect",
                },
                c.bias
            )?,
            Layer::ConvTranspose(c) => writeln!(
                f,
                "{indent}convt {} {} k={} s={} p={} op={} bias={}",
                c.in_ch, c.out_ch, c.kernel, c.stride, c.padding, c.output_padding, c.bias
            )?,
            Layer::Norm {
                channels,
                kind,
                prunable,
            } => writeln!(
                f,
                "{indent}norm {channels} {} {}",
                match kind {
                    NormKind::Instance => "instance",
                    NormKind::Batch => "batch",
                },
                if *prunable { "prunable" } else { "fixed" }
            )?,
            Layer::Act(a) => match a {
                Activation::Relu => writeln!(f, "{indent}act relu")?,
                Activation::LeakyRelu(s) => writeln!(f, "{indent}act leaky_relu {s:?}")?,
                Activation::Tanh => writeln!(f, "{indent}act tanh")?,
                Activation::Sigmoid => writeln!(f, "{indent}act sigmoid")?,
            },
            Layer::Residual(body) => {
                writeln!(f, "{indent}residual")?;
                write_layers(f, body, depth + 1)?;
                writeln!(f, "{indent}end")?;
            }
        }
    }
    Ok(())
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lines: Vec<(usize, Vec<&str>)> = s
            .lines()
            .enumerate()
            .map(|(i, l)| {
                (
                    i + 1,
                    l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>(),
                )
            })
            .filter(|(_, toks)| !toks.is_empty())
            .collect();
        let mut it = lines.into_iter().peekable();
        let err = |line: usize, reason: String| Error::ArchParse { line, reason };

        let (line, header) = it.next().ok_or_else(|| err(0, "empty specification".into()))?;
        if header.len() != 2 || header[0] != "archspec" {
            return Err(err(line, "expected `archspec <version>`".into()));
        }
        if header[1] != ARCHSPEC_VERSION.to_string() {
            return Err(err(line, format!("unsupported version {}", header[1])));
        }
        let (line, name) = it.next().ok_or_else(|| err(line, "missing name".into()))?;
        if name.len() != 2 || name[0] != "name" {
            return Err(err(line, "expected `name <identifier>`".into()));
        }
        let name = name[1].to_string();
        let (line, input) = it.next().ok_or_else(|| err(line, "missing input".into()))?;
        let input = match input.as_slice() {
            ["input", "image", c, h, w] => InputKind::Image {
                channels: parse_num(c, line)?,
                height: parse_num(h, line)?,
                width: parse_num(w, line)?,
            },
            ["input", "noise", d] => InputKind::Noise {
                dim: parse_num(d, line)?,
            },
            _ => return Err(err(line, "expected `input image C H W` or `input noise D`".into())),
        };
        let layers = parse_layers(&mut it, false)?;
        Ok(ArchSpec { name, input, layers })
    }
}

fn parse_num<T: FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse().map_err(|_| Error::ArchParse {
        line,
        reason: format!("`{tok}` is not a valid number"),
    })
}

type Lines<'a> = std::iter::Peekable<std::vec::IntoIter<(usize, Vec<&'a str>)>>;

fn parse_layers(it: &mut Lines<'_>, nested: bool) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    while let Some((line, toks)) = it.next() {
        let err = |reason: String| Error::ArchParse { line, reason };
        let layer = match toks[0] {
            "end" if nested => return Ok(layers),
            "end" => return Err(err("`end` without `residual`".into())),
            "residual" => {
                if toks.len() != 1 {
                    return Err(err("`residual` takes no arguments".into()));
                }
                Layer::Residual(parse_layers(it, true)?)
            }
            "conv" | "convt" => {
                if toks.len() < 3 {
                    return Err(err("expected input and output widths".into()));
                }
                let in_ch = parse_num(toks[1], line)?;
                let out_ch = parse_num(toks[2], line)?;
                let mut kernel = None;
                let mut stride = 1;
                let mut padding = 0;
                let mut output_padding = 0;
                let mut pad_mode = PadMode::Zero;
                let mut bias = true;
                for kv in &toks[3..] {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected key=value, got `{kv}`")))?;
                    match (toks[0], k) {
                        (_, "k") => kernel = Some(parse_num(v, line)?),
                        (_, "s") => stride = parse_num(v, line)?,
                        (_, "p") => padding = parse_num(v, line)?,
                        (_, "bias") => bias = parse_num(v, line)?,
                        ("conv", "pad") => {
                            pad_mode = match v {
                                "zero" => PadMode::Zero,
                                "reflect" => PadMode::Reflect,
                                _ => return Err(err(format!("unknown padding mode `{v}`"))),
                            }
                        }
                        ("convt", "op") => output_padding = parse_num(v, line)?,
                        _ => return Err(err(format!("unknown key `{k}` for {}", toks[0]))),
                    }
                }
                let kernel = kernel.ok_or_else(|| err("missing kernel size k=".into()))?;
                if toks[0] == "conv" {
                    Layer::Conv(ConvSpec {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        padding,
                        pad_mode,
                        bias,
                    })
                } else {
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
            }
            "norm" => {
                if toks.len() != 4 {
                    return Err(err("expected `norm C instance|batch prunable|fixed`".into()));
                }
                let kind = match toks[2] {
                    "instance" => NormKind::Instance,
                    "batch" => NormKind::Batch,
                    other => return Err(err(format!("unknown norm kind `{other}`"))),
                };
                let prunable = match toks[3] {
                    "prunable" => true,
                    "fixed" => false,
                    other => return Err(err(format!("expected prunable|fixed, got `{other}`"))),
                };
                Layer::Norm {
                    channels: parse_num(toks[1], line)?,
                    kind,
                    prunable,
                }
            }
            "act" => match toks.get(1..).unwrap_or(&[]) {
                ["relu"] => Layer::Act(Activation::Relu),
                ["tanh"] => Layer::Act(Activation::Tanh),
                ["sigmoid"] => Layer::Act(Activation::Sigmoid),
                ["leaky_relu", s] => Layer::Act(Activation::LeakyRelu(parse_num(s, line)?)),
                _ => return Err(err("unknown activation".into())),
            },
            other => return Err(err(format!("unknown layer kind `{other}`"))),
        };
        layers.push(layer);
    }
    if nested {
        return Err(Error::ArchParse {
            line: 0,
            reason: "unterminated residual block".into(),
        });
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "archspec 1
name tiny
input image 3 8 8
conv 3 4 k=3 s=1 p=1 pad=reflect bias=false
norm 4 instance prunable
act relu
conv 4 6 k=3 s=2 p=1 pad=zero bias=true
norm 6 instance fixed
act relu
residual
  conv 6 6 k=3 s=1 p=1 pad=reflect bias=false
  norm 6 instance prunable
  act relu
  conv 6 6 k=3 s=1 p=1 pad=reflect bias=false
  norm 6 instance fixed
end
convt 6 4 k=3 s=2 p=1 op=1 bias=false
norm 4 batch prunable
act leaky_relu 0.2
conv 4 3 k=3 s=1 p=1 pad=reflect bias=true
act tanh
";

    #[test]
    fn parses_and_round_trips() {
        let spec: ArchSpec = TEXT.parse().unwrap();
        assert_eq!(spec.to_string(), TEXT);
        assert_eq!(spec.output_shape().unwrap(), Shape3::new(3, 8, 8));
        let norms = spec.prunable_norms();
        assert_eq!(
            norms,
            vec![("1".to_string(), 4), ("6.1".to_string(), 6), ("8".to_string(), 4)]
        );
    }

    #[test]
    fn reports_channel_mismatch_with_layer() {
        let bad = TEXT.replace("conv 4 6 k=3", "conv 5 6 k=3");
        let spec: ArchSpec = bad.parse().unwrap();
        match spec.validate() {
            Err(Error::Arch { layer, .. }) => assert_eq!(layer, "3"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_pruning_into_residual_join() {
        let bad = TEXT.replace("  norm 6 instance fixed", "  norm 6 instance prunable");
        let spec: ArchSpec = bad.parse().unwrap();
        assert!(matches!(spec.validate(), Err(Error::Arch { .. })));
        let bad = TEXT.replace(
            "norm 6 instance fixed\nact relu\nresidual",
            "norm 6 instance prunable\nact relu\nresidual",
        );
        let spec: ArchSpec = bad.parse().unwrap();
        assert!(matches!(spec.validate(), Err(Error::Arch { .. })));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = TEXT.replace("act tanh", "act swish");
        match bad.parse::<ArchSpec>() {
            Err(Error::ArchParse { line, .. }) => assert_eq!(line, 21),
            other => panic!("unexpected {other:?}"),
        }
        assert!("archspec 2\nname x\ninput noise 4\n".parse::<ArchSpec>().is_err());
        assert!(TEXT.replace("bias=false", "bias=nope").parse::<ArchSpec>().is_err());
        assert!(TEXT.replace("end\n", "").parse::<ArchSpec>().is_err());
    }

    #[test]
    fn width_scaling_keeps_io() {
        let spec: ArchSpec = TEXT.parse().unwrap();
        let half = spec.scale_width(0.5, "half").unwrap();
        assert_eq!(half.input, spec.input);
        assert_eq!(half.output_shape().unwrap(), Shape3::new(3, 8, 8));
        assert_eq!(half.prunable_channel_count(), 2 + 3 + 2);
    }
}
