//! Forward and backward passes over a compiled [`ArchSpec`].

use rand::Rng;

use super::kernels::{col2im, gemm, im2col, pad, unpad};
use super::params::{ParamRole, ParamSet};
use super::spec::{Activation, ArchSpec, ConvSpec, ConvTSpec, Layer, NormKind, Shape3};
use crate::error::{Error, Result};
use crate::quantization::{quantize_weight_slice, QuantConfig};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// How quantizers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum QuantMode {
    /// Full precision.
    #[default]
    Off,
    /// Forward surrogate of the straight-through rules: activations are
    /// clamped to `[0, p]` without rounding and weights are used as is.
    Clamp { clamp: f64 },
    /// Fake quantization: kernels pass through `q_w`, activations after every
    /// ReLU pass through `q_a`.
    Fake(QuantConfig),
}

impl QuantMode {
    pub fn from_config(cfg: Option<QuantConfig>) -> Self {
        cfg.map_or(QuantMode::Off, QuantMode::Fake)
    }

    fn clamp(&self) -> Option<f64> {
        match self {
            QuantMode::Off => None,
            QuantMode::Clamp { clamp } => Some(*clamp),
            QuantMode::Fake(cfg) => Some(cfg.clamp),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    pub quant: QuantMode,
    /// Batch-norm layers use batch statistics when set, running statistics
    /// otherwise. Instance norm ignores it.
    pub train: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(quant: QuantMode) -> Self {
        ForwardOptions { quant, train: true }
    }
}

/// Parameter initialization distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub conv_std: f64,
    pub gamma_range: (f64, f64),
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            conv_std: 0.02,
            gamma_range: (0.5, 1.0),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        spec: ConvSpec,
        weight: usize,
        bias: Option<usize>,
    },
    ConvT {
        spec: ConvTSpec,
        weight: usize,
        bias: Option<usize>,
    },
    Norm {
        kind: NormKind,
        gamma: usize,
        beta: usize,
        running: Option<(usize, usize)>,
    },
    Act(Activation),
    Residual(Vec<Op>),
}

/// Per-layer values kept for the backward pass.
#[derive(Debug, Clone)]
enum Cache {
    Conv {
        input: Shape3,
        padded: Shape3,
        cols: Vec<Vec<f64>>,
        weight: Option<Tensor>,
    },
    ConvT {
        input: Tensor,
        weight: Option<Tensor>,
    },
    Norm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
        frozen_stats: bool,
    },
    Act {
        /// Post-activation (pre-quantization) values.
        out: Tensor,
        /// Pre-activation values, kept for leaky ReLU.
        pre: Option<Tensor>,
        clamp: Option<f64>,
    },
    Residual(Vec<Cache>),
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
    input_shape: Vec<usize>,
}

/// A compiled architecture: an immutable graph whose parameters live in a
/// separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchSpec,
    ops: Vec<Op>,
    layout: ParamSet,
}

impl Network {
    pub fn new(spec: ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut layout = ParamSet::new();
        let ops = compile(&spec.layers, "", &mut layout);
        Ok(Network { spec, ops, layout })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    /// Parameter names, roles and shapes (all zeros).
    pub fn layout(&self) -> &ParamSet {
        &self.layout
    }

    pub fn input_shape(&self) -> Shape3 {
        self.spec.input.shape()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, init: &InitConfig, rng: &mut R) -> ParamSet {
        let mut params = self.layout.clone();
        for p in params.entries_mut() {
            p.tensor = match p.role {
                ParamRole::Kernel => Tensor::randn(p.tensor.shape(), init.conv_std, rng),
                ParamRole::Gamma => Tensor::uniform(p.tensor.shape(), init.gamma_range.0, init.gamma_range.1, rng),
                ParamRole::RunningVar => Tensor::full(p.tensor.shape(), 1.0),
                ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => Tensor::zeros(p.tensor.shape()),
            };
        }
        params
    }

    /// Checks that `params` has exactly this network's layout.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        if !self.layout.same_layout(params) {
            return Err(Error::config(format!(
                "parameter set does not match architecture `{}`",
                self.spec.name
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.input_shape();
        if x.shape().len() != 4 || x.shape()[1..] != [s.c, s.h, s.w] {
            return Err(Error::Shape {
                expected: vec![x.shape().first().copied().unwrap_or(0), s.c, s.h, s.w],
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor, opts: &ForwardOptions) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.ops.len());
        let y = run_ops(&self.ops, params, x.clone(), opts, Some(&mut caches));
        Ok((
            y,
            Trace {
                caches,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    /// Forward pass without keeping a trace.
    pub fn infer(&self, params: &ParamSet, x: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(run_ops(&self.ops, params, x.clone(), opts, None))
    }

    /// Backpropagates `grad_out` through the traced pass. Parameter gradients
    /// are accumulated into `grads` when given; the input gradient is
    /// returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &ParamSet,
        trace: &Trace,
        grad_out: &Tensor,
        mut grads: Option<&mut ParamSet>,
        want_input_grad: bool,
    ) -> Option<Tensor> {
        let g = back_ops(
            &self.ops,
            &trace.caches,
            params,
            grad_out.clone(),
            &mut grads,
            want_input_grad,
        );
        if want_input_grad {
            debug_assert_eq!(g.shape(), trace.input_shape.as_slice());
            Some(g)
        } else {
            None
        }
    }

    /// Folds batch statistics from a training-mode pass into the running
    /// estimates of batch-norm layers.
    pub fn update_running_stats(&self, params: &mut ParamSet, trace: &Trace) {
        fn rec(ops: &[Op], caches: &[Cache], params: &mut ParamSet) {
            for (op, cache) in ops.iter().zip(caches) {
                match (op, cache) {
                    (
                        Op::Norm {
                            running: Some((rm, rv)),
                            ..
                        },
                        Cache::Norm {
                            batch_stats: Some((mean, var)),
                            ..
                        },
                    ) => {
                        for (r, m) in params.tensor_mut(*rm).data_mut().iter_mut().zip(mean) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                        }
                        for (r, v) in params.tensor_mut(*rv).data_mut().iter_mut().zip(var) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                        }
                    }
                    (Op::Residual(inner), Cache::Residual(ic)) => rec(inner, ic, params),
                    _ => {}
                }
            }
        }
        rec(&self.ops, &trace.caches, params);
    }
}

fn compile(layers: &[Layer], prefix: &str, layout: &mut ParamSet) -> Vec<Op> {
    let mut ops = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let path = if prefix.is_empty() {
            i.to_string()
        } else {
            format!("{prefix}.{i}")
        };
        let op = match layer {
            Layer::Conv(c) => Op::Conv {
                spec: *c,
                weight: layout.push(
                    format!("{path}.weight"),
                    ParamRole::Kernel,
                    Tensor::zeros(&[c.out_ch, c.in_ch, c.kernel, c.kernel]),
                ),
                bias: c
                    .bias
                    .then(|| layout.push(format!("{path}.bias"), ParamRole::Bias, Tensor::zeros(&[c.out_ch]))),
            },
            Layer::ConvTranspose(c) => Op::ConvT {
                spec: *c,
                weight: layout.push(
                    format!("{path}.weight"),
                    ParamRole::Kernel,
                    Tensor::zeros(&[c.in_ch, c.out_ch, c.kernel, c.kernel]),
                ),
                bias: c
                    .bias
                    .then(|| layout.push(format!("{path}.bias"), ParamRole::Bias, Tensor::zeros(&[c.out_ch]))),
            },
            Layer::Norm { channels, kind, .. } => {
                let gamma = layout.push(format!("{path}.gamma"), ParamRole::Gamma, Tensor::zeros(&[*channels]));
                let beta = layout.push(format!("{path}.beta"), ParamRole::Beta, Tensor::zeros(&[*channels]));
                let running = (*kind == NormKind::Batch).then(|| {
                    (
                        layout.push(
                            format!("{path}.running_mean"),
                            ParamRole::RunningMean,
                            Tensor::zeros(&[*channels]),
                        ),
                        layout.push(
                            format!("{path}.running_var"),
                            ParamRole::RunningVar,
                            Tensor::zeros(&[*channels]),
                        ),
                    )
                });
                Op::Norm {
                    kind: *kind,
                    gamma,
                    beta,
                    running,
                }
            }
            Layer::Act(a) => Op::Act(*a),
            Layer::Residual(body) => Op::Residual(compile(body, &path, layout)),
        };
        ops.push(op);
    }
    ops
}

fn effective_weight(params: &ParamSet, id: usize, quant: &QuantMode) -> Option<Tensor> {
    match quant {
        QuantMode::Fake(cfg) => {
            let mut w = params.tensor(id).clone();
            quantize_weight_slice(w.data_mut(), cfg);
            Some(w)
        }
        _ => None,
    }
}

fn run_ops(
    ops: &[Op],
    params: &ParamSet,
    mut x: Tensor,
    opts: &ForwardOptions,
    mut caches: Option<&mut Vec<Cache>>,
) -> Tensor {
    for op in ops {
        let (y, cache) = match op {
            Op::Conv { spec, weight, bias } => conv_forward(spec, params, *weight, *bias, &x, opts, caches.is_some()),
            Op::ConvT { spec, weight, bias } => convt_forward(spec, params, *weight, *bias, &x, opts, caches.is_some()),
            Op::Norm {
                kind,
                gamma,
                beta,
                running,
            } => norm_forward(*kind, params, *gamma, *beta, *running, &x, opts),
            Op::Act(a) => act_forward(*a, &x, &opts.quant),
            Op::Residual(body) => {
                let mut inner = Vec::new();
                let mut y = run_ops(body, params, x.clone(), opts, caches.as_ref().map(|_| &mut inner));
                y.add_assign(&x);
                (y, Cache::Residual(inner))
            }
        };
        if let Some(c) = caches.as_deref_mut() {
            c.push(cache);
        }
        x = y;
    }
    x
}

fn back_ops(
    ops: &[Op],
    caches: &[Cache],
    params: &ParamSet,
    mut g: Tensor,
    grads: &mut Option<&mut ParamSet>,
    want_input_grad: bool,
) -> Tensor {
    for (i, (op, cache)) in ops.iter().zip(caches).enumerate().rev() {
        let need_dx = want_input_grad || i > 0;
        g = match (op, cache) {
            (
                Op::Conv { spec, weight, bias },
                Cache::Conv {
                    input,
                    padded,
                    cols,
                    weight: wq,
                },
            ) => {
                let w = wq.as_ref().unwrap_or_else(|| params.tensor(*weight));
                conv_backward(spec, w, *input, *padded, cols, &g, grads, *weight, *bias, need_dx)
            }
            (Op::ConvT { spec, weight, bias }, Cache::ConvT { input, weight: wq }) => {
                let w = wq.as_ref().unwrap_or_else(|| params.tensor(*weight));
                convt_backward(spec, w, input, &g, grads, *weight, *bias, need_dx)
            }
            (
                Op::Norm { gamma, beta, .. },
                Cache::Norm {
                    xhat,
                    inv_std,
                    frozen_stats,
                    ..
                },
            ) => norm_backward(params, *gamma, *beta, xhat, inv_std, *frozen_stats, &g, grads),
            (Op::Act(a), Cache::Act { out, pre, clamp }) => act_backward(*a, out, pre.as_ref(), *clamp, g),
            (Op::Residual(body), Cache::Residual(inner)) => {
                let mut through = back_ops(body, inner, params, g.clone(), grads, true);
                through.add_assign(&g);
                through
            }
            _ => unreachable!("trace does not match network"),
        };
    }
    g
}

// ---------------------------------------------------------------------------
// convolution

fn conv_forward(
    spec: &ConvSpec,
    params: &ParamSet,
    weight: usize,
    bias: Option<usize>,
    x: &Tensor,
    opts: &ForwardOptions,
    keep: bool,
) -> (Tensor, Cache) {
    let (n, c, h, w) = x.dims4();
    let input = Shape3::new(c, h, w);
    let out_shape = spec.output(input).expect("validated");
    let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
    let wq = effective_weight(params, weight, &opts.quant);
    let wt = wq.as_ref().unwrap_or_else(|| params.tensor(weight)).data();
    let k = spec.kernel;
    let rows = c * k * k;
    let cols_n = out_shape.h * out_shape.w;
    let mut y = Tensor::zeros(&[n, out_shape.c, out_shape.h, out_shape.w]);
    let mut cols_cache = Vec::with_capacity(if keep { n } else { 0 });
    let mut col = vec![0.0; rows * cols_n];
    for i in 0..n {
        let xs = x.sample(i);
        let padded;
        let src: &[f64] = if spec.padding > 0 {
            padded = pad(xs, c, h, w, spec.padding, spec.pad_mode);
            &padded
        } else {
            xs
        };
        im2col(src, c, hp, wp, k, spec.stride, out_shape.h, out_shape.w, &mut col);
        let ys = y.sample_mut(i);
        gemm(out_shape.c, rows, cols_n, wt, false, &col, false, 0.0, ys);
        if let Some(b) = bias {
            for (co, bv) in params.tensor(b).data().iter().enumerate() {
                ys[co * cols_n..(co + 1) * cols_n].iter_mut().for_each(|v| *v += bv);
            }
        }
        if keep {
            cols_cache.push(col.clone());
        }
    }
    (
        y,
        Cache::Conv {
            input,
            padded: Shape3::new(c, hp, wp),
            cols: cols_cache,
            weight: wq,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    spec: &ConvSpec,
    w: &Tensor,
    input: Shape3,
    padded: Shape3,
    cols: &[Vec<f64>],
    g: &Tensor,
    grads: &mut Option<&mut ParamSet>,
    weight: usize,
    bias: Option<usize>,
    need_dx: bool,
) -> Tensor {
    let (n, co, oh, ow) = g.dims4();
    let k = spec.kernel;
    let rows = input.c * k * k;
    let cols_n = oh * ow;
    if let Some(gs) = grads.as_deref_mut() {
        for (i, col) in cols.iter().enumerate() {
            gemm(
                co,
                cols_n,
                rows,
                g.sample(i),
                false,
                col,
                true,
                1.0,
                gs.tensor_mut(weight).data_mut(),
            );
        }
        if let Some(b) = bias {
            let db = gs.tensor_mut(b).data_mut();
            for i in 0..n {
                let gsamp = g.sample(i);
                for (c, d) in db.iter_mut().enumerate() {
                    *d += gsamp[c * cols_n..(c + 1) * cols_n].iter().sum::<f64>();
                }
            }
        }
    }
    let mut dx = Tensor::zeros(&[n, input.c, input.h, input.w]);
    if !need_dx {
        return dx;
    }
    let mut dcol = vec![0.0; rows * cols_n];
    let mut dpad = vec![0.0; padded.numel()];
    for i in 0..n {
        gemm(rows, co, cols_n, w.data(), true, g.sample(i), false, 0.0, &mut dcol);
        dpad.iter_mut().for_each(|v| *v = 0.0);
        col2im(&dcol, input.c, padded.h, padded.w, k, spec.stride, oh, ow, &mut dpad);
        let dxs = dx.sample_mut(i);
        if spec.padding > 0 {
            unpad(&dpad, input.c, input.h, input.w, spec.padding, spec.pad_mode, dxs);
        } else {
            dxs.copy_from_slice(&dpad);
        }
    }
    dx
}

fn convt_forward(
    spec: &ConvTSpec,
    params: &ParamSet,
    weight: usize,
    bias: Option<usize>,
    x: &Tensor,
    opts: &ForwardOptions,
    keep: bool,
) -> (Tensor, Cache) {
    let (n, c, h, w) = x.dims4();
    let out_shape = spec.output(Shape3::new(c, h, w)).expect("validated");
    let wq = effective_weight(params, weight, &opts.quant);
    let wt = wq.as_ref().unwrap_or_else(|| params.tensor(weight)).data();
    let k = spec.kernel;
    let rows = spec.out_ch * k * k;
    let hw_in = h * w;
    let (hf, wf) = (
        (h - 1) * spec.stride + k + spec.output_padding,
        (w - 1) * spec.stride + k + spec.output_padding,
    );
    let mut y = Tensor::zeros(&[n, out_shape.c, out_shape.h, out_shape.w]);
    let mut cols = vec![0.0; rows * hw_in];
    let mut full = vec![0.0; spec.out_ch * hf * wf];
    let p = spec.padding;
    for i in 0..n {
        gemm(rows, c, hw_in, wt, true, x.sample(i), false, 0.0, &mut cols);
        full.iter_mut().for_each(|v| *v = 0.0);
        col2im(&cols, spec.out_ch, hf, wf, k, spec.stride, h, w, &mut full);
        let ys = y.sample_mut(i);
        for co in 0..out_shape.c {
            let b = bias.map_or(0.0, |b| params.tensor(b).data()[co]);
            for oy in 0..out_shape.h {
                let src = &full[(co * hf + oy + p) * wf + p..][..out_shape.w];
                let dst = &mut ys[(co * out_shape.h + oy) * out_shape.w..][..out_shape.w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    (
        y,
        Cache::ConvT {
            input: if keep { x.clone() } else { Tensor::zeros(&[0]) },
            weight: wq,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn convt_backward(
    spec: &ConvTSpec,
    w: &Tensor,
    input: &Tensor,
    g: &Tensor,
    grads: &mut Option<&mut ParamSet>,
    weight: usize,
    bias: Option<usize>,
    need_dx: bool,
) -> Tensor {
    let (n, c, h, wd) = input.dims4();
    let (_, co, oh, ow) = g.dims4();
    let k = spec.kernel;
    let rows = co * k * k;
    let hw_in = h * wd;
    let (hf, wf) = (
        (h - 1) * spec.stride + k + spec.output_padding,
        (wd - 1) * spec.stride + k + spec.output_padding,
    );
    let p = spec.padding;
    let mut dfull = vec![0.0; co * hf * wf];
    let mut dcols = vec![0.0; rows * hw_in];
    let mut dx = Tensor::zeros(&[n, c, h, wd]);
    for i in 0..n {
        let gs = g.sample(i);
        for ch in 0..co {
            for oy in 0..oh {
                dfull[(ch * hf + oy + p) * wf + p..][..ow].copy_from_slice(&gs[(ch * oh + oy) * ow..][..ow]);
            }
        }
        im2col(&dfull, co, hf, wf, k, spec.stride, h, wd, &mut dcols);
        if let Some(grads) = grads.as_deref_mut() {
            gemm(
                c,
                hw_in,
                rows,
                input.sample(i),
                false,
                &dcols,
                true,
                1.0,
                grads.tensor_mut(weight).data_mut(),
            );
            if let Some(b) = bias {
                let db = grads.tensor_mut(b).data_mut();
                for (ch, d) in db.iter_mut().enumerate() {
                    *d += gs[ch * oh * ow..(ch + 1) * oh * ow].iter().sum::<f64>();
                }
            }
        }
        if need_dx {
            gemm(c, rows, hw_in, w.data(), false, &dcols, false, 0.0, dx.sample_mut(i));
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// normalization: y = gamma * (xhat + beta)

fn norm_forward(
    kind: NormKind,
    params: &ParamSet,
    gamma: usize,
    beta: usize,
    running: Option<(usize, usize)>,
    x: &Tensor,
    opts: &ForwardOptions,
) -> (Tensor, Cache) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let g = params.tensor(gamma).data();
    let b = params.tensor(beta).data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let (inv_std, batch_stats, frozen) = match kind {
        NormKind::Instance => {
            let mut inv = Vec::with_capacity(n * c);
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * hw;
                    let s = &xd[off..off + hw];
                    let mean = s.iter().sum::<f64>() / hw as f64;
                    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                    let is = 1.0 / (var + NORM_EPS).sqrt();
                    inv.push(is);
                    let xh = &mut xhat.data_mut()[off..off + hw];
                    for (o, v) in xh.iter_mut().zip(s) {
                        *o = (v - mean) * is;
                    }
                }
            }
            (inv, None, false)
        }
        NormKind::Batch => {
            let count = (n * hw) as f64;
            let mut means = vec![0.0; c];
            let mut vars = vec![0.0; c];
            let frozen = !opts.train;
            if frozen {
                let (rm, rv) = running.expect("batch norm has running statistics");
                means.copy_from_slice(params.tensor(rm).data());
                vars.copy_from_slice(params.tensor(rv).data());
            } else {
                for ch in 0..c {
                    let mut sum = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        sum += xd[off..off + hw].iter().sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        sq += xd[off..off + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    means[ch] = mean;
                    vars[ch] = sq / count;
                }
            }
            let inv: Vec<f64> = vars.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * hw;
                    let out = &mut xhat.data_mut()[off..off + hw];
                    for (o, &v) in out.iter_mut().zip(&xd[off..off + hw]) {
                        *o = (v - means[ch]) * inv[ch];
                    }
                }
            }
            (inv, (!frozen).then_some((means, vars)), frozen)
        }
    };
    let xh = xhat.data();
    let yd = y.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                yd[j] = g[ch] * (xh[j] + b[ch]);
            }
        }
    }
    (
        y,
        Cache::Norm {
            xhat,
            inv_std,
            batch_stats,
            frozen_stats: frozen,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn norm_backward(
    params: &ParamSet,
    gamma: usize,
    beta: usize,
    xhat: &Tensor,
    inv_std: &[f64],
    frozen: bool,
    g: &Tensor,
    grads: &mut Option<&mut ParamSet>,
) -> Tensor {
    let (n, c, h, w) = g.dims4();
    let hw = h * w;
    let gam = params.tensor(gamma).data();
    let bet = params.tensor(beta).data();
    let gd = g.data();
    let xh = xhat.data();
    if let Some(grads) = grads.as_deref_mut() {
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let mut s = 0.0;
                let mut sx = 0.0;
                for j in off..off + hw {
                    s += gd[j];
                    sx += gd[j] * xh[j];
                }
                dgamma[ch] += sx + bet[ch] * s;
                dbeta[ch] += gam[ch] * s;
            }
        }
        grads
            .tensor_mut(gamma)
            .data_mut()
            .iter_mut()
            .zip(&dgamma)
            .for_each(|(a, b)| *a += b);
        grads
            .tensor_mut(beta)
            .data_mut()
            .iter_mut()
            .zip(&dbeta)
            .for_each(|(a, b)| *a += b);
    }
    let mut dx = Tensor::zeros(g.shape());
    let dxd = dx.data_mut();
    let per_instance = inv_std.len() == n * c;
    if frozen {
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let k = gam[ch] * inv_std[ch];
                for j in off..off + hw {
                    dxd[j] = gd[j] * k;
                }
            }
        }
    } else if per_instance {
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in off..off + hw {
                    let d = gam[ch] * gd[j];
                    mean_d += d;
                    mean_dx += d * xh[j];
                }
                mean_d /= hw as f64;
                mean_dx /= hw as f64;
                let is = inv_std[i * c + ch];
                for j in off..off + hw {
                    dxd[j] = is * (gam[ch] * gd[j] - mean_d - xh[j] * mean_dx);
                }
            }
        }
    } else {
        let count = (n * hw) as f64;
        for ch in 0..c {
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let d = gam[ch] * gd[j];
                    mean_d += d;
                    mean_dx += d * xh[j];
                }
            }
            mean_d /= count;
            mean_dx /= count;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    dxd[j] = inv_std[ch] * (gam[ch] * gd[j] - mean_d - xh[j] * mean_dx);
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// activations

fn act_forward(a: Activation, x: &Tensor, quant: &QuantMode) -> (Tensor, Cache) {
    match a {
        Activation::Relu => {
            let out = x.map(|v| v.max(0.0));
            let y = match quant {
                QuantMode::Off => out.clone(),
                QuantMode::Clamp { clamp } => out.map(|v| v.min(*clamp)),
                QuantMode::Fake(cfg) => out.map(|v| cfg.quantize_activation_scalar(v)),
            };
            (
                y,
                Cache::Act {
                    out,
                    pre: None,
                    clamp: quant.clamp(),
                },
            )
        }
        Activation::LeakyRelu(slope) => {
            let y = x.map(|v| if v > 0.0 { v } else { slope * v });
            (
                y.clone(),
                Cache::Act {
                    out: y,
                    pre: Some(x.clone()),
                    clamp: None,
                },
            )
        }
        Activation::Tanh => {
            let y = x.map(f64::tanh);
            (
                y.clone(),
                Cache::Act {
                    out: y,
                    pre: None,
                    clamp: None,
                },
            )
        }
        Activation::Sigmoid => {
            let y = x.map(sigmoid);
            (
                y.clone(),
                Cache::Act {
                    out: y,
                    pre: None,
                    clamp: None,
                },
            )
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn act_backward(a: Activation, out: &Tensor, pre: Option<&Tensor>, clamp: Option<f64>, mut g: Tensor) -> Tensor {
    let o = out.data();
    let gd = g.data_mut();
    match a {
        Activation::Relu => {
            for (d, &v) in gd.iter_mut().zip(o) {
                // straight-through window of q_a: 1 on [0, p]
                let pass = v > 0.0 && clamp.is_none_or(|p| v <= p);
                if !pass {
                    *d = 0.0;
                }
            }
        }
        Activation::LeakyRelu(slope) => {
            let p = pre.expect("leaky relu keeps its input").data();
            for (d, &v) in gd.iter_mut().zip(p) {
                if v <= 0.0 {
                    *d *= slope;
                }
            }
        }
        Activation::Tanh => {
            for (d, &v) in gd.iter_mut().zip(o) {
                *d *= 1.0 - v * v;
            }
        }
        Activation::Sigmoid => {
            for (d, &v) in gd.iter_mut().zip(o) {
                *d *= v * (1.0 - v);
            }
        }
    }
    g
}
