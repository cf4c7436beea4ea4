//! L1 channel sparsity: the soft-threshold proximal operator, the proximal
//! step on normalization scales, channel masks and dense subnetwork
//! extraction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::{ArchSpec, ConvSpec, ConvTSpec, Layer, ParamSet};
use crate::tensor::Tensor;

/// The per-channel scales of one prunable normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    pub layer: String,
    pub gamma: Vec<f64>,
}

impl ScaleVector {
    pub fn new(layer: impl Into<String>, gamma: Vec<f64>) -> Self {
        ScaleVector {
            layer: layer.into(),
            gamma,
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn zero_count(&self) -> usize {
        self.gamma.iter().filter(|&&g| g == 0.0).count()
    }
}

/// Name of the scale tensor of the norm layer at `path`.
pub fn gamma_name(path: &str) -> String {
    format!("{path}.gamma")
}

/// The scale vectors of every prunable norm in `spec`.
pub fn scale_vectors(spec: &ArchSpec, params: &ParamSet) -> Result<Vec<ScaleVector>> {
    spec.prunable_norms()
        .into_iter()
        .map(|(path, _)| {
            let g = params.require(&gamma_name(&path))?;
            Ok(ScaleVector::new(path, g.data().to_vec()))
        })
        .collect()
}

/// Fraction of prunable channels whose scale is exactly zero.
pub fn gamma_zero_fraction(spec: &ArchSpec, params: &ParamSet) -> Result<f64> {
    let vs = scale_vectors(spec, params)?;
    let total: usize = vs.iter().map(ScaleVector::len).sum();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(vs.iter().map(ScaleVector::zero_count).sum::<usize>() as f64 / total as f64)
}

#[inline]
pub fn soft_threshold_scalar(x: f64, lambda: f64) -> f64 {
    let m = x.abs() - lambda;
    if m > 0.0 {
        m.copysign(x)
    } else {
        0.0
    }
}

/// `sgn(x) * max(|x| - lambda, 0)` elementwise.
pub fn soft_threshold(x: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    Ok(x.iter().map(|&v| soft_threshold_scalar(v, lambda)).collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!(
            "threshold must be a finite nonnegative number, got {lambda}"
        )));
    }
    Ok(())
}

/// One proximal gradient step: `soft_threshold(gamma - eta * g, rho * eta)`.
pub fn prox_step(gamma: &ScaleVector, g: &[f64], eta: f64, rho: f64) -> Result<ScaleVector> {
    let mut out = gamma.clone();
    prox_step_in_place(&mut out.gamma, g, eta, rho)?;
    Ok(out)
}

pub fn prox_step_in_place(gamma: &mut [f64], g: &[f64], eta: f64, rho: f64) -> Result<()> {
    if gamma.len() != g.len() {
        return Err(Error::Shape {
            expected: vec![gamma.len()],
            actual: vec![g.len()],
        });
    }
    if !(eta >= 0.0 && rho >= 0.0) {
        return Err(Error::config(format!(
            "step size and penalty must be nonnegative, got eta={eta}, rho={rho}"
        )));
    }
    let lambda = rho * eta;
    for (v, d) in gamma.iter_mut().zip(g) {
        *v = soft_threshold_scalar(*v - eta * d, lambda);
    }
    Ok(())
}

pub fn l1_norm(gamma: &[f64]) -> f64 {
    gamma.iter().map(|v| v.abs()).sum()
}

/// Sum of `|gamma|` over every prunable norm.
pub fn total_l1(spec: &ArchSpec, params: &ParamSet) -> Result<f64> {
    Ok(scale_vectors(spec, params)?.iter().map(|v| l1_norm(&v.gamma)).sum())
}

/// Which channels of one layer survive pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub layer: String,
    pub keep: Vec<bool>,
    pub threshold: f64,
}

impl ChannelMask {
    pub fn all(layer: impl Into<String>, width: usize) -> Self {
        ChannelMask {
            layer: layer.into(),
            keep: vec![true; width],
            threshold: 0.0,
        }
    }

    pub fn kept(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Keeps channel `i` iff `|gamma_i| > eps`. When nothing survives and
/// `keep_one` is set, the largest-magnitude channel is kept (lowest index
/// on ties); otherwise that is an error.
pub fn channel_mask(gamma: &ScaleVector, eps: f64, keep_one: bool) -> Result<ChannelMask> {
    check_lambda(eps)?;
    let mut keep: Vec<bool> = gamma.gamma.iter().map(|g| g.abs() > eps).collect();
    if !keep.iter().any(|&k| k) {
        if !keep_one || keep.is_empty() {
            return Err(Error::Mask {
                layer: gamma.layer.clone(),
                reason: "every channel would be pruned".into(),
            });
        }
        let mut best = 0;
        for (i, g) in gamma.gamma.iter().enumerate() {
            if g.abs() > gamma.gamma[best].abs() {
                best = i;
            }
        }
        keep[best] = true;
    }
    Ok(ChannelMask {
        layer: gamma.layer.clone(),
        keep,
        threshold: eps,
    })
}

/// Masks for every prunable layer, keyed by layer path.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    masks: BTreeMap<String, ChannelMask>,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Derives masks from the current scales with the keep-one fallback.
    pub fn from_params(spec: &ArchSpec, params: &ParamSet, eps: f64) -> Result<Self> {
        let mut set = MaskSet::new();
        for v in scale_vectors(spec, params)? {
            set.insert(channel_mask(&v, eps, true)?);
        }
        Ok(set)
    }

    /// All-true masks for every prunable layer.
    pub fn full(spec: &ArchSpec) -> Self {
        let mut set = MaskSet::new();
        for (path, width) in spec.prunable_norms() {
            set.insert(ChannelMask::all(path, width));
        }
        set
    }

    pub fn insert(&mut self, mask: ChannelMask) {
        self.masks.insert(mask.layer.clone(), mask);
    }

    pub fn get(&self, layer: &str) -> Option<&ChannelMask> {
        self.masks.get(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ChannelMask> {
        self.masks.values()
    }

    pub fn is_all_true(&self) -> bool {
        self.masks.values().all(|m| m.keep.iter().all(|&k| k))
    }

    /// Checks that every mask names a prunable norm of `spec` with the right
    /// width and keeps at least one channel.
    pub fn validate(&self, spec: &ArchSpec) -> Result<()> {
        let prunable: BTreeMap<String, usize> = spec.prunable_norms().into_iter().collect();
        for m in self.masks.values() {
            let width = prunable.get(&m.layer).ok_or_else(|| Error::Mask {
                layer: m.layer.clone(),
                reason: "not a prunable norm layer; trunk and residual join widths cannot be masked".into(),
            })?;
            if *width != m.keep.len() {
                return Err(Error::Mask {
                    layer: m.layer.clone(),
                    reason: format!("mask has {} entries, layer has {width} channels", m.keep.len()),
                });
            }
            if m.kept_count() == 0 {
                return Err(Error::Mask {
                    layer: m.layer.clone(),
                    reason: "mask removes every channel".into(),
                });
            }
        }
        Ok(())
    }

    /// Layer path to the list of kept channel indices.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, Vec<usize>> = self.masks.values().map(|m| (m.layer.as_str(), m.kept())).collect();
        serde_json::to_string_pretty(&map).expect("plain map serializes")
    }

    pub fn from_json(text: &str, spec: &ArchSpec) -> Result<Self> {
        let map: BTreeMap<String, Vec<usize>> = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "mask file",
            reason: e.to_string(),
        })?;
        let widths: BTreeMap<String, usize> = spec.prunable_norms().into_iter().collect();
        let mut set = MaskSet::new();
        for (layer, kept) in map {
            let width = *widths.get(&layer).ok_or_else(|| Error::Mask {
                layer: layer.clone(),
                reason: "not a prunable norm layer".into(),
            })?;
            let mut keep = vec![false; width];
            for i in kept {
                *keep.get_mut(i).ok_or_else(|| Error::Mask {
                    layer: layer.clone(),
                    reason: format!("channel {i} out of range"),
                })? = true;
            }
            set.insert(ChannelMask {
                layer,
                keep,
                threshold: 0.0,
            });
        }
        set.validate(spec)?;
        Ok(set)
    }
}

/// Zeroes the scale of every masked-out channel, giving the masked full
/// network that an extracted subnetwork must reproduce.
pub fn apply_masks(params: &ParamSet, masks: &MaskSet) -> Result<ParamSet> {
    let mut out = params.clone();
    for m in masks.iter() {
        let g = out.get_mut(&gamma_name(&m.layer)).ok_or_else(|| Error::Mask {
            layer: m.layer.clone(),
            reason: "no scale tensor for this layer".into(),
        })?;
        for (v, &k) in g.data_mut().iter_mut().zip(&m.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Physically removes masked channels: each convolution loses the output
/// rows of its own pruned channels and the input columns of upstream pruned
/// channels; norms lose the matching per-channel entries.
pub fn extract_subnetwork(spec: &ArchSpec, params: &ParamSet, masks: &MaskSet) -> Result<(ArchSpec, ParamSet)> {
    masks.validate(spec)?;
    let mut out_params = ParamSet::new();
    let all_in: Vec<usize> = (0..spec.input.shape().c).collect();
    let (layers, _) = extract_layers(&spec.layers, "", all_in, params, masks, &mut out_params)?;
    let out_spec = ArchSpec {
        name: format!("{}-slim", spec.name),
        input: spec.input,
        layers,
    };
    out_spec.validate()?;
    Ok((out_spec, out_params))
}

fn extract_layers(
    layers: &[Layer],
    prefix: &str,
    mut cur: Vec<usize>,
    params: &ParamSet,
    masks: &MaskSet,
    out: &mut ParamSet,
) -> Result<(Vec<Layer>, Vec<usize>)> {
    let mut result = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let path = if prefix.is_empty() {
            i.to_string()
        } else {
            format!("{prefix}.{i}")
        };
        // a prunable norm directly after this layer selects its outputs
        let next_mask = |width: usize| -> Vec<usize> {
            let next = if prefix.is_empty() {
                (i + 1).to_string()
            } else {
                format!("{prefix}.{}", i + 1)
            };
            match (layers.get(i + 1), masks.get(&next)) {
                (Some(Layer::Norm { prunable: true, .. }), Some(m)) => m.kept(),
                _ => (0..width).collect(),
            }
        };
        let new_layer = match layer {
            Layer::Conv(c) => {
                let outs = next_mask(c.out_ch);
                let w = params.require(&format!("{path}.weight"))?;
                out.push(
                    format!("{path}.weight"),
                    crate::models::ParamRole::Kernel,
                    slice2(w, &outs, &cur),
                );
                if c.bias {
                    let b = params.require(&format!("{path}.bias"))?;
                    out.push(format!("{path}.bias"), crate::models::ParamRole::Bias, slice1(b, &outs));
                }
                let l = Layer::Conv(ConvSpec {
                    in_ch: cur.len(),
                    out_ch: outs.len(),
                    ..*c
                });
                cur = outs;
                l
            }
            Layer::ConvTranspose(c) => {
                let outs = next_mask(c.out_ch);
                let w = params.require(&format!("{path}.weight"))?;
                out.push(
                    format!("{path}.weight"),
                    crate::models::ParamRole::Kernel,
                    slice2(w, &cur, &outs),
                );
                if c.bias {
                    let b = params.require(&format!("{path}.bias"))?;
                    out.push(format!("{path}.bias"), crate::models::ParamRole::Bias, slice1(b, &outs));
                }
                let l = Layer::ConvTranspose(ConvTSpec {
                    in_ch: cur.len(),
                    out_ch: outs.len(),
                    ..*c
                });
                cur = outs;
                l
            }
            Layer::Norm { kind, prunable, .. } => {
                for p in params
                    .entries()
                    .iter()
                    .filter(|p| p.name.starts_with(&format!("{path}.")))
                {
                    if p.name[path.len() + 1..].contains('.') {
                        continue;
                    }
                    out.push(p.name.clone(), p.role, slice1(&p.tensor, &cur));
                }
                Layer::Norm {
                    channels: cur.len(),
                    kind: *kind,
                    prunable: *prunable,
                }
            }
            Layer::Act(a) => Layer::Act(*a),
            Layer::Residual(body) => {
                let (inner, end) = extract_layers(body, &path, cur.clone(), params, masks, out)?;
                if end != cur {
                    return Err(Error::Mask {
                        layer: path,
                        reason: "residual body output width differs from its input".into(),
                    });
                }
                Layer::Residual(inner)
            }
        };
        result.push(new_layer);
    }
    Ok((result, cur))
}

fn slice1(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.data();
    Tensor::from_vec(&[idx.len()], idx.iter().map(|&i| d[i]).collect()).expect("length matches")
}

/// Selects `rows` of axis 0 and `cols` of axis 1 of a 4-d kernel.
fn slice2(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let s = t.shape();
    let (n1, kk) = (s[1], s[2] * s[3]);
    let d = t.data();
    let mut data = Vec::with_capacity(rows.len() * cols.len() * kk);
    for &r in rows {
        for &c in cols {
            let off = (r * n1 + c) * kk;
            data.extend_from_slice(&d[off..off + kk]);
        }
    }
    Tensor::from_vec(&[rows.len(), cols.len(), s[2], s[3]], data).expect("length matches")
}
