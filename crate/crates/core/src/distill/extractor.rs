use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ArchSpec, Checkpoint, ForwardOptions, InputKind, Network, ParamSet};
use crate::tensor::Tensor;

const BUILTIN: &[u8] = include_bytes!("../../assets/extractor-v1.ckpt");

/// SHA-256 seal of the shipped extractor checkpoint.
pub const BUILTIN_EXTRACTOR_SHA256: &str = "9f8d43a0a1338ba1101346dc31fe6d72f4ec2e1ea7dd021a663fb1f72ca6ed3b";

/// A frozen convolutional embedding whose intermediate outputs ("taps")
/// define the perceptual distance.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<(Network, ParamSet)>,
    checksum: String,
}

/// Tap features of a fixed reference batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTarget {
    pub taps: Vec<Tensor>,
}

impl FeatureTarget {
    /// Concatenates per-sample targets along the batch axis.
    pub fn stack(items: &[&FeatureTarget]) -> Result<FeatureTarget> {
        let n = items.first().map_or(0, |t| t.taps.len());
        let taps = (0..n)
            .map(|k| Tensor::concat(&items.iter().map(|t| &t.taps[k]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(FeatureTarget { taps })
    }

    /// Splits a batch target into per-sample targets.
    pub fn unstack(&self) -> Vec<FeatureTarget> {
        let n = self.taps.first().map_or(0, |t| t.shape()[0]);
        (0..n)
            .map(|i| FeatureTarget {
                taps: self.taps.iter().map(|t| t.select(&[i])).collect(),
            })
            .collect()
    }
}

impl FeatureExtractor {
    /// Builds an extractor from a sequential spec, tapping the output of
    /// each top-level layer listed in `taps` (ascending).
    pub fn new(spec: &ArchSpec, params: &ParamSet, taps: &[usize], checksum: impl Into<String>) -> Result<Self> {
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) || taps[taps.len() - 1] >= spec.layers.len() {
            return Err(Error::config("extractor taps must be ascending layer indices"));
        }
        let full = Network::new(spec.clone())?;
        full.check_params(params)?;
        let placed = spec.placed()?;
        let mut stages = Vec::with_capacity(taps.len());
        let mut start = 0;
        for &tap in taps {
            let input = if start == 0 {
                spec.input
            } else {
                let shape = placed
                    .iter()
                    .rev()
                    .find(|p| p.path == (start - 1).to_string())
                    .expect("top-level layer is placed")
                    .output;
                InputKind::Image {
                    channels: shape.c,
                    height: shape.h,
                    width: shape.w,
                }
            };
            let sub = ArchSpec {
                name: format!("{}-stage{}", spec.name, stages.len()),
                input,
                layers: spec.layers[start..=tap].to_vec(),
            };
            let net = Network::new(sub)?;
            let mut sp = net.layout().clone();
            for p in sp.entries_mut() {
                let (head, rest) = p.name.split_once('.').expect("parameter names carry a layer index");
                let idx: usize = head.parse().expect("numeric layer index");
                p.tensor = params.require(&format!("{}.{rest}", idx + start))?.clone();
            }
            stages.push((net, sp));
            start = tap + 1;
        }
        Ok(FeatureExtractor {
            stages,
            checksum: checksum.into(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let taps = ck
            .metadata
            .get("taps")
            .ok_or_else(|| Error::Format {
                what: "extractor checkpoint",
                reason: "missing `taps` metadata".into(),
            })?
            .split(',')
            .map(|t| {
                t.trim().parse().map_err(|_| Error::Format {
                    what: "extractor checkpoint",
                    reason: format!("bad tap index `{t}`"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        Self::new(&ck.spec, &ck.params, &taps, ck.checksum())
    }

    /// Loads an extractor, refusing it unless its seal matches `expected`.
    pub fn load(path: &Path, expected: Option<&str>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let fx = Self::from_checkpoint(&ck)?;
        fx.verify(expected)?;
        Ok(fx)
    }

    /// The extractor shipped with the crate.
    pub fn builtin() -> Result<Self> {
        let fx = Self::from_checkpoint(&Checkpoint::from_bytes(BUILTIN)?)?;
        fx.verify(Some(BUILTIN_EXTRACTOR_SHA256))?;
        Ok(fx)
    }

    fn verify(&self, expected: Option<&str>) -> Result<()> {
        match expected {
            Some(e) if !e.eq_ignore_ascii_case(&self.checksum) => Err(Error::Checksum {
                what: "feature extractor".into(),
                expected: e.to_string(),
                found: self.checksum.clone(),
            }),
            _ => Ok(()),
        }
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn tap_count(&self) -> usize {
        self.stages.len()
    }

    /// Width of the pooled embedding: the channel count summed over taps.
    pub fn embedding_dim(&self) -> usize {
        self.stages
            .iter()
            .map(|(n, _)| n.spec().output_shape().map_or(0, |s| s.c))
            .sum()
    }

    /// Tap activations of a batch.
    pub fn features(&self, x: &Tensor) -> Result<FeatureTarget> {
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for (net, p) in &self.stages {
            cur = net.infer(p, &cur, &ForwardOptions::eval())?;
            taps.push(cur.clone());
        }
        Ok(FeatureTarget { taps })
    }

    pub fn target(&self, y: &Tensor) -> Result<FeatureTarget> {
        self.features(y)
    }

    /// Spatially averaged tap activations, concatenated per sample.
    pub fn pooled(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let f = self.features(x)?;
        let n = x.shape()[0];
        let mut out = vec![Vec::with_capacity(self.embedding_dim()); n];
        for t in &f.taps {
            let (_, c, h, w) = t.dims4();
            let hw = (h * w) as f64;
            for (i, row) in out.iter_mut().enumerate() {
                let s = t.sample(i);
                for ch in 0..c {
                    row.push(s[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw);
                }
            }
        }
        Ok(out)
    }

    /// Perceptual distance of `x` to a reference: the mean over taps of the
    /// mean squared feature difference. With `want_grad` the gradient with
    /// respect to `x` is returned too.
    pub fn distance_to(&self, x: &Tensor, target: &FeatureTarget, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
        if target.taps.len() != self.stages.len() {
            return Err(Error::config("feature target has the wrong number of taps"));
        }
        let ntaps = self.stages.len() as f64;
        let mut traces = Vec::with_capacity(self.stages.len());
        let mut tap_grads = Vec::with_capacity(self.stages.len());
        let mut value = 0.0;
        let mut cur = x.clone();
        for ((net, p), t) in self.stages.iter().zip(&target.taps) {
            let (y, trace) = net.forward(p, &cur, &ForwardOptions::eval())?;
            t.ensure_shape(y.shape())?;
            let n = y.len() as f64;
            let mut g = Tensor::zeros(y.shape());
            let mut s = 0.0;
            for ((gi, a), b) in g.data_mut().iter_mut().zip(y.data()).zip(t.data()) {
                let d = a - b;
                s += d * d;
                *gi = 2.0 * d / (n * ntaps);
            }
            value += s / n / ntaps;
            traces.push(trace);
            tap_grads.push(g);
            cur = y;
        }
        if !want_grad {
            return Ok((value, None));
        }
        let mut g = tap_grads.pop().expect("at least one tap");
        for (k, (net, p)) in self.stages.iter().enumerate().rev() {
            let gin = net
                .backward(p, &traces[k], &g, None, true)
                .expect("input gradient requested");
            if k == 0 {
                g = gin;
            } else {
                g = tap_grads.pop().expect("one gradient per tap");
                g.add_assign(&gin);
            }
        }
        Ok((value, Some(g)))
    }
}
