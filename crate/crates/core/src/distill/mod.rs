//! Distillation distances between student and teacher outputs.

mod extractor;
mod surrogate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use extractor::{FeatureExtractor, FeatureTarget, BUILTIN_EXTRACTOR_SHA256};
pub use surrogate::{
    extractor_spec, surrogate_batch, train_extractor, ExtractorTraining, EXTRACTOR_TAPS, SURROGATE_CLASSES,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which distance `d` the distillation term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Perceptual,
    Mse,
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perceptual" => Ok(DistanceMetric::Perceptual),
            "mse" => Ok(DistanceMetric::Mse),
            _ => Err(Error::Unknown {
                kind: "distance metric",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::Perceptual => "perceptual",
            DistanceMetric::Mse => "mse",
        })
    }
}

fn check_same(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            actual: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared pixel difference.
pub fn mse_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_same(x, y)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// [`mse_distance`] and its gradient with respect to `x`.
pub fn mse_distance_grad(x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let v = mse_distance(x, y)?;
    let n = x.len().max(1) as f64;
    let mut g = x.clone();
    for (gi, b) in g.data_mut().iter_mut().zip(y.data()) {
        *gi = 2.0 * (*gi - b) / n;
    }
    Ok((v, g))
}

/// Mean over tap layers of the mean squared feature difference.
pub fn perceptual_distance(x: &Tensor, y: &Tensor, f: &FeatureExtractor) -> Result<f64> {
    check_same(x, y)?;
    let target = f.target(y)?;
    Ok(f.distance_to(x, &target, false)?.0)
}

/// Batch estimate of `E_x[d(G(x), G0(x))]`.
pub fn distill_loss(g_out: &Tensor, g0_out: &Tensor, metric: DistanceMetric, f: &FeatureExtractor) -> Result<f64> {
    match metric {
        DistanceMetric::Mse => mse_distance(g_out, g0_out),
        DistanceMetric::Perceptual => perceptual_distance(g_out, g0_out, f),
    }
}

/// A precomputed teacher reference for one sample or batch.
#[derive(Debug, Clone, PartialEq)]
pub enum DistillTarget {
    Pixels(Tensor),
    Features(FeatureTarget),
}

impl DistillTarget {
    pub fn new(g0_out: &Tensor, metric: DistanceMetric, f: &FeatureExtractor) -> Result<Self> {
        Ok(match metric {
            DistanceMetric::Mse => DistillTarget::Pixels(g0_out.clone()),
            DistanceMetric::Perceptual => DistillTarget::Features(f.target(g0_out)?),
        })
    }

    pub fn stack(items: &[&DistillTarget]) -> Result<Self> {
        match items.first() {
            Some(DistillTarget::Pixels(_)) => {
                let ts = items
                    .iter()
                    .map(|t| match t {
                        DistillTarget::Pixels(p) => Ok(p),
                        DistillTarget::Features(_) => Err(Error::config("mixed distillation targets")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DistillTarget::Pixels(Tensor::concat(&ts)?))
            }
            Some(DistillTarget::Features(_)) => {
                let ts = items
                    .iter()
                    .map(|t| match t {
                        DistillTarget::Features(p) => Ok(p),
                        DistillTarget::Pixels(_) => Err(Error::config("mixed distillation targets")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DistillTarget::Features(FeatureTarget::stack(&ts)?))
            }
            None => Err(Error::config("empty distillation batch")),
        }
    }

    /// Splits a batch reference into one reference per sample.
    pub fn unstack(&self) -> Vec<DistillTarget> {
        match self {
            DistillTarget::Pixels(p) => (0..p.shape()[0])
                .map(|i| DistillTarget::Pixels(p.select(&[i])))
                .collect(),
            DistillTarget::Features(f) => f.unstack().into_iter().map(DistillTarget::Features).collect(),
        }
    }

    /// Distance of `x` to this reference, with the gradient when asked.
    pub fn distance(&self, x: &Tensor, f: &FeatureExtractor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
        match self {
            DistillTarget::Pixels(y) => {
                if want_grad {
                    mse_distance_grad(x, y).map(|(v, g)| (v, Some(g)))
                } else {
                    mse_distance(x, y).map(|v| (v, None))
                }
            }
            DistillTarget::Features(t) => f.distance_to(x, t, want_grad),
        }
    }
}


#[cfg(test)]
mod builtin_tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_extractor_loads_and_is_sealed() {
        let f = FeatureExtractor::builtin().unwrap();
        assert_eq!(f.checksum(), BUILTIN_EXTRACTOR_SHA256);
        assert_eq!(f.tap_count(), 2);
        assert_eq!(f.embedding_dim(), 24);
        let x = Tensor::uniform(&[3, 3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let pooled = f.pooled(&x).unwrap();
        assert_eq!(pooled.len(), 3);
        assert!(pooled.iter().all(|r| r.len() == 24));
    }

    #[test]
    fn extractor_with_wrong_seal_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.ckpt");
        let (ck, _) = train_extractor(&ExtractorTraining {
            steps: 1,
            ..Default::default()
        })
        .unwrap();
        ck.save(&path).unwrap();
        assert!(FeatureExtractor::load(&path, Some(&ck.checksum())).is_ok());
        assert!(matches!(
            FeatureExtractor::load(&path, Some(BUILTIN_EXTRACTOR_SHA256)),
            Err(Error::Checksum { .. })
        ));
    }
}
