//! The adversarial, distillation and sparsity terms and the per-variable
//! objectives built from them.

use serde::{Deserialize, Serialize};

use crate::distill::{DistillTarget, FeatureExtractor};
use crate::error::Result;
use crate::models::{ForwardOptions, Network, ParamRole, ParamSet, QuantMode, Trace};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` inside logs.
pub const PROB_FLOOR: f64 = 1e-7;

/// Form of the generator's adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Minimize `log(1 - D(G(x)))`, the form written in the objective.
    #[default]
    Saturating,
    /// Minimize `-log D(G(x))`.
    NonSaturating,
}

/// A scalar loss over a probability map with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbLoss {
    pub value: f64,
    pub grad: Tensor,
    /// Number of probabilities that had to be clamped.
    pub clamped: usize,
}

fn clamp_prob(p: f64, clamped: &mut usize) -> (f64, bool) {
    if p < PROB_FLOOR {
        *clamped += 1;
        (PROB_FLOOR, true)
    } else if p > 1.0 - PROB_FLOOR {
        *clamped += 1;
        (1.0 - PROB_FLOOR, true)
    } else {
        (p, false)
    }
}

/// `mean log p`, or `mean log(1 - p)` when `complement` is set.
fn mean_log(p: &Tensor, complement: bool) -> ProbLoss {
    let n = p.len().max(1) as f64;
    let mut clamped = 0;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(p.shape());
    for (g, &v) in grad.data_mut().iter_mut().zip(p.data()) {
        let (c, was) = clamp_prob(v, &mut clamped);
        if complement {
            value += (1.0 - c).ln();
            *g = if was { 0.0 } else { -1.0 / ((1.0 - c) * n) };
        } else {
            value += c.ln();
            *g = if was { 0.0 } else { 1.0 / (c * n) };
        }
    }
    ProbLoss {
        value: value / n,
        grad,
        clamped,
    }
}

/// `L_theta = mean log D(y) + mean log(1 - D(G(x)))` from the two
/// probability maps, with gradients with respect to each map.
pub fn gan_loss_discriminator(p_real: &Tensor, p_fake: &Tensor) -> (ProbLoss, ProbLoss) {
    (mean_log(p_real, false), mean_log(p_fake, true))
}

/// The generator's adversarial term on `D(G(x))`, to be minimized.
pub fn generator_adversarial(p_fake: &Tensor, mode: GanMode) -> ProbLoss {
    match mode {
        GanMode::Saturating => mean_log(p_fake, true),
        GanMode::NonSaturating => {
            let mut l = mean_log(p_fake, false);
            l.value = -l.value;
            l.grad.scale(-1.0);
            l
        }
    }
}

/// `L_theta` and its gradient with respect to the discriminator. `fake` is a
/// plain tensor, so nothing flows back into the generator.
pub fn loss_theta(d: &Network, theta: &ParamSet, real: &Tensor, fake: &Tensor) -> Result<(f64, ParamSet, usize)> {
    let opts = ForwardOptions::train(QuantMode::Off);
    let (p_real, tr_real) = d.forward(theta, real, &opts)?;
    let (p_fake, tr_fake) = d.forward(theta, fake, &opts)?;
    let (lr, lf) = gan_loss_discriminator(&p_real, &p_fake);
    let mut grads = theta.zeros_like();
    d.backward(theta, &tr_real, &lr.grad, Some(&mut grads), false);
    d.backward(theta, &tr_fake, &lf.grad, Some(&mut grads), false);
    Ok((lr.value + lf.value, grads, lr.clamped + lf.clamped))
}

/// Everything one generator pass produces.
#[derive(Debug, Clone)]
pub struct GeneratorLoss {
    /// Weighted adversarial term plus `beta` times the distillation term.
    pub value: f64,
    pub adversarial: f64,
    pub distill: f64,
    /// Gradients for every generator tensor: `W` and `gamma` alike.
    pub grads: ParamSet,
    /// The generated batch, detached.
    pub fake: Tensor,
    /// The generator's forward trace, for running-statistics updates.
    pub trace: Trace,
    pub clamped: usize,
}

/// Inputs shared by the generator-side objectives.
pub struct GeneratorObjective<'a> {
    pub g: &'a Network,
    pub d: &'a Network,
    pub theta: &'a ParamSet,
    pub quant: QuantMode,
    pub mode: GanMode,
    /// Weight of the adversarial term; zero trains by distillation alone and
    /// skips the discriminator.
    pub adversarial_weight: f64,
    pub beta: f64,
    /// Teacher reference for the batch; required when `beta > 0`.
    pub target: Option<&'a DistillTarget>,
    pub extractor: &'a FeatureExtractor,
}

impl GeneratorObjective<'_> {
    /// Adversarial plus distillation loss through the quantized generator,
    /// differentiated with the straight-through rules. One pass yields the
    /// gradients of both `L_W` and `L_gamma`.
    pub fn evaluate(&self, params: &ParamSet, x: &Tensor) -> Result<GeneratorLoss> {
        let (fake, trace) = self.g.forward(params, x, &ForwardOptions::train(self.quant))?;
        let (mut adversarial, mut clamped) = (0.0, 0);
        let mut dfake = Tensor::zeros(fake.shape());
        if self.adversarial_weight != 0.0 {
            let (p_fake, d_trace) = self
                .d
                .forward(self.theta, &fake, &ForwardOptions::train(QuantMode::Off))?;
            let mut adv = generator_adversarial(&p_fake, self.mode);
            adversarial = adv.value;
            clamped = adv.clamped;
            adv.grad.scale(self.adversarial_weight);
            dfake = self
                .d
                .backward(self.theta, &d_trace, &adv.grad, None, true)
                .expect("input gradient requested");
        }
        let mut distill = 0.0;
        if self.beta != 0.0 {
            let target = self.target.ok_or_else(|| {
                crate::Error::config("distillation weight is nonzero but no teacher target was given")
            })?;
            let (v, g) = target.distance(&fake, self.extractor, true)?;
            distill = v;
            let mut g = g.expect("gradient requested");
            g.scale(self.beta);
            dfake.add_assign(&g);
        }
        let mut grads = params.zeros_like();
        self.g.backward(params, &trace, &dfake, Some(&mut grads), false);
        Ok(GeneratorLoss {
            value: self.adversarial_weight * adversarial + self.beta * distill,
            adversarial,
            distill,
            grads,
            fake,
            trace,
            clamped,
        })
    }

    /// `L_W` and its gradient restricted to the non-scale parameters.
    pub fn loss_w(&self, params: &ParamSet, x: &Tensor) -> Result<(f64, ParamSet)> {
        let out = self.evaluate(params, x)?;
        Ok((out.value, restrict(&out.grads, |r| r != ParamRole::Gamma)))
    }

    /// `L_gamma`, the smooth part of the scale objective, and its gradient
    /// restricted to the scales. The L1 term is left to the proximal step.
    pub fn loss_gamma_fidelity(&self, params: &ParamSet, x: &Tensor) -> Result<(f64, ParamSet)> {
        let out = self.evaluate(params, x)?;
        Ok((out.value, restrict(&out.grads, |r| r == ParamRole::Gamma)))
    }
}

fn restrict(grads: &ParamSet, keep: impl Fn(ParamRole) -> bool) -> ParamSet {
    let mut out = grads.clone();
    for p in out.entries_mut() {
        if !keep(p.role) {
            p.tensor.fill(0.0);
        }
    }
    out
}

/// The decomposed value of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan: f64,
    pub distill: f64,
    pub l1: f64,
    pub total: f64,
    pub beta: f64,
    pub rho: f64,
}

/// `total = gan + beta * distill + rho * l1`.
pub fn total_loss_report(gan: f64, distill: f64, l1: f64, beta: f64, rho: f64) -> LossBreakdown {
    LossBreakdown {
        gan,
        distill,
        l1,
        total: gan + beta * distill + rho * l1,
        beta,
        rho,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_everywhere_gives_two_log_half() {
        let p = Tensor::full(&[2, 1, 3, 3], 0.5);
        let (r, f) = gan_loss_discriminator(&p, &p);
        assert!((r.value + f.value - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((r.value + f.value + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_discriminator_is_near_zero() {
        let real = Tensor::full(&[1, 1, 2, 2], 1.0 - 1e-7);
        let fake = Tensor::full(&[1, 1, 2, 2], 1e-7);
        let (r, f) = gan_loss_discriminator(&real, &fake);
        assert!((r.value + f.value).abs() < 1e-6);
    }

    #[test]
    fn batch_of_two_matches_hand_sum() {
        let real = Tensor::from_vec(&[2, 1, 1, 1], vec![0.9, 0.6]).unwrap();
        let fake = Tensor::from_vec(&[2, 1, 1, 1], vec![0.2, 0.3]).unwrap();
        let (r, f) = gan_loss_discriminator(&real, &fake);
        let want = (0.9f64.ln() + 0.6f64.ln()) / 2.0 + (0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((r.value + f.value - want).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_probabilities_are_clamped_and_counted() {
        let p = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 1.0, 0.5]).unwrap();
        let (r, f) = gan_loss_discriminator(&p, &p);
        assert_eq!(r.clamped, 2);
        assert_eq!(f.clamped, 2);
        assert!(r.value.is_finite() && f.value.is_finite());
    }

    #[test]
    fn non_saturating_flips_the_log() {
        let p = Tensor::full(&[1, 1, 1, 1], 0.25);
        assert!((generator_adversarial(&p, GanMode::Saturating).value - 0.75f64.ln()).abs() < 1e-15);
        assert!((generator_adversarial(&p, GanMode::NonSaturating).value + 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn breakdown_sums() {
        let b = total_loss_report(-1.2, 0.5, 3.0, 10.0, 0.01);
        assert!((b.total - (-1.2 + 5.0 + 0.03)).abs() < 1e-12);
        assert_eq!(total_loss_report(-0.7, 2.0, 5.0, 0.0, 0.0).total, -0.7);
        assert_eq!(total_loss_report(-0.7, 2.0, 0.0, 1.0, 3.0).l1, 0.0);
    }
}
