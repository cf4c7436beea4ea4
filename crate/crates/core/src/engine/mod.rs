//! Alternating minimax training of generator weights, channel scales and
//! discriminator, and the comparison pipelines built on it.

mod calibrate;
mod run;
mod teacher;
mod variant;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{DistanceMetric, DistillTarget, FeatureExtractor};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, Network, ParamSet, QuantMode};
use crate::objective::{loss_theta, total_loss_report, GanMode, GeneratorObjective, LossBreakdown};
use crate::optim::{Adam, AdamConfig};
use crate::quantization::QuantConfig;
use crate::sparsity::{gamma_name, gamma_zero_fraction, prox_step_in_place, total_l1};
use crate::tensor::Tensor;

pub use calibrate::{calibrate_rho, RhoCalibration, RhoSearch};
pub use run::{init_discriminator, init_generator, run, run_phase, Artifacts, Phase, Setup};
pub use teacher::{train_teacher, TeacherConfig, TeacherRun};
pub use variant::run_variant;

/// Learning-rate schedules. `alpha` drives the weights and the
/// discriminator, `eta` drives the channel scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub alpha0: f64,
    pub eta0: f64,
    /// Total iterations `T`.
    pub steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            alpha0: 2e-4,
            eta0: 0.002,
            steps: 1000,
        }
    }
}

impl Schedule {
    /// Constant for `t <= T/2`, then linear to zero at `t = T`.
    pub fn alpha(&self, t: f64) -> f64 {
        let total = self.steps as f64;
        if self.steps == 0 || t <= total / 2.0 {
            self.alpha0
        } else {
            self.alpha0 * ((total - t) / (total / 2.0)).max(0.0)
        }
    }

    /// Cosine annealing from `eta0` at `t = 0` to zero at `t = T`.
    pub fn eta(&self, t: f64) -> f64 {
        if self.steps == 0 {
            return self.eta0;
        }
        self.eta0 * (1.0 + (PI * t / self.steps as f64).cos()) / 2.0
    }

    /// The same rates over a different number of iterations.
    pub fn with_steps(self, steps: usize) -> Self {
        Schedule { steps, ..self }
    }
}

pub fn lr_alpha(t: f64, sched: &Schedule) -> f64 {
    sched.alpha(t)
}

pub fn lr_eta(t: f64, sched: &Schedule) -> f64 {
    sched.eta(t)
}

/// The compared pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantTag {
    /// Joint pruning and distillation at full precision.
    #[serde(rename = "GS-32")]
    Gs32,
    /// Joint pruning, distillation and 8-bit quantization.
    #[serde(rename = "GS-8")]
    Gs8,
    /// As GS-8 with a pixel MSE distance.
    #[serde(rename = "GS-8-MSE")]
    Gs8Mse,
    /// Prune with the adversarial loss only, then adversarial finetuning.
    #[serde(rename = "CP")]
    Cp,
    /// Prune as CP, then finetune with distillation.
    #[serde(rename = "CP+D")]
    CpD,
    /// Distill a half-width student, prune it as CP, then finetune.
    #[serde(rename = "D+CP")]
    DCp,
    /// Half-width student trained by distillation alone.
    #[serde(rename = "GD")]
    Gd,
    /// GS-32, then quantization and quantization-aware finetuning.
    #[serde(rename = "postQ")]
    PostQ,
    /// GS-8 with the discriminator frozen at its initialization.
    #[serde(rename = "fixedD")]
    FixedD,
}

impl VariantTag {
    pub const ALL: [VariantTag; 9] = [
        VariantTag::Gs32,
        VariantTag::Gs8,
        VariantTag::Gs8Mse,
        VariantTag::Cp,
        VariantTag::CpD,
        VariantTag::DCp,
        VariantTag::Gd,
        VariantTag::PostQ,
        VariantTag::FixedD,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::Gs32 => "GS-32",
            VariantTag::Gs8 => "GS-8",
            VariantTag::Gs8Mse => "GS-8-MSE",
            VariantTag::Cp => "CP",
            VariantTag::CpD => "CP+D",
            VariantTag::DCp => "D+CP",
            VariantTag::Gd => "GD",
            VariantTag::PostQ => "postQ",
            VariantTag::FixedD => "fixedD",
        }
    }

    /// Whether the delivered student is quantized.
    pub fn quantized(self) -> bool {
        matches!(
            self,
            VariantTag::Gs8 | VariantTag::Gs8Mse | VariantTag::PostQ | VariantTag::FixedD
        )
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "variant",
                name: s.to_string(),
            })
    }
}

/// Hyperparameters of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlimConfig {
    /// Distillation weight.
    pub beta: f64,
    /// L1 weight on the channel scales.
    pub rho: f64,
    /// Fake quantization during training; `None` trains at full precision.
    pub quant: Option<QuantConfig>,
    pub metric: DistanceMetric,
    pub gan_mode: GanMode,
    /// Weight of the adversarial term in the generator objective.
    pub adversarial_weight: f64,
    pub freeze_discriminator: bool,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Save a generator checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for SlimConfig {
    fn default() -> Self {
        SlimConfig {
            beta: 10.0,
            rho: 0.0,
            quant: None,
            metric: DistanceMetric::Perceptual,
            gan_mode: GanMode::Saturating,
            adversarial_weight: 1.0,
            freeze_discriminator: false,
            schedule: Schedule::default(),
            batch_size: 1,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl SlimConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )))
            }
        };
        finite_nonneg("beta", self.beta)?;
        finite_nonneg("rho", self.rho)?;
        finite_nonneg("adversarial_weight", self.adversarial_weight)?;
        finite_nonneg("schedule.alpha0", self.schedule.alpha0)?;
        finite_nonneg("schedule.eta0", self.schedule.eta0)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if let Some(q) = &self.quant {
            q.validate()?;
        }
        Ok(())
    }

    fn quant_mode(&self) -> QuantMode {
        QuantMode::from_config(self.quant)
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct SlimState {
    /// Generator weights `W` and channel scales `gamma`.
    pub g: ParamSet,
    /// Discriminator parameters `theta`.
    pub d: ParamSet,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// The next iteration, starting at 1.
    pub t: usize,
}

impl SlimState {
    pub fn new(g: ParamSet, d: ParamSet, adam: AdamConfig) -> Self {
        SlimState {
            adam_g: Adam::new(&g, adam),
            adam_d: Adam::new(&d, adam),
            g,
            d,
            t: 1,
        }
    }
}

/// The fixed pieces a training step reads.
pub struct TrainContext<'a> {
    pub g: &'a Network,
    pub d: &'a Network,
    pub extractor: &'a FeatureExtractor,
    /// Teacher references indexed by training sample; needed when `beta > 0`.
    pub targets: Option<&'a [DistillTarget]>,
    prunable: Vec<usize>,
}

impl<'a> TrainContext<'a> {
    pub fn new(
        g: &'a Network,
        d: &'a Network,
        extractor: &'a FeatureExtractor,
        targets: Option<&'a [DistillTarget]>,
    ) -> Result<Self> {
        let prunable = g
            .spec()
            .prunable_norms()
            .iter()
            .map(|(path, _)| {
                g.layout()
                    .id(&gamma_name(path))
                    .ok_or_else(|| Error::arch(path, "prunable norm has no scale"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainContext {
            g,
            d,
            extractor,
            targets,
            prunable,
        })
    }

    fn spec(&self) -> &ArchSpec {
        self.g.spec()
    }
}

/// One of the three updates of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Update {
    W,
    Gamma,
    Theta,
}

/// What one iteration did, serialized as one metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub alpha: f64,
    pub eta: f64,
    pub loss: LossBreakdown,
    /// Fraction of prunable scales that are exactly zero after the update.
    pub gamma_zero_fraction: f64,
    /// Discriminator probabilities clamped inside logs.
    pub clamped: usize,
    /// The updates applied, in order.
    #[serde(skip)]
    pub updates: Vec<Update>,
}

fn numeric(t: usize, detail: impl Into<String>) -> Error {
    Error::Numeric {
        iteration: t,
        detail: detail.into(),
    }
}

/// One iteration on one minibatch: `W` by Adam descent, then `gamma` by a
/// proximal gradient step, then `theta` by Adam ascent.
///
/// The generator is run once, at the current `W` and `gamma`; that pass
/// gives the gradients for both generator updates and the detached batch the
/// discriminator trains on.
pub fn train_step(
    state: &mut SlimState,
    ctx: &TrainContext<'_>,
    x: &Tensor,
    y: &Tensor,
    x_idx: &[usize],
    cfg: &SlimConfig,
) -> Result<StepRecord> {
    let t = state.t;
    if cfg.schedule.steps > 0 && t > cfg.schedule.steps {
        return Err(Error::config(format!(
            "iteration {t} is past the schedule end {}",
            cfg.schedule.steps
        )));
    }
    let alpha = cfg.schedule.alpha(t as f64);
    let eta = cfg.schedule.eta(t as f64);

    let target = match (cfg.beta != 0.0, ctx.targets) {
        (false, _) => None,
        (true, Some(all)) => {
            let items = x_idx
                .iter()
                .map(|&i| {
                    all.get(i)
                        .ok_or_else(|| Error::config(format!("no teacher reference for sample {i}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(DistillTarget::stack(&items)?)
        }
        (true, None) => {
            return Err(Error::config(
                "distillation weight is nonzero but no teacher references were given",
            ))
        }
    };
    let objective = GeneratorObjective {
        g: ctx.g,
        d: ctx.d,
        theta: &state.d,
        quant: cfg.quant_mode(),
        mode: cfg.gan_mode,
        adversarial_weight: cfg.adversarial_weight,
        beta: cfg.beta,
        target: target.as_ref(),
        extractor: ctx.extractor,
    };
    let out = objective.evaluate(&state.g, x)?;
    if !out.value.is_finite() {
        return Err(numeric(t, format!("generator loss is {}", out.value)));
    }
    let l1 = total_l1(ctx.spec(), &state.g)?;
    let adversarial = cfg.adversarial_weight != 0.0;
    let (gan, d_grads, d_clamped) = if adversarial {
        loss_theta(ctx.d, &state.d, y, &out.fake)?
    } else {
        (0.0, state.d.zeros_like(), 0)
    };
    if !gan.is_finite() {
        return Err(numeric(t, format!("discriminator loss is {gan}")));
    }
    ctx.g.update_running_stats(&mut state.g, &out.trace);

    let mut updates = Vec::with_capacity(3);
    let prunable = &ctx.prunable;
    state
        .adam_g
        .step(&mut state.g, &out.grads, alpha, false, |id, _| !prunable.contains(&id));
    updates.push(Update::W);

    for &id in prunable {
        let g = out.grads.tensor(id).data().to_vec();
        prox_step_in_place(state.g.tensor_mut(id).data_mut(), &g, eta, cfg.rho)?;
    }
    updates.push(Update::Gamma);

    if adversarial && !cfg.freeze_discriminator {
        state.adam_d.step(&mut state.d, &d_grads, alpha, true, |_, _| true);
        updates.push(Update::Theta);
    }

    if state.g.check_finite().is_err() || state.d.check_finite().is_err() {
        return Err(numeric(t, "parameters became non-finite"));
    }
    state.t += 1;
    Ok(StepRecord {
        t,
        alpha,
        eta,
        loss: total_loss_report(gan, out.distill, l1, cfg.beta, cfg.rho),
        gamma_zero_fraction: gamma_zero_fraction(ctx.spec(), &state.g)?,
        clamped: out.clamped + d_clamped,
        updates,
    })
}
