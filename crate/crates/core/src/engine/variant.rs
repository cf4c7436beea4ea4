use std::path::Path;

use super::run::{init_discriminator, init_generator, run_phase, Artifacts, Phase, Setup};
use super::{SlimConfig, VariantTag};
use crate::distill::DistanceMetric;
use crate::error::Result;
use crate::models::{ArchSpec, ParamSet};
use crate::sparsity::{extract_subnetwork, MaskSet};

/// Finetuning stages run for this fraction of the main budget.
pub const FINETUNE_FRACTION: usize = 10;
/// Channel fraction of the distilled students.
pub const STUDENT_WIDTH: f64 = 0.5;

struct Pipeline<'a> {
    setup: &'a Setup,
    seed: u64,
    out: Option<&'a Path>,
    log: String,
    phases: u64,
}

impl Pipeline<'_> {
    fn phase(
        &mut self,
        name: &'static str,
        spec: &ArchSpec,
        g: ParamSet,
        d: ParamSet,
        cfg: SlimConfig,
    ) -> Result<(ParamSet, ParamSet)> {
        let seed = self.seed.wrapping_add(self.phases.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.phases += 1;
        let phase = Phase {
            name,
            spec: spec.clone(),
            g,
            d,
            cfg,
            seed,
        };
        let state = run_phase(self.setup, phase, &mut self.log, self.out)?;
        Ok((state.g, state.d))
    }
}

fn extract(spec: &ArchSpec, params: &ParamSet) -> Result<(ArchSpec, ParamSet)> {
    let masks = MaskSet::from_params(spec, params, 0.0)?;
    extract_subnetwork(spec, params, &masks)
}

/// Runs the pipeline named by `tag`. `base` holds the joint method's
/// hyperparameters; each stage derives its own from it. Every main stage
/// runs `T = base.schedule.steps` iterations (the distill-then-prune variant
/// splits `T` between its two stages) and every finetuning stage `T / 10`.
pub fn run_variant(
    tag: VariantTag,
    setup: &Setup,
    base: &SlimConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<Artifacts> {
    base.validate()?;
    let teacher_spec = setup.teacher_spec.clone();
    let t = base.schedule.steps;
    let finetune_steps = t / FINETUNE_FRACTION;
    let quant = Some(base.quant.unwrap_or_default());
    let mut p = Pipeline {
        setup,
        seed,
        out,
        log: String::new(),
        phases: 0,
    };
    let random_d = init_discriminator(&setup.disc_spec, seed)?;
    // The adversarial-only stages: no distillation, optional pruning.
    let adversarial = |rho: f64, steps: usize| SlimConfig {
        beta: 0.0,
        rho,
        quant: None,
        schedule: base.schedule.with_steps(steps),
        ..base.clone()
    };
    let distill_only = |steps: usize| SlimConfig {
        rho: 0.0,
        quant: None,
        adversarial_weight: 0.0,
        schedule: base.schedule.with_steps(steps),
        ..base.clone()
    };

    let (spec, g, d, final_quant) = match tag {
        VariantTag::Gs32 | VariantTag::Gs8 | VariantTag::Gs8Mse | VariantTag::FixedD => {
            let mut cfg = base.clone();
            cfg.quant = if tag == VariantTag::Gs32 { None } else { quant };
            if tag == VariantTag::Gs8Mse {
                cfg.metric = DistanceMetric::Mse;
            }
            let d0 = if tag == VariantTag::FixedD {
                cfg.freeze_discriminator = true;
                setup.teacher_disc.clone().unwrap_or(random_d)
            } else {
                random_d
            };
            let q = cfg.quant;
            let (g, d) = p.phase("joint", &teacher_spec, init_generator(&teacher_spec, seed)?, d0, cfg)?;
            (teacher_spec, g, d, q)
        }
        VariantTag::Cp | VariantTag::CpD => {
            let (g, d) = p.phase(
                "prune",
                &teacher_spec,
                setup.teacher.clone(),
                random_d,
                adversarial(base.rho, t),
            )?;
            let (spec, g) = extract(&teacher_spec, &g)?;
            let ft = if tag == VariantTag::Cp {
                adversarial(0.0, finetune_steps)
            } else {
                SlimConfig {
                    rho: 0.0,
                    quant: None,
                    schedule: base.schedule.with_steps(finetune_steps),
                    ..base.clone()
                }
            };
            let (g, d) = p.phase("finetune", &spec, g, d, ft)?;
            (spec, g, d, None)
        }
        VariantTag::DCp => {
            let half = teacher_spec.scale_width(STUDENT_WIDTH, &format!("{}-half", teacher_spec.name))?;
            let (g, d) = p.phase(
                "distill",
                &half,
                init_generator(&half, seed)?,
                random_d,
                distill_only(t / 2),
            )?;
            let (g, d) = p.phase("prune", &half, g, d, adversarial(base.rho, t - t / 2))?;
            let (spec, g) = extract(&half, &g)?;
            let (g, d) = p.phase("finetune", &spec, g, d, adversarial(0.0, finetune_steps))?;
            (spec, g, d, None)
        }
        VariantTag::Gd => {
            let half = teacher_spec.scale_width(STUDENT_WIDTH, &format!("{}-half", teacher_spec.name))?;
            let (g, d) = p.phase(
                "distill",
                &half,
                init_generator(&half, seed)?,
                random_d,
                distill_only(t),
            )?;
            (half, g, d, None)
        }
        VariantTag::PostQ => {
            let cfg = SlimConfig {
                quant: None,
                ..base.clone()
            };
            let (g, d) = p.phase(
                "joint",
                &teacher_spec,
                init_generator(&teacher_spec, seed)?,
                random_d,
                cfg,
            )?;
            let (spec, g) = extract(&teacher_spec, &g)?;
            let ft = SlimConfig {
                quant,
                ..adversarial(0.0, finetune_steps)
            };
            let (g, d) = p.phase("finetune", &spec, g, d, ft)?;
            (spec, g, d, quant)
        }
    };
    let log = std::mem::take(&mut p.log);
    Artifacts::finish(setup, Some(tag), spec, g, d, final_quant, log)
}
