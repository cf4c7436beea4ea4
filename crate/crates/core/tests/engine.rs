mod common;

use common::{images, small_setup, toy, Toy};
use slimgan::distill::{DistanceMetric, DistillTarget};
use slimgan::engine::{
    lr_alpha, lr_eta, run, run_variant, train_step, Schedule, SlimConfig, SlimState, TrainContext, Update, VariantTag,
};
use slimgan::models::{ForwardOptions, ParamRole, QuantMode};
use slimgan::objective::{loss_theta, GeneratorObjective};
use slimgan::optim::AdamConfig;
use slimgan::sparsity::{gamma_name, soft_threshold_scalar};
use slimgan::Error;

fn toy_cfg(rho: f64, beta: f64, alpha0: f64, eta0: f64) -> SlimConfig {
    SlimConfig {
        beta,
        rho,
        metric: DistanceMetric::Mse,
        schedule: Schedule {
            alpha0,
            eta0,
            steps: 10,
        },
        batch_size: 2,
        ..SlimConfig::default()
    }
}

fn toy_targets(t: &Toy, n: usize) -> Vec<DistillTarget> {
    let teacher_out = images(500, n).map(|v| 0.7 * v);
    DistillTarget::new(&teacher_out, DistanceMetric::Mse, &t.f)
        .unwrap()
        .unstack()
}

#[test]
fn schedule_endpoints_are_exact() {
    let s = Schedule {
        alpha0: 2e-4,
        eta0: 0.01,
        steps: 1000,
    };
    assert_eq!(lr_alpha(500.0, &s), 2e-4);
    assert_eq!(lr_alpha(1.0, &s), 2e-4);
    assert_eq!(lr_alpha(1000.0, &s), 0.0);
    assert_eq!(lr_alpha(750.0, &s), 1e-4);
    assert_eq!(lr_eta(0.0, &s), 0.01);
    assert_eq!(lr_eta(500.0, &s), 0.005);
    assert_eq!(lr_eta(1000.0, &s), 0.0);
    for t in 0..=1000 {
        let (a, e) = (s.alpha(t as f64), s.eta(t as f64));
        assert!((0.0..=2e-4).contains(&a) && (0.0..=0.01).contains(&e));
        if t > 0 {
            assert!(a <= s.alpha(t as f64 - 1.0) && e <= s.eta(t as f64 - 1.0));
        }
    }
}

#[test]
fn unknown_variant_is_rejected() {
    assert!(matches!(
        "GS-16".parse::<VariantTag>(),
        Err(Error::Unknown { kind: "variant", .. })
    ));
    for tag in VariantTag::ALL {
        assert_eq!(tag.as_str().parse::<VariantTag>().unwrap(), tag);
        let json = serde_json::to_string(&tag).unwrap();
        assert_eq!(json, format!("\"{tag}\""));
    }
}

#[test]
fn zero_rates_leave_parameters_unchanged() {
    let t = toy(1);
    let targets = toy_targets(&t, 2);
    let ctx = TrainContext::new(&t.g, &t.d, &t.f, Some(&targets)).unwrap();
    let mut state = SlimState::new(t.w.clone(), t.theta.clone(), AdamConfig::default());
    let cfg = toy_cfg(0.5, 2.0, 0.0, 0.0);
    let rec = train_step(&mut state, &ctx, &images(1, 2), &images(2, 2), &[0, 1], &cfg).unwrap();
    assert_eq!(rec.t, 1);
    assert_eq!(state.t, 2);
    assert_eq!(state.g, t.w);
    assert_eq!(state.d, t.theta);
}

#[test]
fn updates_run_in_order_and_frozen_discriminator_is_untouched() {
    let t = toy(2);
    let ctx = TrainContext::new(&t.g, &t.d, &t.f, None).unwrap();
    let mut state = SlimState::new(t.w.clone(), t.theta.clone(), AdamConfig::default());
    let cfg = toy_cfg(0.1, 0.0, 1e-2, 1e-2);
    for _ in 0..3 {
        let rec = train_step(&mut state, &ctx, &images(3, 2), &images(4, 2), &[0, 1], &cfg).unwrap();
        assert_eq!(rec.updates, vec![Update::W, Update::Gamma, Update::Theta]);
    }
    let frozen = SlimConfig {
        freeze_discriminator: true,
        ..cfg
    };
    let before = state.d.clone();
    for _ in 0..3 {
        let rec = train_step(&mut state, &ctx, &images(5, 2), &images(6, 2), &[0, 1], &frozen).unwrap();
        assert_eq!(rec.updates, vec![Update::W, Update::Gamma]);
    }
    assert_eq!(state.d, before);
}

/// Replays one iteration with scalar Adam and soft-threshold arithmetic on
/// gradients taken at the pre-step parameters.
#[test]
fn one_step_matches_scalar_oracle() {
    for (rho, beta) in [(0.0, 0.0), (0.3, 2.0), (5.0, 1.0)] {
        let t = toy(3);
        let targets = toy_targets(&t, 2);
        let ctx = TrainContext::new(&t.g, &t.d, &t.f, Some(&targets)).unwrap();
        let cfg = toy_cfg(rho, beta, 0.05, 0.2);
        let (x, y) = (images(7, 2), images(8, 2));
        let target = DistillTarget::stack(&[&targets[0], &targets[1]]).unwrap();
        let obj = GeneratorObjective {
            g: &t.g,
            d: &t.d,
            theta: &t.theta,
            quant: QuantMode::Off,
            mode: cfg.gan_mode,
            adversarial_weight: 1.0,
            beta,
            target: Some(&target),
            extractor: &t.f,
        };
        let out = obj.evaluate(&t.w, &x).unwrap();
        let (_, d_grads, _) = loss_theta(&t.d, &t.theta, &y, &out.fake).unwrap();

        let (alpha, eta) = (cfg.schedule.alpha(1.0), cfg.schedule.eta(1.0));
        let AdamConfig { beta1, beta2, eps } = cfg.adam;
        // first Adam step: m = (1-b1) g, v = (1-b2) g^2, both bias-corrected to g, g^2
        let adam = |p: f64, g: f64, sign: f64| {
            let m = (1.0 - beta1) * g / (1.0 - beta1);
            let v = (1.0 - beta2) * g * g / (1.0 - beta2);
            p + sign * alpha * m / (v.sqrt() + eps)
        };
        let gamma_id = t.w.id(&gamma_name("1")).unwrap();
        let mut want_g = t.w.clone();
        for (id, e) in want_g.entries_mut().iter_mut().enumerate() {
            let g = out.grads.tensor(id).data();
            for (j, p) in e.tensor.data_mut().iter_mut().enumerate() {
                *p = if id == gamma_id {
                    soft_threshold_scalar(*p - eta * g[j], rho * eta)
                } else if e.role.is_trainable() {
                    adam(*p, g[j], -1.0)
                } else {
                    *p
                };
            }
        }
        let mut want_d = t.theta.clone();
        for (id, e) in want_d.entries_mut().iter_mut().enumerate() {
            let g = d_grads.tensor(id).data();
            for (j, p) in e.tensor.data_mut().iter_mut().enumerate() {
                *p = adam(*p, g[j], 1.0);
            }
        }

        let mut state = SlimState::new(t.w.clone(), t.theta.clone(), cfg.adam);
        let rec = train_step(&mut state, &ctx, &x, &y, &[0, 1], &cfg).unwrap();
        for (a, b) in state.g.entries().iter().zip(want_g.entries()) {
            for (u, v) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0), "{}: {u} vs {v}", a.name);
            }
        }
        for (a, b) in state.d.entries().iter().zip(want_d.entries()) {
            for (u, v) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0), "{}: {u} vs {v}", a.name);
            }
        }
        if rho == 0.0 && beta == 0.0 {
            assert_eq!(rec.loss.total, rec.loss.gan);
        }
        if rho == 5.0 {
            // rho * eta = 1 exceeds every scale: all three are exactly zero
            assert!(state.g.tensor(gamma_id).data().iter().all(|&v| v == 0.0));
            assert_eq!(rec.gamma_zero_fraction, 1.0);
        }
    }
}

#[test]
fn discriminator_step_ascends_its_objective() {
    let mut gains = Vec::new();
    for seed in 0..100 {
        let t = toy(seed);
        let ctx = TrainContext::new(&t.g, &t.d, &t.f, None).unwrap();
        let cfg = toy_cfg(0.0, 0.0, 1e-4, 0.0);
        let (x, y) = (images(seed + 1000, 2), images(seed + 2000, 2));
        let fake = t.g.infer(&t.w, &x, &ForwardOptions::train(QuantMode::Off)).unwrap();
        let before = loss_theta(&t.d, &t.theta, &y, &fake).unwrap().0;
        let mut state = SlimState::new(t.w.clone(), t.theta.clone(), cfg.adam);
        train_step(&mut state, &ctx, &x, &y, &[0, 1], &cfg).unwrap();
        let after = loss_theta(&t.d, &state.d, &y, &fake).unwrap().0;
        gains.push(after - before);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let up = gains.iter().filter(|&&g| g >= 0.0).count();
    assert!(mean > 0.0, "mean change {mean}");
    assert!(up >= 95, "{up} of 100 steps ascended");
}

#[test]
fn weights_and_scales_descend_the_generator_objective() {
    let t = toy(4);
    let ctx = TrainContext::new(&t.g, &t.d, &t.f, None).unwrap();
    let cfg = SlimConfig {
        freeze_discriminator: true,
        ..toy_cfg(0.0, 0.0, 1e-4, 1e-4)
    };
    let x = images(9, 2);
    let obj = |w: &_| {
        GeneratorObjective {
            g: &t.g,
            d: &t.d,
            theta: &t.theta,
            quant: QuantMode::Off,
            mode: cfg.gan_mode,
            adversarial_weight: 1.0,
            beta: 0.0,
            target: None,
            extractor: &t.f,
        }
        .evaluate(w, &x)
        .unwrap()
        .value
    };
    let mut state = SlimState::new(t.w.clone(), t.theta.clone(), cfg.adam);
    train_step(&mut state, &ctx, &x, &images(10, 2), &[0, 1], &cfg).unwrap();
    assert!(obj(&state.g) < obj(&t.w));
}

#[test]
fn distillation_without_references_is_a_config_error() {
    let t = toy(5);
    let ctx = TrainContext::new(&t.g, &t.d, &t.f, None).unwrap();
    let mut state = SlimState::new(t.w.clone(), t.theta.clone(), AdamConfig::default());
    let err = train_step(
        &mut state,
        &ctx,
        &images(1, 2),
        &images(2, 2),
        &[0, 1],
        &toy_cfg(0.0, 1.0, 0.1, 0.1),
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn non_finite_parameters_abort_with_a_numeric_error() {
    let t = toy(6);
    let ctx = TrainContext::new(&t.g, &t.d, &t.f, None).unwrap();
    let mut w = t.w.clone();
    let id = w.entries().iter().position(|e| e.role == ParamRole::Kernel).unwrap();
    w.tensor_mut(id).data_mut()[0] = f64::NAN;
    let mut state = SlimState::new(w, t.theta.clone(), AdamConfig::default());
    let err = train_step(
        &mut state,
        &ctx,
        &images(1, 2),
        &images(2, 2),
        &[0, 1],
        &toy_cfg(0.0, 0.0, 0.1, 0.1),
    );
    assert!(matches!(err, Err(Error::Numeric { iteration: 1, .. })), "{err:?}");
}

#[test]
fn zero_iterations_still_yield_a_valid_report() {
    let setup = small_setup(0);
    let cfg = SlimConfig {
        schedule: Schedule {
            steps: 0,
            ..SlimConfig::default().schedule
        },
        ..SlimConfig::default()
    };
    let a = run(&setup, &cfg, 0, None).unwrap();
    assert!(a.log.is_empty());
    assert!(a.masks.is_all_true());
    assert_eq!(a.student_spec.layers, setup.teacher_spec.layers);
    assert_eq!(a.report.r_s, 1.0);
    assert!(a.report.r_f > 0.0 && a.report.r_f.is_finite());
}

#[test]
fn same_seed_gives_identical_logs() {
    let setup = small_setup(1);
    let cfg = SlimConfig {
        rho: 0.5,
        schedule: Schedule {
            steps: 8,
            ..SlimConfig::default().schedule
        },
        ..SlimConfig::default()
    };
    let a = run(&setup, &cfg, 3, None).unwrap();
    let b = run(&setup, &cfg, 3, None).unwrap();
    assert_eq!(a.log.lines().count(), 8);
    assert_eq!(a.log, b.log);
    assert_eq!(a.student, b.student);
    let c = run(&setup, &cfg, 4, None).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn large_rho_makes_channels_vanish() {
    let setup = small_setup(2);
    let cfg = SlimConfig {
        rho: 20.0,
        beta: 0.0,
        schedule: Schedule {
            alpha0: 2e-4,
            eta0: 0.01,
            steps: 200,
        },
        ..SlimConfig::default()
    };
    let a = run(&setup, &cfg, 0, None).unwrap();
    let last: serde_json::Value = serde_json::from_str(a.log.lines().last().unwrap()).unwrap();
    assert!(last["gamma_zero_fraction"].as_f64().unwrap() > 0.5);
    assert!(a.report.r_s > 1.0);
}

#[test]
fn every_variant_runs_end_to_end() {
    let mut setup = small_setup(3);
    setup.teacher_disc = Some(slimgan::engine::init_discriminator(&setup.disc_spec, 99).unwrap());
    let cfg = SlimConfig {
        rho: 1.0,
        schedule: Schedule {
            alpha0: 2e-4,
            eta0: 0.01,
            steps: 20,
        },
        ..SlimConfig::default()
    };
    for tag in VariantTag::ALL {
        let a = run_variant(tag, &setup, &cfg, 0, None).unwrap();
        assert_eq!(a.variant, Some(tag));
        assert_eq!(a.quant.is_some(), tag.quantized(), "{tag}");
        assert_eq!(a.blobs.is_empty(), !tag.quantized(), "{tag}");
        assert!(a.report.r_s >= 1.0 && a.report.r_c > 0.0 && a.report.r_f > 0.0, "{tag}");
        assert!(!a.log.is_empty());
        if tag == VariantTag::FixedD {
            assert_eq!(Some(&a.discriminator), setup.teacher_disc.as_ref());
        }
        if matches!(tag, VariantTag::Gd | VariantTag::DCp) {
            assert!(
                a.report.r_s > 3.0,
                "{tag}: half width should cut FLOPs about 4x, got {}",
                a.report.r_s
            );
        }
    }
}

#[test]
fn checkpoints_and_artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let setup = small_setup(4);
    let cfg = SlimConfig {
        checkpoint_every: 2,
        schedule: Schedule {
            steps: 4,
            ..SlimConfig::default().schedule
        },
        ..SlimConfig::default()
    };
    let a = run(&setup, &cfg, 0, Some(dir.path())).unwrap();
    let written = a.save(dir.path()).unwrap();
    assert_eq!(written.len(), 5);
    for name in ["joint-000002.ckpt", "joint-000004.ckpt"] {
        assert!(dir.path().join("checkpoints").join(name).exists());
    }
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(
        slimgan::metrics::CompressionReport::from_record(&report).unwrap(),
        a.report
    );
}
