mod common;

use common::{central_difference, images, rel_err, toy};
use slimgan::distill::{DistanceMetric, DistillTarget};
use slimgan::models::{ForwardOptions, ParamRole, QuantMode};
use slimgan::objective::{gan_loss_discriminator, loss_theta, total_loss_report, GanMode, GeneratorObjective};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn theta_gradient_matches_central_differences() {
    for seed in 0..3 {
        let t = toy(seed);
        let real = images(seed + 10, 2);
        let fake = images(seed + 20, 2);
        assert!(t.theta.count() <= 100);
        let (_, grads, clamped) = loss_theta(&t.d, &t.theta, &real, &fake).unwrap();
        assert_eq!(clamped, 0);
        let value = |p: &_| loss_theta(&t.d, p, &real, &fake).unwrap().0;
        for (id, e) in t.theta.entries().iter().enumerate() {
            for j in 0..e.tensor.len() {
                let fd = central_difference(&t.theta, id, j, H, value);
                let an = grads.tensor(id).data()[j];
                assert!(rel_err(fd, an, 1e-3) < TOL, "{}[{j}]: fd {fd} vs {an}", e.name);
            }
        }
    }
}

#[test]
fn gamma_gradient_matches_central_differences() {
    for (seed, metric, mode) in [
        (0, DistanceMetric::Mse, GanMode::Saturating),
        (1, DistanceMetric::Perceptual, GanMode::Saturating),
        (2, DistanceMetric::Perceptual, GanMode::NonSaturating),
    ] {
        let t = toy(seed);
        let x = images(seed + 30, 2);
        let teacher_out = images(seed + 40, 2).map(|v| 0.8 * v);
        let target = DistillTarget::new(&teacher_out, metric, &t.f).unwrap();
        let obj = GeneratorObjective {
            g: &t.g,
            d: &t.d,
            theta: &t.theta,
            quant: QuantMode::Off,
            mode,
            adversarial_weight: 1.0,
            beta: 3.0,
            target: Some(&target),
            extractor: &t.f,
        };
        assert!(t.w.count() <= 100);
        let (_, grads) = obj.loss_gamma_fidelity(&t.w, &x).unwrap();
        let value = |p: &_| obj.evaluate(p, &x).unwrap().value;
        let mut checked = 0;
        for (id, e) in t.w.entries().iter().enumerate() {
            for j in 0..e.tensor.len() {
                let an = grads.tensor(id).data()[j];
                if e.role != ParamRole::Gamma {
                    assert_eq!(an, 0.0, "{} leaks into the scale gradient", e.name);
                    continue;
                }
                let fd = central_difference(&t.w, id, j, H, value);
                assert!(rel_err(fd, an, 1e-3) < TOL, "{}[{j}]: fd {fd} vs {an}", e.name);
                checked += 1;
            }
        }
        assert_eq!(checked, 3);
    }
}

#[test]
fn weight_gradient_matches_the_clamp_surrogate() {
    let t = toy(5);
    let x = images(50, 2);
    let obj = GeneratorObjective {
        g: &t.g,
        d: &t.d,
        theta: &t.theta,
        quant: QuantMode::Clamp { clamp: 0.8 },
        mode: GanMode::Saturating,
        adversarial_weight: 1.0,
        beta: 0.0,
        target: None,
        extractor: &t.f,
    };
    let (_, grads) = obj.loss_w(&t.w, &x).unwrap();
    let value = |p: &_| obj.evaluate(p, &x).unwrap().value;
    for (id, e) in t.w.entries().iter().enumerate() {
        if !e.role.is_trainable() {
            continue;
        }
        for j in 0..e.tensor.len() {
            let an = grads.tensor(id).data()[j];
            if e.role == ParamRole::Gamma {
                assert_eq!(an, 0.0);
                continue;
            }
            let fd = central_difference(&t.w, id, j, H, value);
            assert!(rel_err(fd, an, 1e-3) < TOL, "{}[{j}]: fd {fd} vs {an}", e.name);
        }
    }
}

#[test]
fn no_terms_means_no_generator_gradient() {
    let t = toy(6);
    let obj = GeneratorObjective {
        g: &t.g,
        d: &t.d,
        theta: &t.theta,
        quant: QuantMode::Off,
        mode: GanMode::Saturating,
        adversarial_weight: 0.0,
        beta: 0.0,
        target: None,
        extractor: &t.f,
    };
    let out = obj.evaluate(&t.w, &images(60, 2)).unwrap();
    assert_eq!(out.value, 0.0);
    assert!(out
        .grads
        .entries()
        .iter()
        .all(|e| e.tensor.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn distillation_weight_without_target_is_an_error() {
    let t = toy(7);
    let obj = GeneratorObjective {
        g: &t.g,
        d: &t.d,
        theta: &t.theta,
        quant: QuantMode::Off,
        mode: GanMode::Saturating,
        adversarial_weight: 1.0,
        beta: 1.0,
        target: None,
        extractor: &t.f,
    };
    assert!(obj.evaluate(&t.w, &images(70, 1)).is_err());
}

#[test]
fn zero_weights_recover_the_plain_minimax_losses() {
    let t = toy(8);
    let x = images(80, 2);
    let y = images(81, 2);
    let obj = GeneratorObjective {
        g: &t.g,
        d: &t.d,
        theta: &t.theta,
        quant: QuantMode::Off,
        mode: GanMode::Saturating,
        adversarial_weight: 1.0,
        beta: 0.0,
        target: None,
        extractor: &t.f,
    };
    let out = obj.evaluate(&t.w, &x).unwrap();
    let opts = ForwardOptions::eval();
    let fake = t.g.infer(&t.w, &x, &opts).unwrap();
    assert_eq!(fake, out.fake);
    let p_fake = t.d.infer(&t.theta, &fake, &opts).unwrap();
    let p_real = t.d.infer(&t.theta, &y, &opts).unwrap();
    let want_g: f64 = p_fake.data().iter().map(|p| (1.0 - p).ln()).sum::<f64>() / p_fake.len() as f64;
    assert!((out.value - want_g).abs() < 1e-12);
    let (r, f) = gan_loss_discriminator(&p_real, &p_fake);
    let (l_theta, _, _) = loss_theta(&t.d, &t.theta, &y, &fake).unwrap();
    assert_eq!(l_theta, r.value + f.value);
    let report = total_loss_report(l_theta, 123.0, 456.0, 0.0, 0.0);
    assert_eq!(report.total, l_theta);
}

#[test]
fn random_breakdown_matches_resummed_oracle() {
    use rand::Rng;
    let mut r = common::rng(9);
    for _ in 0..100 {
        let v: [f64; 5] = std::array::from_fn(|_| r.random_range(-10.0..10.0));
        let b = total_loss_report(v[0], v[1].abs(), v[2].abs(), v[3].abs(), v[4].abs());
        let want = v[0] + v[3].abs() * v[1].abs() + v[4].abs() * v[2].abs();
        assert!(rel_err(b.total, want, 1e-12) < 1e-12);
    }
}
