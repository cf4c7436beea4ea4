use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::run::{generate, init_discriminator, init_generator};
use super::Schedule;
use crate::data::{BatchStream, TaskData};
use crate::distill::{DistanceMetric, DistillTarget, FeatureExtractor};
use crate::error::{Error, Result};
use crate::metrics::proxy_fid;
use crate::models::{ArchSpec, Checkpoint, Network, ParamSet, QuantMode};
use crate::objective::{loss_theta, GanMode, GeneratorObjective};
use crate::optim::{Adam, AdamConfig};

/// Plain adversarial training of a dense generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub steps: usize,
    pub alpha0: f64,
    pub batch_size: usize,
    pub gan_mode: GanMode,
    /// Weight of a distance between output and input that keeps the content
    /// in place; zero gives the plain adversarial objective.
    pub content_weight: f64,
    pub content_metric: DistanceMetric,
    pub adam: AdamConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 3000,
            alpha0: 2e-4,
            batch_size: 1,
            gan_mode: GanMode::Saturating,
            content_weight: 1.0,
            content_metric: DistanceMetric::Mse,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    /// The generator, stamped with task, seed, step count and proxy FID.
    pub checkpoint: Checkpoint,
    pub discriminator: ParamSet,
    pub proxy_fid: f64,
    pub log: String,
}

#[derive(Serialize)]
struct TeacherLine {
    t: usize,
    alpha: f64,
    gan: f64,
    generator: f64,
}

/// Minimax training of `spec` on `data`: every generator and discriminator
/// parameter is updated by Adam, with the weight schedule's linear decay.
/// `steps = 0` returns the initialization.
pub fn train_teacher(
    data: &TaskData,
    spec: &ArchSpec,
    disc_spec: &ArchSpec,
    extractor: &FeatureExtractor,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<TeacherRun> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if !(cfg.content_weight.is_finite() && cfg.content_weight >= 0.0) {
        return Err(Error::config("content_weight must be finite and non-negative"));
    }
    let g_net = Network::new(spec.clone())?;
    let d_net = Network::new(disc_spec.clone())?;
    let mut g = init_generator(spec, seed)?;
    let mut d = init_discriminator(disc_spec, seed)?;
    let mut adam_g = Adam::new(&g, cfg.adam);
    let mut adam_d = Adam::new(&d, cfg.adam);
    let sched = Schedule {
        alpha0: cfg.alpha0,
        eta0: 0.0,
        steps: cfg.steps,
    };
    let mut log = String::new();
    let stream = BatchStream::new(&data.x_train, &data.y_train, cfg.batch_size, seed);
    for (i, batch) in stream.take(cfg.steps).enumerate() {
        let t = i + 1;
        let alpha = sched.alpha(t as f64);
        let content = if cfg.content_weight != 0.0 {
            Some(DistillTarget::new(&batch.x, cfg.content_metric, extractor)?)
        } else {
            None
        };
        let objective = GeneratorObjective {
            g: &g_net,
            d: &d_net,
            theta: &d,
            quant: QuantMode::Off,
            mode: cfg.gan_mode,
            adversarial_weight: 1.0,
            beta: cfg.content_weight,
            target: content.as_ref(),
            extractor,
        };
        let out = objective.evaluate(&g, &batch.x)?;
        let (gan, d_grads, _) = loss_theta(&d_net, &d, &batch.y, &out.fake)?;
        if !(out.value.is_finite() && gan.is_finite()) {
            return Err(Error::Numeric {
                iteration: t,
                detail: format!("teacher losses {} / {gan}", out.value),
            });
        }
        g_net.update_running_stats(&mut g, &out.trace);
        adam_g.step(&mut g, &out.grads, alpha, false, |_, _| true);
        adam_d.step(&mut d, &d_grads, alpha, true, |_, _| true);
        let line = TeacherLine {
            t,
            alpha,
            gan,
            generator: out.value,
        };
        let _ = writeln!(log, "{}", serde_json::to_string(&line).expect("log records serialize"));
    }
    let fake = generate(&g_net, &g, &data.x_test, QuantMode::Off)?;
    let fid = proxy_fid(&fake, &data.y_test, extractor)?;
    let checkpoint = Checkpoint::new(spec.clone(), g)
        .with_meta("role", "teacher")
        .with_meta("task", &data.label)
        .with_meta("data_fingerprint", data.fingerprint())
        .with_meta("seed", seed)
        .with_meta("steps", cfg.steps)
        .with_meta("proxy_fid", format!("{fid:?}"));
    Ok(TeacherRun {
        checkpoint,
        discriminator: d,
        proxy_fid: fid,
        log,
    })
}
