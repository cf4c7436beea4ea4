use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{train_step, SlimConfig, SlimState, StepRecord, TrainContext, VariantTag};
use crate::bundle::{quant_metadata, snap_to_storage, Bundle};
use crate::data::{with_prefetch, BatchStream, TaskData};
use crate::distill::{DistanceMetric, DistillTarget, FeatureExtractor};
use crate::error::{Error, Result};
use crate::metrics::{
    compression_ratios, count_flops, model_size, proxy_fid, CompressionReport, FlopConvention, ModelStats, SizePolicy,
};
use crate::models::{ArchSpec, Checkpoint, ForwardOptions, InitConfig, Network, ParamSet, QuantMode};
use crate::quantization::{finalize_weights, pack_weights, QuantConfig, QuantizedBlob};
use crate::sparsity::{extract_subnetwork, MaskSet};
use crate::tensor::Tensor;

const PREFETCH_DEPTH: usize = 4;
const EVAL_CHUNK: usize = 64;

/// The fixed ingredients shared by every run on one task: data, teacher,
/// discriminator architecture, feature extractor and FLOPs convention.
pub struct Setup {
    pub data: TaskData,
    pub teacher_spec: ArchSpec,
    pub teacher: ParamSet,
    pub disc_spec: ArchSpec,
    /// Discriminator trained alongside the teacher, if available. Only the
    /// frozen-discriminator variant starts from it.
    pub teacher_disc: Option<ParamSet>,
    pub extractor: FeatureExtractor,
    pub flop_convention: FlopConvention,
    teacher_outputs: OnceLock<Tensor>,
    targets: [OnceLock<Vec<DistillTarget>>; 2],
    teacher_stats: OnceLock<ModelStats>,
}

impl Setup {
    pub fn new(
        data: TaskData,
        teacher_spec: ArchSpec,
        teacher: ParamSet,
        disc_spec: ArchSpec,
        extractor: FeatureExtractor,
    ) -> Result<Self> {
        Network::new(teacher_spec.clone())?.check_params(&teacher)?;
        Network::new(disc_spec.clone())?;
        Ok(Setup {
            data,
            teacher_spec,
            teacher,
            disc_spec,
            teacher_disc: None,
            extractor,
            flop_convention: FlopConvention::CALIBRATED,
            teacher_outputs: OnceLock::new(),
            targets: [OnceLock::new(), OnceLock::new()],
            teacher_stats: OnceLock::new(),
        })
    }

    /// Teacher outputs on the training inputs, computed once.
    pub fn teacher_outputs(&self) -> Result<&Tensor> {
        if let Some(t) = self.teacher_outputs.get() {
            return Ok(t);
        }
        let net = Network::new(self.teacher_spec.clone())?;
        let out = generate(&net, &self.teacher, &self.data.x_train, QuantMode::Off)?;
        Ok(self.teacher_outputs.get_or_init(|| out))
    }

    /// Per-sample teacher references for `metric`, computed once.
    pub fn targets(&self, metric: DistanceMetric) -> Result<&[DistillTarget]> {
        let slot = &self.targets[metric as usize];
        if let Some(t) = slot.get() {
            return Ok(t);
        }
        let outputs = self.teacher_outputs()?;
        let n = outputs.shape()[0];
        let mut all = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            all.extend(DistillTarget::new(&outputs.select(&idx), metric, &self.extractor)?.unstack());
        }
        Ok(slot.get_or_init(|| all))
    }

    /// FLOPs, fp32 size and proxy FID of the teacher.
    pub fn teacher_stats(&self) -> Result<ModelStats> {
        if let Some(s) = self.teacher_stats.get() {
            return Ok(*s);
        }
        let stats = self.stats(&self.teacher_spec, &self.teacher, None)?;
        Ok(*self.teacher_stats.get_or_init(|| stats))
    }

    /// FLOPs, size and proxy FID of a generator. Quantized generators are
    /// sized at their weight bit-width and evaluated with fake quantization.
    pub fn stats(&self, spec: &ArchSpec, params: &ParamSet, quant: Option<QuantConfig>) -> Result<ModelStats> {
        let net = Network::new(spec.clone())?;
        let policy = quant.map_or(SizePolicy::FP32, |q| SizePolicy::quantized(q.weight_bits));
        let fake = generate(&net, params, &self.data.x_test, QuantMode::from_config(quant))?;
        Ok(ModelStats {
            flops: count_flops(spec, &self.flop_convention)?,
            size_bytes: model_size(params, &policy),
            proxy_fid: proxy_fid(&fake, &self.data.y_test, &self.extractor)?,
        })
    }

    pub fn report(&self, spec: &ArchSpec, params: &ParamSet, quant: Option<QuantConfig>) -> Result<CompressionReport> {
        let student = self.stats(spec, params, quant)?;
        compression_ratios(
            self.teacher_stats()?,
            student,
            spec.input.shape().to_string(),
            self.flop_convention.to_string(),
        )
    }
}

/// Inference over a whole image set in chunks.
pub(crate) fn generate(net: &Network, params: &ParamSet, x: &Tensor, quant: QuantMode) -> Result<Tensor> {
    let n = x.shape()[0];
    let opts = ForwardOptions { quant, train: false };
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        parts.push(net.infer(params, &x.select(&idx), &opts)?);
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random generator parameters for `spec`, determined by `seed`.
pub fn init_generator(spec: &ArchSpec, seed: u64) -> Result<ParamSet> {
    Ok(Network::new(spec.clone())?.init_params(&InitConfig::default(), &mut seeded(seed, 10)))
}

/// Random discriminator parameters for `spec`, determined by `seed`.
pub fn init_discriminator(spec: &ArchSpec, seed: u64) -> Result<ParamSet> {
    Ok(Network::new(spec.clone())?.init_params(&InitConfig::default(), &mut seeded(seed, 11)))
}

/// One stretch of training with fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct Phase {
    pub name: &'static str,
    pub spec: ArchSpec,
    pub g: ParamSet,
    pub d: ParamSet,
    pub cfg: SlimConfig,
    /// Seeds the minibatch order.
    pub seed: u64,
}

#[derive(Serialize)]
struct LogLine<'a> {
    phase: &'a str,
    #[serde(flatten)]
    record: &'a StepRecord,
}

/// Runs `phase.cfg.schedule.steps` iterations, appending one JSON line per
/// iteration to `log`. On a numeric failure the last good state is written
/// to `out` (when given) before the error is returned.
pub fn run_phase(setup: &Setup, phase: Phase, log: &mut String, out: Option<&Path>) -> Result<SlimState> {
    let cfg = &phase.cfg;
    cfg.validate()?;
    let g_net = Network::new(phase.spec.clone())?;
    let d_net = Network::new(setup.disc_spec.clone())?;
    g_net.check_params(&phase.g)?;
    d_net.check_params(&phase.d)?;
    let targets = if cfg.beta != 0.0 {
        Some(setup.targets(cfg.metric)?)
    } else {
        None
    };
    let ctx = TrainContext::new(&g_net, &d_net, &setup.extractor, targets)?;
    let mut state = SlimState::new(phase.g, phase.d, cfg.adam);
    let steps = cfg.schedule.steps;
    let stream = BatchStream::new(&setup.data.x_train, &setup.data.y_train, cfg.batch_size, phase.seed);
    let result = with_prefetch(stream, steps, PREFETCH_DEPTH, |batches| -> Result<()> {
        for batch in batches {
            let before = (state.t, state.g.clone(), state.d.clone());
            let record = match train_step(&mut state, &ctx, &batch.x, &batch.y, &batch.x_idx, cfg) {
                Ok(r) => r,
                Err(e) => {
                    if let (Some(dir), Error::Numeric { .. }) = (out, &e) {
                        save_snapshot(dir, phase.name, &phase.spec, &setup.disc_spec, &before)?;
                    }
                    return Err(e);
                }
            };
            debug_assert!(record.updates.windows(2).all(|w| (w[0] as u8) < (w[1] as u8)));
            let line = serde_json::to_string(&LogLine {
                phase: phase.name,
                record: &record,
            })
            .expect("log records serialize");
            let _ = writeln!(log, "{line}");
            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && record.t % cfg.checkpoint_every == 0 {
                    Checkpoint::new(phase.spec.clone(), state.g.clone())
                        .with_meta("phase", phase.name)
                        .with_meta("t", record.t)
                        .save(
                            &dir.join("checkpoints")
                                .join(format!("{}-{:06}.ckpt", phase.name, record.t)),
                        )?;
                }
            }
        }
        Ok(())
    });
    result?;
    Ok(state)
}

fn save_snapshot(
    dir: &Path,
    phase: &str,
    g_spec: &ArchSpec,
    d_spec: &ArchSpec,
    (t, g, d): &(usize, ParamSet, ParamSet),
) -> Result<()> {
    let stem = format!("snapshot-{phase}-t{t}");
    Checkpoint::new(g_spec.clone(), g.clone())
        .with_meta("phase", phase)
        .with_meta("t", t)
        .save(&dir.join(format!("{stem}-g.ckpt")))?;
    Checkpoint::new(d_spec.clone(), d.clone())
        .with_meta("phase", phase)
        .with_meta("t", t)
        .save(&dir.join(format!("{stem}-d.ckpt")))
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub variant: Option<VariantTag>,
    /// The trained full network: final `W` (on the weight grid when
    /// quantized) and `gamma`.
    pub trained_spec: ArchSpec,
    pub trained: ParamSet,
    pub discriminator: ParamSet,
    /// Channels kept: those whose scale is nonzero.
    pub masks: MaskSet,
    /// The extracted student.
    pub student_spec: ArchSpec,
    pub student: ParamSet,
    pub quant: Option<QuantConfig>,
    /// Packed student kernels, by parameter name. Empty at full precision.
    pub blobs: Vec<(String, QuantizedBlob)>,
    pub report: CompressionReport,
    /// Line-delimited JSON, one record per iteration.
    pub log: String,
}

impl Artifacts {
    /// Extracts the student from a trained network and evaluates it.
    pub(crate) fn finish(
        setup: &Setup,
        variant: Option<VariantTag>,
        spec: ArchSpec,
        trained: ParamSet,
        discriminator: ParamSet,
        quant: Option<QuantConfig>,
        log: String,
    ) -> Result<Self> {
        let trained = match &quant {
            Some(q) => finalize_weights(&trained, q)?,
            None => trained,
        };
        let masks = MaskSet::from_params(&spec, &trained, 0.0)?;
        let (student_spec, student) = extract_subnetwork(&spec, &trained, &masks)?;
        // Slicing can lower a kernel's max magnitude and so its grid; snap
        // the student's kernels to their own grids before packing, and every
        // other tensor to the f32 precision it is stored at.
        let (student, blobs) = match &quant {
            Some(q) => {
                let s = finalize_weights(&student, q)?;
                let blobs = s
                    .entries()
                    .iter()
                    .filter(|p| p.role == crate::models::ParamRole::Kernel)
                    .map(|p| Ok((p.name.clone(), pack_weights(&p.tensor, q)?)))
                    .collect::<Result<Vec<_>>>()?;
                (s, blobs)
            }
            None => (student, Vec::new()),
        };
        let student = snap_to_storage(&student, quant.as_ref());
        let report = setup.report(&student_spec, &student, quant)?;
        Ok(Artifacts {
            variant,
            trained_spec: spec,
            trained,
            discriminator,
            masks,
            student_spec,
            student,
            quant,
            blobs,
            report,
            log,
        })
    }

    /// The student as a deployment bundle.
    pub fn bundle(&self) -> Result<Bundle> {
        Bundle::new(self.student_spec.clone(), self.student.clone(), self.quant)
    }

    /// Writes checkpoints, masks, report and metrics log into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            written.push(p);
            Ok(())
        };
        let tag = self.variant.map(|v| v.to_string()).unwrap_or_else(|| "custom".into());
        let meta = |ck: Checkpoint| ck.with_meta("variant", &tag);
        put(
            "trained.ckpt",
            &meta(Checkpoint::new(self.trained_spec.clone(), self.trained.clone())).to_bytes(),
        )?;
        let mut student = meta(Checkpoint::new(self.student_spec.clone(), self.student.clone()));
        if let Some(q) = &self.quant {
            for (k, v) in quant_metadata(q) {
                student = student.with_meta(k, v);
            }
        }
        put("student.ckpt", &student.to_bytes())?;
        put("masks.json", self.masks.to_json().as_bytes())?;
        put("report.txt", self.report.to_record().as_bytes())?;
        put("metrics.jsonl", self.log.as_bytes())?;
        Ok(written)
    }
}

/// One joint run: random initialization of the full-width generator and the
/// discriminator, `T` iterations, weight finalization when quantized, and
/// extraction of the student.
pub fn run(setup: &Setup, cfg: &SlimConfig, seed: u64, out: Option<&Path>) -> Result<Artifacts> {
    let spec = setup.teacher_spec.clone();
    let phase = Phase {
        name: "joint",
        g: init_generator(&spec, seed)?,
        d: init_discriminator(&setup.disc_spec, seed)?,
        spec: spec.clone(),
        cfg: cfg.clone(),
        seed,
    };
    let mut log = String::new();
    let state = run_phase(setup, phase, &mut log, out)?;
    Artifacts::finish(setup, None, spec, state.g, state.d, cfg.quant, log)
}
