//! `slimgan`: train teachers, slim generators, compare pipelines and export
//! deployment bundles.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use slimgan::bundle::{quant_from_metadata, Bundle};
use slimgan::config::{discriminator_spec, generator_spec, RunConfig, CONFIG_FILE, TEACHER_DISC_FILE, TEACHER_FILE};
use slimgan::data::save_image_grid;
use slimgan::distill::{train_extractor, ExtractorTraining};
use slimgan::engine::{run, run_variant, train_teacher, Artifacts, Setup, VariantTag};
use slimgan::error::ErrorCategory;
use slimgan::metrics::render_table;
use slimgan::models::{Checkpoint, ForwardOptions, Network, QuantMode};
use slimgan::{Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "slimgan",
    version,
    about = "Joint pruning, quantization and distillation of GAN generators"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured pipeline.
    #[arg(long, global = true, value_name = "TAG")]
    variant: Option<VariantTag>,
    /// Run directory. Defaults to a fresh name under $SLIMGAN_OUT (or ./runs).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Sets a dotted config key, e.g. `slim.schedule.steps=200`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense teacher generator with its discriminator.
    Teach,
    /// Slim the configured teacher with the configured pipeline.
    Slim,
    /// Report FLOPs, size and proxy FID of a student against the teacher.
    Eval {
        /// Student checkpoint written by `slim`.
        #[arg(long, value_name = "PATH")]
        student: PathBuf,
    },
    /// Run several pipelines at the same budget and tabulate them.
    Ablate {
        /// Pipelines to compare; defaults to the configured list.
        #[arg(long, value_delimiter = ',', value_name = "TAG,...")]
        tags: Vec<VariantTag>,
    },
    /// Write a student as a deployment bundle.
    Export {
        #[arg(long, value_name = "PATH")]
        student: PathBuf,
    },
    /// Train the feature extractor used for perceptual distances and proxy FID.
    TrainExtractor {
        #[arg(long)]
        steps: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Teach => "teach",
            Command::Slim => "slim",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Export { .. } => "export",
            Command::TrainExtractor { .. } => "extractor",
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.variant {
        cfg.variant = Some(v);
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Creates the run directory and stores the resolved config in it.
fn open_run(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.run_dir(command);
    create_dir(&dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(dir)
}

fn dir_name(tag: VariantTag) -> String {
    tag.as_str()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn teach(cfg: &RunConfig) -> Result<()> {
    let dir = open_run(cfg, "teach")?;
    let (data, manifests) = cfg.load_data()?;
    if let Some((mx, my)) = manifests {
        let json = serde_json::json!({ "x": mx, "y": my });
        write(
            &dir.join("data-manifest.json"),
            serde_json::to_string_pretty(&json).unwrap() + "\n",
        )?;
    }
    let size = data.image_size();
    let (spec, disc) = (generator_spec(size), discriminator_spec(size));
    let fx = cfg.load_extractor()?;
    let start = Instant::now();
    let run = train_teacher(&data, &spec, &disc, &fx, &cfg.teach, cfg.seed)?;
    let path = dir.join(TEACHER_FILE);
    run.checkpoint.save(&path)?;
    Checkpoint::new(disc, run.discriminator)
        .with_meta("role", "discriminator")
        .save(&dir.join(TEACHER_DISC_FILE))?;
    write(&dir.join("metrics.jsonl"), &run.log)?;
    println!("teacher: {}", path.display());
    println!(
        "proxy FID {:.4} after {} steps in {:.1?}",
        run.proxy_fid,
        cfg.teach.steps,
        start.elapsed()
    );
    Ok(())
}

fn slim_once(cfg: &RunConfig, setup: &Setup, tag: Option<VariantTag>, dir: &Path) -> Result<Artifacts> {
    let artifacts = match tag {
        Some(t) => run_variant(t, setup, &cfg.slim, cfg.seed, Some(dir))?,
        None => run(setup, &cfg.slim, cfg.seed, Some(dir))?,
    };
    artifacts.save(dir)?;
    Ok(artifacts)
}

fn label(tag: Option<VariantTag>) -> String {
    tag.map(|t| t.to_string()).unwrap_or_else(|| "joint".into())
}

fn slim(cfg: &RunConfig) -> Result<()> {
    let dir = open_run(cfg, "slim")?;
    let setup = cfg.setup()?;
    let start = Instant::now();
    let a = slim_once(cfg, &setup, cfg.variant, &dir)?;
    print!("{}", render_table(&[(label(cfg.variant), a.report.clone())]));
    println!("artifacts in {} ({:.1?})", dir.display(), start.elapsed());
    Ok(())
}

fn load_student(path: &Path) -> Result<Bundle> {
    let ck = Checkpoint::load(path)?;
    let quant = quant_from_metadata(&ck.metadata)?;
    Bundle::new(ck.spec, ck.params, quant)
}

fn eval(cfg: &RunConfig, student: &Path) -> Result<()> {
    let s = load_student(student)?;
    let setup = cfg.setup()?;
    let report = setup.report(&s.spec, &s.params, s.quant)?;
    let dir = open_run(cfg, "eval")?;
    write(&dir.join("report.txt"), report.to_record())?;
    print!("{}", report.to_record());
    print!("{}", render_table(&[(s.spec.name.clone(), report)]));
    Ok(())
}

fn grid(setup: &Setup, a: &Artifacts, n: usize, path: &Path) -> Result<()> {
    let n = n.min(setup.data.x_test.shape()[0]).max(1);
    let idx: Vec<usize> = (0..n).collect();
    let x = setup.data.x_test.select(&idx);
    let opts = ForwardOptions::eval();
    let teacher = Network::new(setup.teacher_spec.clone())?.infer(&setup.teacher, &x, &opts)?;
    let student_opts = ForwardOptions {
        quant: QuantMode::from_config(a.quant),
        train: false,
    };
    let student = Network::new(a.student_spec.clone())?.infer(&a.student, &x, &student_opts)?;
    save_image_grid(path, &Tensor::concat(&[&x, &teacher, &student])?, n)
}

fn ablate(cfg: &RunConfig, tags: &[VariantTag]) -> Result<()> {
    let tags = if tags.is_empty() {
        cfg.ablate.variants.clone()
    } else {
        tags.to_vec()
    };
    if tags.is_empty() {
        return Err(Error::Config("no variants to compare".into()));
    }
    let dir = open_run(cfg, "ablate")?;
    let setup = cfg.setup()?;
    let mut rows = Vec::new();
    for tag in tags {
        let start = Instant::now();
        let sub = dir.join(dir_name(tag));
        create_dir(&sub)?;
        let a = slim_once(cfg, &setup, Some(tag), &sub)?;
        grid(&setup, &a, cfg.ablate.grid_images, &sub.join("grid.png"))?;
        eprintln!(
            "{tag}: proxy FID {:.4}, r_s {:.2} ({:.1?})",
            a.report.student.proxy_fid,
            a.report.r_s,
            start.elapsed()
        );
        rows.push((tag.to_string(), a.report));
    }
    let table = render_table(&rows);
    write(&dir.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn export(cfg: &RunConfig, student: &Path) -> Result<()> {
    let bundle = load_student(student)?;
    let dir = cfg.run_dir("export");
    let manifest = bundle.save(&dir)?;
    let encoded = manifest
        .tensors
        .iter()
        .filter(|t| t.encoding == slimgan::bundle::Encoding::Packed)
        .count();
    println!(
        "bundle: {} ({} bytes, {} of {} tensors packed)",
        dir.display(),
        manifest.payload_bytes(),
        encoded,
        manifest.tensors.len()
    );
    Ok(())
}

fn extractor(common: &Common, cfg: &RunConfig, steps: Option<usize>) -> Result<()> {
    let defaults = ExtractorTraining::default();
    let training = ExtractorTraining {
        seed: common.seed.unwrap_or(defaults.seed),
        steps: steps.unwrap_or(defaults.steps),
        ..defaults
    };
    let dir = open_run(cfg, "extractor")?;
    let (ck, accuracy) = train_extractor(&training)?;
    let path = dir.join("extractor.ckpt");
    ck.save(&path)?;
    println!("extractor: {}", path.display());
    println!("held-out accuracy {accuracy:.3}, checksum {}", ck.checksum());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli.common).and_then(|cfg| match &cli.command {
        Command::Teach => teach(&cfg),
        Command::Slim => slim(&cfg),
        Command::Eval { student } => eval(&cfg, student),
        Command::Ablate { tags } => ablate(&cfg, tags),
        Command::Export { student } => export(&cfg, student),
        Command::TrainExtractor { steps } => extractor(&cli.common, &cfg, *steps),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slimgan {}: {}", cli.command.name(), e.to_string().trim_end());
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Numeric => 3,
                ErrorCategory::Io => 4,
            })
        }
    }
}
