//! Run configuration: one TOML document that fully determines a command.
//!
//! ```toml
//! seed = 0
//! variant = "GS-8"
//! teacher = "runs/teacher/teacher.ckpt"
//! out = "runs/gs8"
//!
//! [task]
//! task = "texture-swap"
//! size = 32
//!
//! [slim]
//! beta = 10.0
//! rho = 1.0
//!
//! [slim.quant]
//! weight_bits = 8
//!
//! [slim.schedule]
//! steps = 2000
//! ```
//!
//! Every section and key is optional; unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_task, Manifest, TaskData, TaskSpec};
use crate::distill::FeatureExtractor;
use crate::engine::{Setup, SlimConfig, TeacherConfig, VariantTag};
use crate::error::{Error, Result};
use crate::models::{catalog, load_teacher, ArchSpec, Checkpoint, InputKind, NormKind};

/// File names of a teacher run; the discriminator is looked up next to the
/// teacher checkpoint.
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const TEACHER_DISC_FILE: &str = "discriminator.ckpt";

/// Environment variable naming the default root for run directories.
pub const OUT_ROOT_ENV: &str = "SLIMGAN_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
/// Name of the config copy written into every run directory.
pub const CONFIG_FILE: &str = "config.toml";

/// Unpaired image folders used in place of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderSource {
    pub x: PathBuf,
    pub y: PathBuf,
    /// Images are resized and center-cropped to this side length.
    pub size: usize,
    /// Held-out images per domain.
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<VariantTag>,
    /// Test images shown per variant in the image grid.
    pub grid_images: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: VariantTag::ALL.to_vec(),
            grid_images: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Pipeline to run; unset runs the joint method with `slim` as given.
    pub variant: Option<VariantTag>,
    /// Teacher checkpoint read by `slim`, `eval` and `ablate`. `teach` writes
    /// its teacher into the run directory instead.
    pub teacher: Option<PathBuf>,
    /// Run directory; defaults to a name under the output root.
    pub out: Option<PathBuf>,
    /// Feature extractor checkpoint; unset uses the builtin one.
    pub extractor: Option<PathBuf>,
    /// Expected extractor digest; loading fails on mismatch.
    pub extractor_checksum: Option<String>,
    pub task: TaskSpec,
    pub folders: Option<FolderSource>,
    pub slim: SlimConfig,
    pub teach: TeacherConfig,
    pub ablate: AblateConfig,
}

fn toml_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::config(format!("{what}: {e}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_err("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configs serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.slim.validate()?;
        if self.task.size == 0 || self.task.train_size == 0 || self.task.test_size < 2 {
            return Err(Error::config(
                "task needs a positive size, training images and at least two test images",
            ));
        }
        Ok(())
    }

    /// Sets one dotted key, e.g. `slim.schedule.steps=200`. The value is
    /// read as a TOML value, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| toml_err("config", e))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::config(format!("bad override key `{key}`")));
        }
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a section")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}` does not name a key")))?
            .insert(parts[parts.len() - 1].to_string(), value);
        let updated: RunConfig = root.try_into().map_err(|e| toml_err(&format!("override `{key}`"), e))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// The run directory: `out` when set, else `<root>/<command>-<label>-s<seed>`
    /// with the root taken from `SLIMGAN_OUT` or `runs`.
    pub fn run_dir(&self, command: &str) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
        let label = self.variant.map(|v| v.to_string()).unwrap_or_else(|| "joint".into());
        let label: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        root.join(format!("{command}-{label}-s{}", self.seed))
    }
}

/// Generator architecture for square images of side `size`.
pub fn generator_spec(size: usize) -> ArchSpec {
    if size == 32 {
        catalog::desk_generator()
    } else {
        catalog::resnet_generator(
            &format!("{}-{size}", catalog::DESK_TEACHER),
            size,
            8,
            3,
            false,
            NormKind::Instance,
        )
    }
}

/// The patch discriminator resized to square images of side `size`.
pub fn discriminator_spec(size: usize) -> ArchSpec {
    let mut d = catalog::discriminator();
    d.input = InputKind::Image {
        channels: 3,
        height: size,
        width: size,
    };
    d
}

impl RunConfig {
    /// The synthetic task, or the image folders when configured, with the
    /// folder manifests.
    pub fn load_data(&self) -> Result<(TaskData, Option<(Manifest, Manifest)>)> {
        match &self.folders {
            Some(f) => {
                let (data, mx, my) = TaskData::from_folders(&f.x, &f.y, f.size, f.test_size)?;
                Ok((data, Some((mx, my))))
            }
            None => Ok((make_task(&self.task)?, None)),
        }
    }

    pub fn load_extractor(&self) -> Result<FeatureExtractor> {
        let fx = match &self.extractor {
            Some(p) => FeatureExtractor::load(p, self.extractor_checksum.as_deref())?,
            None => FeatureExtractor::builtin()?,
        };
        if let Some(e) = &self.extractor_checksum {
            if !e.eq_ignore_ascii_case(fx.checksum()) {
                return Err(Error::Checksum {
                    what: "feature extractor".into(),
                    expected: e.clone(),
                    found: fx.checksum().to_string(),
                });
            }
        }
        Ok(fx)
    }

    /// Data, teacher and extractor for the training and evaluation commands.
    /// A discriminator saved next to the teacher is picked up when present.
    pub fn setup(&self) -> Result<Setup> {
        let path = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::config("no teacher checkpoint configured; set `teacher` or run `teach` first"))?;
        let (teacher_spec, teacher) = load_teacher(path)?;
        let (data, _) = self.load_data()?;
        let size = data.image_size();
        if teacher_spec.input.shape() != crate::models::Shape3::new(3, size, size) {
            return Err(Error::config(format!(
                "teacher expects {} inputs but the task has {size}x{size} RGB images",
                teacher_spec.input.shape()
            )));
        }
        let disc_spec = discriminator_spec(size);
        let mut setup = Setup::new(data, teacher_spec, teacher, disc_spec.clone(), self.load_extractor()?)?;
        let disc_path = path.with_file_name(TEACHER_DISC_FILE);
        if disc_path.exists() {
            let ck = Checkpoint::load(&disc_path)?;
            if ck.spec.layers == disc_spec.layers {
                setup.teacher_disc = Some(ck.params);
            }
        }
        Ok(setup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 3\nvariant = \"D+CP\"\n[task]\ntask = \"hue-rotate\"\n[slim]\nrho = 0.5\n[slim.quant]\nweight_bits = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.variant, Some(VariantTag::DCp));
        assert_eq!(cfg.task.task, TaskKind::HueRotate);
        assert_eq!(cfg.task.size, 32);
        assert_eq!(cfg.slim.rho, 0.5);
        assert_eq!(cfg.slim.beta, 10.0);
        let q = cfg.slim.quant.unwrap();
        assert_eq!((q.activation_bits, q.weight_bits, q.clamp), (8, 4, 4.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "sed = 1",
            "[slim]\nrh = 1.0",
            "[slim.schedule]\nstep = 5",
            "variant = \"GS-16\"",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn overrides_set_nested_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("slim.schedule.steps=200").unwrap();
        cfg.apply_override("variant=GS-8").unwrap();
        cfg.apply_override("teacher = runs/t.ckpt").unwrap();
        cfg.apply_override("slim.quant.clamp=2.0").unwrap();
        cfg.apply_override("task.task=\"edge-stylize\"").unwrap();
        assert_eq!(cfg.slim.schedule.steps, 200);
        assert_eq!(cfg.variant, Some(VariantTag::Gs8));
        assert_eq!(cfg.teacher, Some(PathBuf::from("runs/t.ckpt")));
        assert_eq!(cfg.slim.quant.unwrap().clamp, 2.0);
        assert_eq!(cfg.task.task, TaskKind::EdgeStylize);
        let before = cfg.clone();
        assert!(cfg.apply_override("slim.rhoo=1").is_err());
        assert!(cfg.apply_override("slim.rho=-1").is_err());
        assert!(cfg.apply_override("seed").is_err());
        assert!(cfg.apply_override("seed.x=1").is_err());
        assert_eq!(cfg, before);
    }

    #[test]
    fn run_dir_defaults_under_the_root() {
        let mut cfg = RunConfig {
            variant: Some(VariantTag::CpD),
            seed: 2,
            ..RunConfig::default()
        };
        let dir = cfg.run_dir("slim");
        assert!(dir.ends_with("slim-CP_D-s2"), "{}", dir.display());
        cfg.out = Some(PathBuf::from("x"));
        assert_eq!(cfg.run_dir("slim"), PathBuf::from("x"));
    }
}
