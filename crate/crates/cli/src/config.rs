//! Run configuration: command-line flags over a TOML file over defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use glyphnet::checkpoint::fnv1a;
use glyphnet::{ArchSpec, AugmentConfig, InputSpec, ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_TRAIN_FRAC: f64 = 0.8;
/// Batch size of every reported evaluation, kept fixed so reports do not
/// depend on the training batch size.
pub const EVAL_BATCH: usize = 64;

/// Contents of a `--config` file. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub image_size: Option<usize>,
    pub train_frac: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub drop_rate: Option<f64>,
    pub epoch_drop: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub augment: Option<bool>,
    pub augmentation: Option<AugmentRanges>,
    pub ensemble: Option<Vec<PathBuf>>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRanges {
    pub rotation_deg: Option<f64>,
    pub shear_frac: Option<f64>,
    pub zoom_frac: Option<f64>,
    pub shift_frac: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map(Self::load).transpose().map(Option::unwrap_or_default)
    }
}

/// Flag values for `train`; `None` defers to the config file.
#[derive(Clone, Debug, Default)]
pub struct TrainFlags {
    pub model: Option<ModelKind>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub image_size: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub seed: Option<u64>,
    pub augment: Option<bool>,
}

/// Effective configuration of a training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub image_size: usize,
    pub train_frac: f64,
    pub train: TrainConfig,
}

fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    match flag.or(file) {
        Some(v) => Ok(v),
        None => bail!(
            "--{name} is required (or set `{}` in the config file)",
            name.replace('-', "_")
        ),
    }
}

fn augment_config(enabled: bool, ranges: Option<AugmentRanges>) -> AugmentConfig {
    let d = AugmentConfig::default();
    let r = ranges.unwrap_or_default();
    AugmentConfig {
        rotation_deg: r.rotation_deg.unwrap_or(d.rotation_deg),
        shear_frac: r.shear_frac.unwrap_or(d.shear_frac),
        zoom_frac: r.zoom_frac.unwrap_or(d.zoom_frac),
        shift_frac: r.shift_frac.unwrap_or(d.shift_frac),
        enabled,
    }
}

fn check_train_frac(f: f64) -> Result<()> {
    ensure!(f > 0.0 && f < 1.0, "train_frac must lie in (0, 1), got {f}");
    Ok(())
}

impl RunConfig {
    pub fn resolve(flags: TrainFlags, file: FileConfig) -> Result<Self> {
        let model = match flags.model {
            Some(m) => m,
            None => required(None, file.model.as_deref(), "model")?.parse()?,
        };
        let d = TrainConfig::for_model(model);
        let train = TrainConfig {
            epochs: flags.epochs.or(file.epochs).unwrap_or(d.epochs),
            batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
            lr0: flags.lr0.or(file.lr0).unwrap_or(d.lr0),
            drop_rate: file.drop_rate.unwrap_or(d.drop_rate),
            epoch_drop: file.epoch_drop.unwrap_or(d.epoch_drop),
            beta1: file.beta1.unwrap_or(d.beta1),
            beta2: file.beta2.unwrap_or(d.beta2),
            adam_epsilon: file.adam_epsilon.unwrap_or(d.adam_epsilon),
            seed: flags.seed.or(file.seed).unwrap_or(d.seed),
            augment: augment_config(
                flags.augment.or(file.augment).unwrap_or(d.augment.enabled),
                file.augmentation,
            ),
        };
        let cfg = Self {
            model,
            corpus: required(flags.corpus, file.corpus, "corpus")?,
            out: required(flags.out, file.out, "out")?,
            image_size: flags.image_size.or(file.image_size).unwrap_or(DEFAULT_IMAGE_SIZE),
            train_frac: file.train_frac.unwrap_or(DEFAULT_TRAIN_FRAC),
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Everything that can be checked without reading the corpus.
    pub fn validate(&self) -> Result<()> {
        self.train.validate().context("invalid training configuration")?;
        check_train_frac(self.train_frac)?;
        ensure!(
            self.corpus.is_dir(),
            "corpus {} is not a directory",
            self.corpus.display()
        );
        let input = InputSpec::grayscale(self.image_size, self.image_size);
        ArchSpec::new(self.model, 2, input)
            .validate()
            .with_context(|| format!("image size {} does not suit model {}", self.image_size, self.model))?;
        Ok(())
    }

    pub fn run_id(&self) -> Result<String> {
        run_id(self)
    }
}

/// Flag values for `evaluate`.
#[derive(Clone, Debug, Default)]
pub struct EvalFlags {
    pub checkpoints: Vec<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub image_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub checkpoints: Vec<PathBuf>,
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Must match the checkpoints' input size when given.
    pub image_size: Option<usize>,
    pub train_frac: f64,
    /// Split seed; the first checkpoint's training seed when absent.
    pub seed: Option<u64>,
}

impl EvalConfig {
    pub fn resolve(flags: EvalFlags, file: FileConfig) -> Result<Self> {
        let checkpoints = if flags.checkpoints.is_empty() {
            file.ensemble.unwrap_or_default()
        } else {
            flags.checkpoints
        };
        ensure!(
            !checkpoints.is_empty(),
            "no checkpoint given (pass one, or --ensemble <files...>)"
        );
        let cfg = Self {
            checkpoints,
            corpus: required(flags.corpus, file.corpus, "corpus")?,
            out: required(flags.out, file.out, "out")?,
            image_size: flags.image_size.or(file.image_size),
            train_frac: file.train_frac.unwrap_or(DEFAULT_TRAIN_FRAC),
            seed: flags.seed.or(file.seed),
        };
        check_train_frac(cfg.train_frac)?;
        ensure!(
            cfg.corpus.is_dir(),
            "corpus {} is not a directory",
            cfg.corpus.display()
        );
        for c in &cfg.checkpoints {
            ensure!(c.is_file(), "checkpoint {} does not exist", c.display());
        }
        Ok(cfg)
    }

    pub fn run_id(&self) -> Result<String> {
        run_id(self)
    }
}

fn run_id(cfg: &impl Serialize) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(&serde_json::to_vec(cfg)?)))
}
