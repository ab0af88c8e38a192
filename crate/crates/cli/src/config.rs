//! Run configuration: an optional TOML file layered over a named preset,
//! then command-line overrides on top. Unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;
use tamir_core::arch::ModelConfig;
use tamir_core::tape::PadMode;
use tamir_core::tensor::Scalar;
use tamir_core::train::TrainConfig;
use tamir_core::{Error, Result};

/// Degradation and cropping knobs for commands that synthesize pairs.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub blur_sigma: Scalar,
    pub noise_sigma: Scalar,
    /// Target-side crop edge for training; 0 trains on whole images.
    pub crop: usize,
    pub crops_per_image: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            crop: 32,
            crops_per_image: 3,
        }
    }
}

/// Fully resolved configuration shared by the subcommands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Command-line overrides applied after the file.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct Overrides {
    /// Model preset: standard, small, or micro.
    #[arg(long)]
    pub preset: Option<String>,
    /// Fraction of highest-variance patches the scan visits.
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Upscaling factor (1 to 4).
    #[arg(long)]
    pub scale: Option<usize>,
    /// Seed for initialization, shuffling, and degradation noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<ModelSection>,
    train: Option<TrainSection>,
    data: Option<DataSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    preset: Option<String>,
    n_groups: Option<usize>,
    depth: Option<usize>,
    d_model: Option<usize>,
    n_state: Option<usize>,
    patch_extent: Option<usize>,
    top_p: Option<f64>,
    scale: Option<usize>,
    pad_mode: Option<String>,
    ca_reduction: Option<usize>,
    max_grid: Option<usize>,
    ln_eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    lambda_pixel: Option<f64>,
    lambda_freq: Option<f64>,
    milestones: Option<Vec<f64>>,
    seed: Option<u64>,
    log_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    blur_sigma: Option<f64>,
    noise_sigma: Option<f64>,
    crop: Option<usize>,
    crops_per_image: Option<usize>,
}

fn preset_by_name(name: &str) -> Result<ModelConfig> {
    match name {
        "standard" => Ok(ModelConfig::standard()),
        "small" => Ok(ModelConfig::small()),
        "micro" => Ok(ModelConfig::micro()),
        other => Err(Error::Config(format!(
            "unknown preset `{other}` (expected standard, small, or micro)"
        ))),
    }
}

fn pad_mode_by_name(name: &str) -> Result<PadMode> {
    match name {
        "reflect" => Ok(PadMode::Reflect),
        "zero" => Ok(PadMode::Zero),
        other => Err(Error::Config(format!(
            "unknown pad_mode `{other}` (expected reflect or zero)"
        ))),
    }
}

/// Loads the optional file, resolves the preset, applies file fields and
/// then command-line overrides, and validates the result.
pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let file: FileConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let ms = file.model.unwrap_or_default();
    let ts = file.train.unwrap_or_default();
    let ds = file.data.unwrap_or_default();

    let preset_name = ov
        .preset
        .clone()
        .or(ms.preset)
        .unwrap_or_else(|| "small".to_string());
    let mut model = preset_by_name(&preset_name)?;
    if let Some(v) = ms.n_groups {
        model.n_groups = v;
    }
    if let Some(v) = ms.depth {
        model.depth = v;
    }
    if let Some(v) = ms.d_model {
        model.d_model = v;
    }
    if let Some(v) = ms.n_state {
        model.n_state = v;
    }
    if let Some(v) = ms.patch_extent {
        model.patch_extent = v;
    }
    if let Some(v) = ms.top_p {
        model.top_p = v as Scalar;
    }
    if let Some(v) = ms.scale {
        model.scale = v;
    }
    if let Some(ref v) = ms.pad_mode {
        model.pad_mode = pad_mode_by_name(v)?;
    }
    if let Some(v) = ms.ca_reduction {
        model.ca_reduction = v;
    }
    if let Some(v) = ms.max_grid {
        model.max_grid = v;
    }
    if let Some(v) = ms.ln_eps {
        model.ln_eps = v as Scalar;
    }
    if let Some(v) = ov.top_p {
        model.top_p = v as Scalar;
    }
    if let Some(v) = ov.scale {
        model.scale = v;
    }

    let mut train = TrainConfig::default();
    if let Some(v) = ts.steps {
        train.steps = v;
    }
    if let Some(v) = ts.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = ts.lr {
        train.lr = v as Scalar;
    }
    if let Some(v) = ts.lambda_pixel {
        train.lambda_pixel = v as Scalar;
    }
    if let Some(v) = ts.lambda_freq {
        train.lambda_freq = v as Scalar;
    }
    if let Some(v) = ts.milestones {
        train.milestones = v;
    }
    if let Some(v) = ts.seed {
        train.seed = v;
    }
    if let Some(v) = ts.log_every {
        train.log_every = v;
    }
    if let Some(v) = ov.steps {
        train.steps = v;
    }
    if let Some(v) = ov.seed {
        train.seed = v;
    }

    let data = DataConfig {
        blur_sigma: ds.blur_sigma.map(|v| v as Scalar).unwrap_or(0.0),
        noise_sigma: ds.noise_sigma.map(|v| v as Scalar).unwrap_or(0.0),
        crop: ds.crop.unwrap_or(32),
        crops_per_image: ds.crops_per_image.unwrap_or(3),
    };
    if data.blur_sigma < 0.0 || data.noise_sigma < 0.0 {
        return Err(Error::Config("data: sigmas must be >= 0".into()));
    }
    if data.crop > 0 && data.crops_per_image == 0 {
        return Err(Error::Config("data: crops_per_image must be >= 1 when cropping".into()));
    }

    model.validate()?;
    train.validate()?;
    Ok(RunConfig { model, train, data })
}
