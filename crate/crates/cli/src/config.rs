//! Run configuration: one JSON document with a section per module, plus
//! dotted-path overrides from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latent_ct::diffusion::{Architecture, ScheduleSpec, TrainConfig};
use latent_ct::latent::NoiseMode;
use latent_ct::phantom::PhantomSpec;
use latent_ct::varrecon::TvConfig;
use latent_ct::FanBeamGeometry;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub geometry: FanBeamGeometry,
    /// Ground truth for `simulate`.
    pub phantom: PhantomSpec,
    pub simulate: SimulateConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ir: IrSettings,
    pub tv: TvConfig,
    pub latent: LatentSettings,
    pub inputs: InputPaths,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let size = 64;
        Self {
            output_dir: PathBuf::from("out"),
            geometry: FanBeamGeometry::desk(size),
            phantom: PhantomSpec::shepp_logan(size),
            simulate: SimulateConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                learning_rate: 2e-3,
                batch_size: 8,
                n_epochs: 380,
                rng_seed: 7,
                adam: Default::default(),
            },
            ir: IrSettings::default(),
            tv: TvConfig { lambda: 100.0, epsilon_smooth: 1e-2 },
            latent: LatentSettings::default(),
            inputs: InputPaths::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub strides: Vec<usize>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { strides: vec![1, 10, 20] }
    }
}

/// Random-ellipse training phantoms at the geometry's image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub n_ellipses: usize,
    pub first_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_images: 500, n_ellipses: 8, first_seed: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Defaults to the standard network at the geometry's image size.
    pub architecture: Option<Architecture>,
    pub schedule: ScheduleSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { architecture: None, schedule: ScheduleSpec::cosine(1) }
    }
}

/// Plain IR settings. The step is `step_fraction / σ_max(A)²`, with the
/// operator norm estimated by power iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrSettings {
    pub n_iterations: usize,
    pub step_fraction: f64,
    pub power_iterations: usize,
}

impl Default for IrSettings {
    fn default() -> Self {
        Self { n_iterations: 200, step_fraction: 0.9, power_iterations: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentSettings {
    /// Explicit latent step; when absent, `step_fraction·ᾱ_T / σ_max(A)²`.
    pub gamma: Option<f64>,
    pub step_fraction: f64,
    pub n_iterations: usize,
    pub t: usize,
    pub noise_seed: u64,
    pub init_seed: u64,
    pub noise_mode: NoiseMode,
}

impl Default for LatentSettings {
    fn default() -> Self {
        Self {
            gamma: None,
            step_fraction: 0.9,
            n_iterations: 1000,
            t: 1,
            noise_seed: 11,
            init_seed: 12,
            noise_mode: NoiseMode::Fixed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub sinogram: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Reconstruction to score in `evaluate`.
    pub test_image: Option<PathBuf>,
    /// Metric table to summarize in `evaluate`.
    pub metrics_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityLevel {
    pub stride: usize,
    pub n_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Checkpoint per chain depth, keyed by `T`.
    pub checkpoints: BTreeMap<usize, PathBuf>,
    /// Stride of the sparse-view data used by every sweep except `sparsity`.
    pub stride: usize,
    /// Random-ellipse evaluation phantoms; seeds `first_seed..first_seed+n_slices`.
    pub n_slices: usize,
    pub n_ellipses: usize,
    pub first_seed: u64,
    pub t_values: Vec<usize>,
    pub beta1_values: Vec<f64>,
    /// Seeds for the noise comparison; each seed drives both the init and
    /// the noise draws of one run.
    pub noise_seeds: Vec<u64>,
    pub noise_t: usize,
    pub sparsity: Vec<SparsityLevel>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            checkpoints: BTreeMap::new(),
            stride: 10,
            n_slices: 5,
            n_ellipses: 8,
            first_seed: 5000,
            t_values: vec![1, 5, 10],
            beta1_values: vec![1e-5, 4e-5, 1e-4, 4e-4],
            noise_seeds: vec![1, 2, 3, 4, 5],
            noise_t: 10,
            sparsity: vec![
                SparsityLevel { stride: 10, n_iterations: 1000 },
                SparsityLevel { stride: 20, n_iterations: 10_000 },
            ],
        }
    }
}

impl RunConfig {
    pub fn architecture(&self) -> Architecture {
        self.model.architecture.unwrap_or_else(|| Architecture::standard(self.geometry.image_size_px))
    }

    /// Reads `path` (or starts from the defaults) and applies `key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(Self::default())?,
        };
        Self::from_value_with(&mut value, overrides)
    }

    pub fn from_value_with(value: &mut Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(value, o)?;
        }
        serde_json::from_value(value.clone()).context("invalid configuration")
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise. Missing objects along the path
/// are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not of the form key=value");
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override path {path:?} has an empty component");
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let Some(obj) = node.as_object_mut() else {
            bail!("override path {path:?} descends into a non-object at {key:?}");
        };
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    let Some(obj) = node.as_object_mut() else {
        bail!("override path {path:?} does not end in an object field");
    };
    obj.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}
