//! Experiment configuration: one TOML document with data, model, loss, train, eval,
//! sweep and path sections. Unknown keys are rejected, and `key=value` overrides edit the
//! document before it is parsed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::{KernelFamily, NoiseSpec, Setup, TaskConfig};
use crate::imagefunc::ImageTaskConfig;
use crate::models::{ModelConfig, ModelVariant};
use crate::objectives::LossConfig;
use crate::train::TrainConfig;

/// Environment variable naming the root that relative paths resolve against.
pub const ROOT_ENV: &str = "NOISYNP_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDataConfig {
    pub dir: PathBuf,
    #[serde(default = "default_image_size")]
    pub size: u32,
    /// Trailing share of the sorted files held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub task: ImageTaskConfig,
}

fn default_image_size() -> u32 {
    32
}
fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default = "default_setup")]
    pub setup: Setup,
    /// Noise for training and evaluation; the task sections' own `noise` must stay unset.
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_task")]
    pub task: TaskConfig,
    #[serde(default)]
    pub images: Option<ImageDataConfig>,
}

fn default_dataset() -> String {
    "gp".into()
}
fn default_setup() -> Setup {
    Setup::Three
}
fn default_task() -> TaskConfig {
    TaskConfig::new(KernelFamily::Rbf)
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: default_dataset(),
            setup: default_setup(),
            noise: NoiseSpec::clean(),
            task: default_task(),
            images: None,
        }
    }
}

impl DataConfig {
    /// The kernel column of result rows.
    pub fn kernel_label(&self) -> String {
        match self.images {
            Some(_) => "image".into(),
            None => self.task.kernel.family.name().into(),
        }
    }
}

/// Loss settings; the reconstruction set defaults to what the variant trains with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default)]
    pub include_context_in_recon: Option<bool>,
    #[serde(default)]
    pub w_sigma: f64,
    #[serde(default = "one")]
    pub k_train: usize,
}

fn one() -> usize {
    1
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            include_context_in_recon: None,
            w_sigma: 0.0,
            k_train: 1,
        }
    }
}

impl LossSection {
    pub fn resolve(&self, variant: ModelVariant) -> LossConfig {
        let mut cfg = LossConfig::for_variant(variant, self.w_sigma);
        if let Some(inc) = self.include_context_in_recon {
            cfg.include_context_in_recon = inc;
        }
        if !variant.robust {
            cfg.w_sigma = 0.0;
        }
        cfg.k_train = self.k_train;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k_eval", rename = "K_eval")]
    pub k_eval: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    /// Validation tasks for weight tuning.
    #[serde(default = "default_n_tasks")]
    pub n_val_tasks: usize,
    #[serde(default)]
    pub test_seed: u64,
    #[serde(default = "default_noise_grid")]
    pub noise_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_k_eval() -> usize {
    50
}
fn default_eval_batch() -> usize {
    160
}
fn default_n_tasks() -> usize {
    3000
}
fn default_noise_grid() -> Vec<f64> {
    vec![0.0, 0.3, 0.6, 0.9, 0.99]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_eval: default_k_eval(),
            eval_batch: default_eval_batch(),
            n_tasks: default_n_tasks(),
            n_val_tasks: default_n_tasks(),
            test_seed: 0,
            noise_grid: default_noise_grid(),
            seeds: default_seeds(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_eval < 1 {
            return Err(Error::Config("K_eval must be at least 1".into()));
        }
        if self.eval_batch == 0 || self.n_tasks == 0 || self.n_val_tasks == 0 {
            return Err(Error::Config("evaluation sizes must be positive".into()));
        }
        if let Some(s) = self.noise_grid.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("noise level {s} is outside [0, 1]")));
        }
        Ok(())
    }
}

/// Variance-weight tuning on validation tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    #[serde(default = "default_tune_model")]
    pub model: String,
    #[serde(default = "default_weight_grid")]
    pub grid: Vec<f64>,
    /// Adds a finer pass around the coarse winner.
    #[serde(default)]
    pub refine: bool,
    #[serde(default)]
    pub seed: u64,
    /// Noise levels to tune at; the sweep's noise grid when empty.
    #[serde(default)]
    pub noise_levels: Vec<f64>,
}

fn default_tune_model() -> String {
    "r-anp".into()
}
fn default_weight_grid() -> Vec<f64> {
    vec![0.0, 5.0, 10.0, 20.0, 50.0]
}

/// One block of cells: every model x setup x noise level x seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub models: Vec<String>,
    pub setups: Vec<Setup>,
    /// The eval section's grid when absent.
    #[serde(default)]
    pub noise_grid: Option<Vec<f64>>,
    /// The eval section's seeds when absent.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Decoupled axes; when both are set the block runs the full `s x r` grid instead
    /// of coupled noise levels.
    #[serde(default)]
    pub s_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub r_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub tune: Option<TuneSection>,
    #[serde(default)]
    pub blocks: Vec<SweepBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_checkpoints")]
    pub checkpoint_dir: PathBuf,
    #[serde(default = "default_results")]
    pub results_dir: PathBuf,
}

fn default_checkpoints() -> PathBuf {
    "checkpoints".into()
}
fn default_results() -> PathBuf {
    "results".into()
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            checkpoint_dir: default_checkpoints(),
            results_dir: default_results(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse()?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = doc.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.task.validate()?;
        self.data.noise.validate()?;
        if !self.data.task.noise.is_clean()
            || self
                .data
                .images
                .as_ref()
                .is_some_and(|i| !i.task.noise.is_clean())
        {
            return Err(Error::Config(
                "set noise under [data.noise], not inside the task sections".into(),
            ));
        }
        if let Some(img) = &self.data.images {
            if !(0.0..1.0).contains(&img.test_fraction) {
                return Err(Error::Config(
                    "images.test_fraction must lie in [0, 1)".into(),
                ));
            }
            if img.size == 0 {
                return Err(Error::Config("images.size must be positive".into()));
            }
            if (self.model.dim_x, self.model.dim_y) != (2, crate::imagefunc::CHANNELS) {
                return Err(Error::Config(
                    "image data needs model.dim_x = 2 and model.dim_y = 3".into(),
                ));
            }
        }
        self.model.validate()?;
        self.loss.resolve(self.model.variant).validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Task configuration with the data-level noise and the training batch size.
    pub fn task_config(&self, noise: NoiseSpec) -> TaskConfig {
        TaskConfig {
            noise,
            batch_size: self.train.batch_size,
            ..self.data.task.clone()
        }
    }

    pub fn image_task_config(&self, noise: NoiseSpec) -> Option<ImageTaskConfig> {
        self.data.images.as_ref().map(|i| ImageTaskConfig {
            noise,
            batch_size: self.train.batch_size,
            ..i.task
        })
    }
}

/// Resolves `path` against `$NOISYNP_ROOT` (or the working directory) when relative.
pub fn resolve_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML value when it parses as one and
/// as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [model]
        variant = "r-anp"
        [train]
        steps = 10
        [loss]
        w_sigma = 5.0
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(c.eval.k_eval, 50);
        assert_eq!(c.eval.eval_batch, 160);
        assert_eq!(c.data.setup, Setup::Three);
        let l = c.loss.resolve(c.model.variant);
        assert!(!l.include_context_in_recon);
        assert_eq!(l.w_sigma, 5.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[eval]\nK_evl = 3\n");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad, &[]),
            Err(Error::Toml(_))
        ));
        let top = format!("bogus = 1\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml(&top, &[]).is_err());
    }

    #[test]
    fn overrides_edit_nested_values() {
        let c = ExperimentConfig::from_toml(
            MINIMAL,
            &[
                "train.steps=42".into(),
                "data.noise.std=0.3".into(),
                "data.noise.rate=0.3".into(),
                "model.variant=np".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.steps, 42);
        assert_eq!(c.data.noise.std, 0.3);
        assert_eq!(c.model.variant.to_string(), "np");
        // standard variants never carry a variance weight
        assert_eq!(c.loss.resolve(c.model.variant).w_sigma, 0.0);
    }

    #[test]
    fn malformed_overrides_fail() {
        assert!(ExperimentConfig::from_toml(MINIMAL, &["train.steps".into()]).is_err());
        assert!(ExperimentConfig::from_toml(MINIMAL, &["train..steps=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml(MINIMAL, &["train.steps=many".into()]).is_err());
    }

    #[test]
    fn noise_inside_task_section_is_rejected() {
        let c = format!("{MINIMAL}\n[data.task.noise]\nstd = 0.5\nrate = 0.5\n[data.task.kernel]\nfamily = \"rbf\"\n");
        assert!(ExperimentConfig::from_toml(&c, &[]).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(
            ExperimentConfig::from_toml(&c.to_toml().unwrap(), &[]).unwrap(),
            c
        );
    }
}
