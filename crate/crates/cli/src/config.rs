//! The run configuration document shared by every subcommand.

use std::path::{Path, PathBuf};

use disc_core::classifier::TrainConfig;
use disc_core::engine::{RunSettings, StagePolicy, TargetRule};
use disc_core::metrics::DEFAULT_THRESHOLD;
use disc_core::objectives::ObjectiveSpec;
use disc_core::priors::PriorConfig;
use disc_core::{DiscError, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Toy,
    Folder,
    Archive,
}

/// Where training images, held-out test images and queries come from.
/// Toy data is generated (and cached under `DISC_CACHE_DIR` when set);
/// folder and archive sources read `train_path`, `test_path` and `query_path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub image_size: usize,
    /// Class names in label order; folder sources read one subdirectory per name.
    pub classes: Vec<String>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub query_path: Option<PathBuf>,
    pub n_per_class: usize,
    pub test_n_per_class: usize,
    pub seed: u64,
    pub test_seed: u64,
    pub query_seed: u64,
    pub num_queries: usize,
    pub query_class: u32,
    pub target_class: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            image_size: 16,
            classes: vec!["bar".into(), "arc".into()],
            train_path: None,
            test_path: None,
            query_path: None,
            n_per_class: 300,
            test_n_per_class: 100,
            seed: 1,
            test_seed: 99,
            query_seed: 77,
            num_queries: 50,
            query_class: 0,
            target_class: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub threshold: f64,
    pub cd_repeats: usize,
    pub cd_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            cd_repeats: 5,
            cd_seed: 0,
        }
    }
}

/// Output locations. `bundle` and `generation` default to subdirectories of `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub bundle: Option<PathBuf>,
    pub generation: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("disc-out"),
            bundle: None,
            generation: None,
        }
    }
}

impl OutputConfig {
    pub fn bundle_dir(&self) -> PathBuf {
        self.bundle.clone().unwrap_or_else(|| self.dir.join("bundle"))
    }

    pub fn generation_dir(&self) -> PathBuf {
        self.generation.clone().unwrap_or_else(|| self.dir.join("generation"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub data: DataConfig,
    pub classifier: TrainConfig,
    pub prior: PriorConfig,
    pub objective: ObjectiveSpec,
    pub policy: StagePolicy,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            master_seed: 0,
            data: DataConfig::default(),
            classifier: TrainConfig::default(),
            prior: PriorConfig::default(),
            objective: ObjectiveSpec::default(),
            policy: StagePolicy::default(),
            metrics: MetricsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Strict parse of a JSON or TOML document. Errors carry the dotted path of
/// the offending section, e.g. `config error: prior.inr: unknown field ...`.
pub fn parse(text: &str, format: Format) -> Result<RunConfig> {
    let value: serde_json::Value = match format {
        Format::Json => serde_json::from_str(text).map_err(|e| DiscError::Config(format!("invalid JSON: {e}")))?,
        Format::Toml => {
            let v: toml::Value = toml::from_str(text).map_err(|e| DiscError::Config(format!("invalid TOML: {e}")))?;
            serde_json::to_value(v)?
        }
    };
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            DiscError::Config(e.into_inner().to_string())
        } else {
            DiscError::Config(format!("{path}: {}", e.into_inner()))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Toml,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DiscError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, Format::from_path(path))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(DiscError::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.data;
        if d.query_class == d.target_class {
            return Err(DiscError::Config("data.query_class and data.target_class must differ".into()));
        }
        if d.source == DataSource::Toy && d.image_size < 16 {
            return Err(DiscError::Config(format!("data.image_size must be at least 16, got {}", d.image_size)));
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(DiscError::Config("metrics.threshold must lie in [0, 1]".into()));
        }
        self.classifier.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            prior: self.prior.clone(),
            objective: self.objective.clone(),
            policy: self.policy.clone(),
            master_seed: self.master_seed,
        }
    }

    pub fn target_rule(&self) -> TargetRule {
        TargetRule::flip(self.data.query_class, self.data.target_class)
    }

    /// The config with every optional default filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.prior = c.prior.resolved();
        c.output.bundle = Some(self.output.bundle_dir());
        c.output.generation = Some(self.output.generation_dir());
        c
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| DiscError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&self.resolved())?).map_err(|e| DiscError::io(&path, e))
    }
}
