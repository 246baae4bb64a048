//! Run configuration file: sections, command-line overrides and resolution
//! into library types.

use std::path::{Path, PathBuf};

use privsphere::adversary::AdversarySuiteConfig;
use privsphere::data::{gen_synthetic, load_csv, standardize, stratified_split, CsvSchema, Dataset, Standardizer, SyntheticSpec};
use privsphere::models::{DiscriminatorSpec, FunnelKind};
use privsphere::objectives::PrivacyObjectiveKind;
use privsphere::trainer::{config_hash, default_grid, ModelSpecs, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Environment variable that replaces `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "PRIVSPHERE_OUTPUT_DIR";

fn default_test_fraction() -> f64 {
    0.2
}
fn default_split_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}
fn default_funnel_dim() -> usize {
    20
}
fn default_funnel() -> FunnelKind {
    FunnelKind::ReluAffine
}
fn default_public_hidden() -> Vec<usize> {
    vec![500]
}
fn default_disc_hidden() -> Vec<usize> {
    vec![1024]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn empty_object() -> Value {
    Value::Object(Default::default())
}

/// A dataset CSV and its column layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub utility: String,
    pub privacy: String,
    #[serde(default)]
    pub features: Option<Vec<String>>,
}

/// Where samples come from and how they are split. Exactly one of `csv`
/// and `synthetic` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    /// Stratify on (utility, privacy) pairs rather than privacy alone.
    #[serde(default = "default_true")]
    pub joint_strata: bool,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_funnel_dim")]
    pub funnel_dim: usize,
    #[serde(default = "default_funnel")]
    pub funnel: FunnelKind,
    #[serde(default = "default_public_hidden")]
    pub public_hidden: Vec<usize>,
    #[serde(default = "default_disc_hidden")]
    pub discriminator_hidden: Vec<usize>,
    /// Output dimension of the linear projection baseline; `None` is one
    /// less than the number of utility classes.
    #[serde(default)]
    pub projection_dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            funnel_dim: default_funnel_dim(),
            funnel: default_funnel(),
            public_hidden: default_public_hidden(),
            discriminator_hidden: default_disc_hidden(),
            projection_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: PrivacyObjectiveKind,
    /// Privacy weight of single runs.
    #[serde(default)]
    pub lambda_p: Option<f64>,
    /// Privacy weights of a sweep; `None` uses the default grid of `kind`.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_output_dir(),
            seed: 0,
        }
    }
}

/// Whole configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    pub objective: ObjectiveSection,
    /// Trainer settings other than the objective, privacy weight and seed,
    /// which come from the `objective` and `output` sections.
    #[serde(default = "empty_object")]
    pub trainer: Value,
    #[serde(default)]
    pub adversaries: AdversarySuiteConfig,
    #[serde(default)]
    pub output: OutputSection,
}

fn config_error(key: impl Into<String>, msg: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

/// Key named by a deserialization failure: the path to the failing value,
/// extended by the field an unknown/missing-field message mentions.
fn failing_key(path: &str, msg: &str, prefix: &str) -> String {
    let mut key = String::from(prefix);
    if path != "." && !path.is_empty() {
        if !key.is_empty() {
            key.push('.');
        }
        key.push_str(path);
    }
    let field = ["unknown field `", "missing field `"]
        .iter()
        .find_map(|m| msg.strip_prefix(m))
        .and_then(|rest| rest.split('`').next());
    if let Some(field) = field {
        if !key.is_empty() {
            key.push('.');
        }
        key.push_str(field);
    }
    if key.is_empty() {
        "config".into()
    } else {
        key
    }
}

fn deserialize<T: DeserializeOwned>(value: Value, prefix: &str) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let msg = e.inner().to_string();
        config_error(failing_key(&e.path().to_string(), &msg, prefix), msg)
    })
}

/// Sets `key` (dot-separated) to `value`, creating objects on the way.
pub fn set_key(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "empty path segment"));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(key, format!("`{part}` is inside a non-object value")))?;
        node = obj.entry(part.to_string()).or_insert_with(empty_object);
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| config_error(key, "parent is not an object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as JSON and falls back to a plain
/// string.
pub fn parse_assignment(text: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| config_error(text, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Reads the file, applies overrides in order and the output-directory
/// environment variable, then checks the sections.
pub fn load(path: &Path, overrides: &[(String, Value)], output_flag: Option<&Path>) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error("config", format!("{}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| config_error("config", format!("{}: {e}", path.display())))?;
    if !doc.is_object() {
        return Err(config_error("config", "top level must be an object"));
    }
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        set_key(&mut doc, "output.dir", Value::String(dir))?;
    }
    for (key, value) in overrides {
        set_key(&mut doc, key, value.clone())?;
    }
    if let Some(dir) = output_flag {
        set_key(&mut doc, "output.dir", Value::String(dir.display().to_string()))?;
    }
    let cfg: RunConfig = deserialize(doc, "")?;
    cfg.check()?;
    Ok(cfg)
}

/// Training and evaluation split, standardized when configured, plus the
/// raw split for models that carry their own scaler.
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub raw_train: Dataset,
    pub raw_test: Dataset,
    pub standardizer: Option<Standardizer>,
}

impl RunConfig {
    fn check(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        match (&d.csv, &d.synthetic) {
            (Some(_), Some(_)) => return Err(config_error("dataset", "set only one of `csv` and `synthetic`")),
            (None, None) => return Err(config_error("dataset", "set one of `csv` and `synthetic`")),
            (None, Some(spec)) => spec.validate().map_err(|e| prefixed(e, "dataset."))?,
            _ => {}
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(config_error("dataset.test_fraction", "must lie strictly between 0 and 1"));
        }
        if let Some(grid) = &self.objective.grid {
            if grid.is_empty() {
                return Err(config_error("objective.grid", "must be non-empty"));
            }
        }
        if let Some(l) = self.objective.lambda_p {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(config_error("objective.lambda_p", "must be finite and non-negative"));
            }
        }
        if let Value::Object(map) = &self.trainer {
            for owned in ["objective", "lambda_p", "seed"] {
                if map.contains_key(owned) {
                    return Err(config_error(
                        format!("trainer.{owned}"),
                        "set in the `objective` or `output` section instead",
                    ));
                }
            }
        } else {
            return Err(config_error("trainer", "must be an object"));
        }
        self.train_config(0.0)?;
        self.adversaries.validate().map_err(CliError::from)?;
        Ok(())
    }

    /// Hash of the configuration without the output directory.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut copy = self.clone();
        copy.output.dir = PathBuf::new();
        Ok(config_hash(&copy)?)
    }

    pub fn seed(&self) -> u64 {
        self.output.seed
    }

    /// Trainer configuration for one privacy weight.
    pub fn train_config(&self, lambda_p: f64) -> Result<TrainConfig, CliError> {
        let mut doc = self.trainer.clone();
        set_key(&mut doc, "objective", serde_json::to_value(self.objective.kind).expect("serializable kind"))?;
        set_key(&mut doc, "lambda_p", Value::from(lambda_p))?;
        set_key(&mut doc, "seed", Value::from(self.output.seed))?;
        let cfg: TrainConfig = deserialize(doc, "trainer")?;
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    /// Privacy weight of single runs, required.
    pub fn lambda_p(&self) -> Result<f64, CliError> {
        self.objective
            .lambda_p
            .ok_or_else(|| config_error("objective.lambda_p", "required by this command"))
    }

    pub fn grid(&self) -> Vec<f64> {
        self.objective.grid.clone().unwrap_or_else(|| default_grid(self.objective.kind))
    }

    pub fn model_specs(&self, data: &Dataset) -> ModelSpecs {
        let m = &self.model;
        let mut specs = ModelSpecs::new(data.dim(), m.funnel_dim, m.funnel, &m.public_hidden, data.utility_classes.len());
        specs.discriminator = Some(DiscriminatorSpec::new(&m.discriminator_hidden, data.privacy_classes.len()));
        specs
    }

    /// Loads or generates the dataset, without splitting.
    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        match (&self.dataset.csv, &self.dataset.synthetic) {
            (Some(src), None) => {
                let schema = CsvSchema {
                    features: src.features.clone(),
                    utility: src.utility.clone(),
                    privacy: src.privacy.clone(),
                };
                Ok(load_csv(&src.path, &schema)?)
            }
            (None, Some(spec)) => Ok(gen_synthetic(spec)?),
            _ => Err(config_error("dataset", "set exactly one of `csv` and `synthetic`")),
        }
    }

    pub fn prepare(&self) -> Result<PreparedData, CliError> {
        let ds = self.load_dataset()?;
        let d = &self.dataset;
        let (raw_train, raw_test) = stratified_split(&ds, d.test_fraction, d.split_seed, d.joint_strata)?;
        let (train, test, standardizer) = if d.standardize {
            let (tr, te, s) = standardize(&raw_train, &raw_test)?;
            (tr, te, Some(s))
        } else {
            (raw_train.clone(), raw_test.clone(), None)
        };
        Ok(PreparedData {
            train,
            test,
            raw_train,
            raw_test,
            standardizer,
        })
    }
}

fn prefixed(e: privsphere::Error, prefix: &str) -> CliError {
    match e {
        privsphere::Error::Config { key, msg } => config_error(format!("{prefix}{key}"), msg),
        other => other.into(),
    }
}
