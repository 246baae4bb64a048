//! Subcommand bodies and the artifacts they write.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use privsphere::adversary::{fit_adversaries, privacy_score, AdversaryKind, AdversarySuiteConfig, Representation};
use privsphere::data::{write_csv, write_results, Dataset};
use privsphere::duca::{duca_projection, DucaConfig};
use privsphere::kernel::permutation_test;
use privsphere::trainer::{self, write_history, Checkpoint, CHECKPOINT_VERSION};
use privsphere::Tensor;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::CliError;

/// Output directory of one command, with the hash and seed every artifact
/// records.
struct Outputs {
    dir: PathBuf,
    config_hash: String,
    seed: u64,
}

impl Outputs {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(&cfg.output.dir)?;
        Ok(Self {
            dir: cfg.output.dir.clone(),
            config_hash: cfg.hash()?,
            seed: cfg.seed(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    /// Records the command in `manifest.json` (no timestamps) and appends a
    /// timestamped line to `run.log`.
    fn finish(&self, command: &str, artifacts: &[PathBuf]) -> Result<(), CliError> {
        let manifest = self.path("manifest.json");
        let mut entries: Map<String, Value> = fs::read_to_string(&manifest)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        let names: Vec<String> = artifacts
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
            .collect();
        entries.insert(
            command.to_string(),
            json!({ "config_hash": self.config_hash, "seed": self.seed, "artifacts": names }),
        );
        self.write_json("manifest.json", &entries)?;
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut log = fs::OpenOptions::new().create(true).append(true).open(self.path("run.log"))?;
        writeln!(log, "{stamp} {command} config_hash={} seed={}", self.config_hash, self.seed)?;
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let lambda_p = cfg.lambda_p()?;
    let tc = cfg.train_config(lambda_p)?;
    let data = cfg.prepare()?;
    let specs = cfg.model_specs(&data.train);
    let out = Outputs::new(cfg)?;
    let outcome = trainer::train(&data.train, &specs, &tc)?;
    let utility = privsphere::adversary::utility_score(&outcome.networks, &data.test.x, &data.test.utility)?;
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: out.config_hash.clone(),
        seed: out.seed,
        networks: Some(outcome.networks),
        duca: None,
        standardizer: data.standardizer,
    };
    let (ck_path, hist_path) = (out.path("checkpoint.json"), out.path("history.csv"));
    ck.save(&ck_path)?;
    write_history(&outcome.history, &hist_path)?;
    out.finish("train", &[ck_path.clone(), hist_path])?;
    println!(
        "trained {} at lambda_p {lambda_p}: {} epochs, {} decays, test utility accuracy {utility:.4}",
        tc.objective, outcome.epochs_run, outcome.decays
    );
    println!("checkpoint {}", ck_path.display());
    Ok(())
}

pub fn sweep(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let base = cfg.train_config(0.0)?;
    let grid = cfg.grid();
    let data = cfg.prepare()?;
    let specs = cfg.model_specs(&data.train);
    let out = Outputs::new(cfg)?;
    let points = trainer::sweep(&data.train, &data.test, &specs, &base, &grid, &cfg.adversaries, jobs)?;
    let path = out.path("results.csv");
    write_results(&points, &path)?;
    out.finish("sweep", &[path.clone()])?;
    for p in &points {
        match &p.error {
            None => println!(
                "lambda_p {:e}: utility {:.4} privacy {:.4}",
                p.lambda_p, p.utility_accuracy, p.privacy_accuracy
            ),
            Some(e) => println!("lambda_p {:e}: failed: {e}", p.lambda_p),
        }
    }
    println!("results {}", path.display());
    if points.iter().all(|p| p.error.is_some()) {
        return Err(privsphere::Error::Numeric("every sweep point failed".into()).into());
    }
    Ok(())
}

/// Utility accuracy of the checkpoint on the test split: the public sphere
/// for networks, a logistic classifier fitted on the training
/// representation for a projection.
fn checkpoint_utility(
    ck: &Checkpoint,
    ztr: &Representation,
    zte: &Representation,
    train: &Dataset,
    test: &Dataset,
    adversaries: &AdversarySuiteConfig,
) -> Result<f64, CliError> {
    if let Some(nets) = &ck.networks {
        let pred = nets.public.predict(&nets.store, zte.features());
        return Ok(privsphere::adversary::accuracy(&pred, &test.utility));
    }
    let logistic = AdversarySuiteConfig {
        members: vec![AdversaryKind::Logistic],
        ..adversaries.clone()
    };
    let suite = fit_adversaries(ztr, &train.utility, train.utility_classes.len(), &logistic)?;
    Ok(privacy_score(&suite, zte, &test.utility)?.privacy_score)
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = cfg.prepare()?;
    let out = Outputs::new(cfg)?;
    let ztr = ck.represent(&data.raw_train.x)?;
    let zte = ck.represent(&data.raw_test.x)?;
    let utility = checkpoint_utility(&ck, &ztr, &zte, &data.raw_train, &data.raw_test, &cfg.adversaries)?;
    let suite = fit_adversaries(&ztr, &data.raw_train.privacy, data.raw_train.privacy_classes.len(), &cfg.adversaries)?;
    let report = privacy_score(&suite, &zte, &data.raw_test.privacy)?;
    let path = out.path("eval.json");
    out.write_json(
        "eval.json",
        &json!({
            "config_hash": out.config_hash,
            "seed": out.seed,
            "checkpoint": checkpoint.display().to_string(),
            "checkpoint_config_hash": ck.config_hash,
            "utility_accuracy": utility,
            "privacy_accuracy": report.privacy_score,
            "adversaries": report.accuracies().into_iter().map(|(k, v)| json!({"name": k, "accuracy": v})).collect::<Vec<_>>(),
        }),
    )?;
    out.finish("eval", &[path])?;
    println!("utility accuracy {utility:.4}");
    println!("privacy accuracy {:.4}", report.privacy_score);
    for (name, acc) in report.accuracies() {
        println!("  {name} {acc:.4}");
    }
    Ok(())
}

pub fn permtest(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    permutations: usize,
    positive_class: Option<usize>,
) -> Result<(), CliError> {
    let data = cfg.prepare()?;
    let out = Outputs::new(cfg)?;
    let z: Tensor = match checkpoint {
        Some(path) => Checkpoint::load(path)?.represent(&data.raw_test.x)?.features().clone(),
        None => data.test.x.clone(),
    };
    let classes = data.test.privacy_classes.len();
    let labels: Vec<usize> = match positive_class {
        Some(c) if c >= classes => {
            return Err(CliError::Config {
                key: "positive_class".into(),
                msg: format!("class {c} out of range for {classes} privacy classes"),
            })
        }
        Some(c) => data.test.privacy.iter().map(|&l| usize::from(l == c)).collect(),
        None if classes == 2 => data.test.privacy.clone(),
        None => {
            return Err(CliError::Config {
                key: "positive_class".into(),
                msg: format!("{classes} privacy classes; choose one to test against the rest"),
            })
        }
    };
    let kernel = cfg.train_config(0.0)?.kernel;
    let result = permutation_test(&z, &labels, &kernel, permutations, out.seed)?;
    let path = out.path("permtest.json");
    out.write_json(
        "permtest.json",
        &json!({
            "config_hash": out.config_hash,
            "seed": out.seed,
            "permutations": permutations,
            "positive_class": positive_class,
            "observed": result.observed,
            "p_value": result.p_value,
        }),
    )?;
    out.finish("permtest", &[path])?;
    println!("observed discrepancy {:.6e}", result.observed);
    println!("p-value {}", result.p_value);
    Ok(())
}

pub fn duca(cfg: &RunConfig) -> Result<(), CliError> {
    let lambda_p = cfg.lambda_p()?;
    let data = cfg.prepare()?;
    let dim = cfg
        .model
        .projection_dim
        .unwrap_or(data.train.utility_classes.len().saturating_sub(1).max(1));
    let out = Outputs::new(cfg)?;
    let proj = duca_projection(&data.train.x, &data.train.y(), &data.train.p(), &DucaConfig::new(dim, lambda_p))?;
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: out.config_hash.clone(),
        seed: out.seed,
        networks: None,
        duca: Some(proj),
        standardizer: data.standardizer,
    };
    let path = out.path("checkpoint.json");
    ck.save(&path)?;
    out.finish("duca", &[path.clone()])?;
    println!("projection of dimension {dim} at lambda_p {lambda_p}");
    println!("checkpoint {}", path.display());
    Ok(())
}

pub fn gen_synth(cfg: &RunConfig, dest: Option<&Path>) -> Result<(), CliError> {
    if cfg.dataset.synthetic.is_none() {
        return Err(CliError::Config {
            key: "dataset.synthetic".into(),
            msg: "gen-synth needs a synthetic dataset section".into(),
        });
    }
    let ds = cfg.load_dataset()?;
    let out = Outputs::new(cfg)?;
    let path = dest.map_or_else(|| out.path("synthetic.csv"), Path::to_path_buf);
    write_csv(&ds, &path)?;
    out.finish("gen-synth", &[path.clone()])?;
    println!("wrote {} samples to {}", ds.len(), path.display());
    Ok(())
}
