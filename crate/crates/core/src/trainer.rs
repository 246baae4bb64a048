//! Joint minibatch training of the private sphere, the public sphere and
//! the privacy discriminator, and the privacy-weight sweep.
//!
//! Each batch runs three sequential Adam updates, each on a freshly built
//! graph: the private sphere on `L_U + lambda_p L_P` (plus the orthonormality
//! penalty for an orthonormal funnel), the public sphere on `L_U` with the
//! representation held constant, and the discriminator on its own loss with
//! the representation held constant.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{fit_adversaries, privacy_score, AdversaryReport, AdversarySuiteConfig, Representation};
use crate::autodiff::{Gradients, Graph, ParamId};
use crate::data::{Dataset, Standardizer, TradeoffPoint};
use crate::duca::DucaProjection;
use crate::error::{contract, Error, Result};
use crate::kernel::{KernelSpec, DEFAULT_RIDGE};
use crate::models::{DiscriminatorSpec, FunnelKind, Networks, PrivateSphereSpec, PublicSphereSpec};
use crate::objectives::{
    disc_loss_lsdn, disc_loss_wdn, orthonormality_penalty, privacy_loss_kdi, privacy_loss_lsdn, privacy_loss_mmd,
    privacy_loss_wdn, private_sphere_loss, utility_loss, PrivacyObjectiveKind, DEFAULT_GRADIENT_PENALTY,
};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Epoch cap for the convergence-driven schedule.
pub const DEFAULT_MAX_EPOCHS: usize = 500;
/// Fixed-schedule length for discriminator objectives.
pub const DEFAULT_DISCRIMINATOR_EPOCHS: usize = 250;

fn default_lambda_r() -> f64 {
    DEFAULT_GRADIENT_PENALTY
}
fn default_rho() -> f64 {
    DEFAULT_RIDGE
}
fn default_disc_step() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    500
}
fn default_decay() -> f64 {
    0.1
}
fn default_tolerance() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    10
}
fn default_max_decays() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: PrivacyObjectiveKind,
    #[serde(default)]
    pub lambda_p: f64,
    /// Gradient-penalty weight of the Wasserstein discriminator.
    #[serde(default = "default_lambda_r")]
    pub lambda_r: f64,
    /// Ridge of the kernel discriminant information.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Rate of both spheres; `None` picks `1e-3` for kernel objectives and
    /// `1e-4` for discriminator objectives.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_disc_step")]
    pub disc_step_size: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// `None` picks 250 for discriminator objectives and a cap of 500 for
    /// kernel objectives.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    /// Relative improvement of the epoch objective that counts as progress.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Decays allowed before a stalled kernel-objective run stops.
    #[serde(default = "default_max_decays")]
    pub max_decays: usize,
    /// Decay epochs of discriminator objectives; `None` is 60% and 80% of
    /// the run (150 and 200 of 250).
    #[serde(default)]
    pub milestones: Option<Vec<usize>>,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(objective: PrivacyObjectiveKind, lambda_p: f64) -> Self {
        Self {
            objective,
            lambda_p,
            lambda_r: default_lambda_r(),
            rho: default_rho(),
            step_size: None,
            disc_step_size: default_disc_step(),
            batch_size: default_batch(),
            epochs: None,
            decay_factor: default_decay(),
            tolerance: default_tolerance(),
            patience: default_patience(),
            max_decays: default_max_decays(),
            milestones: None,
            kernel: KernelSpec::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn sphere_step_size(&self) -> f64 {
        self.step_size.unwrap_or(if self.objective.requires_discriminator() { 1e-4 } else { 1e-3 })
    }

    pub fn epoch_limit(&self) -> usize {
        self.epochs.unwrap_or(if self.objective.requires_discriminator() {
            DEFAULT_DISCRIMINATOR_EPOCHS
        } else {
            DEFAULT_MAX_EPOCHS
        })
    }

    pub fn decay_milestones(&self) -> Vec<usize> {
        match &self.milestones {
            Some(m) => m.clone(),
            None => {
                let e = self.epoch_limit();
                vec![(e * 3) / 5, (e * 4) / 5]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Error::Config {
            key: format!("trainer.{key}"),
            msg,
        };
        if !(self.lambda_p >= 0.0) || !self.lambda_p.is_finite() {
            return Err(bad("lambda_p", format!("must be finite and non-negative, got {}", self.lambda_p)));
        }
        if !(self.lambda_r >= 0.0) {
            return Err(bad("lambda_r", format!("must be non-negative, got {}", self.lambda_r)));
        }
        if !(self.rho > 0.0) {
            return Err(bad("rho", format!("must be positive, got {}", self.rho)));
        }
        let alpha = self.sphere_step_size();
        if !(alpha > 0.0) {
            return Err(bad("step_size", format!("must be positive, got {alpha}")));
        }
        if !(self.disc_step_size > 0.0) {
            return Err(bad("disc_step_size", format!("must be positive, got {}", self.disc_step_size)));
        }
        if self.objective.requires_discriminator() && self.disc_step_size < alpha {
            return Err(bad(
                "disc_step_size",
                format!("discriminator rate {} is below the sphere rate {alpha}", self.disc_step_size),
            ));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive".into()));
        }
        if self.epoch_limit() == 0 {
            return Err(bad("epochs", "must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(bad("decay_factor", format!("must lie in (0, 1], got {}", self.decay_factor)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(bad("tolerance", format!("must be non-negative, got {}", self.tolerance)));
        }
        if self.patience == 0 {
            return Err(bad("patience", "must be positive".into()));
        }
        self.kernel.validate()
    }
}

/// Sphere and discriminator shapes of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpecs {
    pub private: PrivateSphereSpec,
    pub public: PublicSphereSpec,
    /// Used by discriminator objectives; its output width is always set to
    /// the number of privacy classes. `None` is one hidden layer of 1024.
    #[serde(default)]
    pub discriminator: Option<DiscriminatorSpec>,
}

impl ModelSpecs {
    pub fn new(input_dim: usize, funnel_dim: usize, kind: FunnelKind, public_hidden: &[usize], classes: usize) -> Self {
        Self {
            private: PrivateSphereSpec {
                input_dim,
                funnel_dim,
                kind,
            },
            public: PublicSphereSpec::new(public_hidden, classes),
            discriminator: None,
        }
    }

    fn discriminator_for(&self, privacy_classes: usize) -> DiscriminatorSpec {
        let base = self.discriminator.clone().unwrap_or_else(|| DiscriminatorSpec::new(&[1024], privacy_classes));
        DiscriminatorSpec {
            output_dim: privacy_classes,
            ..base
        }
    }
}

/// Losses of one batch, taken before the updates of that batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub batch: usize,
    pub utility: f64,
    pub privacy: f64,
    #[serde(default)]
    pub discriminator: Option<f64>,
    #[serde(default)]
    pub orthonormality: Option<f64>,
}

/// Writes `epoch,batch,L_U,L_P,L_Disc,L_O`; absent terms are empty fields.
pub fn write_history(history: &[HistoryRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,batch,L_U,L_P,L_Disc,L_O")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for h in history {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{},{}",
            h.epoch,
            h.batch,
            h.utility,
            h.privacy,
            opt(h.discriminator),
            opt(h.orthonormality)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub networks: Networks,
    pub history: Vec<HistoryRecord>,
    pub epochs_run: usize,
    pub decays: usize,
    /// Final sphere rate.
    pub step_size: f64,
}

struct Optimizers {
    private: AdamState,
    public: AdamState,
    disc: AdamState,
}

fn restrict(grads: Gradients, keep: &BTreeSet<ParamId>) -> Gradients {
    grads.into_iter().filter(|(id, _)| keep.contains(id)).collect()
}

fn finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite value of `{term}`: {v}")))
    }
}

/// Trains fresh networks on `data` (features as given; standardize first
/// when needed).
pub fn train(data: &Dataset, specs: &ModelSpecs, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let n = data.len();
    if cfg.batch_size > n {
        return Err(Error::Config {
            key: "trainer.batch_size".into(),
            msg: format!("batch size {} exceeds the {n} training samples", cfg.batch_size),
        });
    }
    if specs.private.input_dim != data.dim() {
        return Err(Error::Config {
            key: "model.private.input_dim".into(),
            msg: format!("dataset has {} features, model expects {}", data.dim(), specs.private.input_dim),
        });
    }
    if specs.public.classes != data.utility_classes.len() {
        return Err(Error::Config {
            key: "model.public.classes".into(),
            msg: format!(
                "dataset has {} utility classes, model expects {}",
                data.utility_classes.len(),
                specs.public.classes
            ),
        });
    }
    let kind = cfg.objective;
    let l = data.privacy_classes.len();
    let disc_spec = kind.requires_discriminator().then(|| specs.discriminator_for(l));
    let mut nets = Networks::build(&specs.private, &specs.public, disc_spec.as_ref(), cfg.seed)?;
    let kernel = cfg.kernel.prepare(specs.private.funnel_dim)?;

    let private_ids: BTreeSet<ParamId> = nets.private.params().into_iter().collect();
    let public_ids: BTreeSet<ParamId> = nets.public.params().into_iter().collect();
    let disc_ids: BTreeSet<ParamId> = nets.discriminator.iter().flat_map(|d| d.params()).collect();
    let ortho = specs.private.kind == FunnelKind::OrthonormalReluAffine;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Optimizers {
        private: AdamState::new(cfg.adam),
        public: AdamState::new(cfg.adam),
        disc: AdamState::new(cfg.adam),
    };
    let y_all = data.y();
    let p_all = data.p();
    let batches = n / cfg.batch_size;
    let mut rate = cfg.sphere_step_size();
    let mut disc_rate = cfg.disc_step_size;
    let milestones = cfg.decay_milestones();
    let epochs = cfg.epoch_limit();
    let mut history = Vec::with_capacity(epochs * batches);
    let mut previous = f64::INFINITY;
    let mut stalled = 0;
    let mut decays = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..epochs {
        if kind.requires_discriminator() && milestones.contains(&epoch) {
            rate *= cfg.decay_factor;
            disc_rate *= cfg.decay_factor;
            decays += 1;
        }
        order.shuffle(&mut rng);
        let mut objective_sum = 0.0;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let xb = data.x.select_rows(idx);
            let yb = y_all.select_rows(idx);
            let pb = p_all.select_rows(idx);

            // Private sphere.
            let mut g = Graph::new();
            let x = g.constant(xb.clone())?;
            let (z, w) = nets.private.forward(&mut g, &nets.store, x)?;
            let logits = nets.public.forward(&mut g, &nets.store, z, Some(&mut rng))?;
            let lu = utility_loss(&mut g, logits, &yb)?;
            let lp = match kind {
                PrivacyObjectiveKind::Mmd => privacy_loss_mmd(&mut g, z, &pb, &kernel)?,
                PrivacyObjectiveKind::Kdi => privacy_loss_kdi(&mut g, z, &pb, &kernel, cfg.rho)?,
                PrivacyObjectiveKind::Wdn => {
                    privacy_loss_wdn(&mut g, z, &pb, nets.discriminator.as_ref().expect("discriminator"), &nets.store)?
                }
                PrivacyObjectiveKind::Lsdn => {
                    privacy_loss_lsdn(&mut g, z, &pb, nets.discriminator.as_ref().expect("discriminator"), &nets.store)?
                }
            };
            let lo = if ortho { Some(orthonormality_penalty(&mut g, w)?) } else { None };
            let total = private_sphere_loss(&mut g, lu, lp, lo, cfg.lambda_p)?;
            let utility = finite("utility loss", g.scalar(lu))?;
            let privacy = finite("privacy loss", g.scalar(lp))?;
            let orthonormality = lo.map(|o| g.scalar(o));
            finite("private sphere loss", g.scalar(total))?;
            objective_sum += utility + cfg.lambda_p * privacy;
            let grads = restrict(g.backward(total, 1.0)?, &private_ids);
            opt.private.step(&mut nets.store, &grads, rate, "private sphere loss")?;

            // Public sphere on the updated representation.
            let zb = nets.private.apply(&nets.store, &xb);
            let mut g = Graph::new();
            let z = g.constant(zb.clone())?;
            let logits = nets.public.forward(&mut g, &nets.store, z, Some(&mut rng))?;
            let lu2 = utility_loss(&mut g, logits, &yb)?;
            finite("utility loss", g.scalar(lu2))?;
            let grads = restrict(g.backward(lu2, 1.0)?, &public_ids);
            opt.public.step(&mut nets.store, &grads, rate, "utility loss")?;

            // Discriminator.
            let discriminator = match &nets.discriminator {
                Some(disc) => {
                    let mut g = Graph::new();
                    let z = g.constant(zb)?;
                    let ld = match kind {
                        PrivacyObjectiveKind::Wdn => disc_loss_wdn(&mut g, z, &pb, disc, &nets.store, cfg.lambda_r)?.total,
                        _ => disc_loss_lsdn(&mut g, z, &pb, disc, &nets.store)?,
                    };
                    let v = finite("discriminator loss", g.scalar(ld))?;
                    let grads = restrict(g.backward(ld, 1.0)?, &disc_ids);
                    opt.disc.step(&mut nets.store, &grads, disc_rate, "discriminator loss")?;
                    Some(v)
                }
                None => None,
            };
            history.push(HistoryRecord {
                epoch,
                batch: b,
                utility,
                privacy,
                discriminator,
                orthonormality,
            });
        }
        epochs_run = epoch + 1;

        if !kind.requires_discriminator() {
            let mean = objective_sum / batches as f64;
            let improved = previous.is_infinite() || (previous - mean) > cfg.tolerance * previous.abs().max(f64::MIN_POSITIVE);
            if improved {
                stalled = 0;
            } else {
                stalled += 1;
            }
            previous = mean;
            if stalled >= cfg.patience {
                if decays >= cfg.max_decays {
                    break;
                }
                rate *= cfg.decay_factor;
                decays += 1;
                stalled = 0;
            }
        }
    }
    Ok(TrainOutcome {
        networks: nets,
        history,
        epochs_run,
        decays,
        step_size: rate,
    })
}

/// SHA-256 hex digest of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Trained parameters with the hash of the configuration that made them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub networks: Option<Networks>,
    #[serde(default)]
    pub duca: Option<DucaProjection>,
    /// Input standardization applied before the model.
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.networks.is_none() == ck.duca.is_none() {
            return Err(Error::Schema("checkpoint must hold exactly one model".into()));
        }
        Ok(ck)
    }

    /// Released representation of raw `x`.
    pub fn represent(&self, x: &Tensor) -> Result<Representation> {
        let x = match &self.standardizer {
            Some(s) => s.apply(x),
            None => x.clone(),
        };
        match (&self.networks, &self.duca) {
            (Some(n), _) => Representation::from_networks(n, &x),
            (None, Some(d)) => Representation::from_projection(d, &x),
            (None, None) => Err(contract("checkpoint holds no model")),
        }
    }
}

/// Default privacy-weight grid: powers of two from the lower to the upper
/// exponent in steps of two.
pub fn default_grid(kind: PrivacyObjectiveKind) -> Vec<f64> {
    let (lo, hi) = match kind {
        PrivacyObjectiveKind::Mmd | PrivacyObjectiveKind::Wdn => (-10, 10),
        PrivacyObjectiveKind::Kdi => (-10, 0),
        PrivacyObjectiveKind::Lsdn => (-4, 12),
    };
    (lo..=hi).step_by(2).map(|e| 2f64.powi(e)).collect()
}

/// Utility accuracy of trained networks and the adversary report on the
/// privacy labels, both on `test`.
pub fn evaluate(nets: &Networks, train: &Dataset, test: &Dataset, adversaries: &AdversarySuiteConfig) -> Result<(f64, AdversaryReport)> {
    let utility = crate::adversary::utility_score(nets, &test.x, &test.utility)?;
    let ztr = Representation::from_networks(nets, &train.x)?;
    let zte = Representation::from_networks(nets, &test.x)?;
    let suite = fit_adversaries(&ztr, &train.privacy, train.privacy_classes.len(), adversaries)?;
    let mut report = privacy_score(&suite, &zte, &test.privacy)?;
    report.utility_score = Some(utility);
    Ok((utility, report))
}

/// Per-point seeds drawn from a stream seeded by `base`.
pub fn point_seeds(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.random()).collect()
}

/// One train and evaluation per privacy weight, in grid order. A failed
/// point carries its error and NaN accuracies; the sweep continues.
pub fn sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    specs: &ModelSpecs,
    base: &TrainConfig,
    grid: &[f64],
    adversaries: &AdversarySuiteConfig,
    jobs: usize,
) -> Result<Vec<TradeoffPoint>> {
    if grid.is_empty() {
        return Err(Error::Config {
            key: "objective.grid".into(),
            msg: "grid must be non-empty".into(),
        });
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config {
            key: "objective.grid".into(),
            msg: "grid must be strictly ascending".into(),
        });
    }
    base.validate()?;
    adversaries.validate()?;
    let seeds = point_seeds(base.seed, grid.len());
    let run = |(&lambda_p, &seed): (&f64, &u64)| -> TradeoffPoint {
        let cfg = TrainConfig {
            lambda_p,
            seed,
            ..base.clone()
        };
        let adv = AdversarySuiteConfig {
            seed,
            ..adversaries.clone()
        };
        let result = train(train_set, specs, &cfg).and_then(|out| evaluate(&out.networks, train_set, test_set, &adv));
        match result {
            Ok((utility, report)) => TradeoffPoint {
                lambda_p,
                utility_accuracy: utility,
                privacy_accuracy: report.privacy_score,
                adversaries: report.accuracies(),
                seed,
                error: None,
            },
            Err(e) => {
                log::warn!("sweep point lambda_p={lambda_p} failed: {e}");
                TradeoffPoint {
                    lambda_p,
                    utility_accuracy: f64::NAN,
                    privacy_accuracy: f64::NAN,
                    adversaries: adversaries.members.iter().map(|m| (m.name().to_string(), f64::NAN)).collect(),
                    seed,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| contract(format!("thread pool: {e}")))?;
    Ok(pool.install(|| grid.par_iter().zip(seeds.par_iter()).map(run).collect()))
}
