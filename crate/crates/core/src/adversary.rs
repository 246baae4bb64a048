//! Post-hoc attackers trained on released representations.
//!
//! Every member sees only a [`Representation`], never raw inputs. Each
//! member picks its hyperparameters by stratified k-fold cross-validation,
//! is refit on the full training split and scored on held-out data. The
//! privacy score is the best member accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Mlp, ParamStore};
use crate::data::Standardizer;
use crate::duca::DucaProjection;
use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::models::Networks;
use crate::objectives::utility_loss;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{one_hot, Tensor};

/// Released features: the only input adversaries accept.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation(Tensor);

impl Representation {
    /// Output of a trained private sphere on `x`.
    pub fn from_networks(nets: &Networks, x: &Tensor) -> Result<Self> {
        Ok(Self(nets.represent(x)?))
    }

    /// Output of a fitted linear projection on `x`.
    pub fn from_projection(proj: &DucaProjection, x: &Tensor) -> Result<Self> {
        Ok(Self(proj.project(x)?))
    }

    /// Wraps features that were released by some other means.
    pub fn released(z: Tensor) -> Self {
        Self(z)
    }

    pub fn features(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Attack families in the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    /// Multinomial logistic regression.
    Logistic,
    /// One-vs-rest Gaussian-kernel ridge classifier.
    KernelRidge,
    /// Majority vote among nearest neighbours.
    Knn,
    /// One-hidden-layer ReLU network.
    Mlp,
}

impl AdversaryKind {
    pub const ALL: [AdversaryKind; 4] = [Self::Logistic, Self::KernelRidge, Self::Knn, Self::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Logistic => "logistic",
            Self::KernelRidge => "kernel_ridge",
            Self::Knn => "knn",
            Self::Mlp => "mlp",
        }
    }
}

fn default_members() -> Vec<AdversaryKind> {
    AdversaryKind::ALL.to_vec()
}
fn default_folds() -> usize {
    5
}
fn decade_grid() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2]
}
fn default_bandwidth_multipliers() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}
fn default_k() -> Vec<usize> {
    vec![1, 5, 15]
}
fn default_kernel_cap() -> usize {
    600
}
fn default_logistic_iterations() -> usize {
    300
}

/// Settings of the neural adversary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpAdversaryConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
}

impl Default for MlpAdversaryConfig {
    fn default() -> Self {
        Self {
            hidden: vec![1024],
            epochs: 250,
            step_size: 1e-3,
            batch_size: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySuiteConfig {
    #[serde(default = "default_members")]
    pub members: Vec<AdversaryKind>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// L2 penalties tried for the logistic member.
    #[serde(default = "decade_grid")]
    pub logistic_l2: Vec<f64>,
    #[serde(default = "default_logistic_iterations")]
    pub logistic_iterations: usize,
    /// Ridges tried for the kernel member.
    #[serde(default = "decade_grid")]
    pub kernel_ridges: Vec<f64>,
    /// Multipliers of the median pairwise distance tried as bandwidths.
    #[serde(default = "default_bandwidth_multipliers")]
    pub bandwidth_multipliers: Vec<f64>,
    /// Largest training set the kernel member uses; larger sets are
    /// subsampled with stratification.
    #[serde(default = "default_kernel_cap")]
    pub kernel_max_train: usize,
    #[serde(default = "default_k")]
    pub knn_k: Vec<usize>,
    #[serde(default)]
    pub mlp: MlpAdversaryConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AdversarySuiteConfig {
    fn default() -> Self {
        Self {
            members: default_members(),
            folds: default_folds(),
            logistic_l2: decade_grid(),
            logistic_iterations: default_logistic_iterations(),
            kernel_ridges: decade_grid(),
            bandwidth_multipliers: default_bandwidth_multipliers(),
            kernel_max_train: default_kernel_cap(),
            knn_k: default_k(),
            mlp: MlpAdversaryConfig::default(),
            seed: 0,
        }
    }
}

impl AdversarySuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Error::Config {
            key: format!("adversaries.{key}"),
            msg: msg.to_string(),
        };
        if self.members.is_empty() {
            return Err(bad("members", "at least one member required"));
        }
        if self.folds < 2 {
            return Err(bad("folds", "at least two folds required"));
        }
        if self.logistic_l2.is_empty() || self.kernel_ridges.is_empty() || self.bandwidth_multipliers.is_empty() || self.knn_k.is_empty() {
            return Err(bad("grids", "hyperparameter grids must be non-empty"));
        }
        if self.knn_k.contains(&0) {
            return Err(bad("knn_k", "k must be positive"));
        }
        if self.mlp.hidden.contains(&0) || self.mlp.batch_size == 0 || !(self.mlp.step_size > 0.0) {
            return Err(bad("mlp", "invalid network settings"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Model {
    Logistic { w: Tensor, b: Tensor },
    KernelRidge { support: Tensor, alpha: Tensor, bandwidth: f64 },
    Knn { support: Tensor, labels: Vec<usize>, k: usize },
    Mlp { net: Mlp, store: ParamStore },
}

/// A fitted suite member.
#[derive(Clone, Debug)]
pub struct FittedMember {
    pub kind: AdversaryKind,
    pub hyperparams: serde_json::Value,
    pub cv_accuracy: Option<f64>,
    model: Model,
}

/// Members fitted on standardized training representations.
#[derive(Clone, Debug)]
pub struct FittedSuite {
    pub members: Vec<FittedMember>,
    pub classes: usize,
    scaler: Standardizer,
}

/// Accuracy of one member on held-out data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub member: String,
    pub accuracy: f64,
    pub hyperparams: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub members: Vec<MemberReport>,
    /// Maximum member accuracy.
    pub privacy_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_score: Option<f64>,
}

impl AdversaryReport {
    /// Report from per-member accuracies; the score is their maximum.
    pub fn from_members(members: Vec<MemberReport>) -> Self {
        let privacy_score = members.iter().map(|m| m.accuracy).fold(f64::NEG_INFINITY, f64::max);
        Self {
            members,
            privacy_score,
            utility_score: None,
        }
    }

    pub fn accuracies(&self) -> Vec<(String, f64)> {
        self.members.iter().map(|m| (m.member.clone(), m.accuracy)).collect()
    }
}

/// Fraction of correct predictions.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Accuracy of always predicting the most frequent label.
pub fn chance_level(labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts.into_iter().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

/// Top-1 accuracy of the public sphere on raw inputs.
pub fn utility_score(nets: &Networks, x: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(accuracy(&nets.predict(x)?, labels))
}

/// Stratified fold assignment: sample `i` goes to fold `out[i]`.
fn fold_assignment(labels: &[usize], folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut out = vec![0; labels.len()];
    let mut offset = 0;
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = (k + offset) % folds;
        }
        offset += idx.len();
    }
    out
}

fn stratified_subsample(labels: &[usize], cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if labels.len() <= cap {
        return (0..labels.len()).collect();
    }
    let folds = labels.len().div_ceil(cap);
    let assign = fold_assignment(labels, folds, rng);
    let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| assign[i] == 0).collect();
    idx.truncate(cap);
    idx
}

struct Split<'a> {
    x: &'a Tensor,
    y: &'a [usize],
}

fn fit_logistic(train: &Split, classes: usize, l2: f64, iterations: usize) -> Model {
    let (n, q) = train.x.dims();
    let y = one_hot(train.y, classes);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(q, classes));
    let b = store.add("b", Tensor::zeros(1, classes));
    let mut adam = AdamState::new(AdamConfig::default());
    for _ in 0..iterations {
        let logits = {
            let mut l = train.x.matmul(store.tensor(w));
            let bias = store.tensor(b).data().to_vec();
            for (k, v) in l.data_mut().iter_mut().enumerate() {
                *v += bias[k % classes];
            }
            l
        };
        let probs = crate::models::softmax_rows(&logits);
        let resid = probs.sub(&y).scale(1.0 / n as f64);
        let gw = linalg::matmul(train.x, true, &resid, false).add(&store.tensor(w).scale(l2));
        let gb = resid.column_sums();
        let mut grads = crate::autodiff::Gradients::new();
        grads.insert(w, gw);
        grads.insert(b, gb);
        adam.step(&mut store, &grads, 0.05, "logistic adversary").expect("finite logistic gradients");
    }
    Model::Logistic {
        w: store.tensor(w).clone(),
        b: store.tensor(b).clone(),
    }
}

fn gaussian(a: &Tensor, b: &Tensor, bandwidth: f64) -> Tensor {
    let c = 1.0 / (2.0 * bandwidth * bandwidth);
    crate::autodiff::sq_dist(a, b).map(|d| (-c * d).exp())
}

fn median_distance(x: &Tensor) -> f64 {
    let d = crate::autodiff::sq_dist(x, x);
    let n = x.rows();
    let mut v: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d.get(i, j).sqrt()).collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = v[v.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn fit_kernel_ridge(train: &Split, classes: usize, ridge: f64, bandwidth: f64) -> Result<Model> {
    let targets = one_hot(train.y, classes).map(|v| 2.0 * v - 1.0);
    let mut k = gaussian(train.x, train.x, bandwidth);
    for i in 0..k.rows() {
        k.set(i, i, k.get(i, i) + ridge);
    }
    let alpha = linalg::spd_solve(&k, &targets)?;
    Ok(Model::KernelRidge {
        support: train.x.clone(),
        alpha,
        bandwidth,
    })
}

fn fit_mlp(train: &Split, classes: usize, cfg: &MlpAdversaryConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut sizes = vec![train.x.cols()];
    sizes.extend(&cfg.hidden);
    sizes.push(classes);
    let net = Mlp::init(&mut store, "adversary", &sizes, Activation::Identity, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig::default());
    let n = train.x.rows();
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = train.x.select_rows(chunk);
            let yb = one_hot(&chunk.iter().map(|&i| train.y[i]).collect::<Vec<_>>(), classes);
            let mut g = Graph::new();
            let x = g.constant(xb)?;
            let out = net.forward(&mut g, &store, x, false)?.output;
            let loss = utility_loss(&mut g, out, &yb)?;
            let grads = g.backward(loss, 1.0)?;
            adam.step(&mut store, &grads, cfg.step_size, "mlp adversary")?;
        }
    }
    Ok(Model::Mlp { net, store })
}

fn predict(model: &Model, x: &Tensor) -> Vec<usize> {
    match model {
        Model::Logistic { w, b } => {
            let mut l = x.matmul(w);
            let c = l.cols();
            for (k, v) in l.data_mut().iter_mut().enumerate() {
                *v += b.data()[k % c];
            }
            l.argmax_rows()
        }
        Model::KernelRidge { support, alpha, bandwidth } => gaussian(x, support, *bandwidth).matmul(alpha).argmax_rows(),
        Model::Knn { support, labels, k } => {
            let d = crate::autodiff::sq_dist(x, support);
            let classes = labels.iter().max().map_or(0, |&m| m + 1);
            (0..x.rows())
                .map(|i| {
                    let row = d.row(i);
                    let mut idx: Vec<usize> = (0..row.len()).collect();
                    let kk = (*k).min(idx.len());
                    idx.select_nth_unstable_by(kk - 1, |&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
                    let mut votes = vec![0usize; classes];
                    for &j in &idx[..kk] {
                        votes[labels[j]] += 1;
                    }
                    let best = votes.iter().max().copied().unwrap_or(0);
                    votes.iter().position(|&v| v == best).unwrap_or(0)
                })
                .collect()
        }
        Model::Mlp { net, store } => net.apply(store, x).argmax_rows(),
    }
}

/// Candidate hyperparameters for a member, in grid order.
fn candidates(kind: AdversaryKind, cfg: &AdversarySuiteConfig, median: f64) -> Vec<serde_json::Value> {
    use serde_json::json;
    match kind {
        AdversaryKind::Logistic => cfg.logistic_l2.iter().map(|l| json!({ "l2": l })).collect(),
        AdversaryKind::KernelRidge => cfg
            .bandwidth_multipliers
            .iter()
            .flat_map(|m| cfg.kernel_ridges.iter().map(move |r| json!({ "bandwidth": m * median, "ridge": r })))
            .collect(),
        AdversaryKind::Knn => cfg.knn_k.iter().map(|k| json!({ "k": k })).collect(),
        AdversaryKind::Mlp => vec![json!({ "hidden": cfg.mlp.hidden, "epochs": cfg.mlp.epochs, "step_size": cfg.mlp.step_size })],
    }
}

fn fit_with(
    kind: AdversaryKind,
    hp: &serde_json::Value,
    train: &Split,
    classes: usize,
    cfg: &AdversarySuiteConfig,
    seed: u64,
) -> Result<Model> {
    let num = |k: &str| hp[k].as_f64().unwrap_or(f64::NAN);
    match kind {
        AdversaryKind::Logistic => Ok(fit_logistic(train, classes, num("l2"), cfg.logistic_iterations)),
        AdversaryKind::KernelRidge => fit_kernel_ridge(train, classes, num("ridge"), num("bandwidth")),
        AdversaryKind::Knn => Ok(Model::Knn {
            support: train.x.clone(),
            labels: train.y.to_vec(),
            k: hp["k"].as_u64().unwrap_or(1) as usize,
        }),
        AdversaryKind::Mlp => fit_mlp(train, classes, &cfg.mlp, seed),
    }
}

/// Fits every configured member on `(z, labels)`. Hyperparameters come from
/// stratified cross-validation (first best in grid order wins); the MLP
/// uses its fixed settings.
pub fn fit_adversaries(z: &Representation, labels: &[usize], classes: usize, cfg: &AdversarySuiteConfig) -> Result<FittedSuite> {
    cfg.validate()?;
    if labels.len() != z.len() {
        return Err(contract(format!("{} samples but {} labels", z.len(), labels.len())));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(contract("label outside the class range"));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(contract("adversaries need at least two distinct training labels"));
    }
    let scaler = Standardizer::fit(z.features())?;
    let x = scaler.apply(z.features());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let assign = fold_assignment(labels, cfg.folds, &mut rng);

    let mut members = Vec::with_capacity(cfg.members.len());
    for &kind in &cfg.members {
        let slot = AdversaryKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64;
        let member_seed = cfg.seed.wrapping_add(1 + slot);
        let (xs, ys, fold_of) = if kind == AdversaryKind::KernelRidge {
            let mut sub_rng = ChaCha8Rng::seed_from_u64(member_seed);
            let idx = stratified_subsample(labels, cfg.kernel_max_train, &mut sub_rng);
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let folds = idx.iter().map(|&i| assign[i]).collect::<Vec<_>>();
            (x.select_rows(&idx), ys, folds)
        } else {
            (x.clone(), labels.to_vec(), assign.clone())
        };
        let median = if kind == AdversaryKind::KernelRidge { median_distance(&xs) } else { 1.0 };
        let grid = candidates(kind, cfg, median);
        let (best, cv) = if grid.len() == 1 {
            (grid[0].clone(), None)
        } else {
            let mut fold_data = Vec::with_capacity(cfg.folds);
            for f in 0..cfg.folds {
                let tr: Vec<usize> = (0..ys.len()).filter(|&i| fold_of[i] != f).collect();
                let te: Vec<usize> = (0..ys.len()).filter(|&i| fold_of[i] == f).collect();
                if te.is_empty() || tr.is_empty() {
                    continue;
                }
                fold_data.push((
                    xs.select_rows(&tr),
                    tr.iter().map(|&i| ys[i]).collect::<Vec<_>>(),
                    xs.select_rows(&te),
                    te.iter().map(|&i| ys[i]).collect::<Vec<_>>(),
                ));
            }
            let mut best = (grid[0].clone(), f64::NEG_INFINITY);
            for hp in &grid {
                let mut total = 0.0;
                for (xtr, ytr, xte, yte) in &fold_data {
                    let split = Split { x: xtr, y: ytr };
                    let acc = match fit_with(kind, hp, &split, classes, cfg, member_seed) {
                        Ok(m) => accuracy(&predict(&m, xte), yte),
                        Err(Error::Numeric(_)) => 0.0,
                        Err(e) => return Err(e),
                    };
                    total += acc;
                }
                let mean = total / fold_data.len().max(1) as f64;
                if mean > best.1 {
                    best = (hp.clone(), mean);
                }
            }
            (best.0, Some(best.1))
        };
        let model = fit_with(kind, &best, &Split { x: &xs, y: &ys }, classes, cfg, member_seed)?;
        members.push(FittedMember {
            kind,
            hyperparams: best,
            cv_accuracy: cv,
            model,
        });
    }
    Ok(FittedSuite { members, classes, scaler })
}

impl FittedSuite {
    pub fn predict(&self, member: usize, z: &Representation) -> Vec<usize> {
        predict(&self.members[member].model, &self.scaler.apply(z.features()))
    }
}

/// Scores every fitted member on held-out data.
pub fn privacy_score(suite: &FittedSuite, z: &Representation, labels: &[usize]) -> Result<AdversaryReport> {
    if labels.len() != z.len() {
        return Err(contract(format!("{} samples but {} labels", z.len(), labels.len())));
    }
    let x = suite.scaler.apply(z.features());
    let members = suite
        .members
        .iter()
        .map(|m| MemberReport {
            member: m.kind.name().to_string(),
            accuracy: accuracy(&predict(&m.model, &x), labels),
            hyperparams: m.hyperparams.clone(),
        })
        .collect();
    Ok(AdversaryReport::from_members(members))
}
