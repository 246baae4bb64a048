//! Differentiable training losses.
//!
//! Each constructor appends nodes to a [`Graph`] and returns a scalar node.
//! Label matrices are plain tensors (constants); representations are nodes.
//! Discriminator-based privacy losses read the discriminator as a frozen
//! constant, and discriminator losses expect the representation to be a
//! constant, so the two adversaries never push gradient into each other.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mlp, NodeId, ParamStore};
use crate::error::{contract, Result};
use crate::kernel::{PreparedKernel, SQRT_CLAMP};
use crate::tensor::Tensor;

/// Weight of the orthonormality penalty in the private-sphere loss.
pub const ORTHONORMAL_WEIGHT: f64 = 10.0;
/// Default weight of the gradient penalty in the Wasserstein discriminator
/// loss.
pub const DEFAULT_GRADIENT_PENALTY: f64 = 10.0;

/// The four privacy objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrivacyObjectiveKind {
    /// Kernel mean discrepancy between each class and the rest.
    Mmd,
    /// Kernel discriminant information of a ridge regressor on the labels.
    Kdi,
    /// Wasserstein discriminator network.
    Wdn,
    /// Least-squares discriminator network.
    Lsdn,
}

impl PrivacyObjectiveKind {
    pub const ALL: [PrivacyObjectiveKind; 4] = [Self::Mmd, Self::Kdi, Self::Wdn, Self::Lsdn];

    pub fn requires_discriminator(self) -> bool {
        matches!(self, Self::Wdn | Self::Lsdn)
    }

    pub fn supports_continuous_labels(self) -> bool {
        matches!(self, Self::Kdi | Self::Lsdn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mmd => "mmd",
            Self::Kdi => "kdi",
            Self::Wdn => "wdn",
            Self::Lsdn => "lsdn",
        }
    }
}

impl std::fmt::Display for PrivacyObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PrivacyObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown objective `{s}` (expected mmd, kdi, wdn or lsdn)"))
    }
}

/// A scalar loss node with its coefficient.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub node: NodeId,
    pub weight: f64,
}

impl LossTerm {
    pub fn new(node: NodeId, weight: f64) -> Self {
        Self { node, weight }
    }
}

/// `sum_k weight_k * node_k`.
pub fn combine(g: &mut Graph, terms: &[LossTerm]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for t in terms {
        if g.shape(t.node) != (1, 1) {
            return Err(contract("loss terms must be scalar"));
        }
        if !t.weight.is_finite() {
            return Err(contract(format!("loss weight {} is not finite", t.weight)));
        }
        let scaled = if t.weight == 1.0 { t.node } else { g.scale(t.node, t.weight)? };
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| contract("no loss terms to combine"))
}

fn check_rows(g: &Graph, node: NodeId, labels: &Tensor, what: &str) -> Result<()> {
    let (r, _) = g.shape(node);
    if r != labels.rows() {
        return Err(contract(format!("{what}: {r} samples but {} label rows", labels.rows())));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `logits` against label rows `y`.
pub fn utility_loss(g: &mut Graph, logits: NodeId, y: &Tensor) -> Result<NodeId> {
    if g.shape(logits) != y.dims() {
        return Err(contract(format!(
            "utility loss: logits {:?} vs labels {:?}",
            g.shape(logits),
            y.dims()
        )));
    }
    let n = y.rows() as f64;
    let logp = g.log_softmax(logits)?;
    let yc = g.constant(y.clone())?;
    let picked = g.mul(logp, yc)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0 / n)
}

/// Per-class one-vs-rest contrast vectors `p_l / N_l - pbar_l / Nbar_l` as
/// columns, with class weights `N_l / N`. Classes without samples or without
/// a complement get a zero column and zero weight.
pub fn contrast_matrix(labels: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, l) = labels.dims();
    let counts = labels.column_sums();
    let mut a = Tensor::zeros(n, l);
    let mut weights = vec![0.0; l];
    for c in 0..l {
        let inside = counts.get(0, c);
        let outside = n as f64 - inside;
        if inside < 0.5 || outside < 0.5 {
            log::debug!("class {c} skipped: empty class or complement in batch");
            continue;
        }
        weights[c] = inside / n as f64;
        for i in 0..n {
            let p = labels.get(i, c);
            a.set(i, c, p / inside - (1.0 - p) / outside);
        }
    }
    (a, weights)
}

/// One-vs-rest kernel discrepancy of the rows of `z` under one-hot `labels`.
pub fn privacy_loss_mmd(g: &mut Graph, z: NodeId, labels: &Tensor, kernel: &PreparedKernel) -> Result<NodeId> {
    check_rows(g, z, labels, "mmd loss")?;
    let (a, weights) = contrast_matrix(labels);
    let l = labels.cols();
    let ac = g.constant(a)?;
    let per_class = match kernel.feature_node(g, z)? {
        Some(f) => {
            let m = g.matmul_t(f, true, ac, false)?;
            let sq = g.square(m)?;
            g.col_sums(sq)?
        }
        None => {
            let k = kernel.gram_node(g, z)?;
            let ka = g.matmul(k, ac)?;
            let prod = g.mul(ac, ka)?;
            g.col_sums(prod)?
        }
    };
    let roots = g.sqrt_clamped(per_class, SQRT_CLAMP)?;
    let w = g.constant(Tensor::from_vec(1, l, weights)?)?;
    let weighted = g.mul(roots, w)?;
    g.sum(weighted)
}

/// Kernel discriminant information `tr(P^T Kc (Kc + rho I)^{-1} P)`.
pub fn privacy_loss_kdi(
    g: &mut Graph,
    z: NodeId,
    targets: &Tensor,
    kernel: &PreparedKernel,
    rho: f64,
) -> Result<NodeId> {
    if !(rho > 0.0) {
        return Err(contract(format!("ridge must be positive, got {rho}")));
    }
    check_rows(g, z, targets, "kdi loss")?;
    let k = kernel.gram_node(g, z)?;
    let kc = g.center(k)?;
    let sys = g.add_diag(kc, rho)?;
    let p = g.constant(targets.clone())?;
    let sol = g.solve(sys, p)?;
    let ks = g.matmul(kc, sol)?;
    let prod = g.mul(p, ks)?;
    g.sum(prod)
}

fn wasserstein_contrast(g: &mut Graph, out: NodeId, labels: &Tensor) -> Result<NodeId> {
    if g.shape(out) != labels.dims() {
        return Err(contract(format!(
            "discriminator outputs {:?} vs labels {:?}",
            g.shape(out),
            labels.dims()
        )));
    }
    let (a, weights) = contrast_matrix(labels);
    let mut wt = a;
    let l = labels.cols();
    for i in 0..wt.rows() {
        for c in 0..l {
            wt.set(i, c, wt.get(i, c) * weights[c]);
        }
    }
    let wc = g.constant(wt)?;
    let prod = g.mul(out, wc)?;
    g.sum(prod)
}

/// Negated one-vs-rest linear discriminator loss, with the discriminator
/// weights held constant.
pub fn privacy_loss_wdn(
    g: &mut Graph,
    z: NodeId,
    labels: &Tensor,
    disc: &Mlp,
    store: &ParamStore,
) -> Result<NodeId> {
    check_rows(g, z, labels, "wdn loss")?;
    let out = disc.forward(g, store, z, true)?.output;
    let ld = wasserstein_contrast(g, out, labels)?;
    g.scale(ld, -1.0)
}

/// Mean squared distance of the discriminator outputs from the batch label
/// mean, with the discriminator weights held constant.
pub fn privacy_loss_lsdn(
    g: &mut Graph,
    z: NodeId,
    targets: &Tensor,
    disc: &Mlp,
    store: &ParamStore,
) -> Result<NodeId> {
    check_rows(g, z, targets, "lsdn loss")?;
    let out = disc.forward(g, store, z, true)?.output;
    if g.shape(out) != targets.dims() {
        return Err(contract(format!(
            "discriminator outputs {:?} vs targets {:?}",
            g.shape(out),
            targets.dims()
        )));
    }
    let n = targets.rows();
    let mean = targets.column_sums().scale(1.0 / n as f64);
    let mut centers = Tensor::zeros(n, targets.cols());
    for i in 0..n {
        for c in 0..targets.cols() {
            centers.set(i, c, mean.get(0, c));
        }
    }
    squared_error(g, out, &centers)
}

fn squared_error(g: &mut Graph, out: NodeId, target: &Tensor) -> Result<NodeId> {
    let n = target.rows() as f64;
    let t = g.constant(target.clone())?;
    let d = g.sub(out, t)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / n)
}

/// Parts of the Wasserstein discriminator loss.
#[derive(Clone, Copy, Debug)]
pub struct WdnDiscLoss {
    /// `linear + penalty_weight * penalty`.
    pub total: NodeId,
    pub linear: NodeId,
    pub penalty: NodeId,
}

/// One-vs-rest linear discriminator loss plus the two-sided gradient
/// penalty `mean_i (|grad_z out_{s_i}(z_i)| - 1)^2` on each sample's own
/// class output. `z` must not depend on trainable parameters.
pub fn disc_loss_wdn(
    g: &mut Graph,
    z: NodeId,
    labels: &Tensor,
    disc: &Mlp,
    store: &ParamStore,
    penalty_weight: f64,
) -> Result<WdnDiscLoss> {
    if !(penalty_weight >= 0.0) {
        return Err(contract(format!("penalty weight must be non-negative, got {penalty_weight}")));
    }
    check_rows(g, z, labels, "wdn discriminator loss")?;
    let trace = disc.forward(g, store, z, false)?;
    let linear = wasserstein_contrast(g, trace.output, labels)?;
    let sel = g.constant(labels.clone())?;
    let grad = disc.input_gradient(g, &trace, sel)?;
    let sq = g.square(grad)?;
    let norms_sq = g.row_sums(sq)?;
    let norms = g.sqrt_clamped(norms_sq, SQRT_CLAMP)?;
    let dev = g.add_scalar(norms, -1.0)?;
    let dev_sq = g.square(dev)?;
    let penalty = g.mean(dev_sq)?;
    let total = combine(g, &[LossTerm::new(linear, 1.0), LossTerm::new(penalty, penalty_weight)])?;
    Ok(WdnDiscLoss { total, linear, penalty })
}

/// Mean squared error of the discriminator predicting the labels. `z` must
/// not depend on trainable parameters.
pub fn disc_loss_lsdn(
    g: &mut Graph,
    z: NodeId,
    targets: &Tensor,
    disc: &Mlp,
    store: &ParamStore,
) -> Result<NodeId> {
    check_rows(g, z, targets, "lsdn discriminator loss")?;
    let out = disc.forward(g, store, z, false)?.output;
    if g.shape(out) != targets.dims() {
        return Err(contract(format!(
            "discriminator outputs {:?} vs targets {:?}",
            g.shape(out),
            targets.dims()
        )));
    }
    squared_error(g, out, targets)
}

/// `|W^T W - I|_F^2` for a `p x k` weight node with `p >= k`.
pub fn orthonormality_penalty(g: &mut Graph, w: NodeId) -> Result<NodeId> {
    let (p, k) = g.shape(w);
    if p < k {
        return Err(contract(format!("no orthonormal frame of {k} columns in dimension {p}")));
    }
    let gram = g.matmul_t(w, true, w, false)?;
    let eye = g.constant(Tensor::identity(k))?;
    let d = g.sub(gram, eye)?;
    let sq = g.square(d)?;
    g.sum(sq)
}

/// `L_U + lambda_p * L_P`, plus the weighted orthonormality penalty when
/// given.
pub fn private_sphere_loss(
    g: &mut Graph,
    utility: NodeId,
    privacy: NodeId,
    ortho: Option<NodeId>,
    lambda_p: f64,
) -> Result<NodeId> {
    if !(lambda_p >= 0.0) {
        return Err(contract(format!("privacy weight must be non-negative, got {lambda_p}")));
    }
    let mut terms = vec![LossTerm::new(utility, 1.0), LossTerm::new(privacy, lambda_p)];
    if let Some(o) = ortho {
        terms.push(LossTerm::new(o, ORTHONORMAL_WEIGHT));
    }
    combine(g, &terms)
}
