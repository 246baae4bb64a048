//! Kernel matrices and closed-form two-sample statistics.
//!
//! Samples are rows. The class statistics here are plain computations on
//! tensors; the differentiable versions used during training live in
//! [`crate::objectives`] and share [`PreparedKernel`] for graph building.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{center, sq_dist, Graph, NodeId};
use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Default mixture bandwidths.
pub const DEFAULT_BANDWIDTHS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
/// Default ridge used by the discriminant-information statistic.
pub const DEFAULT_RIDGE: f64 = 1e-4;
/// Below this argument the square root in the discrepancy has zero slope.
pub const SQRT_CLAMP: f64 = 1e-12;

fn default_bandwidths() -> Vec<f64> {
    DEFAULT_BANDWIDTHS.to_vec()
}

fn default_rf_dim() -> usize {
    1000
}

/// Which kernel a statistic uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `k(z, z') = mean_t exp(-|z - z'|^2 / (2 sigma_t^2))`.
    GaussianMixture {
        #[serde(default = "default_bandwidths")]
        bandwidths: Vec<f64>,
    },
    /// Random Fourier approximation of the same mixture with `dim` features
    /// split evenly across the bandwidths.
    RandomFourier {
        #[serde(default = "default_bandwidths")]
        bandwidths: Vec<f64>,
        #[serde(default = "default_rf_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Plain inner product; used by ridge-regression cross-checks.
    Linear,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::GaussianMixture {
            bandwidths: default_bandwidths(),
        }
    }
}

impl KernelSpec {
    pub fn gaussian(bandwidths: &[f64]) -> Self {
        KernelSpec::GaussianMixture {
            bandwidths: bandwidths.to_vec(),
        }
    }

    pub fn random_fourier(bandwidths: &[f64], dim: usize, seed: u64) -> Self {
        KernelSpec::RandomFourier {
            bandwidths: bandwidths.to_vec(),
            dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, msg: String| Error::Config {
            key: key.to_string(),
            msg,
        };
        match self {
            KernelSpec::GaussianMixture { bandwidths } | KernelSpec::RandomFourier { bandwidths, .. } => {
                if bandwidths.is_empty() || bandwidths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                    return Err(cfg(
                        "kernel.bandwidths",
                        format!("bandwidths must be non-empty and positive, got {bandwidths:?}"),
                    ));
                }
            }
            KernelSpec::Linear => {}
        }
        if let KernelSpec::RandomFourier { bandwidths, dim, .. } = self {
            if *dim == 0 || dim % (2 * bandwidths.len()) != 0 {
                return Err(cfg(
                    "kernel.dim",
                    format!(
                        "feature count {dim} must be a positive multiple of 2 x {} bandwidths",
                        bandwidths.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Resolves the spec for inputs of dimension `input_dim`, drawing random
    /// frequencies where needed.
    pub fn prepare(&self, input_dim: usize) -> Result<PreparedKernel> {
        self.validate()?;
        Ok(match self {
            KernelSpec::GaussianMixture { bandwidths } => PreparedKernel::Gaussian {
                coeffs: bandwidths.iter().map(|s| 1.0 / (2.0 * s * s)).collect(),
            },
            KernelSpec::RandomFourier { bandwidths, dim, seed } => {
                PreparedKernel::Fourier(RandomFourier::new(input_dim, bandwidths, *dim, *seed)?)
            }
            KernelSpec::Linear => PreparedKernel::Linear,
        })
    }
}

/// Frequency table of a random Fourier feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomFourier {
    /// `dim / 2` frequencies as rows.
    pub frequencies: Tensor,
    pub scale: f64,
}

impl RandomFourier {
    /// Draws `dim / 2` frequencies, an equal share per bandwidth, each from
    /// `N(0, sigma^-2 I)`.
    pub fn new(input_dim: usize, bandwidths: &[f64], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim % (2 * bandwidths.len().max(1)) != 0 {
            return Err(contract(format!("feature count {dim} not divisible across bandwidths")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per = dim / 2 / bandwidths.len();
        let mut data = Vec::with_capacity(dim / 2 * input_dim);
        for &sigma in bandwidths {
            for _ in 0..per * input_dim {
                let v: f64 = StandardNormal.sample(&mut rng);
                data.push(v / sigma);
            }
        }
        Ok(Self {
            frequencies: Tensor::from_vec(dim / 2, input_dim, data)?,
            scale: (2.0 / dim as f64).sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.rows()
    }

    /// `N x D` features `[cos(Z w), sin(Z w)] * sqrt(2 / D)`.
    pub fn features(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.frequencies.cols() {
            return Err(contract(format!(
                "random features expect dimension {}, got {}",
                self.frequencies.cols(),
                z.cols()
            )));
        }
        let m = linalg::matmul(z, false, &self.frequencies, true);
        let (r, h) = m.dims();
        let mut out = Tensor::zeros(r, 2 * h);
        for i in 0..r {
            for j in 0..h {
                let v = m.get(i, j);
                out.set(i, j, self.scale * v.cos());
                out.set(i, h + j, self.scale * v.sin());
            }
        }
        Ok(out)
    }
}

/// A kernel ready for evaluation at a fixed input dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum PreparedKernel {
    Gaussian { coeffs: Vec<f64> },
    Fourier(RandomFourier),
    Linear,
}

impl PreparedKernel {
    /// `n x m` kernel values between the rows of `a` and `b`.
    pub fn matrix(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.cols() != b.cols() {
            return Err(contract(format!(
                "kernel inputs have dimensions {} and {}",
                a.cols(),
                b.cols()
            )));
        }
        Ok(match self {
            PreparedKernel::Gaussian { coeffs } => {
                let t = coeffs.len() as f64;
                sq_dist(a, b).map(|d| coeffs.iter().map(|c| (-c * d).exp()).sum::<f64>() / t)
            }
            PreparedKernel::Fourier(rf) => {
                let fa = rf.features(a)?;
                let fb = rf.features(b)?;
                linalg::matmul(&fa, false, &fb, true)
            }
            PreparedKernel::Linear => linalg::matmul(a, false, b, true),
        })
    }

    /// Explicit feature node for kernels that have one.
    pub fn feature_node(&self, g: &mut Graph, z: NodeId) -> Result<Option<NodeId>> {
        Ok(match self {
            PreparedKernel::Fourier(rf) => {
                let w = g.constant(rf.frequencies.clone())?;
                let m = g.matmul_t(z, false, w, true)?;
                Some(g.fourier(m, rf.scale)?)
            }
            PreparedKernel::Linear => Some(z),
            PreparedKernel::Gaussian { .. } => None,
        })
    }

    /// `N x N` Gram matrix node of the rows of `z`.
    pub fn gram_node(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        match self {
            PreparedKernel::Gaussian { coeffs } => {
                let d = g.sq_dist(z, z)?;
                g.gauss_mix(d, coeffs.clone())
            }
            _ => {
                let f = self.feature_node(g, z)?.expect("explicit features");
                g.matmul_t(f, false, f, true)
            }
        }
    }
}

/// Kernel values between the rows of `a` and the rows of `b`.
pub fn kernel_matrix(a: &Tensor, b: &Tensor, spec: &KernelSpec) -> Result<Tensor> {
    spec.prepare(a.cols())?.matrix(a, b)
}

/// Double-centered kernel `C K C` with `C = I - 11^T / N`.
pub fn center_kernel(k: &Tensor) -> Result<Tensor> {
    if k.rows() != k.cols() {
        return Err(contract(format!("centering needs a square matrix, got {:?}", k.shape())));
    }
    Ok(center(k))
}

/// What a full-data statistic does with a class that has no samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyClassPolicy {
    #[default]
    Reject,
    Skip,
}

/// Column counts of a label matrix.
pub fn class_counts(labels: &Tensor) -> Vec<f64> {
    labels.column_sums().into_data()
}

/// `sqrt(aa + bb - 2 ab)`, with squared values at the rounding level of the
/// three block means treated as zero.
fn root_above_rounding(aa: f64, bb: f64, ab: f64) -> f64 {
    let sq = aa + bb - 2.0 * ab;
    let floor = 1e-14 * (aa.abs() + bb.abs() + 2.0 * ab.abs());
    if sq <= floor {
        0.0
    } else {
        sq.sqrt()
    }
}

/// Biased two-sample discrepancy between the rows of `a` and `b`.
pub fn mmd_two_sample(a: &Tensor, b: &Tensor, spec: &KernelSpec) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(contract("two-sample discrepancy needs non-empty samples"));
    }
    let k = spec.prepare(a.cols())?;
    let mean = |x: &Tensor, y: &Tensor| -> Result<f64> {
        Ok(k.matrix(x, y)?.sum() / (x.rows() * y.rows()) as f64)
    };
    let (aa, bb, ab) = (mean(a, a)?, mean(b, b)?, mean(a, b)?);
    Ok(root_above_rounding(aa, bb, ab))
}

/// One-vs-rest discrepancy `sum_l (N_l / N) * MMD(class l, rest)`.
///
/// For two classes both terms equal the binary statistic, so the weighted
/// sum reduces to it.
pub fn mmd(z: &Tensor, labels: &Tensor, spec: &KernelSpec, policy: EmptyClassPolicy) -> Result<f64> {
    if z.rows() != labels.rows() {
        return Err(contract(format!("{} samples but {} label rows", z.rows(), labels.rows())));
    }
    let n = z.rows();
    let k = spec.prepare(z.cols())?.matrix(z, z)?;
    let mut total = 0.0;
    for l in 0..labels.cols() {
        let inside: Vec<usize> = (0..n).filter(|&i| labels.get(i, l) > 0.5).collect();
        let outside: Vec<usize> = (0..n).filter(|&i| labels.get(i, l) <= 0.5).collect();
        if inside.is_empty() || outside.is_empty() {
            if policy == EmptyClassPolicy::Reject {
                return Err(contract(format!("class {l} has no samples or no complement")));
            }
            log::warn!("skipping class {l}: empty class or complement");
            continue;
        }
        let block = |r: &[usize], c: &[usize]| -> f64 {
            let s: f64 = r.iter().flat_map(|&i| c.iter().map(move |&j| (i, j))).map(|(i, j)| k.get(i, j)).sum();
            s / (r.len() * c.len()) as f64
        };
        let (aa, bb, ab) = (block(&inside, &inside), block(&outside, &outside), block(&inside, &outside));
        total += inside.len() as f64 / n as f64 * root_above_rounding(aa, bb, ab);
    }
    Ok(total)
}

/// Kernel discriminant information `tr(P^T Kc (Kc + rho I)^{-1} P)` with
/// `Kc` the centered Gram matrix of `z`. `targets` may be any real matrix
/// with one row per sample.
pub fn kdi(z: &Tensor, targets: &Tensor, spec: &KernelSpec, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(contract(format!("ridge must be positive, got {rho}")));
    }
    if z.rows() != targets.rows() {
        return Err(contract(format!("{} samples but {} target rows", z.rows(), targets.rows())));
    }
    if z.rows() < 2 {
        return Err(contract("discriminant information needs at least two samples"));
    }
    let kc = center(&spec.prepare(z.cols())?.matrix(z, z)?);
    let mut a = kc.clone();
    for i in 0..a.rows() {
        a.set(i, i, a.get(i, i) + rho);
    }
    let x = linalg::spd_solve(&a, targets)?;
    let kx = kc.matmul(&x);
    Ok(targets.zip_map(&kx, |p, v| p * v).sum())
}

/// Minimum of `|Z W + 1 b^T - P|_F^2 + rho |W|_F^2` over weights and bias,
/// solved in closed form with `Z` used as explicit features.
pub fn mlpd_linear_oracle(z: &Tensor, targets: &Tensor, rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(contract(format!("ridge must be positive, got {rho}")));
    }
    let n = z.rows() as f64;
    let zm = z.column_sums().scale(1.0 / n);
    let pm = targets.column_sums().scale(1.0 / n);
    let zc = Tensor::from_vec(z.rows(), z.cols(), (0..z.len()).map(|k| z.data()[k] - zm.data()[k % z.cols()]).collect())?;
    let pc = Tensor::from_vec(
        targets.rows(),
        targets.cols(),
        (0..targets.len()).map(|k| targets.data()[k] - pm.data()[k % targets.cols()]).collect(),
    )?;
    let mut s = linalg::matmul(&zc, true, &zc, false);
    for i in 0..s.rows() {
        s.set(i, i, s.get(i, i) + rho);
    }
    let rhs = linalg::matmul(&zc, true, &pc, false);
    let w = linalg::spd_solve(&s, &rhs)?;
    let resid = zc.matmul(&w).sub(&pc);
    Ok(resid.frobenius_sq() + rho * w.frobenius_sq())
}

/// Outcome of a label-permutation test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    pub observed: f64,
    pub permuted: Vec<f64>,
    pub p_value: f64,
}

/// Permutation test of "the two label groups share one distribution".
///
/// The statistic is the binary discrepancy; permutations shuffle labels and
/// keep both group sizes. The p-value is `(1 + #{perm >= observed}) /
/// (1 + n_perm)`, with ties judged up to a small relative tolerance.
pub fn permutation_test(
    z: &Tensor,
    labels: &[usize],
    spec: &KernelSpec,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationTestResult> {
    if labels.len() != z.rows() {
        return Err(contract(format!("{} samples but {} labels", z.rows(), labels.len())));
    }
    if labels.iter().any(|&s| s > 1) {
        return Err(contract("permutation test needs binary labels"));
    }
    let n1 = labels.iter().filter(|&&s| s == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(contract("permutation test needs both classes present"));
    }
    if n_perm < 99 {
        return Err(contract(format!("at least 99 permutations required, got {n_perm}")));
    }
    let k = spec.prepare(z.cols())?.matrix(z, z)?;
    let n = labels.len();
    let squared = |lab: &[usize]| -> f64 {
        let mut s = [[0.0; 2]; 2];
        for i in 0..n {
            let row = k.row(i);
            let li = lab[i];
            for j in 0..n {
                s[li][lab[j]] += row[j];
            }
        }
        let (a, b) = (n0 as f64, n1 as f64);
        s[0][0] / (a * a) + s[1][1] / (b * b) - 2.0 * s[0][1] / (a * b)
    };
    let observed_sq = squared(labels);
    let tol = 1e-10 * k.max_abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = labels.to_vec();
    let mut permuted = Vec::with_capacity(n_perm);
    let mut at_least = 0usize;
    for _ in 0..n_perm {
        perm.shuffle(&mut rng);
        let sq = squared(&perm);
        if sq >= observed_sq - tol {
            at_least += 1;
        }
        permuted.push(sq.max(0.0).sqrt());
    }
    Ok(PermutationTestResult {
        observed: observed_sq.max(0.0).sqrt(),
        permuted,
        p_value: (1 + at_least) as f64 / (1 + n_perm) as f64,
    })
}
