//! Desk-scale synthetic experiments: the datasets, per-objective training
//! settings and the checks applied to utility/privacy sweeps.
//!
//! Two generators are used. The trade-off scenario writes eight privacy
//! classes as mean offsets in a subspace orthogonal to four utility
//! clusters. The sign-symmetric scenario places privacy classes at `±m` on
//! axes shared with the utility clusters, so every privacy class mean is
//! zero and only a nonlinear map can hide the label.

use privsphere::adversary::{fit_adversaries, privacy_score, AdversaryKind, AdversarySuiteConfig, Representation};
use privsphere::data::{gen_synthetic, standardize, stratified_split, Dataset, PrivacyEncoding, SyntheticSpec, TradeoffPoint};
use privsphere::duca::{duca_projection, DucaConfig};
use privsphere::kernel::{KernelSpec, DEFAULT_BANDWIDTHS};
use privsphere::models::FunnelKind;
use privsphere::objectives::PrivacyObjectiveKind;
use privsphere::trainer::{ModelSpecs, TrainConfig};
use privsphere::Result;

/// Width of the released representation.
pub const FUNNEL_DIM: usize = 20;
/// Hidden layers of the utility predictor.
pub const PUBLIC_HIDDEN: [usize; 1] = [500];
/// Held-out fraction of every scenario.
pub const TEST_FRACTION: f64 = 0.2;
/// Seed of the stratified split.
pub const SPLIT_SEED: u64 = 1;
/// Base seed of every sweep.
pub const SWEEP_SEED: u64 = 3;
/// Random-feature dimension of the approximate kernel.
pub const FOURIER_DIM: usize = 1000;

/// 2500 samples in 40 dimensions, four utility clusters and eight privacy
/// codes in orthogonal subspaces, split 2000/500.
pub fn tradeoff_spec() -> SyntheticSpec {
    SyntheticSpec {
        dim: 40,
        utility_classes: 4,
        privacy_classes: 8,
        utility_dim: 4,
        privacy_dim: 8,
        overlap_angle: 90.0,
        encoding: PrivacyEncoding::Linear,
        noise: 1.0,
        samples: 2500,
        seed: 7,
        utility_scale: 5.0,
        privacy_scale: 5.0,
    }
}

/// 2000 samples in 20 dimensions; four privacy classes sit at `±2` along
/// the four utility axes.
pub fn sign_symmetric_spec() -> SyntheticSpec {
    SyntheticSpec {
        dim: 20,
        utility_classes: 4,
        privacy_classes: 4,
        utility_dim: 4,
        privacy_dim: 4,
        overlap_angle: 0.0,
        encoding: PrivacyEncoding::SignSymmetric,
        noise: 0.3,
        samples: 2000,
        seed: 11,
        utility_scale: 4.0,
        privacy_scale: 2.0,
    }
}

/// Draws the scenario, splits it jointly stratified and standardizes with
/// training statistics.
pub fn prepare(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let ds = gen_synthetic(spec)?;
    let (train, test) = stratified_split(&ds, TEST_FRACTION, SPLIT_SEED, true)?;
    let (train, test, _) = standardize(&train, &test)?;
    Ok((train, test))
}

/// Model shapes, base configuration and privacy-weight grid of one sweep.
#[derive(Clone, Debug)]
pub struct SweepSetup {
    pub specs: ModelSpecs,
    pub config: TrainConfig,
    pub grid: Vec<f64>,
}

fn powers_of_two(exponents: impl Iterator<Item = i32>) -> Vec<f64> {
    exponents.map(|e| 2f64.powi(e)).collect()
}

/// Sweep settings of the trade-off scenario for `kind`.
///
/// MMD uses a ReLU funnel with the default rates. KDI adds the orthonormal
/// funnel and ridge `1e-2`. Discriminator objectives use the orthonormal
/// funnel, sphere rate `3e-3`, discriminator rate `1e-2` and batches of 100
/// over the fixed 250-epoch schedule.
pub fn tradeoff_setup(kind: PrivacyObjectiveKind, data: &Dataset) -> SweepSetup {
    let classes = data.utility_classes.len();
    let funnel = if kind == PrivacyObjectiveKind::Mmd {
        FunnelKind::ReluAffine
    } else {
        FunnelKind::OrthonormalReluAffine
    };
    let specs = ModelSpecs::new(data.dim(), FUNNEL_DIM, funnel, &PUBLIC_HIDDEN, classes);
    let mut config = TrainConfig::new(kind, 0.0);
    config.seed = SWEEP_SEED;
    let grid = match kind {
        PrivacyObjectiveKind::Mmd | PrivacyObjectiveKind::Wdn => powers_of_two((-10..=10).step_by(4)),
        PrivacyObjectiveKind::Kdi => {
            config.rho = 1e-2;
            powers_of_two((-10..=0).step_by(2))
        }
        PrivacyObjectiveKind::Lsdn => powers_of_two((-4..=12).step_by(4)),
    };
    if kind.requires_discriminator() {
        config.step_size = Some(3e-3);
        config.disc_step_size = 1e-2;
        config.batch_size = 100;
    }
    SweepSetup { specs, config, grid }
}

/// Random-feature MMD sweep on the trade-off scenario.
pub fn fourier_setup(data: &Dataset) -> SweepSetup {
    let mut setup = tradeoff_setup(PrivacyObjectiveKind::Mmd, data);
    setup.config.kernel = KernelSpec::random_fourier(&DEFAULT_BANDWIDTHS, FOURIER_DIM, SWEEP_SEED);
    setup.grid = powers_of_two((-10..=2).step_by(4));
    setup
}

/// Neural MMD sweep on the sign-symmetric scenario.
pub fn sign_symmetric_setup(data: &Dataset) -> SweepSetup {
    let classes = data.utility_classes.len();
    let specs = ModelSpecs::new(data.dim(), FUNNEL_DIM, FunnelKind::ReluAffine, &PUBLIC_HIDDEN, classes);
    let mut config = TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.0);
    config.seed = SWEEP_SEED;
    SweepSetup {
        specs,
        config,
        grid: powers_of_two((-4..=0).step_by(2)),
    }
}

/// Grid point maximizing utility minus privacy accuracy. Failed points are
/// skipped.
pub fn knee(points: &[TradeoffPoint]) -> Option<&TradeoffPoint> {
    points
        .iter()
        .filter(|p| p.error.is_none() && p.utility_accuracy.is_finite() && p.privacy_accuracy.is_finite())
        .max_by(|a, b| {
            (a.utility_accuracy - a.privacy_accuracy).total_cmp(&(b.utility_accuracy - b.privacy_accuracy))
        })
}

/// Outcome of the three trade-off checks on one sweep.
#[derive(Clone, Debug)]
pub struct TradeoffCheck {
    pub lowest: TradeoffPoint,
    pub knee: TradeoffPoint,
    pub highest: TradeoffPoint,
    /// Smallest weight keeps utility at least 0.90 and privacy at least 0.60.
    pub lowest_ok: bool,
    /// Knee keeps utility at least 0.85 with privacy within the margin of
    /// `1 / L`.
    pub knee_ok: bool,
    /// Largest weight brings both accuracies within 0.10 of chance.
    pub highest_ok: bool,
}

impl TradeoffCheck {
    pub fn passed(&self) -> bool {
        self.lowest_ok && self.knee_ok && self.highest_ok
    }
}

/// Applies the low-weight, knee and high-weight checks. Chance levels are
/// `1 / classes`; `knee_margin` is the allowed privacy excess over `1 / L`.
/// Returns `None` when a required point failed to train.
pub fn check_tradeoff(
    points: &[TradeoffPoint],
    utility_classes: usize,
    privacy_classes: usize,
    knee_margin: f64,
) -> Option<TradeoffCheck> {
    let ok = |p: &TradeoffPoint| p.error.is_none() && p.utility_accuracy.is_finite() && p.privacy_accuracy.is_finite();
    let lowest = points.first().filter(|p| ok(p))?.clone();
    let highest = points.last().filter(|p| ok(p))?.clone();
    let knee = knee(points)?.clone();
    let utility_chance = 1.0 / utility_classes as f64;
    let privacy_chance = 1.0 / privacy_classes as f64;
    Some(TradeoffCheck {
        lowest_ok: lowest.utility_accuracy >= 0.90 && lowest.privacy_accuracy >= 0.60,
        knee_ok: knee.utility_accuracy >= 0.85 && knee.privacy_accuracy <= privacy_chance + knee_margin,
        highest_ok: (highest.utility_accuracy - utility_chance).abs() <= 0.10
            && (highest.privacy_accuracy - privacy_chance).abs() <= 0.10,
        lowest,
        knee,
        highest,
    })
}

/// Utility and nearest-neighbour privacy accuracy of one linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct DucaPoint {
    pub lambda_p: f64,
    /// Held-out accuracy of a logistic classifier on the utility label.
    pub utility_accuracy: f64,
    /// Held-out accuracy of the k-NN adversary on the privacy label.
    pub knn_accuracy: f64,
}

/// Fits one projection per weight and scores it on `test`.
pub fn duca_curve(train: &Dataset, test: &Dataset, dim: usize, grid: &[f64]) -> Result<Vec<DucaPoint>> {
    let suite = |kind| AdversarySuiteConfig {
        members: vec![kind],
        seed: SWEEP_SEED,
        ..Default::default()
    };
    let (logistic, knn) = (suite(AdversaryKind::Logistic), suite(AdversaryKind::Knn));
    grid.iter()
        .map(|&lambda_p| {
            let proj = duca_projection(&train.x, &train.y(), &train.p(), &DucaConfig::new(dim, lambda_p))?;
            let ztr = Representation::from_projection(&proj, &train.x)?;
            let zte = Representation::from_projection(&proj, &test.x)?;
            let u = fit_adversaries(&ztr, &train.utility, train.utility_classes.len(), &logistic)?;
            let p = fit_adversaries(&ztr, &train.privacy, train.privacy_classes.len(), &knn)?;
            Ok(DucaPoint {
                lambda_p,
                utility_accuracy: privacy_score(&u, &zte, &test.utility)?.privacy_score,
                knn_accuracy: privacy_score(&p, &zte, &test.privacy)?.privacy_score,
            })
        })
        .collect()
}

/// Largest weight whose utility stays within `tolerance` of the unweighted
/// projection (the first grid point).
pub fn highest_effective(curve: &[DucaPoint], tolerance: f64) -> Option<&DucaPoint> {
    let base = curve.first()?.utility_accuracy;
    curve.iter().rev().find(|p| p.utility_accuracy >= base - tolerance)
}

/// Lowest privacy score among sweep points whose utility is within
/// `tolerance` of `target`.
pub fn best_matched(points: &[TradeoffPoint], target: f64, tolerance: f64) -> Option<&TradeoffPoint> {
    points
        .iter()
        .filter(|p| p.error.is_none() && (p.utility_accuracy - target).abs() <= tolerance)
        .min_by(|a, b| a.privacy_accuracy.total_cmp(&b.privacy_accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(lambda_p: f64, utility: f64, privacy: f64) -> TradeoffPoint {
        TradeoffPoint {
            lambda_p,
            utility_accuracy: utility,
            privacy_accuracy: privacy,
            adversaries: vec![],
            seed: 0,
            error: None,
        }
    }

    #[test]
    fn knee_maximizes_gap_and_skips_failures() {
        let mut failed = point(4.0, f64::NAN, f64::NAN);
        failed.error = Some("diverged".into());
        let points = vec![point(1.0, 0.95, 0.7), point(2.0, 0.9, 0.2), failed, point(8.0, 0.3, 0.12)];
        assert_eq!(knee(&points).unwrap().lambda_p, 2.0);
    }

    #[test]
    fn tradeoff_checks_use_chance_levels() {
        let points = vec![point(1.0, 0.95, 0.7), point(2.0, 0.9, 0.2), point(4.0, 0.3, 0.2)];
        let c = check_tradeoff(&points, 4, 8, 0.10).unwrap();
        assert!(c.lowest_ok && c.knee_ok && c.highest_ok);
        let c = check_tradeoff(&points, 4, 8, 0.05).unwrap();
        assert!(!c.knee_ok);
        let points = vec![point(1.0, 0.95, 0.5), point(4.0, 0.4, 0.1)];
        let c = check_tradeoff(&points, 4, 8, 0.10).unwrap();
        assert!(!c.lowest_ok && !c.highest_ok && !c.passed());
    }

    #[test]
    fn effective_projection_and_matched_point() {
        let curve = vec![
            DucaPoint { lambda_p: 0.0, utility_accuracy: 0.9, knn_accuracy: 0.8 },
            DucaPoint { lambda_p: 1.0, utility_accuracy: 0.87, knn_accuracy: 0.7 },
            DucaPoint { lambda_p: 10.0, utility_accuracy: 0.5, knn_accuracy: 0.3 },
        ];
        assert_eq!(highest_effective(&curve, 0.05).unwrap().lambda_p, 1.0);
        let points = vec![point(1.0, 0.88, 0.5), point(2.0, 0.84, 0.3), point(4.0, 0.7, 0.2)];
        assert_eq!(best_matched(&points, 0.87, 0.05).unwrap().lambda_p, 2.0);
    }

    #[test]
    fn scenarios_are_valid() {
        tradeoff_spec().validate().unwrap();
        sign_symmetric_spec().validate().unwrap();
    }
}
