//! Kernel statistics against direct computations written from their
//! definitions.

mod common;

use common::{balanced_labels, gaussian};
use privsphere::kernel::{
    center_kernel, kdi, kernel_matrix, mlpd_linear_oracle, mmd, mmd_two_sample, permutation_test, EmptyClassPolicy,
    KernelSpec,
};
use privsphere::linalg::sym_eig;
use privsphere::tensor::one_hot;
use privsphere::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gauss_mix(a: &[f64], b: &[f64], bandwidths: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    bandwidths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>() / bandwidths.len() as f64
}

/// `|mean phi(a) - mean phi(b)|` by explicit double sums.
fn mmd_by_sums(a: &[Vec<f64>], b: &[Vec<f64>], bandwidths: &[f64]) -> f64 {
    let avg = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in u {
            for y in v {
                s += gauss_mix(x, y, bandwidths);
            }
        }
        s / (u.len() * v.len()) as f64
    };
    (avg(a, a) + avg(b, b) - 2.0 * avg(a, b)).max(0.0).sqrt()
}

fn rows(t: &Tensor, idx: impl Iterator<Item = usize>) -> Vec<Vec<f64>> {
    idx.map(|i| t.row(i).to_vec()).collect()
}

/// Gauss-Jordan inverse with partial pivoting.
fn inverse(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        let p = m[c][c];
        for v in m[c].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    let data = m.into_iter().flat_map(|r| r[n..].to_vec()).collect();
    Tensor::from_vec(n, n, data).unwrap()
}

fn centered_columns(t: &Tensor) -> Tensor {
    let mean = t.column_sums().scale(1.0 / t.rows() as f64);
    let mut out = t.clone();
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            out.set(i, j, t.get(i, j) - mean.get(0, j));
        }
    }
    out
}

#[test]
fn gaussian_matrix_matches_pairwise_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = gaussian(7, 3, &mut rng);
    let b = gaussian(5, 3, &mut rng);
    let bw = [0.5, 2.0, 3.0];
    let k = kernel_matrix(&a, &b, &KernelSpec::gaussian(&bw)).unwrap();
    for i in 0..7 {
        for j in 0..5 {
            assert!((k.get(i, j) - gauss_mix(a.row(i), b.row(j), &bw)).abs() <= 1e-14);
        }
    }
}

#[test]
fn hand_value_for_two_points_at_distance_two() {
    let a = Tensor::matrix(1, 2, &[0.0, 0.0]);
    let b = Tensor::matrix(1, 2, &[2.0, 0.0]);
    let got = mmd_two_sample(&a, &b, &KernelSpec::gaussian(&[1.0])).unwrap();
    let expected = (2.0 - 2.0 * (-2.0f64).exp()).sqrt();
    assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
    assert_eq!(format!("{got:.5}"), "1.31504");
}

#[test]
fn identical_class_multisets_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = gaussian(6, 4, &mut rng);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for class in 0..3 {
        for i in 0..6 {
            data.extend_from_slice(base.row((i + 2 * class) % 6));
            labels.push(class);
        }
    }
    let z = Tensor::from_vec(18, 4, data).unwrap();
    let v = mmd(&z, &one_hot(&labels, 3), &KernelSpec::default(), EmptyClassPolicy::Reject).unwrap();
    assert!(v.abs() <= 1e-9, "{v}");
}

#[test]
fn one_vs_rest_matches_explicit_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = gaussian(24, 3, &mut rng);
    let labels = balanced_labels(24, 4, &mut rng);
    let bw = [1.0, 2.0];
    let got = mmd(&z, &one_hot(&labels, 4), &KernelSpec::gaussian(&bw), EmptyClassPolicy::Reject).unwrap();
    let mut expected = 0.0;
    for l in 0..4 {
        let inside = rows(&z, (0..24).filter(|&i| labels[i] == l));
        let outside = rows(&z, (0..24).filter(|&i| labels[i] != l));
        expected += inside.len() as f64 / 24.0 * mmd_by_sums(&inside, &outside, &bw);
    }
    assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
}

#[test]
fn kdi_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = gaussian(15, 3, &mut rng);
    let p = one_hot(&balanced_labels(15, 3, &mut rng), 3);
    let spec = KernelSpec::default();
    let rho = 0.3;
    let kc = center_kernel(&kernel_matrix(&z, &z, &spec).unwrap()).unwrap();
    let mut sys = kc.clone();
    for i in 0..15 {
        sys.set(i, i, sys.get(i, i) + rho);
    }
    let expected = p.transpose().matmul(&kc).matmul(&inverse(&sys)).matmul(&p);
    let trace: f64 = (0..3).map(|i| expected.get(i, i)).sum();
    let got = kdi(&z, &p, &spec, rho).unwrap();
    assert!((got - trace).abs() <= 1e-10 * trace.abs().max(1.0), "{got} vs {trace}");
}

#[test]
fn ridge_oracle_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = gaussian(20, 4, &mut rng);
    let p = one_hot(&balanced_labels(20, 3, &mut rng), 3);
    let rho = 0.5;
    let zc = centered_columns(&z);
    let pc = centered_columns(&p);
    let mut gram = zc.transpose().matmul(&zc);
    for i in 0..4 {
        gram.set(i, i, gram.get(i, i) + rho);
    }
    let w = inverse(&gram).matmul(&zc.transpose().matmul(&pc));
    let resid = zc.matmul(&w).sub(&pc);
    let expected = resid.frobenius_sq() + rho * w.frobenius_sq();
    let got = mlpd_linear_oracle(&z, &p, rho).unwrap();
    assert!((got - expected).abs() <= 1e-10, "{got} vs {expected}");
}

#[test]
fn fourier_features_approximate_single_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = gaussian(10, 3, &mut rng);
    let exact = kernel_matrix(&a, &a, &KernelSpec::gaussian(&[1.5])).unwrap();
    let approx = kernel_matrix(&a, &a, &KernelSpec::random_fourier(&[1.5], 20_000, 9)).unwrap();
    assert!(exact.max_abs_diff(&approx) <= 0.05, "{}", exact.max_abs_diff(&approx));
}

#[test]
fn separated_groups_reach_minimum_p_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut z = gaussian(30, 2, &mut rng);
    let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
    for i in (1..30).step_by(2) {
        z.set(i, 0, z.get(i, 0) + 100.0);
    }
    let r = permutation_test(&z, &labels, &KernelSpec::gaussian(&[1.0]), 199, 3).unwrap();
    assert_eq!(r.p_value, 1.0 / 200.0);
}

#[test]
fn identical_groups_give_p_value_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let half = gaussian(10, 2, &mut rng);
    let mut data = half.data().to_vec();
    data.extend_from_slice(half.data());
    let z = Tensor::from_vec(20, 2, data).unwrap();
    let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
    let r = permutation_test(&z, &labels, &KernelSpec::default(), 99, 1).unwrap();
    assert_eq!(r.p_value, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn two_class_one_vs_rest_equals_binary(seed in 0u64..10_000, n in 4usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(n, 3, &mut rng);
        let labels = balanced_labels(n, 2, &mut rng);
        let spec = KernelSpec::default();
        let multi = mmd(&z, &one_hot(&labels, 2), &spec, EmptyClassPolicy::Reject).unwrap();
        let a = z.select_rows(&(0..n).filter(|&i| labels[i] == 0).collect::<Vec<_>>());
        let b = z.select_rows(&(0..n).filter(|&i| labels[i] == 1).collect::<Vec<_>>());
        let binary = mmd_two_sample(&a, &b, &spec).unwrap();
        prop_assert!((multi - binary).abs() <= 1e-9);
    }

    #[test]
    fn mmd_is_nonnegative_and_label_permutation_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian(18, 2, &mut rng);
        let labels = balanced_labels(18, 3, &mut rng);
        let renamed: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
        let spec = KernelSpec::default();
        let a = mmd(&z, &one_hot(&labels, 3), &spec, EmptyClassPolicy::Reject).unwrap();
        let b = mmd(&z, &one_hot(&renamed, 3), &spec, EmptyClassPolicy::Reject).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn kdi_linear_kernel_is_total_minus_ridge_loss(seed in 0u64..10_000, rho in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(5..40);
        let d = rng.random_range(1..6);
        let z = gaussian(n, d, &mut rng);
        let p = one_hot(&balanced_labels(n, 3, &mut rng), 3);
        let info = kdi(&z, &p, &KernelSpec::Linear, rho).unwrap();
        let total = centered_columns(&p).frobenius_sq();
        let ridge = mlpd_linear_oracle(&z, &p, rho).unwrap();
        prop_assert!((info - (total - ridge)).abs() <= 1e-6, "{} vs {}", info, total - ridge);
    }

    #[test]
    fn kdi_resolvent_equals_spectral_form(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..25);
        let z = gaussian(n, 3, &mut rng);
        let p = one_hot(&balanced_labels(n, 2, &mut rng), 2);
        let spec = KernelSpec::default();
        let rho = 1e-2;
        let kc = center_kernel(&kernel_matrix(&z, &z, &spec).unwrap()).unwrap();
        let eig = sym_eig(&kc).unwrap();
        let proj = eig.vectors.transpose().matmul(&p);
        let mut spectral = 0.0;
        for (k, &lam) in eig.values.iter().enumerate() {
            let w = lam / (lam + rho);
            for c in 0..2 {
                spectral += w * proj.get(k, c).powi(2);
            }
        }
        let resolvent = kdi(&z, &p, &spec, rho).unwrap();
        prop_assert!((resolvent - spectral).abs() <= 1e-8, "{} vs {}", resolvent, spectral);
    }

    #[test]
    fn kdi_is_bounded_by_scaled_mmd(seed in 0u64..10_000, rho in 1e-3f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..30);
        let mut z = gaussian(n, 2, &mut rng);
        let labels = balanced_labels(n, 2, &mut rng);
        for i in 0..n {
            if labels[i] == 1 {
                z.set(i, 0, z.get(i, 0) + 1.5);
            }
        }
        let spec = KernelSpec::gaussian(&[1.0]);
        let indicator = Tensor::from_vec(n, 1, labels.iter().map(|&l| l as f64).collect()).unwrap();
        let a = z.select_rows(&(0..n).filter(|&i| labels[i] == 0).collect::<Vec<_>>());
        let b = z.select_rows(&(0..n).filter(|&i| labels[i] == 1).collect::<Vec<_>>());
        let m2 = mmd_two_sample(&a, &b, &spec).unwrap().powi(2);
        let delta = (a.rows() as f64 * b.rows() as f64 / n as f64).powi(2);
        let info = kdi(&z, &indicator, &spec, rho).unwrap();
        prop_assert!(delta / (n as f64 + rho) * m2 <= info);
        prop_assert!(info <= delta / rho * m2);
    }
}
