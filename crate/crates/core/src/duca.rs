//! Linear utility-versus-privacy projection solved as a generalized
//! symmetric eigenproblem.
//!
//! The projection maximizes `tr(W^T A W)` subject to `W^T B W = I` with
//!
//! ```text
//! A = Xc^T Y Y^T Xc - rho' I - lambda Xc^T P P^T Xc
//! B = Xc^T Xc + rho I
//! ```
//!
//! where `Xc` is the row-centered data. `B` is whitened by its Cholesky
//! factor and the resulting ordinary problem goes to [`sym_eig`].

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg::{self, sym_eig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DucaConfig {
    /// Number of output directions.
    pub dim: usize,
    pub lambda_p: f64,
    /// Ridge on the constraint side; `None` uses `1e-3 * tr(Xc^T Xc) / d`.
    #[serde(default)]
    pub ridge: Option<f64>,
    /// Ridge subtracted on the objective side.
    #[serde(default)]
    pub objective_ridge: f64,
}

impl DucaConfig {
    pub fn new(dim: usize, lambda_p: f64) -> Self {
        Self {
            dim,
            lambda_p,
            ridge: None,
            objective_ridge: 0.0,
        }
    }
}

/// A fitted projection `z = (x - mean) W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DucaProjection {
    pub weights: Tensor,
    pub mean: Tensor,
    /// Generalized eigenvalues of the kept directions, descending.
    pub eigenvalues: Vec<f64>,
    pub ridge: f64,
}

impl DucaProjection {
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.weights.rows() {
            return Err(contract(format!(
                "projection expects {} features, got {}",
                self.weights.rows(),
                x.cols()
            )));
        }
        Ok(center_rows(x, &self.mean).matmul(&self.weights))
    }
}

fn center_rows(x: &Tensor, mean: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v -= mean.data()[k % c];
    }
    out
}

/// Fits the projection on samples `x` (`N x d`) with utility labels `y` and
/// privacy labels `p` (one row per sample).
pub fn duca_projection(x: &Tensor, y: &Tensor, p: &Tensor, cfg: &DucaConfig) -> Result<DucaProjection> {
    let (n, d) = x.dims();
    if n < 2 {
        return Err(contract("projection needs at least two samples"));
    }
    if y.rows() != n || p.rows() != n {
        return Err(contract(format!("{n} samples but {} / {} label rows", y.rows(), p.rows())));
    }
    if cfg.dim == 0 || cfg.dim > d {
        return Err(Error::Config {
            key: "duca.dim".into(),
            msg: format!("output dimension {} not in 1..={d}", cfg.dim),
        });
    }
    if !(cfg.lambda_p >= 0.0) {
        return Err(Error::Config {
            key: "duca.lambda_p".into(),
            msg: format!("must be non-negative, got {}", cfg.lambda_p),
        });
    }
    let mean = x.column_sums().scale(1.0 / n as f64);
    let xc = center_rows(x, &mean);
    let scatter = linalg::matmul(&xc, true, &xc, false);
    let ridge = match cfg.ridge {
        Some(r) => r,
        None => 1e-3 * (0..d).map(|i| scatter.get(i, i)).sum::<f64>() / d as f64,
    };
    if !(ridge > 0.0) {
        return Err(Error::Config {
            key: "duca.ridge".into(),
            msg: format!("constraint ridge must be positive, got {ridge}"),
        });
    }
    let mut b = scatter;
    for i in 0..d {
        b.set(i, i, b.get(i, i) + ridge);
    }
    let xty = linalg::matmul(&xc, true, y, false);
    let xtp = linalg::matmul(&xc, true, p, false);
    let mut a = linalg::matmul(&xty, false, &xty, true);
    let priv_part = linalg::matmul(&xtp, false, &xtp, true);
    for (av, pv) in a.data_mut().iter_mut().zip(priv_part.data()) {
        *av -= cfg.lambda_p * pv;
    }
    for i in 0..d {
        a.set(i, i, a.get(i, i) - cfg.objective_ridge);
    }

    let l = linalg::cholesky(&b)?;
    // M = L^{-1} A L^{-T}
    let left = linalg::solve_lower(&l, &a);
    let mut m = linalg::solve_lower(&l, &left.transpose());
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let eig = sym_eig(&m)?;
    let mut top = Tensor::zeros(d, cfg.dim);
    for i in 0..d {
        for j in 0..cfg.dim {
            top.set(i, j, eig.vectors.get(i, j));
        }
    }
    let mut weights = linalg::solve_lower_transpose(&l, &top);
    for j in 0..cfg.dim {
        let col = weights.column_values(j);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |best, (i, &v)| if v.abs() > best.1.abs() { (i, v) } else { best })
            .0;
        if col[pivot] < 0.0 {
            for i in 0..d {
                weights.set(i, j, -weights.get(i, j));
            }
        }
    }
    Ok(DucaProjection {
        weights,
        mean,
        eigenvalues: eig.values[..cfg.dim].to_vec(),
        ridge,
    })
}
