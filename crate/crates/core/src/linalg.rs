//! Dense linear algebra: GEMM, Cholesky solves and the cyclic Jacobi
//! eigensolver for symmetric matrices.

use crate::error::{contract, numeric, Result};
use crate::tensor::Tensor;

/// `op(a) * op(b)` where `op` optionally transposes.
pub fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { a.dims() };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { b.dims() };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    if m == 0 || n == 0 || k == 0 {
        return Tensor::zeros(m, n);
    }
    let mut data: Vec<f64> = Vec::with_capacity(m * n);
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    // SAFETY: with beta = 0 dgemm writes every entry of the m x n output
    // without reading it, so the buffer is fully initialized before set_len.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            data.as_mut_ptr(),
            n as isize,
            1,
        );
        data.set_len(m * n);
    }
    Tensor::from_vec(m, n, data).expect("matmul output shape")
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm_into(alpha: f64, a: &Tensor, ta: bool, b: &Tensor, tb: bool, beta: f64, c: &mut Tensor) {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { a.dims() };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { b.dims() };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(c.dims(), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (ar, ac) = (a.cols() as isize, 1isize);
    let (rsa, csa) = if ta { (ac, ar) } else { (ar, ac) };
    let (br, bc) = (b.cols() as isize, 1isize);
    let (rsb, csb) = if tb { (bc, br) } else { (br, bc) };
    // SAFETY: the strides describe the exact row-major buffers checked above,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            c.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    const BLOCK: usize = 64;
    let n = a.rows();
    if a.cols() != n {
        return Err(contract("cholesky needs a square matrix"));
    }
    let mut l = a.clone();
    let dot = |x: &[f64], y: &[f64]| -> f64 {
        let mut acc = [0.0; 4];
        let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
        let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
        for (p, q) in xc.zip(yc) {
            for k in 0..4 {
                acc[k] += p[k] * q[k];
            }
        }
        acc.iter().sum::<f64>() + tail
    };
    for k0 in (0..n).step_by(BLOCK) {
        let k1 = (k0 + BLOCK).min(n);
        for j in k0..k1 {
            let row_j = &l.data()[j * n + k0..j * n + j];
            let d = l.get(j, j) - dot(row_j, row_j);
            if !(d > 0.0) || !d.is_finite() {
                return Err(numeric(format!("matrix not positive definite (pivot {j} = {d:e})")));
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            let row_j: Vec<f64> = l.data()[j * n + k0..j * n + j].to_vec();
            for i in j + 1..n {
                let s = dot(&l.data()[i * n + k0..i * n + j], &row_j);
                let v = (l.get(i, j) - s) / djj;
                l.set(i, j, v);
            }
        }
        if k1 < n {
            let m = n - k1;
            let kb = k1 - k0;
            let data = l.data_mut().as_mut_ptr();
            // SAFETY: the panel (rows k1.., cols k0..k1) and the trailing
            // block (rows k1.., cols k1..) are disjoint regions of `l`.
            unsafe {
                let panel = data.add(k1 * n + k0) as *const f64;
                let trailing = data.add(k1 * n + k1);
                matrixmultiply::dgemm(m, kb, m, -1.0, panel, n as isize, 1, panel, 1, n as isize, 1.0, trailing, n as isize, 1);
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            l.set(i, j, 0.0);
        }
    }
    Ok(l)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let mut cols = b.transpose();
    for x in cols.data_mut().chunks_exact_mut(n.max(1)) {
        for i in 0..n {
            let row = &l.row(i)[..i];
            let dot = dot(row, &x[..i]);
            x[i] = (x[i] - dot) / l.get(i, i);
        }
    }
    cols.transpose()
}

/// Solves `L^T X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let mut cols = b.transpose();
    for x in cols.data_mut().chunks_exact_mut(n.max(1)) {
        for i in (0..n).rev() {
            x[i] /= l.get(i, i);
            let xi = x[i];
            for (xj, lij) in x[..i].iter_mut().zip(&l.row(i)[..i]) {
                *xj -= xi * lij;
            }
        }
    }
    cols.transpose()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Solves `A X = B` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Tensor {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn spd_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(cholesky_solve(&cholesky(a)?, b))
}

/// Symmetric eigendecomposition: eigenvalues in descending order and the
/// matching orthonormal eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

/// Cyclic Jacobi rotations on a symmetric matrix.
///
/// Equal eigenvalues keep the order in which the rotations leave them, so a
/// matrix that is already diagonal comes back in index order.
pub fn sym_eig(a: &Tensor) -> Result<SymEig> {
    let n = a.rows();
    if a.cols() != n {
        return Err(contract("sym_eig needs a square matrix"));
    }
    if !a.is_finite() {
        return Err(numeric("sym_eig input contains NaN or Inf"));
    }
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-10 * scale {
                return Err(contract(format!(
                    "sym_eig input not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let mut m = a.clone();
    // symmetrize exactly so rotations see one consistent matrix
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let mut v = Tensor::identity(n);
    let total = m.frobenius_sq().sqrt();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let raw: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep index order
    order.sort_by(|&i, &j| raw[j].partial_cmp(&raw[i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| raw[i]).collect();
    let mut vectors = Tensor::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(SymEig { values, vectors })
}
