//! Small dense linear-algebra helpers shared by the filters and learners.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter added to innovation covariances before factorization.
pub const JITTER: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let s = symmetrize(m);
    s.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Max-abs asymmetry `‖M − Mᵀ‖∞` (entrywise).
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// PSD check with a small negative tolerance scaled by the matrix magnitude.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let scale = m.amax().max(1.0);
    min_eigenvalue(m) >= -tol * scale
}

/// Cholesky factorization of a symmetric matrix after adding `JITTER·I`.
pub fn cholesky_jittered(
    s: &DMatrix<f64>,
    what: &'static str,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = s.nrows();
    let mut m = symmetrize(s);
    for i in 0..n {
        m[(i, i)] += JITTER;
    }
    m.cholesky().ok_or(Error::Singular(what))
}

/// Solves the discrete Lyapunov equation `P = A P Aᵀ + Q` by vectorization.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let nn = n * n;
    let mut lhs = DMatrix::<f64>::identity(nn, nn);
    // vec(A P Aᵀ) = (A ⊗ A) vec(P), column-major vec.
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    lhs[(i + j * n, k + l * n)] -= a[(i, k)] * a[(j, l)];
                }
            }
        }
    }
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("lyapunov system"))?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(symmetrize(&p))
}

/// Block-diagonal assembly of square blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(*b);
        off += k;
    }
    out
}

/// Row-major serde representation for dense matrices.
pub mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Repr { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.rows * r.cols != r.data.len() {
            return Err(serde::de::Error::custom(format!(
                "matrix data length {} does not match {}x{}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

pub mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        Ok(DVector::from_vec(data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_scalar_ar1() {
        let a = DMatrix::from_element(1, 1, 0.8);
        let q = DMatrix::from_element(1, 1, 1.0);
        let p = solve_discrete_lyapunov(&a, &q).unwrap();
        assert!((p[(0, 0)] - 1.0 / (1.0 - 0.64)).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_satisfies_fixed_point() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, -0.3, 1.0, 0.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = solve_discrete_lyapunov(&a, &q).unwrap();
        let resid = &p - (&a * &p * a.transpose() + &q);
        assert!(resid.amax() < 1e-12);
    }

    #[test]
    fn min_eig_of_diag() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0]));
        assert!((min_eigenvalue(&m) + 1.0).abs() < 1e-12);
        assert!(!is_psd(&m, 1e-9));
    }
}
