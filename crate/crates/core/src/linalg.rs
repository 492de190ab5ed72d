//! Small dense helpers shared by the solvers. Matrices are row-major slices.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{CelError, Result};

/// Solves `A x = b` in place for symmetric positive definite `A` (`r x r`).
/// `a` is overwritten by its Cholesky factor and `b` by the solution.
/// Returns false when a pivot is not positive.
pub(crate) fn cholesky_solve(a: &mut [f64], r: usize, b: &mut [f64]) -> bool {
    for j in 0..r {
        let mut d = a[j * r + j];
        for k in 0..j {
            d -= a[j * r + k] * a[j * r + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * r + j] = d;
        for i in j + 1..r {
            let mut s = a[i * r + j];
            for k in 0..j {
                s -= a[i * r + k] * a[j * r + k];
            }
            a[i * r + j] = s / d;
        }
    }
    for i in 0..r {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * r + k] * b[k];
        }
        b[i] = s / a[i * r + i];
    }
    for i in (0..r).rev() {
        let mut s = b[i];
        for k in i + 1..r {
            s -= a[k * r + i] * b[k];
        }
        b[i] = s / a[i * r + i];
    }
    true
}

/// Largest allowed condition number for matrices that are inverted.
pub const MAX_CONDITION: f64 = 1e12;

/// Symmetrises `m` in place.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive definite matrix, refusing matrices whose
/// spectral condition number exceeds [`MAX_CONDITION`].
pub(crate) fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(CelError::SingularMatrix {
            context: context.to_string(),
            condition,
        });
    }
    let chol = sym.cholesky().ok_or_else(|| CelError::SingularMatrix {
        context: context.to_string(),
        condition,
    })?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Symmetric square root with negative eigenvalues clamped to zero.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&roots) * q.transpose();
    symmetrize(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        let mut b = vec![2.0, 1.0];
        assert!(cholesky_solve(&mut a, 2, &mut b));
        // [4 2; 2 3] x = [2 1] => x = [0.5, 0]
        assert!((b[0] - 0.5).abs() < 1e-15);
        assert!(b[1].abs() < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        let mut b = vec![1.0, 1.0];
        assert!(!cholesky_solve(&mut a, 2, &mut b));
    }

    #[test]
    fn spd_inverse_and_condition_guard() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let inv = spd_inverse(&m, "test").unwrap();
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((inv[(1, 1)] - 2.0).abs() < 1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        assert!(matches!(
            spd_inverse(&bad, "x"),
            Err(CelError::SingularMatrix { .. })
        ));
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = psd_sqrt(&m);
        let back = &s * &s;
        assert!((back - m).abs().max() < 1e-12);
    }
}
