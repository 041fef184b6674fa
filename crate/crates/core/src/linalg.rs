// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense helpers: Cholesky factorization of a `k x k` SPD matrix and
//! the right-hand solve `X S = B` used by the feature update.

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, SnmfError};
use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor `L` with `S = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Array2<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factorizes `s`, reading only its lower triangle.
    pub fn new(s: ArrayView2<'_, T>) -> Result<Self> {
        let (n, m) = s.dim();
        if n != m {
            return Err(SnmfError::DimensionMismatch(format!(
                "Cholesky needs a square matrix, got {n}x{m}"
            )));
        }
        let mut l = Array2::<T>::zeros((n, n));
        for j in 0..n {
            let mut diag = s[[j, j]];
            for p in 0..j {
                diag -= l[[j, p]] * l[[j, p]];
            }
            // A pivot at rounding level relative to its diagonal entry means
            // the matrix is numerically singular.
            let floor = T::epsilon() * T::from_usize_lossy(4 * n) * s[[j, j]].abs();
            if !(diag > floor) || !diag.is_finite() {
                return Err(SnmfError::IllConditioned(format!(
                    "pivot {j} of the {n}x{n} Gram matrix is {diag}; \
                     use a positive ridge constant or a smaller k"
                )));
            }
            let ljj = diag.sqrt();
            l[[j, j]] = ljj;
            for i in (j + 1)..n {
                let mut v = s[[i, j]];
                for p in 0..j {
                    v -= l[[i, p]] * l[[j, p]];
                }
                l[[i, j]] = v / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &Array2<T> {
        &self.l
    }

    /// Solves `S x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.l.nrows();
        debug_assert_eq!(b.len(), n);
        // forward: L y = b
        for i in 0..n {
            let mut v = b[i];
            for p in 0..i {
                v -= self.l[[i, p]] * b[p];
            }
            b[i] = v / self.l[[i, i]];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut v = b[i];
            for p in (i + 1)..n {
                v -= self.l[[p, i]] * b[p];
            }
            b[i] = v / self.l[[i, i]];
        }
    }

    /// Solves `X S = B` for `X` (`B` is `m x n`). Since `S` is symmetric this
    /// is `S Xᵀ = Bᵀ`, one row of `B` at a time.
    pub fn solve_right(&self, b: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let n = self.l.nrows();
        if b.ncols() != n {
            return Err(SnmfError::DimensionMismatch(format!(
                "right-hand side has {} columns, system is {n}x{n}",
                b.ncols()
            )));
        }
        let mut x = b.to_owned();
        let mut buf = vec![T::zero(); n];
        for mut row in x.rows_mut() {
            for (dst, src) in buf.iter_mut().zip(row.iter()) {
                *dst = *src;
            }
            self.solve_in_place(&mut buf);
            for (dst, src) in row.iter_mut().zip(&buf) {
                *dst = *src;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn factor_reproduces_matrix() {
        let s: Array2<f64> = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let ch = Cholesky::new(s.view()).unwrap();
        let l = ch.factor();
        let back = l.dot(&l.t());
        for (a, b) in back.iter().zip(s.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn solve_right_satisfies_system() {
        let s = array![[4.0, 2.0], [2.0, 3.0]];
        let b: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]];
        let x = Cholesky::new(s.view()).unwrap().solve_right(b.view()).unwrap();
        let r = x.dot(&s) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn indefinite_is_reported() {
        let s = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            Cholesky::new(s.view()),
            Err(SnmfError::IllConditioned(_))
        ));
        let singular = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(Cholesky::new(singular.view()).is_err());
    }
}
