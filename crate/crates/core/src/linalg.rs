//! Dense helpers shared by the projection and certificate code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Householder QR with column-norm pivoting (Businger-Golub).
///
/// For `A` of shape `m x n` this computes `A P = Q R` with `Q` having
/// orthonormal columns and `|R[0,0]| >= |R[1,1]| >= ...`. The numerical rank
/// is the number of leading diagonal entries above `rel_tol * |R[0,0]|`.
#[derive(Debug, Clone)]
pub struct RankRevealingQr {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    perm: Vec<usize>,
    rank: usize,
}

impl RankRevealingQr {
    pub fn new(a: &DMatrix<f64>, rel_tol: f64) -> Result<Self> {
        let (m, n) = a.shape();
        let p = m.min(n);
        let mut work = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(p);

        if work.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalRank { condition: f64::INFINITY });
        }

        for k in 0..p {
            // Pick the remaining column with the largest trailing norm.
            let mut best = k;
            let mut best_norm = -1.0;
            for j in k..n {
                let norm2: f64 = (k..m).map(|i| work[(i, j)] * work[(i, j)]).sum();
                if norm2 > best_norm {
                    best_norm = norm2;
                    best = j;
                }
            }
            if best != k {
                work.swap_columns(k, best);
                perm.swap(k, best);
            }

            let alpha_norm = best_norm.max(0.0).sqrt();
            let mut v = DVector::zeros(m - k);
            for i in k..m {
                v[i - k] = work[(i, k)];
            }
            if alpha_norm == 0.0 {
                reflectors.push(DVector::zeros(m - k));
                continue;
            }
            let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
            v[0] += sign * alpha_norm;
            let vnorm = v.norm();
            v /= vnorm;

            // Apply H = I - 2 v v^T to the trailing block.
            for j in k..n {
                let mut dot = 0.0;
                for i in k..m {
                    dot += v[i - k] * work[(i, j)];
                }
                dot *= 2.0;
                for i in k..m {
                    work[(i, j)] -= dot * v[i - k];
                }
            }
            reflectors.push(v);
        }

        let mut r = DMatrix::zeros(p, n);
        for i in 0..p {
            for j in i..n {
                r[(i, j)] = work[(i, j)];
            }
        }

        // Thin Q: apply the reflectors in reverse to the first p unit vectors.
        let mut q = DMatrix::zeros(m, p);
        for j in 0..p {
            q[(j, j)] = 1.0;
        }
        for k in (0..reflectors.len()).rev() {
            let v = &reflectors[k];
            if v.iter().all(|x| *x == 0.0) {
                continue;
            }
            for j in 0..p {
                let mut dot = 0.0;
                for i in k..m {
                    dot += v[i - k] * q[(i, j)];
                }
                dot *= 2.0;
                for i in k..m {
                    q[(i, j)] -= dot * v[i - k];
                }
            }
        }

        if r.iter().any(|v| !v.is_finite()) || q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalRank { condition: f64::INFINITY });
        }

        let lead = if p > 0 { r[(0, 0)].abs() } else { 0.0 };
        let threshold = rel_tol * lead;
        let rank = if lead == 0.0 { 0 } else { (0..p).take_while(|&i| r[(i, i)].abs() > threshold).count() };

        Ok(Self { q, r, perm, rank })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Orthonormal basis of the column space of `A` (first `rank` columns of `Q`).
    pub fn range_basis(&self) -> DMatrix<f64> {
        self.q.columns(0, self.rank).into_owned()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Column `j` of `R` belongs to column `permutation()[j]` of `A`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Ratio of the largest to the smallest retained diagonal entry of `R`.
    pub fn condition_estimate(&self) -> f64 {
        if self.rank == 0 {
            return 1.0;
        }
        self.r[(0, 0)].abs() / self.r[(self.rank - 1, self.rank - 1)].abs()
    }
}

/// Infinity norm that is zero for empty vectors.
pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Smallest eigenvalue of the symmetric part `(M + M^T) / 2`.
pub fn symmetric_part_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reconstructs_permuted_matrix() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0, 1.0, 0.0, 1.0]);
        let qr = RankRevealingQr::new(&a, 1e-12).unwrap();
        assert_eq!(qr.rank(), 3);
        let qtq = qr.q().transpose() * qr.q();
        assert_relative_eq!(qtq, DMatrix::identity(3, 3), epsilon = 1e-12);
        let rebuilt = qr.q() * qr.r();
        for (j, &orig) in qr.permutation().iter().enumerate() {
            for i in 0..4 {
                assert_relative_eq!(rebuilt[(i, j)], a[(i, orig)], epsilon = 1e-12);
            }
        }
        let diag: Vec<f64> = (0..3).map(|i| qr.r()[(i, i)].abs()).collect();
        assert!(diag[0] >= diag[1] && diag[1] >= diag[2]);
    }

    #[test]
    fn detects_rank_deficiency() {
        // third column = first + second
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0, 3.0, 5.0]);
        let qr = RankRevealingQr::new(&a, 1e-9).unwrap();
        assert_eq!(qr.rank(), 2);
        let zero = DMatrix::<f64>::zeros(3, 2);
        assert_eq!(RankRevealingQr::new(&zero, 1e-9).unwrap().rank(), 0);
    }

    #[test]
    fn rejects_non_finite_input() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(RankRevealingQr::new(&a, 1e-9), Err(Error::NumericalRank { .. })));
    }
}
