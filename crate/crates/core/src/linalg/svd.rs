use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::vector::{dot, norm2};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default relative cutoff below which singular values count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 60;

/// Compact factorization `A = U diag(sigma) V^T` keeping only the
/// singular values above the rank cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CompactSvd<T> {
    pub u: DenseMatrix<T>,
    pub sigma: Vec<T>,
    pub v: DenseMatrix<T>,
    pub rank: usize,
}

impl<T: Real> CompactSvd<T> {
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        self.u.scale_cols(&self.sigma).matmul(&self.v.transpose())
    }

    pub fn sigma_max(&self) -> T {
        self.sigma.first().copied().unwrap_or_else(T::zero)
    }

    /// `V diag(sigma)^{-1}`, the map from whitened coordinates back to
    /// input-space weights.
    pub fn v_sigma_inv(&self) -> DenseMatrix<T> {
        let inv: Vec<T> = self.sigma.iter().map(|&s| T::one() / s).collect();
        self.v.scale_cols(&inv)
    }
}

impl<T: Real> DenseMatrix<T> {
    /// Multiplies column `j` by `weights[j]`, i.e. `self * diag(weights)`.
    pub fn scale_cols(&self, weights: &[T]) -> Self {
        assert_eq!(weights.len(), self.cols());
        Self::from_fn(self.rows(), self.cols(), |i, j| self[(i, j)] * weights[j])
    }
}

/// Column-centers `a`, i.e. returns `(I - 11^T/n) a`.
pub fn center<T: Real>(a: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.is_empty() {
        return Err(Error::Dimension("cannot center an empty matrix".into()));
    }
    let means = a.column_means();
    Ok(DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] - means[j]))
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations applied to the
/// columns of whichever of `a`, `a^T` has fewer columns.
///
/// Singular values are returned in non-increasing order. Each left vector
/// is signed so its largest-magnitude entry is positive (first such entry
/// on ties) and the matching right vector is flipped along with it.
pub fn compact_svd<T: Real>(a: &DenseMatrix<T>, rank_tol: T) -> Result<CompactSvd<T>> {
    if let Some(index) = a.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(CompactSvd {
            u: DenseMatrix::zeros(m, 0),
            sigma: Vec::new(),
            v: DenseMatrix::zeros(n, 0),
            rank: 0,
        });
    }
    if m >= n {
        jacobi_tall(a, rank_tol)
    } else {
        let t = jacobi_tall(&a.transpose(), rank_tol)?;
        let mut svd = CompactSvd { u: t.v, sigma: t.sigma, v: t.u, rank: t.rank };
        fix_signs(&mut svd);
        Ok(svd)
    }
}

fn jacobi_tall<T: Real>(a: &DenseMatrix<T>, rank_tol: T) -> Result<CompactSvd<T>> {
    let (m, n) = a.shape();
    let mut cols = a.columns();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    let eps = T::epsilon();
    let tol = eps * T::from_count(m).sqrt();
    // Columns this small are rounding residue far below any rank cutoff.
    let negligible = {
        let f = a.frobenius_norm() * T::lit(16.0) * eps;
        f * f * T::from_count(m)
    };
    let mut converged = false;
    let mut residual = T::zero();
    for _ in 0..MAX_SWEEPS {
        residual = T::zero();
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence { sweeps: MAX_SWEEPS, residual: residual.as_f64() });
    }

    let mut order: Vec<(usize, T)> = cols.iter().map(|c| norm2(c)).enumerate().collect();
    order.sort_by(|x, y| y.1.partial_cmp(&x.1).expect("finite norms").then(x.0.cmp(&y.0)));
    let sigma_max = order[0].1;
    let cutoff = rank_tol * sigma_max;
    let kept: Vec<(usize, T)> = order
        .into_iter()
        .filter(|&(_, s)| s > cutoff && s > T::zero())
        .collect();
    let rank = kept.len();

    let u_cols: Vec<Vec<T>> = kept
        .iter()
        .map(|&(j, s)| cols[j].iter().map(|&x| x / s).collect())
        .collect();
    let v_cols: Vec<Vec<T>> = kept.iter().map(|&(j, _)| vcols[j].clone()).collect();
    let mut svd = CompactSvd {
        u: DenseMatrix::from_columns(m, &u_cols),
        sigma: kept.iter().map(|&(_, s)| s).collect(),
        v: DenseMatrix::from_columns(n, &v_cols),
        rank,
    };
    fix_signs(&mut svd);
    Ok(svd)
}

fn rotate<T: Real>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn fix_signs<T: Real>(svd: &mut CompactSvd<T>) {
    for j in 0..svd.rank {
        let col = svd.u.column(j);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < T::zero() {
            let neg: Vec<T> = col.iter().map(|&x| -x).collect();
            svd.u.set_column(j, &neg);
            let v: Vec<T> = svd.v.column(j).iter().map(|&x| -x).collect();
            svd.v.set_column(j, &v);
        }
    }
}

/// Moore-Penrose pseudoinverse through the compact SVD.
pub fn pseudo_inverse<T: Real>(a: &DenseMatrix<T>, rank_tol: T) -> Result<DenseMatrix<T>> {
    let svd = compact_svd(a, rank_tol)?;
    Ok(svd.v_sigma_inv().matmul(&svd.u.transpose()))
}

/// Orthonormal basis `[U, 1/sqrt(n)]` built from the SVD of the centered data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct WhitenedBasis<T> {
    pub u_prime: DenseMatrix<T>,
    pub source_rank: usize,
}

/// Centers `x`, factors it, and appends the normalized constant column.
pub fn whitened_basis<T: Real>(
    x: &DenseMatrix<T>,
    rank_tol: T,
) -> Result<(WhitenedBasis<T>, CompactSvd<T>)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Dimension(format!("whitening needs at least 2 rows, got {n}")));
    }
    let c = center(x)?;
    let scale = x.frobenius_norm().max(T::min_positive_value());
    if c.frobenius_norm() <= T::lit(64.0) * T::epsilon() * scale {
        return Err(Error::DegenerateData("data is constant after centering".into()));
    }
    let svd = compact_svd(&c, rank_tol)?;
    if svd.rank == 0 {
        return Err(Error::DegenerateData("centered data has rank 0".into()));
    }
    Ok((append_constant(&svd.u), svd))
}

pub(crate) fn append_constant<T: Real>(u: &DenseMatrix<T>) -> WhitenedBasis<T> {
    let n = u.rows();
    let k = T::one() / T::from_count(n).sqrt();
    let ones = DenseMatrix::from_raw(n, 1, vec![k; n]);
    WhitenedBasis {
        u_prime: DenseMatrix::hstack(&[u.clone(), ones]).expect("row counts agree"),
        source_rank: u.cols(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix<f64> {
        DenseMatrix::from_f64_rows(rows).unwrap()
    }

    fn orth_err(a: &DenseMatrix<f64>) -> f64 {
        a.t_matmul(a).sub(&DenseMatrix::identity(a.cols())).max_abs()
    }

    #[test]
    fn center_examples() {
        assert_eq!(center(&m(&[&[1.0], &[2.0], &[3.0]])).unwrap(), m(&[&[-1.0], &[0.0], &[1.0]]));
        assert_eq!(center(&m(&[&[1.0, 4.0], &[3.0, 0.0]])).unwrap(), m(&[&[-1.0, 2.0], &[1.0, -2.0]]));
        let z = DenseMatrix::<f64>::zeros(3, 2);
        assert_eq!(center(&z).unwrap(), z);
        assert!(center(&DenseMatrix::<f64>::zeros(0, 0)).is_err());
    }

    #[test]
    fn svd_of_diagonal() {
        let s = compact_svd(&m(&[&[3.0, 0.0], &[0.0, 1.0]]), 1e-10).unwrap();
        assert_eq!(s.sigma, vec![3.0, 1.0]);
        assert_eq!(s.u, DenseMatrix::identity(2));
        assert_eq!(s.v, DenseMatrix::identity(2));
    }

    #[test]
    fn svd_of_rank_one() {
        let u = [2.0f64, 0.0, 0.0];
        let v = [0.6, 0.8];
        let a = DenseMatrix::from_fn(3, 2, |i, j| u[i] * v[j]);
        let s = compact_svd(&a, 1e-10).unwrap();
        assert_eq!(s.rank, 1);
        assert!((s.sigma[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn wide_input_is_handled_by_transpose() {
        let a = m(&[&[1.0, 2.0, 0.0, -1.0], &[0.0, 1.0, 3.0, 1.0]]);
        let s = compact_svd(&a, 1e-10).unwrap();
        assert_eq!(s.rank, 2);
        assert!(s.reconstruct().sub(&a).frobenius_norm() < 1e-13);
        assert!(orth_err(&s.u) < 1e-13 && orth_err(&s.v) < 1e-13);
    }

    #[test]
    fn pseudo_inverse_examples() {
        let i3 = DenseMatrix::<f64>::identity(3);
        assert_eq!(pseudo_inverse(&i3, 1e-10).unwrap(), i3);
        let p = pseudo_inverse(&m(&[&[2.0, 0.0], &[0.0, 0.0]]), 1e-10).unwrap();
        assert_eq!(p, m(&[&[0.5, 0.0], &[0.0, 0.0]]));
        let a = m(&[&[1.0, 2.0, 0.0, -1.0], &[0.5, 1.0, 3.0, 1.0]]);
        let right = a.matmul(&pseudo_inverse(&a, 1e-10).unwrap());
        assert!(right.sub(&DenseMatrix::identity(2)).max_abs() < 1e-9);
    }

    #[test]
    fn whitened_basis_of_two_points() {
        let (wb, svd) = whitened_basis(&m(&[&[1.0], &[-1.0]]), 1e-10).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(svd.rank, 1);
        assert!((svd.u[(0, 0)].abs() - h).abs() < 1e-15);
        assert!((svd.u[(0, 0)] + svd.u[(1, 0)]).abs() < 1e-15);
        assert!(orth_err(&wb.u_prime) < 1e-15);
        assert!(matches!(
            whitened_basis(&m(&[&[2.0, 1.0], &[2.0, 1.0], &[2.0, 1.0]]), 1e-10),
            Err(Error::DegenerateData(_))
        ));
        assert!(whitened_basis(&m(&[&[1.0]]), 1e-10).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let a = DenseMatrix::<f32>::from_f64_rows(&[&[3.0, 1.0], &[1.0, 3.0], &[0.0, 1.0]]).unwrap();
        let s = compact_svd(&a, 1e-6).unwrap();
        assert_eq!(s.rank, 2);
        assert!(s.reconstruct().sub(&a).frobenius_norm() < 1e-5);
    }
}
