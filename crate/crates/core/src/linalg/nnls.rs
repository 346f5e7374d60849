//! Lawson-Hanson active-set solver for `min ||A x - b||` subject to `x >= 0`.

use super::matrix::DenseMatrix;
use super::svd::pseudo_inverse;
use super::vector::{norm2, sub};
use crate::error::Result;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution<T> {
    pub x: Vec<T>,
    /// `||A x - b||` at the returned point.
    pub residual_norm: T,
    pub iterations: usize,
}

pub fn nnls<T: Real>(a: &DenseMatrix<T>, b: &[T]) -> Result<NnlsSolution<T>> {
    let (m, n) = a.shape();
    assert_eq!(b.len(), m, "nnls right-hand side length");
    let mut x = vec![T::zero(); n];
    let mut passive = vec![false; n];
    let mut skip = vec![false; n];
    let scale = a.as_slice().iter().fold(T::zero(), |s, &v| s + v.abs()).max(T::one());
    let tol = T::lit(10.0) * T::epsilon() * scale * T::from_count(m.max(n));
    let max_outer = 3 * n + 30;
    let mut iterations = 0;

    let residual = |x: &[T]| sub(b, &a.matvec(x));
    for _ in 0..max_outer {
        let w = a.t_matvec(&residual(&x));
        let candidate = (0..n)
            .filter(|&j| !passive[j] && !skip[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).expect("finite gradient"));
        let Some(j) = candidate else { break };
        iterations += 1;
        passive[j] = true;

        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let z_p = pseudo_inverse(&a.select_columns(&idx), T::lit(1e-12))?.matvec(b);
            if z_p.iter().all(|&z| z > tol) {
                for (&k, &z) in idx.iter().zip(&z_p) {
                    x[k] = z;
                }
                skip.iter_mut().for_each(|s| *s = false);
                break;
            }
            let mut step = T::one();
            let mut blocking = idx[0];
            for (&k, &z) in idx.iter().zip(&z_p) {
                if z <= tol {
                    let ratio = if x[k] > z { x[k] / (x[k] - z) } else { T::zero() };
                    if ratio < step {
                        step = ratio;
                        blocking = k;
                    }
                }
            }
            for (&k, &z) in idx.iter().zip(&z_p) {
                x[k] = x[k] + step * (z - x[k]);
            }
            x[blocking] = T::zero();
            for &k in &idx {
                if x[k] <= tol {
                    x[k] = T::zero();
                    passive[k] = false;
                }
            }
            // An index that is dropped right after entering would be picked
            // again forever; park it until the next successful step.
            if !passive[j] {
                skip[j] = true;
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    let residual_norm = norm2(&residual(&x));
    Ok(NnlsSolution { x, residual_norm, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_optimum_inside_orthant() {
        let a = DenseMatrix::<f64>::identity(2);
        let s = nnls(&a, &[1.0, 2.0]).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] - 2.0).abs() < 1e-14);
        assert!(s.residual_norm < 1e-14);
    }

    #[test]
    fn clamps_negative_components() {
        let a = DenseMatrix::<f64>::identity(2);
        let s = nnls(&a, &[1.0, -2.0]).unwrap();
        assert_eq!(s.x, vec![1.0, 0.0]);
        assert!((s.residual_norm - 2.0).abs() < 1e-14);
    }

    #[test]
    fn coupled_columns() {
        // min || x1 [1,1] + x2 [1,-1] - [0, 2] ||, unconstrained x = (1, -1).
        let a = DenseMatrix::<f64>::from_f64_rows(&[&[1.0, 1.0], &[1.0, -1.0]]).unwrap();
        let s = nnls(&a, &[0.0, 2.0]).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.x[1], 0.0);
    }
}
