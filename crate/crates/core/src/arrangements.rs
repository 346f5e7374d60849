//! Activation patterns `1[X w >= 0]` of a single ReLU unit.
//!
//! Exact enumeration works in the row space of `X`: with `X = U S V^T` of
//! rank `r`, every pattern is a sign pattern of `B t` for `B = U S` and
//! `t` in `R^r`. Each open cell of the central arrangement `{b_i^T t = 0}`
//! has an extreme ray where `r - 1` independent hyperplanes meet, so
//! walking all such rays (and both of their orientations) and flipping the
//! signs of the rows that vanish there reaches every cell. Candidates are
//! then confirmed by a margin-maximizing linear program.

use std::collections::{BTreeMap, BTreeSet};

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{compact_svd, vector::dot, DenseMatrix, DEFAULT_RANK_TOL};
use crate::rng::Prng;
use crate::scalar::Real;

/// Largest row count accepted by [`enumerate_arrangements`].
pub const MAX_ENUM_ROWS: usize = 20;
/// Largest effective rank accepted by [`enumerate_arrangements`].
pub const MAX_ENUM_RANK: usize = 4;
/// With full row rank every pattern is realizable; this caps `2^n`.
pub const MAX_FULL_RANK_ROWS: usize = 12;

/// Relative margin demanded of a witness in the feasibility solve.
pub const MARGIN_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Arrangement<T> {
    pub mask: Vec<bool>,
    pub witness: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ArrangementSet<T> {
    pub arrangements: Vec<Arrangement<T>>,
    pub exhaustive: bool,
    /// `(n, r)`: number of rows and effective rank of the source matrix.
    pub source_dims: (usize, usize),
}

impl<T: Real> ArrangementSet<T> {
    pub fn len(&self) -> usize {
        self.arrangements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrangements.is_empty()
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.arrangements.iter().map(|a| a.mask.clone()).collect()
    }

    /// Recomputes every mask as `1[x w >= 0]` from its witness.
    pub fn rederive(&self, x: &DenseMatrix<T>) -> Result<Self> {
        let mut by_mask = BTreeMap::new();
        for a in &self.arrangements {
            if a.witness.len() != x.cols() {
                return Err(Error::Dimension(format!(
                    "witness of length {} does not fit a matrix with {} columns",
                    a.witness.len(),
                    x.cols()
                )));
            }
            by_mask
                .entry(sign_mask(x, &a.witness))
                .or_insert_with(|| a.witness.clone());
        }
        Ok(Self {
            arrangements: by_mask
                .into_iter()
                .map(|(mask, witness)| Arrangement { mask, witness })
                .collect(),
            exhaustive: self.exhaustive,
            source_dims: (x.rows(), self.source_dims.1),
        })
    }
}

/// `1[x w >= 0]` row by row.
pub fn sign_mask<T: Real>(x: &DenseMatrix<T>, w: &[T]) -> Vec<bool> {
    x.matvec(w).into_iter().map(|v| v >= T::zero()).collect()
}

/// Whether `witness` realizes `mask` on `x` up to the tolerance `tol`.
pub fn witness_certifies<T: Real>(x: &DenseMatrix<T>, a: &Arrangement<T>, tol: T) -> bool {
    x.matvec(&a.witness)
        .iter()
        .zip(&a.mask)
        .all(|(&v, &on)| if on { v >= -tol } else { v <= tol })
}

/// Every activation pattern of `x_eff` that is realized with a positive
/// margin, sorted by mask read as a big-endian binary number.
pub fn enumerate_arrangements<T: Real>(x_eff: &DenseMatrix<T>) -> Result<ArrangementSet<T>> {
    let (n, d) = x_eff.shape();
    if n == 0 || d == 0 {
        return Err(Error::Dimension("arrangements of an empty matrix".into()));
    }
    if n > MAX_ENUM_ROWS {
        return Err(Error::Capacity(format!(
            "exact enumeration supports at most {MAX_ENUM_ROWS} rows, got {n}"
        )));
    }
    let svd = compact_svd(x_eff, T::lit(DEFAULT_RANK_TOL))?;
    let r = svd.rank;
    let finish = |found: BTreeMap<Vec<bool>, Vec<T>>| ArrangementSet {
        arrangements: found
            .into_iter()
            .map(|(mask, witness)| Arrangement { mask, witness })
            .collect(),
        exhaustive: true,
        source_dims: (n, r),
    };
    if r == 0 {
        let mut found = BTreeMap::new();
        found.insert(vec![true; n], vec![T::zero(); d]);
        return Ok(finish(found));
    }

    // Row-space coordinates: x_eff w = B t with t = V^T w.
    let b = svd.u.scale_cols(&svd.sigma);
    let row_norm: Vec<T> = (0..n).map(|i| dot(b.row(i), b.row(i)).sqrt()).collect();
    let zero_row: Vec<bool> = row_norm
        .iter()
        .map(|&s| s <= T::lit(1e-12) * svd.sigma_max())
        .collect();

    if r == n {
        if n > MAX_FULL_RANK_ROWS {
            return Err(Error::Capacity(format!(
                "full-rank input with {n} rows has 2^{n} patterns (limit {MAX_FULL_RANK_ROWS} rows)"
            )));
        }
        // B is square and invertible: t = B^{-1} s hits any sign vector s.
        let b_inv = crate::linalg::pseudo_inverse(&b, T::lit(DEFAULT_RANK_TOL))?;
        let mut found = BTreeMap::new();
        for code in 0..(1u32 << n) {
            let mask: Vec<bool> = (0..n).map(|i| code >> (n - 1 - i) & 1 == 1).collect();
            let s: Vec<T> = mask.iter().map(|&on| if on { T::one() } else { -T::one() }).collect();
            let w = svd.v.matvec(&b_inv.matvec(&s));
            found.insert(mask, w);
        }
        return Ok(finish(found));
    }
    if r > MAX_ENUM_RANK {
        return Err(Error::Capacity(format!(
            "exact enumeration supports effective rank at most {MAX_ENUM_RANK}, got {r}"
        )));
    }

    let margin = T::lit(MARGIN_REL) * x_eff.frobenius_norm();
    let active_rows: Vec<usize> = (0..n).filter(|&i| !zero_row[i]).collect();
    let mut candidates: BTreeSet<Vec<bool>> = BTreeSet::new();
    for ray in candidate_rays(&b, &active_rows, r) {
        for t in [ray.clone(), ray.iter().map(|&v| -v).collect()] {
            let t_norm = dot(&t, &t).sqrt();
            let proj = b.matvec(&t);
            let mut base = vec![true; n];
            let mut ties = Vec::new();
            for &i in &active_rows {
                if proj[i].abs() <= T::lit(1e-9) * row_norm[i] * t_norm {
                    ties.push(i);
                } else {
                    base[i] = proj[i] > T::zero();
                }
            }
            if ties.len() > 16 {
                return Err(Error::Capacity("too many rows meet at one ray".into()));
            }
            for code in 0..(1u32 << ties.len()) {
                let mut mask = base.clone();
                for (bit, &i) in ties.iter().enumerate() {
                    mask[i] = code >> bit & 1 == 1;
                }
                candidates.insert(mask);
            }
        }
    }

    let mut found = BTreeMap::new();
    for mask in candidates {
        if let Some(t) = margin_lp(&b, &active_rows, &mask, margin)? {
            found.insert(mask, svd.v.matvec(&t));
        }
    }
    Ok(finish(found))
}

/// Directions where `r - 1` linearly independent rows of `b` vanish
/// simultaneously (the single direction `[1]` when `r = 1`).
fn candidate_rays<T: Real>(b: &DenseMatrix<T>, rows: &[usize], r: usize) -> Vec<Vec<T>> {
    if r == 1 {
        return vec![vec![T::one()]];
    }
    let mut rays = Vec::new();
    for subset in combinations(rows, r - 1) {
        let sub = b.select_rows(&subset);
        let ray = generalized_cross(&sub);
        let norm = dot(&ray, &ray).sqrt();
        let scale: T = subset
            .iter()
            .map(|&i| dot(b.row(i), b.row(i)).sqrt())
            .fold(T::one(), |p, s| p * s);
        if norm > T::lit(1e-10) * scale {
            rays.push(ray.iter().map(|&v| v / norm).collect());
        }
    }
    rays
}

/// Vector orthogonal to the `k - 1` rows of a `(k-1) x k` matrix, built
/// from signed maximal minors.
fn generalized_cross<T: Real>(m: &DenseMatrix<T>) -> Vec<T> {
    let k = m.cols();
    (0..k)
        .map(|skip| {
            let cols: Vec<usize> = (0..k).filter(|&j| j != skip).collect();
            let minor = m.select_columns(&cols);
            let d = determinant(&minor);
            if skip % 2 == 0 {
                d
            } else {
                -d
            }
        })
        .collect()
}

fn determinant<T: Real>(m: &DenseMatrix<T>) -> T {
    let n = m.rows();
    let mut a = m.clone();
    let mut det = T::one();
    for c in 0..n {
        let pivot = (c..n)
            .max_by(|&i, &j| a[(i, c)].abs().partial_cmp(&a[(j, c)].abs()).expect("finite"))
            .expect("non-empty range");
        if a[(pivot, c)] == T::zero() {
            return T::zero();
        }
        if pivot != c {
            for j in 0..n {
                let tmp = a[(c, j)];
                a[(c, j)] = a[(pivot, j)];
                a[(pivot, j)] = tmp;
            }
            det = -det;
        }
        det = det * a[(c, c)];
        for i in (c + 1)..n {
            let f = a[(i, c)] / a[(c, c)];
            for j in c..n {
                let v = a[(c, j)];
                a[(i, j)] = a[(i, j)] - f * v;
            }
        }
    }
    det
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(items, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Maximizes `m` over `|t|_inf <= 1` subject to `s_i b_i^T t >= m` with
/// `s_i = +1` on active rows and `-1` otherwise. Returns `t` when the
/// optimal margin reaches `margin`.
fn margin_lp<T: Real>(
    b: &DenseMatrix<T>,
    rows: &[usize],
    mask: &[bool],
    margin: T,
) -> Result<Option<Vec<T>>> {
    let r = b.cols();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let t: Vec<_> = (0..r).map(|_| lp.add_var(0.0, (-1.0, 1.0))).collect();
    let m = lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
    for &i in rows {
        let sign = if mask[i] { 1.0 } else { -1.0 };
        let mut terms: Vec<_> = t
            .iter()
            .zip(b.row(i))
            .map(|(&var, &bij)| (var, sign * bij.as_f64()))
            .collect();
        terms.push((m, -1.0));
        lp.add_constraint(terms.as_slice(), ComparisonOp::Ge, 0.0);
    }
    let sol = match lp.solve() {
        Ok(sol) => sol,
        Err(minilp::Error::Infeasible) | Err(minilp::Error::Unbounded) => return Ok(None),
    };
    if sol[m] < margin.as_f64() {
        return Ok(None);
    }
    let t_star: Vec<T> = t.iter().map(|&v| T::lit(sol[v])).collect();
    // Re-check in the working precision; the LP solves in f64.
    let proj = b.matvec(&t_star);
    let ok = rows.iter().all(|&i| {
        if mask[i] {
            proj[i] > T::zero()
        } else {
            proj[i] < T::zero()
        }
    });
    Ok(ok.then_some(t_star))
}

/// Activation patterns of `count` Gaussian directions, deduplicated by
/// mask. The first direction producing each mask is kept as its witness.
pub fn sample_arrangements<T: Real>(
    x_eff: &DenseMatrix<T>,
    count: usize,
    seed: u64,
) -> Result<ArrangementSet<T>> {
    if count == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let rank = compact_svd(x_eff, T::lit(DEFAULT_RANK_TOL))?.rank;
    let mut rng = Prng::new(seed);
    let mut found: BTreeMap<Vec<bool>, Vec<T>> = BTreeMap::new();
    for _ in 0..count {
        let g: Vec<T> = rng.gaussian_vec(x_eff.cols());
        found.entry(sign_mask(x_eff, &g)).or_insert(g);
    }
    Ok(ArrangementSet {
        arrangements: found
            .into_iter()
            .map(|(mask, witness)| Arrangement { mask, witness })
            .collect(),
        exhaustive: false,
        source_dims: (x_eff.rows(), rank),
    })
}

/// Loose count bound `2 r (e (n-1) / r)^r`.
pub fn arrangement_bound(n: usize, r: usize) -> Result<f64> {
    check_bound_args(n, r)?;
    let r_f = r as f64;
    Ok(2.0 * r_f * (std::f64::consts::E * (n as f64 - 1.0) / r_f).powf(r_f))
}

/// Exact upper bound `2 sum_{k<r} C(n-1, k)` on the number of cells.
pub fn tight_arrangement_bound(n: usize, r: usize) -> Result<u128> {
    check_bound_args(n, r)?;
    let mut total: u128 = 0;
    let mut binom: u128 = 1;
    for k in 0..r {
        if k > 0 {
            binom = binom * (n - k) as u128 / k as u128;
        }
        total += binom;
    }
    Ok(2 * total)
}

fn check_bound_args(n: usize, r: usize) -> Result<()> {
    if n < 2 || r < 1 || r > n {
        return Err(Error::Argument(format!("bound needs n >= 2 and 1 <= r <= n (got n={n}, r={r})")));
    }
    Ok(())
}
