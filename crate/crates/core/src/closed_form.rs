//! Closed-form optima of the scale-normalized training problems in the
//! regime where the features have full row rank, together with their dual
//! optimal points.
//!
//! Every returned network has `gamma_j^2 + alpha_j^2 = 1` on each unit, and
//! `primal_objective` is `1/2 |f - Y|^2 + beta sum_j |w2_j|`. Rebalancing
//! the units with [`crate::network::balancing_eta`] turns this into the
//! value of [`crate::network::objective`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::vector::{centered, dot, norm2};
use crate::linalg::{compact_svd, DenseMatrix};
use crate::network::{forward_input, Arch, BnLayerParams, BnNetwork, NetInput};
use crate::scalar::Real;

/// Relative cutoff `sigma_min > FULL_ROW_RANK_TOL * sigma_max`.
pub const FULL_ROW_RANK_TOL: f64 = 1e-8;

/// Which sides of the label vector carry an active unit at the optimum.
/// A side is active when `beta <= |(+-y)_+|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Both,
    NegativeOnly,
    PositiveOnly,
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ClosedFormResult<T> {
    pub network: BnNetwork<T>,
    pub primal_objective: T,
    pub dual_objective: T,
    /// Dual optimal point, `n x outputs`.
    pub v_star: DenseMatrix<T>,
    /// Set for the scalar-output results.
    pub regime: Option<Regime>,
    /// Output column served by each hidden unit.
    pub unit_targets: Vec<usize>,
}

impl<T: Real> ClosedFormResult<T> {
    pub fn duality_gap(&self) -> T {
        (self.primal_objective - self.dual_objective).abs()
    }
}

fn positive_part<T: Real>(y: &[T]) -> Vec<T> {
    y.iter().map(|v| v.relu()).collect()
}

fn negative_part<T: Real>(y: &[T]) -> Vec<T> {
    y.iter().map(|&v| (-v).relu()).collect()
}

pub fn regime_of<T: Real>(y: &[T], beta: T) -> Regime {
    let pos = norm2(&positive_part(y));
    let neg = norm2(&negative_part(y));
    let on = |side: T| side > T::zero() && beta <= side;
    match (on(pos), on(neg)) {
        (true, true) => Regime::Both,
        (false, true) => Regime::NegativeOnly,
        (true, false) => Regime::PositiveOnly,
        (false, false) => Regime::Neither,
    }
}

/// Dual optimum of the scalar problem: each active side of `y` is pulled
/// onto the sphere of radius `beta`, inactive sides are kept.
pub fn dual_optimal_scalar<T: Real>(y: &[T], beta: T) -> Vec<T> {
    let pos = positive_part(y);
    let neg = negative_part(y);
    let side = |part: &[T]| -> Vec<T> {
        let nrm = norm2(part);
        if nrm > T::zero() && beta <= nrm {
            part.iter().map(|&v| beta * v / nrm).collect()
        } else {
            part.to_vec()
        }
    };
    side(&pos).into_iter().zip(side(&neg)).map(|(p, q)| p - q).collect()
}

/// `X^+` after checking `n <= d` and `sigma_min > 1e-8 sigma_max`.
fn full_row_rank_pinv<T: Real>(x: &DenseMatrix<T>, what: &str) -> Result<DenseMatrix<T>> {
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::Dimension("no samples".into()));
    }
    if n > d {
        return Err(Error::Precondition(format!(
            "{what} has {n} rows but only {d} columns; use the convex program instead"
        )));
    }
    let svd = compact_svd(x, T::lit(FULL_ROW_RANK_TOL))?;
    if svd.rank < n {
        return Err(Error::Precondition(format!(
            "{what} is not full row rank (rank {} < {n}); use the convex program instead",
            svd.rank
        )));
    }
    Ok(svd.v_sigma_inv().matmul(&svd.u.transpose()))
}

/// Scale and shift that make BN reproduce `u / |u|` from pre-activation `u`.
fn bn_coefficients<T: Real>(u: &[T]) -> (T, T) {
    let nrm = norm2(u);
    let c = centered(u);
    let cn = norm2(&c);
    let total: T = u.iter().copied().sum();
    let root_n = T::from_count(u.len()).sqrt();
    if cn <= T::lit(64.0) * T::epsilon() * nrm {
        return (T::zero(), total.signum());
    }
    (cn / nrm, total / (root_n * nrm))
}

struct Unit<T> {
    w: Vec<T>,
    gamma: T,
    alpha: T,
    w2: Vec<T>,
    target: usize,
}

fn assemble<T: Real>(fan_in: usize, outputs: usize, units: Vec<Unit<T>>, arch: Arch) -> Result<BnNetwork<T>> {
    if units.is_empty() {
        return Ok(BnNetwork::empty(fan_in, outputs, arch));
    }
    let m = units.len();
    let w = DenseMatrix::from_columns(fan_in, &units.iter().map(|u| u.w.clone()).collect::<Vec<_>>());
    let hidden = BnLayerParams::new(
        w,
        units.iter().map(|u| u.gamma).collect(),
        units.iter().map(|u| u.alpha).collect(),
    )?;
    let w2 = DenseMatrix::from_vec(m, outputs, units.iter().flat_map(|u| u.w2.clone()).collect())?;
    BnNetwork::new(hidden, w2, arch)
}

/// `1/2 |f - Y|^2 + beta sum_j |w2_j| sqrt(gamma_j^2 + alpha_j^2)`.
pub fn normalized_objective<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    y: &DenseMatrix<T>,
    beta: T,
) -> Result<T> {
    let f = forward_input(net, input)?.output;
    if f.shape() != y.shape() {
        return Err(Error::Dimension("targets do not match the network output".into()));
    }
    let r = f.sub(y);
    Ok(T::lit(0.5) * dot(r.as_slice(), r.as_slice()) + beta * net.balanced_regularizer())
}

fn dual_value<T: Real>(v: &DenseMatrix<T>, y: &DenseMatrix<T>) -> T {
    let r = v.sub(y);
    let half = T::lit(0.5);
    half * dot(y.as_slice(), y.as_slice()) - half * dot(r.as_slice(), r.as_slice())
}

fn check_beta<T: Real>(beta: T) -> Result<()> {
    if !(beta > T::zero()) || !beta.is_finite() {
        return Err(Error::Argument("beta must be positive".into()));
    }
    Ok(())
}

/// Two-layer scalar-output optimum for full-row-rank `x` with `n <= d`: up
/// to two units fitting `(y)_+` and `(-y)_+`. Inactive sides are left out;
/// a side exactly at the threshold keeps its unit with a zero output weight.
pub fn closed_form_scalar<T: Real>(x: &DenseMatrix<T>, y: &[T], beta: T) -> Result<ClosedFormResult<T>> {
    scalar_on(x, y, beta, "data matrix")
}

fn scalar_on<T: Real>(x: &DenseMatrix<T>, y: &[T], beta: T, what: &str) -> Result<ClosedFormResult<T>> {
    check_beta(beta)?;
    if y.len() != x.rows() {
        return Err(Error::Dimension(format!("{} targets for {} samples", y.len(), x.rows())));
    }
    let pinv = full_row_rank_pinv(x, what)?;
    let mut units = Vec::new();
    for (part, sign) in [(positive_part(y), T::one()), (negative_part(y), -T::one())] {
        let nrm = norm2(&part);
        if !(nrm > T::zero() && beta <= nrm) {
            continue;
        }
        let (gamma, alpha) = bn_coefficients(&part);
        units.push(Unit { w: pinv.matvec(&part), gamma, alpha, w2: vec![sign * (nrm - beta)], target: 0 });
    }
    let unit_targets = units.iter().map(|u| u.target).collect();
    let network = assemble(x.cols(), 1, units, Arch::FcPreBn)?;
    let ym = DenseMatrix::column_vector(y)?;
    let v_star = DenseMatrix::column_vector(&dual_optimal_scalar(y, beta))?;
    let input = NetInput::Dense(x.clone());
    Ok(ClosedFormResult {
        primal_objective: normalized_objective(&network, &input, &ym, beta)?,
        dual_objective: dual_value(&v_star, &ym),
        network,
        v_star,
        regime: Some(regime_of(y, beta)),
        unit_targets,
    })
}

fn check_onehot<T: Real>(y: &DenseMatrix<T>) -> Result<()> {
    for i in 0..y.rows() {
        let row = y.row(i);
        if row.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Precondition(format!("label row {i} is not a 0/1 indicator")));
        }
        if row.iter().filter(|&&v| v == T::one()).count() > 1 {
            return Err(Error::Precondition(format!("label row {i} marks more than one class")));
        }
    }
    Ok(())
}

/// Vector-output optimum for one-hot labels: one unit per class `j` with
/// `beta <= |y_j|`, output weight `(|y_j| - beta) e_j`.
pub fn closed_form_vector_onehot<T: Real>(
    x: &DenseMatrix<T>,
    y_onehot: &DenseMatrix<T>,
    beta: T,
) -> Result<ClosedFormResult<T>> {
    onehot_on(x, y_onehot, beta, "data matrix")
}

fn onehot_on<T: Real>(x: &DenseMatrix<T>, y: &DenseMatrix<T>, beta: T, what: &str) -> Result<ClosedFormResult<T>> {
    check_beta(beta)?;
    if y.rows() != x.rows() {
        return Err(Error::Dimension(format!("{} label rows for {} samples", y.rows(), x.rows())));
    }
    check_onehot(y)?;
    let pinv = full_row_rank_pinv(x, what)?;
    let classes = y.cols();
    let mut units = Vec::new();
    let mut v_cols = Vec::with_capacity(classes);
    for j in 0..classes {
        let yj = y.column(j);
        let nrm = norm2(&yj);
        let active = nrm > T::zero() && beta <= nrm;
        v_cols.push(if active { yj.iter().map(|&v| beta * v / nrm).collect() } else { yj.clone() });
        if !active {
            continue;
        }
        let (gamma, alpha) = bn_coefficients(&yj);
        let mut w2 = vec![T::zero(); classes];
        w2[j] = nrm - beta;
        units.push(Unit { w: pinv.matvec(&yj), gamma, alpha, w2, target: j });
    }
    let unit_targets = units.iter().map(|u| u.target).collect();
    let network = assemble(x.cols(), classes, units, Arch::FcPreBn)?;
    let v_star = DenseMatrix::from_columns(y.rows(), &v_cols);
    let input = NetInput::Dense(x.clone());
    Ok(ClosedFormResult {
        primal_objective: normalized_objective(&network, &input, y, beta)?,
        dual_objective: dual_value(&v_star, y),
        network,
        v_star,
        regime: None,
        unit_targets,
    })
}

/// Last two layers of a deep network: the two-layer optimum on the
/// activations `a_pre` feeding the last hidden layer, which must have rank
/// `n`. `y` is a single column, or one-hot labels when `vector_mode` is set.
pub fn closed_form_deep_last_two<T: Real>(
    a_pre: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    beta: T,
    vector_mode: bool,
) -> Result<ClosedFormResult<T>> {
    if vector_mode {
        onehot_on(a_pre, y, beta, "activation matrix")
    } else {
        if y.cols() != 1 {
            return Err(Error::Dimension("scalar mode takes a single target column".into()));
        }
        scalar_on(a_pre, &y.column(0), beta, "activation matrix")
    }
}

/// BN-after-ReLU optimum: a single unit with `ReLU(X w) = y - min_i y_i`,
/// output weight `(|y| - beta)_+`, dual point `beta y / |y|` when active.
pub fn closed_form_postbn<T: Real>(x: &DenseMatrix<T>, y: &[T], beta: T) -> Result<ClosedFormResult<T>> {
    check_beta(beta)?;
    if y.len() != x.rows() {
        return Err(Error::Dimension(format!("{} targets for {} samples", y.len(), x.rows())));
    }
    let pinv = full_row_rank_pinv(x, "data matrix")?;
    let nrm = norm2(y);
    let active = nrm > T::zero() && beta <= nrm;
    let mut units = Vec::new();
    if active {
        let low = y.iter().copied().fold(T::infinity(), T::min);
        let shifted: Vec<T> = y.iter().map(|&v| v - low).collect();
        let (gamma, alpha) = bn_coefficients(y);
        units.push(Unit { w: pinv.matvec(&shifted), gamma, alpha, w2: vec![nrm - beta], target: 0 });
    }
    let network = assemble(x.cols(), 1, units, Arch::FcPostBn)?;
    let v: Vec<T> = if active { y.iter().map(|&v| beta * v / nrm).collect() } else { y.to_vec() };
    let ym = DenseMatrix::column_vector(y)?;
    let v_star = DenseMatrix::column_vector(&v)?;
    let input = NetInput::Dense(x.clone());
    Ok(ClosedFormResult {
        primal_objective: normalized_objective(&network, &input, &ym, beta)?,
        dual_objective: dual_value(&v_star, &ym),
        unit_targets: vec![0; network.width()],
        network,
        v_star,
        regime: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{balancing_eta, bn_apply, objective, rescale_units};
    use crate::rng::Prng;

    type M = DenseMatrix<f64>;

    fn random(n: usize, d: usize, seed: u64) -> M {
        let mut rng = Prng::new(seed);
        M::from_vec(n, d, rng.gaussian_vec(n * d)).unwrap()
    }

    fn balanced_objective(res: &ClosedFormResult<f64>, x: &M, y: &M, beta: f64) -> f64 {
        let eta = balancing_eta(&res.network);
        objective(&rescale_units(&res.network, &eta).unwrap(), x, y, beta).unwrap()
    }

    #[test]
    fn identity_two_sided_example() {
        let x = M::identity(2);
        let res = closed_form_scalar(&x, &[1.0, -1.0], 0.1).unwrap();
        assert_eq!(res.regime, Some(Regime::Both));
        assert_eq!(res.network.width(), 2);
        assert!((res.primal_objective - 0.19).abs() < 1e-14);
        assert!((res.dual_objective - 0.19).abs() < 1e-14);
        let y = M::column_vector(&[1.0, -1.0]).unwrap();
        assert!((balanced_objective(&res, &x, &y, 0.1) - 0.19).abs() < 1e-14);
    }

    #[test]
    fn dual_point_cases() {
        assert_eq!(dual_optimal_scalar(&[1.0, -1.0], 3.0), vec![1.0, -1.0]);
        let v: Vec<f64> = dual_optimal_scalar(&[1.0, -1.0], 0.1);
        assert!((v[0] - 0.1).abs() < 1e-16 && (v[1] + 0.1).abs() < 1e-16);
        assert_eq!(dual_optimal_scalar(&[0.0, 0.0], 0.5), vec![0.0, 0.0]);
        let v: Vec<f64> = dual_optimal_scalar(&[3.0, 4.0, -0.1], 1.0);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15 && v[2] == -0.1);
    }

    #[test]
    fn large_beta_gives_the_empty_network() {
        let x = random(3, 5, 1);
        let y = [0.5, -0.2, 0.1];
        let res = closed_form_scalar(&x, &y, 2.0).unwrap();
        assert_eq!(res.regime, Some(Regime::Neither));
        assert_eq!(res.network.width(), 0);
        assert_eq!(res.v_star.column(0), y.to_vec());
        assert!((res.primal_objective - 0.15).abs() < 1e-15);
    }

    #[test]
    fn one_sided_labels_use_one_unit() {
        let x = random(4, 6, 2);
        let res = closed_form_scalar(&x, &[1.0, 0.5, 0.0, 2.0], 0.3).unwrap();
        assert_eq!(res.regime, Some(Regime::PositiveOnly));
        assert_eq!(res.network.width(), 1);
        assert!(res.network.w2[(0, 0)] > 0.0);
        assert!(res.duality_gap() < 1e-12);
    }

    #[test]
    fn threshold_tie_keeps_a_silent_unit() {
        let x = M::identity(2);
        let res = closed_form_scalar(&x, &[3.0, -4.0], 3.0).unwrap();
        assert_eq!(res.network.width(), 2);
        assert_eq!(res.network.w2[(0, 0)], 0.0);
        assert!(res.duality_gap() < 1e-12);
    }

    #[test]
    fn rank_checks() {
        let wide_but_deficient = M::from_f64_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]).unwrap();
        assert!(matches!(
            closed_form_scalar(&wide_but_deficient, &[1.0, -1.0], 0.1),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(closed_form_scalar(&random(4, 2, 3), &[1.0; 4], 0.1), Err(Error::Precondition(_))));
    }

    #[test]
    fn units_are_normalized_and_gaps_vanish() {
        for seed in 0..20 {
            let n = 3 + seed as usize % 5;
            let x = random(n, n + 2, 10 + seed);
            let mut rng = Prng::new(40 + seed);
            let y = rng.gaussian_vec(n);
            let beta = [0.05, 0.5, 1.0, 5.0][seed as usize % 4];
            let res = closed_form_scalar(&x, &y, beta).unwrap();
            for j in 0..res.network.width() {
                let (g, a) = (res.network.hidden.gamma[j], res.network.hidden.alpha[j]);
                assert!((g * g + a * a - 1.0).abs() < 1e-12);
            }
            assert!(res.duality_gap() <= 1e-9 * (1.0 + res.dual_objective.abs()));
        }
    }

    #[test]
    fn proof_form_of_the_weights_gives_the_same_bn_output() {
        let x = random(4, 6, 4);
        let y = [0.7, -0.3, 1.2, -0.8];
        let res = closed_form_scalar(&x, &y, 0.2).unwrap();
        let pinv = full_row_rank_pinv(&x, "x").unwrap();
        let pos = positive_part(&y);
        let nrm = norm2(&pos);
        let v: Vec<f64> = pos.iter().map(|p| 0.2 * p / nrm).collect();
        let low = v.iter().copied().fold(f64::INFINITY, f64::min);
        let alt = pinv.matvec(&v.iter().map(|e| e - low).collect::<Vec<_>>());
        let (g, a) = (res.network.hidden.gamma[0], res.network.hidden.alpha[0]);
        let ours = bn_apply(&x, &res.network.unit_weights(0), g, a).unwrap();
        let theirs = bn_apply(&x, &alt, g, a).unwrap();
        for (p, q) in ours.iter().zip(&theirs) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn onehot_examples() {
        let x = M::identity(3);
        let y = M::identity(3);
        let res = closed_form_vector_onehot(&x, &y, 0.5).unwrap();
        assert_eq!(res.network.width(), 3);
        assert!((res.primal_objective - 1.125).abs() < 1e-14);
        assert!((res.dual_objective - 1.125).abs() < 1e-14);

        let res = closed_form_vector_onehot(&x, &y, 2.0).unwrap();
        assert_eq!(res.network.width(), 0);
        assert!((res.primal_objective - 1.5).abs() < 1e-15);

        let y = M::from_f64_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let res = closed_form_vector_onehot(&x, &y, 1.2).unwrap();
        assert_eq!(res.unit_targets, vec![0]);
        assert!(res.duality_gap() < 1e-12);
        let bad = M::from_f64_rows(&[&[1.0, 1.0], &[0.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!(matches!(closed_form_vector_onehot(&x, &bad, 0.1), Err(Error::Precondition(_))));
    }

    #[test]
    fn deep_reduces_to_two_layer() {
        let a = M::identity(3);
        let y = M::column_vector(&[1.0, -2.0, 0.5]).unwrap();
        let deep = closed_form_deep_last_two(&a, &y, 0.3, false).unwrap();
        let flat = closed_form_scalar(&a, &y.column(0), 0.3).unwrap();
        assert_eq!(deep, flat);
        assert!(closed_form_deep_last_two(&random(4, 2, 5), &y, 0.3, false).is_err());
    }

    #[test]
    fn postbn_examples() {
        let x = M::identity(2);
        let res = closed_form_postbn(&x, &[1.0, -1.0], 0.5).unwrap();
        let net = &res.network;
        assert_eq!(net.unit_weights(0), vec![2.0, 0.0]);
        assert!((net.w2[(0, 0)] - (2f64.sqrt() - 0.5)).abs() < 1e-15);
        assert!((net.hidden.gamma[0] - 1.0).abs() < 1e-15 && net.hidden.alpha[0].abs() < 1e-15);
        assert!(res.duality_gap() < 1e-12);

        let res = closed_form_postbn(&x, &[1.0, -1.0], 1.5).unwrap();
        assert_eq!(res.network.width(), 0);

        let res = closed_form_postbn(&M::identity(3), &[2.0, 2.0, 2.0], 0.5).unwrap();
        assert_eq!((res.network.hidden.gamma[0], res.network.hidden.alpha[0]), (0.0, 1.0));
        assert!(res.duality_gap() < 1e-12);

        let res = closed_form_postbn(&x, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(res.network.width(), 0);
        assert_eq!(res.primal_objective, 0.0);
    }
}
