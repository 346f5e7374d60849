//! Instrumentation for the implicit bias of BN training: low-rank data
//! truncation, the whitened-twin gradient identity and per-direction
//! weight similarity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::vector::{dot, norm2};
use crate::linalg::{center, compact_svd, CompactSvd, DenseMatrix, DEFAULT_RANK_TOL};
use crate::network::{
    combine, forward_states, head_gradient, train_gd, unit_gradient, Arch, BnNetwork, BnScale, Loss, NetInput,
    Regularization, SquaredLoss, TrainConfig, TrainError, UnitGradient,
};
use crate::scalar::Real;

/// How many leading singular values [`truncate_data`] keeps. Exactly one of
/// the two fields must be set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TruncationSpec {
    #[serde(default)]
    pub k: Option<usize>,
    /// Keep the smallest `k` whose leading `sigma_i^2` reach this fraction
    /// of the total.
    #[serde(default)]
    pub variance_target: Option<f64>,
}

impl TruncationSpec {
    pub fn rank(k: usize) -> Self {
        Self { k: Some(k), variance_target: None }
    }

    pub fn variance(target: f64) -> Self {
        Self { k: None, variance_target: Some(target) }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.k, self.variance_target) {
            (Some(0), None) => Err(Error::Argument("truncation rank must be at least 1".into())),
            (Some(_), None) => Ok(()),
            (None, Some(t)) if t > 0.0 && t <= 1.0 => Ok(()),
            (None, Some(t)) => Err(Error::Argument(format!("variance target {t} outside (0, 1]"))),
            _ => Err(Error::Argument("set exactly one of k and variance_target".into())),
        }
    }
}

/// Number of singular values kept for `sigma` (non-increasing).
pub fn select_rank<T: Real>(sigma: &[T], spec: &TruncationSpec) -> Result<usize> {
    spec.validate()?;
    let r = sigma.len();
    if let Some(k) = spec.k {
        if k > r {
            return Err(Error::Argument(format!("truncation rank {k} exceeds the data rank {r}")));
        }
        return Ok(k);
    }
    if r == 0 {
        return Err(Error::DegenerateData("centered data has rank zero".into()));
    }
    let target = T::lit(spec.variance_target.unwrap_or(1.0));
    let total: T = sigma.iter().map(|&s| s * s).sum();
    let mut cum = T::zero();
    for (i, &s) in sigma.iter().enumerate() {
        cum = cum + s * s;
        if cum >= target * total {
            return Ok(i + 1);
        }
    }
    Ok(r)
}

/// `sqrt(sum_{i > k} sigma_i^2)`.
pub fn tail_energy<T: Real>(sigma: &[T], k: usize) -> T {
    sigma.iter().skip(k).map(|&s| s * s).sum::<T>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Truncation<T> {
    pub data: DenseMatrix<T>,
    pub k: usize,
    pub sigma: Vec<T>,
    /// Fraction of `sum sigma_i^2` carried by the kept values.
    pub explained: T,
    pub tail_energy: T,
}

/// Rank-`k` approximation of the centered data with the column means added
/// back, together with the selection details.
pub fn truncate_with_report<T: Real>(x: &DenseMatrix<T>, spec: &TruncationSpec) -> Result<Truncation<T>> {
    spec.validate()?;
    let means = x.column_means();
    let svd = compact_svd(&center(x)?, T::lit(DEFAULT_RANK_TOL))?;
    let k = select_rank(&svd.sigma, spec)?;
    let keep: Vec<usize> = (0..k).collect();
    let low = svd
        .u
        .select_columns(&keep)
        .scale_cols(&svd.sigma[..k])
        .matmul(&svd.v.select_columns(&keep).transpose());
    let data = DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| low[(i, j)] + means[j]);
    let total: T = svd.sigma.iter().map(|&s| s * s).sum();
    let kept: T = svd.sigma[..k].iter().map(|&s| s * s).sum();
    let explained = if total > T::zero() { kept / total } else { T::one() };
    Ok(Truncation { data, k, explained, tail_energy: tail_energy(&svd.sigma, k), sigma: svd.sigma })
}

pub fn truncate_data<T: Real>(x: &DenseMatrix<T>, spec: &TruncationSpec) -> Result<DenseMatrix<T>> {
    Ok(truncate_with_report(x, spec)?.data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct UnitProbe<T> {
    pub unit: usize,
    /// `|S V^T dW_j - S^2 dQ_j|` over the larger of the two norms, absent
    /// for a skipped unit. When both updates are at roundoff level (see
    /// `zero_gradient`) the gap is measured against the unprojected update
    /// `|S^2 U^T dh_j| / nu_j` instead.
    pub relative_error: Option<T>,
    /// Both input-weight updates vanish up to roundoff. This is exact for
    /// every unit when the centered data has rank one, since BN then makes
    /// the objective invariant to the input weights.
    #[serde(default)]
    pub zero_gradient: bool,
    /// Largest relative gap between the scale, shift and output-weight
    /// gradients of the two models computed from their own forward passes.
    pub head_deviation: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GradientIdentityReport<T> {
    pub units: Vec<UnitProbe<T>>,
    /// Units with a vanishing normalizer in either model.
    pub skipped: Vec<usize>,
    pub max_relative_error: T,
    /// Whether the head gradients agree bit for bit when both models read
    /// the same BN output.
    pub head_bitwise_equal: bool,
    pub max_head_deviation: T,
}

fn relative_gap<T: Real>(a: &[T], b: &[T]) -> T {
    let diff: Vec<T> = a.iter().zip(b).map(|(&p, &q)| p - q).collect();
    let scale = norm2(a).max(norm2(b));
    if scale == T::zero() {
        T::zero()
    } else {
        norm2(&diff) / scale
    }
}

/// Compares the input-weight updates of a pre-BN network with those of its
/// whitened twin `q_j = S V^T w_j` on the same data.
///
/// The update of the BN model mapped into whitened coordinates,
/// `S V^T dW_j`, must equal `S^2 dQ_j`; the head gradients must coincide.
pub fn gradient_identity_probe<T: Real>(
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    net: &BnNetwork<T>,
    beta: T,
) -> Result<GradientIdentityReport<T>> {
    if net.arch != Arch::FcPreBn {
        return Err(Error::Argument("the gradient identity probe needs an fc_pre_bn network".into()));
    }
    let n = x.rows();
    if y.rows() != n || y.cols() != net.outputs() {
        return Err(Error::Dimension(format!(
            "targets are {}x{}, expected {}x{}",
            y.rows(),
            y.cols(),
            n,
            net.outputs()
        )));
    }
    let svd = compact_svd(&center(x)?, T::lit(DEFAULT_RANK_TOL))?;
    if svd.rank == 0 {
        return Err(Error::DegenerateData("centered data has rank zero".into()));
    }
    let twin = net.to_whitened(&svd)?;
    let bn_input = NetInput::Dense(x.clone());
    let wh_input = NetInput::Dense(svd.u.clone());
    let scale = BnScale { n_ref: n };
    let bn_states = forward_states(net, &bn_input, scale)?;
    let wh_states = forward_states(&twin, &wh_input, scale)?;
    let bn_res = SquaredLoss.gradient(&combine(net, n, &bn_states).output, y);
    let wh_res = SquaredLoss.gradient(&combine(&twin, n, &wh_states).output, y);
    let root = T::from_count(n).sqrt();
    let reg = Regularization::Head;

    let mut units = Vec::with_capacity(net.width());
    let mut skipped = Vec::new();
    let mut bitwise = true;
    for j in 0..net.width() {
        if bn_states[j].degenerate || wh_states[j].degenerate {
            skipped.push(j);
            units.push(UnitProbe { unit: j, relative_error: None, head_deviation: None, zero_gradient: false });
            continue;
        }
        let gb = unit_gradient(net, &bn_input, &bn_states[j], &bn_res, j, beta, reg, root);
        let gw = unit_gradient(&twin, &wh_input, &wh_states[j], &wh_res, j, beta, reg, root);
        let mapped: Vec<T> = svd.v.t_matvec(&gb.w).iter().zip(&svd.sigma).map(|(&g, &s)| s * g).collect();
        let target: Vec<T> = gw.w.iter().zip(&svd.sigma).map(|(&g, &s)| s * s * g).collect();

        let (dz, ..) = head_gradient(
            &wh_states[j],
            &wh_res,
            twin.w2.row(j),
            twin.hidden.gamma[j],
            twin.hidden.alpha[j],
            beta,
            root,
            twin.arch,
        );
        let lift = twin.hidden.gamma[j] * wh_states[j].kappa / wh_states[j].nu;
        let dh: Vec<T> = dz.iter().map(|&v| lift * v).collect();
        let raw: Vec<T> = svd.u.t_matvec(&dh).iter().zip(&svd.sigma).map(|(&g, &s)| s * s * g).collect();
        let reference = norm2(&raw);
        let floor = T::epsilon() * T::from_count(64 * (n + svd.rank)) * reference;
        let zero_gradient = norm2(&mapped).max(norm2(&target)) <= floor;
        let relative_error = if zero_gradient && reference > T::zero() {
            let diff: Vec<T> = mapped.iter().zip(&target).map(|(&a, &b)| a - b).collect();
            norm2(&diff) / reference
        } else {
            relative_gap(&mapped, &target)
        };

        let shared = unit_gradient(&twin, &wh_input, &bn_states[j], &bn_res, j, beta, reg, root);
        bitwise &= shared.gamma.same_bits(gb.gamma)
            && shared.alpha.same_bits(gb.alpha)
            && shared.w2.iter().zip(&gb.w2).all(|(a, b)| a.same_bits(*b));

        let head = |g: &UnitGradient<T>| {
            let mut v = vec![g.gamma, g.alpha];
            v.extend_from_slice(&g.w2);
            v
        };
        units.push(UnitProbe {
            unit: j,
            relative_error: Some(relative_error),
            head_deviation: Some(relative_gap(&head(&gb), &head(&gw))),
            zero_gradient,
        });
    }
    let worst = |f: fn(&UnitProbe<T>) -> Option<T>| units.iter().filter_map(f).fold(T::zero(), T::max);
    Ok(GradientIdentityReport {
        max_relative_error: worst(|u| u.relative_error),
        max_head_deviation: worst(|u| u.head_deviation),
        units,
        skipped,
        head_bitwise_equal: bitwise,
    })
}

/// Cosine between the projections of two weight matrices onto each right
/// singular direction of the data, in descending-sigma order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DirectionSimilarityReport<T> {
    pub sigma: Vec<T>,
    /// `None` where either projected row is numerically zero.
    pub cosine: Vec<Option<T>>,
}

impl<T: Real> DirectionSimilarityReport<T> {
    /// Mean cosine of the low-sigma half minus that of the high-sigma half
    /// (the middle direction of an odd count is left out). Positive values
    /// mean the high-sigma directions moved further from their start.
    pub fn trend(&self) -> Option<T> {
        let r = self.cosine.len();
        if r < 2 {
            return None;
        }
        let mean = |vals: &[Option<T>]| {
            let defined: Vec<T> = vals.iter().flatten().copied().collect();
            if defined.is_empty() {
                None
            } else {
                Some(defined.iter().copied().sum::<T>() / T::from_count(defined.len()))
            }
        };
        let half = r / 2;
        Some(mean(&self.cosine[r - half..])? - mean(&self.cosine[..half])?)
    }

    /// Columns `direction,sigma,cosine`; undefined cosines are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["direction", "sigma", "cosine"])?;
        for (i, (s, c)) in self.sigma.iter().zip(&self.cosine).enumerate() {
            let c = c.map(|c| c.to_string()).unwrap_or_default();
            w.write_record([(i + 1).to_string(), s.to_string(), c])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn singular_direction_similarity<T: Real>(
    w_now: &DenseMatrix<T>,
    w_init: &DenseMatrix<T>,
    svd: &CompactSvd<T>,
) -> Result<DirectionSimilarityReport<T>> {
    if w_now.shape() != w_init.shape() || w_now.rows() != svd.v.rows() {
        return Err(Error::Dimension(format!(
            "weights {:?} and {:?} against {} input features",
            w_now.shape(),
            w_init.shape(),
            svd.v.rows()
        )));
    }
    let a = svd.v.t_matmul(w_now);
    let b = svd.v.t_matmul(w_init);
    let floor = T::epsilon() * T::lit(64.0);
    let cosine = (0..svd.rank)
        .map(|i| {
            let (p, q) = (a.row(i), b.row(i));
            let (np, nq) = (norm2(p), norm2(q));
            let scale = w_now.frobenius_norm().max(w_init.frobenius_norm());
            if np <= floor * scale || nq <= floor * scale {
                None
            } else {
                Some((dot(p, q) / (np * nq)).max(-T::one()).min(T::one()))
            }
        })
        .collect();
    Ok(DirectionSimilarityReport { sigma: svd.sigma.clone(), cosine })
}

/// Full-batch GD on a pre-BN network with the direction similarity between
/// the trained and the initial input weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TrainingProbe<T> {
    pub similarity: DirectionSimilarityReport<T>,
    pub trend: Option<T>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub network: BnNetwork<T>,
}

pub fn training_direction_probe<T: Real>(
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    net: &BnNetwork<T>,
    cfg: &TrainConfig,
) -> Result<TrainingProbe<T>> {
    let svd = compact_svd(&center(x)?, T::lit(DEFAULT_RANK_TOL))?;
    let log = train_gd(net, &NetInput::Dense(x.clone()), y, cfg).map_err(|e| match e {
        TrainError::Divergence { epoch, last } => Error::Divergence { epoch, last_objective: last.final_objective() },
        TrainError::Failed(e) => e,
    })?;
    let similarity = singular_direction_similarity(&log.network.hidden.w, &net.hidden.w, &svd)?;
    Ok(TrainingProbe {
        trend: similarity.trend(),
        similarity,
        initial_objective: log.initial_objective,
        final_objective: log.final_objective(),
        network: log.network,
    })
}

trait BitsEq {
    fn same_bits(self, other: Self) -> bool;
}

impl<T: Real> BitsEq for T {
    fn same_bits(self, other: Self) -> bool {
        self.to_f64().map(f64::to_bits) == other.to_f64().map(f64::to_bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::whitened_basis;
    use crate::rng::Prng;

    type M = DenseMatrix<f64>;

    fn random(rows: usize, cols: usize, rng: &mut Prng) -> M {
        M::from_fn(rows, cols, |_, _| rng.gaussian())
    }

    #[test]
    fn truncation_rule_validation() {
        assert!(TruncationSpec::rank(0).validate().is_err());
        assert!(TruncationSpec::variance(0.0).validate().is_err());
        assert!(TruncationSpec::variance(1.5).validate().is_err());
        assert!(TruncationSpec::default().validate().is_err());
        assert!(TruncationSpec { k: Some(1), variance_target: Some(0.5) }.validate().is_err());
        assert!(TruncationSpec::variance(1.0).validate().is_ok());
    }

    #[test]
    fn cumulative_energy_rule() {
        let sigma = [3.0, 1.0];
        assert_eq!(select_rank(&sigma, &TruncationSpec::variance(0.95)).unwrap(), 2);
        assert_eq!(select_rank(&sigma, &TruncationSpec::variance(0.9)).unwrap(), 1);
        assert_eq!(select_rank(&sigma, &TruncationSpec::variance(0.5)).unwrap(), 1);
        assert!(select_rank(&sigma, &TruncationSpec::rank(3)).is_err());
    }

    #[test]
    fn two_value_tail() {
        // Centered columns with orthogonal directions of norm 3 and 1.
        let s = 1.0 / 2f64.sqrt();
        let x = M::from_f64_rows(&[&[3.0 * s, 0.0], &[-3.0 * s, 0.0], &[0.0, s], &[0.0, -s]]).unwrap();
        let t = truncate_with_report(&x, &TruncationSpec::rank(1)).unwrap();
        assert!((t.sigma[0] - 3.0).abs() < 1e-12 && (t.sigma[1] - 1.0).abs() < 1e-12);
        let resid = center(&x).unwrap().sub(&center(&t.data).unwrap()).frobenius_norm();
        assert!((resid - 1.0).abs() < 1e-12);
        assert!((t.explained - 0.9).abs() < 1e-12);
    }

    #[test]
    fn full_rank_round_trip_keeps_means() {
        let mut rng = Prng::new(3);
        let x = random(7, 4, &mut rng).add(&M::from_fn(7, 4, |_, j| j as f64 * 5.0));
        let back = truncate_data(&x, &TruncationSpec::rank(4)).unwrap();
        assert!(back.sub(&x).max_abs() < 1e-10);
        let low = truncate_data(&x, &TruncationSpec::rank(2)).unwrap();
        for (a, b) in low.column_means().iter().zip(x.column_means()) {
            assert!((a - b).abs() < 1e-12);
        }
        let svd = compact_svd(&center(&low).unwrap(), 1e-8).unwrap();
        assert_eq!(svd.rank, 2);
    }

    #[test]
    fn identity_on_whitened_data() {
        let mut rng = Prng::new(5);
        let raw = random(10, 3, &mut rng);
        let (basis, _) = whitened_basis(&raw, 1e-10).unwrap();
        let x = basis.u_prime.clone();
        let svd = compact_svd(&center(&x).unwrap(), 1e-10).unwrap();
        assert!(svd.sigma.iter().all(|s| (s - 1.0).abs() < 1e-10));
        let y = random(10, 1, &mut rng);
        let net = BnNetwork::init(x.cols(), 4, 1, Arch::FcPreBn, 8);
        let report = gradient_identity_probe(&x, &y, &net, 0.1).unwrap();
        assert!(report.max_relative_error < 1e-12, "{}", report.max_relative_error);
        assert!(report.head_bitwise_equal);
    }

    #[test]
    fn identity_on_random_data() {
        for seed in 0..10 {
            let mut rng = Prng::new(seed);
            let x = random(12, 5, &mut rng);
            let y = random(12, 2, &mut rng);
            let net = BnNetwork::init(5, 6, 2, Arch::FcPreBn, seed + 1);
            let r = gradient_identity_probe(&x, &y, &net, 0.05).unwrap();
            assert!(r.max_relative_error < 1e-10, "seed {seed}: {}", r.max_relative_error);
            assert!(r.head_bitwise_equal);
            assert!(r.max_head_deviation < 1e-10);
            assert!(r.skipped.is_empty());
        }
    }

    #[test]
    fn rank_one_data_has_zero_input_gradient() {
        let mut rng = Prng::new(21);
        let x = random(9, 1, &mut rng);
        let y = random(9, 1, &mut rng);
        let net = BnNetwork::init(1, 4, 1, Arch::FcPreBn, 8);
        let r = gradient_identity_probe(&x, &y, &net, 0.05).unwrap();
        assert!(r.units.iter().all(|u| u.zero_gradient));
        assert!(r.max_relative_error < 1e-12);
        let wide = gradient_identity_probe(&random(9, 3, &mut rng), &y, &BnNetwork::init(3, 4, 1, Arch::FcPreBn, 8), 0.05)
            .unwrap();
        assert!(wide.units.iter().all(|u| !u.zero_gradient));
    }

    #[test]
    fn degenerate_units_are_skipped() {
        let x = M::from_f64_rows(&[&[1.0, 2.0], &[1.0, 3.0], &[1.0, 4.0]]).unwrap();
        let mut net = BnNetwork::<f64>::init(2, 2, 1, Arch::FcPreBn, 3);
        net.hidden.w.set_column(0, &[1.0, 0.0]);
        let r = gradient_identity_probe(&x, &M::zeros(3, 1), &net, 0.1).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert!(r.units[0].relative_error.is_none());
        assert!(r.units[1].relative_error.is_some());
        let post = BnNetwork::<f64>::init(2, 2, 1, Arch::FcPostBn, 3);
        assert!(gradient_identity_probe(&x, &M::zeros(3, 1), &post, 0.1).is_err());
    }

    #[test]
    fn similarity_examples() {
        let mut rng = Prng::new(9);
        let x = random(8, 4, &mut rng);
        let svd = compact_svd(&center(&x).unwrap(), 1e-10).unwrap();
        let w = random(4, 3, &mut rng);
        let same = singular_direction_similarity(&w, &w, &svd).unwrap();
        assert!(same.cosine.iter().all(|c| (c.unwrap() - 1.0).abs() < 1e-12));
        let flip = singular_direction_similarity(&w.scale(-1.0), &w, &svd).unwrap();
        assert!(flip.cosine.iter().all(|c| (c.unwrap() + 1.0).abs() < 1e-12));
        let v1 = svd.v.column(0);
        let bump = M::from_fn(4, 3, |i, j| w[(i, j)] + v1[i] * (j as f64 + 0.5));
        let local = singular_direction_similarity(&bump, &w, &svd).unwrap();
        assert!(local.cosine[1..].iter().all(|c| (c.unwrap() - 1.0).abs() < 1e-12));
        assert!(local.cosine[0].unwrap() < 1.0);
    }

    #[test]
    fn similarity_flags_zero_rows() {
        let mut rng = Prng::new(11);
        let x = random(6, 3, &mut rng);
        let svd = compact_svd(&center(&x).unwrap(), 1e-10).unwrap();
        let v1 = svd.v.column(0);
        let w = M::from_fn(3, 2, |i, j| v1[i] * (1.0 + j as f64));
        let r = singular_direction_similarity(&w, &w, &svd).unwrap();
        assert!(r.cosine[0].is_some());
        assert!(r.cosine[1].is_none() && r.cosine[2].is_none());
        assert!(singular_direction_similarity(&M::zeros(4, 2), &M::zeros(4, 2), &svd).is_err());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("direction,sigma,cosine\n1,"));
        assert!(text.lines().nth(2).unwrap().ends_with(','));
    }

    #[test]
    fn trend_statistic() {
        let r: DirectionSimilarityReport<f64> = DirectionSimilarityReport { sigma: vec![3.0, 2.0, 1.0], cosine: vec![Some(0.2), Some(0.5), Some(0.9)] };
        assert!((r.trend().unwrap() - 0.7).abs() < 1e-15);
        let single = DirectionSimilarityReport { sigma: vec![1.0], cosine: vec![Some(1.0)] };
        assert!(single.trend().is_none());
    }

    #[test]
    fn training_probe_runs() {
        let mut rng = Prng::new(13);
        let x = random(16, 4, &mut rng).scale_cols(&[4.0, 2.0, 1.0, 0.5]);
        let y = random(16, 1, &mut rng);
        let net = BnNetwork::init(4, 8, 1, Arch::FcPreBn, 2);
        let cfg = TrainConfig { lr: 0.02, epochs: 200, beta: 1e-3, ..TrainConfig::default() };
        let p = training_direction_probe(&x, &y, &net, &cfg).unwrap();
        assert_eq!(p.similarity.cosine.len(), 4);
        assert!(p.final_objective < p.initial_objective);
        assert!(p.trend.is_some());
    }
}
