use serde::{Deserialize, Serialize};

use super::forward::{combine, forward_states, BnScale, Loss, NetInput, Regularization, SquaredLoss, UnitState};
use super::params::{Arch, BnNetwork};
use crate::error::{Error, Result};
use crate::linalg::vector::{centered, dot};
use crate::linalg::DenseMatrix;
use crate::scalar::Real;

/// Gradient of the objective, shaped like the network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Gradients<T> {
    pub w: DenseMatrix<T>,
    pub gamma: Vec<T>,
    pub alpha: Vec<T>,
    pub w2: DenseMatrix<T>,
}

impl<T: Real> Gradients<T> {
    pub fn max_abs(&self) -> T {
        [
            self.w.max_abs(),
            self.w2.max_abs(),
            crate::linalg::vector::max_abs(&self.gamma),
            crate::linalg::vector::max_abs(&self.alpha),
        ]
        .into_iter()
        .fold(T::zero(), T::max)
    }
}

/// Gradient of the scale, shift and output weights of unit `j`. The
/// formula only reads the BN output, its normalized direction and the
/// residual, so two models with the same forward state share it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_gradient<T: Real>(
    s: &UnitState<T>,
    residual: &DenseMatrix<T>,
    w2_row: &[T],
    gamma: T,
    alpha: T,
    beta: T,
    shift_root: T,
    arch: Arch,
) -> (Vec<T>, T, T, Vec<T>) {
    let n = residual.rows();
    let g: Vec<T> = (0..n).map(|i| dot(residual.row(i), w2_row)).collect();
    let blocks = s.z.len() / n.max(1);
    let dz: Vec<T> = s
        .z
        .iter()
        .enumerate()
        .map(|(idx, &z)| {
            let gi = g[idx % n];
            match arch {
                Arch::FcPostBn => gi,
                _ => {
                    if z > T::zero() {
                        gi
                    } else {
                        T::zero()
                    }
                }
            }
        })
        .collect();
    debug_assert_eq!(dz.len(), n * blocks);
    let d_gamma = s.kappa * dot(&dz, &s.h) + beta * gamma;
    let d_alpha = dz.iter().copied().sum::<T>() / shift_root + beta * alpha;
    let d_w2: Vec<T> = (0..residual.cols())
        .map(|c| {
            let col: T = (0..n).map(|i| s.act[i] * residual[(i, c)]).sum();
            col + beta * w2_row[c]
        })
        .collect();
    (dz, d_gamma, d_alpha, d_w2)
}

/// Gradient of one hidden unit.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct UnitGradient<T> {
    pub w: Vec<T>,
    pub gamma: T,
    pub alpha: T,
    pub w2: Vec<T>,
}

/// Gradient of unit `j` given its forward state and the loss residual.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unit_gradient<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    s: &UnitState<T>,
    residual: &DenseMatrix<T>,
    j: usize,
    beta: T,
    reg: Regularization,
    shift_root: T,
) -> UnitGradient<T> {
    let gamma = net.hidden.gamma[j];
    let (dz, d_gamma, d_alpha, d_w2) =
        head_gradient(s, residual, net.w2.row(j), gamma, net.hidden.alpha[j], beta, shift_root, net.arch);
    let dh: Vec<T> = dz.iter().map(|&v| gamma * s.kappa * v).collect();
    let mut dw: Vec<T> = if net.arch == Arch::Whitened {
        let q = net.unit_weights(j);
        let ut_dh = input.project_adjoint(&dh);
        let coef = dot(&q, &ut_dh) / (s.nu * s.nu * s.nu);
        ut_dh
            .iter()
            .zip(&q)
            .map(|(&u, &qi)| u / s.nu - qi * coef)
            .collect()
    } else {
        let proj = dot(&s.h, &dh);
        let dc: Vec<T> = dh
            .iter()
            .zip(&s.h)
            .map(|(&d, &h)| (d - h * proj) / s.nu)
            .collect();
        let mut da = centered(&dc);
        if net.arch == Arch::FcPostBn {
            for (d, &a) in da.iter_mut().zip(&s.pre) {
                if !(a > T::zero()) {
                    *d = T::zero();
                }
            }
        }
        input.project_adjoint(&da)
    };
    if reg == Regularization::Full {
        for (d, &w) in dw.iter_mut().zip(&net.unit_weights(j)) {
            *d = *d + beta * w;
        }
    }
    UnitGradient { w: dw, gamma: d_gamma, alpha: d_alpha, w2: d_w2 }
}

/// Gradient together with the objective at `net`.
pub(crate) fn gradients_with_states<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    y: &DenseMatrix<T>,
    beta: T,
    reg: Regularization,
    scale: BnScale,
) -> Result<(Gradients<T>, T, Vec<UnitState<T>>)> {
    let states = forward_states(net, input, scale)?;
    if let Some(j) = states.iter().position(|s| s.degenerate) {
        return Err(Error::DegenerateDirection { unit: j });
    }
    let n = input.rows();
    let f = combine(net, n, &states).output;
    if f.shape() != y.shape() {
        return Err(Error::Dimension("targets do not match the network output".into()));
    }
    let residual = SquaredLoss.gradient(&f, y);
    let mut value = SquaredLoss.value(&f, y) + beta * net.head_regularizer();
    if reg == Regularization::Full {
        let w = net.hidden.w.as_slice();
        value = value + T::lit(0.5) * beta * dot(w, w);
    }

    let m = net.width();
    let shift_root = T::from_count(scale.n_ref * input.blocks()).sqrt();
    let mut grads = Gradients {
        w: DenseMatrix::zeros(net.hidden.fan_in(), m),
        gamma: vec![T::zero(); m],
        alpha: vec![T::zero(); m],
        w2: DenseMatrix::zeros(m, net.outputs()),
    };
    for (j, s) in states.iter().enumerate() {
        let g = unit_gradient(net, input, s, &residual, j, beta, reg, shift_root);
        grads.gamma[j] = g.gamma;
        grads.alpha[j] = g.alpha;
        grads.w2.row_mut(j).copy_from_slice(&g.w2);
        grads.w.set_column(j, &g.w);
    }
    Ok((grads, value, states))
}

/// Analytic gradient over dense or patch input.
pub fn gradients_input<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    y: &DenseMatrix<T>,
    beta: T,
    reg: Regularization,
) -> Result<Gradients<T>> {
    let scale = BnScale { n_ref: input.rows() };
    Ok(gradients_with_states(net, input, y, beta, reg, scale)?.0)
}

/// Analytic gradient of [`super::objective`] (ReLU derivative at 0 is 0).
pub fn gradients<T: Real>(
    net: &BnNetwork<T>,
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    beta: T,
) -> Result<Gradients<T>> {
    gradients_input(net, &NetInput::Dense(x.clone()), y, beta, Regularization::Head)
}

type Slot<T> = fn(&mut BnNetwork<T>, usize, usize) -> &mut T;

fn w_slot<T>(p: &mut BnNetwork<T>, i: usize, j: usize) -> &mut T {
    &mut p.hidden.w[(i, j)]
}

fn gamma_slot<T>(p: &mut BnNetwork<T>, _: usize, j: usize) -> &mut T {
    &mut p.hidden.gamma[j]
}

fn alpha_slot<T>(p: &mut BnNetwork<T>, _: usize, j: usize) -> &mut T {
    &mut p.hidden.alpha[j]
}

fn w2_slot<T>(p: &mut BnNetwork<T>, j: usize, c: usize) -> &mut T {
    &mut p.w2[(j, c)]
}

/// Central finite-difference gradient of the objective with step `h`.
pub fn numerical_gradients<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    y: &DenseMatrix<T>,
    beta: T,
    reg: Regularization,
    h: T,
) -> Result<Gradients<T>> {
    let mut probe = net.clone();
    let mut diff = |slot: Slot<T>, a: usize, b: usize| -> Result<T> {
        let orig = *slot(&mut probe, a, b);
        *slot(&mut probe, a, b) = orig + h;
        let plus = super::forward::objective_input(&probe, input, y, beta, reg)?;
        *slot(&mut probe, a, b) = orig - h;
        let minus = super::forward::objective_input(&probe, input, y, beta, reg)?;
        *slot(&mut probe, a, b) = orig;
        Ok((plus - minus) / (h + h))
    };
    let (d, m, c) = (net.hidden.fan_in(), net.width(), net.outputs());
    let mut grads = Gradients {
        w: DenseMatrix::zeros(d, m),
        gamma: vec![T::zero(); m],
        alpha: vec![T::zero(); m],
        w2: DenseMatrix::zeros(m, c),
    };
    for j in 0..m {
        for i in 0..d {
            grads.w[(i, j)] = diff(w_slot, i, j)?;
        }
        grads.gamma[j] = diff(gamma_slot, 0, j)?;
        grads.alpha[j] = diff(alpha_slot, 0, j)?;
        for k in 0..c {
            grads.w2[(j, k)] = diff(w2_slot, j, k)?;
        }
    }
    Ok(grads)
}

/// Smallest `|ReLU input|` over all units and samples; finite differences
/// are only meaningful when this is bounded away from zero.
pub fn kink_distance<T: Real>(net: &BnNetwork<T>, input: &NetInput<T>) -> Result<T> {
    let states = forward_states(net, input, BnScale { n_ref: input.rows() })?;
    Ok(states
        .iter()
        .flat_map(|s| match net.arch {
            Arch::FcPostBn => s.pre.clone(),
            _ => s.z.clone(),
        })
        .fold(T::infinity(), |m, v| m.min(v.abs())))
}
