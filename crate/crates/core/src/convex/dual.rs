use serde::{Deserialize, Serialize};

use super::program::{build_cnn_program, build_fc_program, build_postbn_program, ConvexProgram, Variant};
use super::solver::project_onto_cone;
use crate::arrangements::ArrangementSet;
use crate::error::{Error, Result};
use crate::linalg::vector::{dot, norm2};
use crate::network::NetInput;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DualCertificate<T> {
    pub v: Vec<T>,
    /// `-1/2 |v - y|^2 + 1/2 |y|^2`.
    pub dual_objective: T,
    /// `max (norm_i - beta)_+` over patterns and both signs.
    pub max_constraint_excess: T,
    /// Largest constrained norm `max_{s in C_i, |s| <= 1} +-v^T G_i s`.
    pub max_constraint_norm: T,
    /// Set when the patterns were sampled: the excess is then only a lower
    /// bound on the true constraint violation.
    pub lower_bound_only: bool,
}

/// `-1/2 |v - y|^2 + 1/2 |y|^2`.
pub fn dual_objective<T: Real>(v: &[T], y: &[T]) -> T {
    let half = T::lit(0.5);
    let r: Vec<T> = v.iter().zip(y).map(|(&a, &b)| a - b).collect();
    half * dot(y, y) - half * dot(&r, &r)
}

/// Certificate for `v` against the cones of an already built program. The
/// constrained norm of a block is `|P_C(+-G^T v)|` with `C = {s : K s >= 0}`.
pub fn certify_program<T: Real>(prog: &ConvexProgram<T>, v: &[T]) -> Result<DualCertificate<T>> {
    if v.len() != prog.n() {
        return Err(Error::Dimension(format!("dual point has {} entries for {} samples", v.len(), prog.n())));
    }
    if v.iter().any(|e| !e.is_finite()) {
        return Err(Error::Argument("dual point must be finite".into()));
    }
    let mut worst = T::zero();
    for block in &prog.blocks {
        let g = block.design.t_matvec(v);
        let neg: Vec<T> = g.iter().map(|&e| -e).collect();
        for dir in [g, neg] {
            let p = project_onto_cone(&block.constraint, &dir)?;
            worst = worst.max(norm2(&p));
        }
    }
    Ok(DualCertificate {
        v: v.to_vec(),
        dual_objective: dual_objective(v, &prog.y),
        max_constraint_excess: (worst - prog.beta).relu(),
        max_constraint_norm: worst,
        lower_bound_only: !prog.exhaustive,
    })
}

/// Builds the program of `variant` from raw data and certifies `v` against it.
pub fn dual_certificate<T: Real>(
    v: &[T],
    x: &NetInput<T>,
    y: &[T],
    beta: T,
    arr: &ArrangementSet<T>,
    variant: Variant,
) -> Result<DualCertificate<T>> {
    let prog = match (variant, x) {
        (Variant::FcScalar, NetInput::Dense(x)) => build_fc_program(x, y, beta, arr)?,
        (Variant::PostBn, NetInput::Dense(x)) => build_postbn_program(x, y, beta, arr)?,
        (Variant::Cnn, NetInput::Patches(p)) => build_cnn_program(p, y, beta, arr)?,
        (Variant::Cnn, NetInput::Dense(x)) => build_cnn_program(std::slice::from_ref(x), y, beta, arr)?,
        (_, NetInput::Patches(_)) => {
            return Err(Error::Argument("patch input is only meaningful for the cnn program".into()))
        }
    };
    certify_program(&prog, v)
}
