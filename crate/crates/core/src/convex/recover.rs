use super::program::ConvexProgram;
use super::solver::{convex_objective, ConvexSolution};
use crate::error::{Error, Result};
use crate::linalg::vector::norm2;
use crate::linalg::DenseMatrix;
use crate::network::{BnLayerParams, BnNetwork};
use crate::scalar::Real;

/// Largest violation accepted by [`recover_network`], relative to the
/// solution norm.
pub const RECOVERY_TOL: f64 = 1e-6;

struct Unit<T> {
    w: Vec<T>,
    gamma: T,
    alpha: T,
    out: T,
}

fn unit_from_block<T: Real>(lift: &DenseMatrix<T>, s: &[T], sign: T) -> Option<Unit<T>> {
    let total = norm2(s);
    if total == T::zero() {
        return None;
    }
    let p = s.len();
    let lead = &s[..p - 1];
    let lead_norm = norm2(lead);
    let root = total.sqrt();
    let (w, gamma) = if lead_norm <= T::lit(1e-12) * total {
        (lift.column(0), T::zero())
    } else {
        (lift.matvec(lead), lead_norm / root)
    };
    Some(Unit { w, gamma, alpha: s[p - 1] / root, out: sign * root })
}

/// Maps a feasible solution to hidden units with `gamma^2 + alpha^2 = 1`
/// scaled so that the network objective equals the convex objective: one
/// unit per nonzero `s_i` (positive output weight) and per nonzero `s_i'`
/// (negative output weight).
pub fn recover_network<T: Real>(prog: &ConvexProgram<T>, sol: &ConvexSolution<T>) -> Result<BnNetwork<T>> {
    let (_, violation) = convex_objective(prog, sol)?;
    let size = sol
        .s
        .iter()
        .chain(&sol.s_prime)
        .map(|v| norm2(v))
        .fold(T::one(), T::max);
    if violation > T::lit(RECOVERY_TOL) * size {
        return Err(Error::Infeasible { violation: violation.as_f64() });
    }
    let mut units = Vec::new();
    for (block, (s, sp)) in prog.blocks.iter().zip(sol.s.iter().zip(&sol.s_prime)) {
        units.extend(unit_from_block(&block.lift, s, T::one()));
        units.extend(unit_from_block(&block.lift, sp, -T::one()));
    }
    let arch = prog.variant.arch();
    if units.is_empty() {
        return Ok(BnNetwork::empty(prog.fan_in, 1, arch));
    }
    let m = units.len();
    let w = DenseMatrix::from_columns(prog.fan_in, &units.iter().map(|u| u.w.clone()).collect::<Vec<_>>());
    let hidden = BnLayerParams::new(
        w,
        units.iter().map(|u| u.gamma).collect(),
        units.iter().map(|u| u.alpha).collect(),
    )?;
    let w2 = DenseMatrix::from_vec(m, 1, units.iter().map(|u| u.out).collect())?;
    BnNetwork::new(hidden, w2, arch)
}
