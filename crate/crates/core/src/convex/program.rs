use serde::{Deserialize, Serialize};

use crate::arrangements::{enumerate_arrangements, sample_arrangements, ArrangementSet};
use crate::error::{Error, Result};
use crate::linalg::{append_constant, center, compact_svd, whitened_basis, DenseMatrix, DEFAULT_RANK_TOL};
use crate::network::Arch;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FcScalar,
    Cnn,
    PostBn,
}

impl Variant {
    /// Architecture of the network a solution maps back to.
    pub fn arch(self) -> Arch {
        match self {
            Variant::FcScalar => Arch::FcPreBn,
            Variant::Cnn => Arch::Cnn,
            Variant::PostBn => Arch::FcPostBn,
        }
    }
}

/// How activation patterns are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ArrangementStrategy {
    Exact,
    Sample { count: usize, seed: u64 },
}

/// One activation pattern of the program. Both variables `s_i`, `s_i'`
/// of the pattern live in `R^p` with `p = design.cols()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ProgramBlock<T> {
    pub mask: Vec<bool>,
    /// `n x p`; the block contributes `design (s_i - s_i')` to the prediction.
    pub design: DenseMatrix<T>,
    /// Cone constraint `constraint s >= 0` for both variables.
    pub constraint: DenseMatrix<T>,
    /// `fan_in x (p - 1)` map from leading coordinates to hidden weights.
    pub lift: DenseMatrix<T>,
}

impl<T: Real> ProgramBlock<T> {
    pub fn dim(&self) -> usize {
        self.design.cols()
    }
}

/// `min 1/2 |sum_i G_i (s_i - s_i') - y|^2 + beta sum_i (|s_i| + |s_i'|)`
/// subject to `K_i s_i >= 0`, `K_i s_i' >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ConvexProgram<T> {
    pub variant: Variant,
    pub blocks: Vec<ProgramBlock<T>>,
    pub y: Vec<T>,
    pub beta: T,
    pub fan_in: usize,
    /// Number of patch matrices (1 outside the convolutional variant).
    pub patches: usize,
    /// Rank of the centered data (`r`, or `r_c` for patches).
    pub rank: usize,
    /// Whether the patterns were enumerated exhaustively.
    pub exhaustive: bool,
}

impl<T: Real> ConvexProgram<T> {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn arrangements(&self) -> usize {
        self.blocks.len()
    }
}

fn check_targets<T: Real>(n: usize, y: &[T], beta: T) -> Result<()> {
    if y.len() != n {
        return Err(Error::Dimension(format!("{} targets for {n} samples", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("targets must be finite".into()));
    }
    if !(beta > T::zero()) || !beta.is_finite() {
        return Err(Error::Argument("beta must be positive".into()));
    }
    Ok(())
}

fn signs(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&on| if on { 1.0 } else { -1.0 }).collect()
}

fn indicator(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&on| if on { 1.0 } else { 0.0 }).collect()
}

fn lit_vec<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn arrangements_on<T: Real>(m: &DenseMatrix<T>, strategy: ArrangementStrategy) -> Result<ArrangementSet<T>> {
    match strategy {
        ArrangementStrategy::Exact => enumerate_arrangements(m),
        ArrangementStrategy::Sample { count, seed } => sample_arrangements(m, count, seed),
    }
}

/// Patterns of `U' s` over the whitened basis of `x`.
pub fn fc_arrangements<T: Real>(x: &DenseMatrix<T>, strategy: ArrangementStrategy) -> Result<ArrangementSet<T>> {
    let (wb, _) = whitened_basis(x, T::lit(DEFAULT_RANK_TOL))?;
    arrangements_on(&wb.u_prime, strategy)
}

/// Patterns of `U'_M s` over the whitened stacked patch matrix (`n K` rows).
pub fn cnn_arrangements<T: Real>(
    patches: &[DenseMatrix<T>],
    strategy: ArrangementStrategy,
) -> Result<ArrangementSet<T>> {
    let m = stack_patches(patches)?;
    let (wb, _) = whitened_basis(&m, T::lit(DEFAULT_RANK_TOL))?;
    arrangements_on(&wb.u_prime, strategy)
}

/// Patterns of `X w` on the raw data, used by the BN-after-ReLU program.
pub fn postbn_arrangements<T: Real>(x: &DenseMatrix<T>, strategy: ArrangementStrategy) -> Result<ArrangementSet<T>> {
    arrangements_on(x, strategy)
}

fn stack_patches<T: Real>(patches: &[DenseMatrix<T>]) -> Result<DenseMatrix<T>> {
    if patches.is_empty() {
        return Err(Error::Dimension("no patch matrices".into()));
    }
    if patches.iter().any(|p| p.shape() != patches[0].shape()) {
        return Err(Error::Dimension("patch matrices differ in shape".into()));
    }
    DenseMatrix::vstack(patches)
}

/// Fully connected program: blocks `D_i U'` with cones `(2 D_i - I) U' s >= 0`.
/// `arr` must hold witnesses in the coordinates of `U'` (see
/// [`fc_arrangements`]); masks are recomputed from them.
pub fn build_fc_program<T: Real>(
    x: &DenseMatrix<T>,
    y: &[T],
    beta: T,
    arr: &ArrangementSet<T>,
) -> Result<ConvexProgram<T>> {
    check_targets(x.rows(), y, beta)?;
    let (wb, svd) = whitened_basis(x, T::lit(DEFAULT_RANK_TOL))?;
    let arr = arr.rederive(&wb.u_prime)?;
    let lift = svd.v_sigma_inv();
    let blocks = arr
        .arrangements
        .iter()
        .map(|a| ProgramBlock {
            mask: a.mask.clone(),
            design: wb.u_prime.scale_rows(&lit_vec(&indicator(&a.mask))),
            constraint: wb.u_prime.scale_rows(&lit_vec(&signs(&a.mask))),
            lift: lift.clone(),
        })
        .collect();
    Ok(ConvexProgram {
        variant: Variant::FcScalar,
        blocks,
        y: y.to_vec(),
        beta,
        fan_in: x.cols(),
        patches: 1,
        rank: svd.rank,
        exhaustive: arr.exhaustive,
    })
}

/// Convolutional program over `M = [X_1; ...; X_K]`: blocks
/// `sum_k D_ik U'_Mk` with cones `(2 D_ik - I) U'_Mk s >= 0` for every `k`.
pub fn build_cnn_program<T: Real>(
    patches: &[DenseMatrix<T>],
    y: &[T],
    beta: T,
    arr: &ArrangementSet<T>,
) -> Result<ConvexProgram<T>> {
    let m = stack_patches(patches)?;
    let n = patches[0].rows();
    let k = patches.len();
    check_targets(n, y, beta)?;
    let (wb, svd) = whitened_basis(&m, T::lit(DEFAULT_RANK_TOL))?;
    let arr = arr.rederive(&wb.u_prime)?;
    let lift = svd.v_sigma_inv();
    let p = wb.u_prime.cols();
    let blocks = arr
        .arrangements
        .iter()
        .map(|a| {
            let masked = wb.u_prime.scale_rows(&lit_vec(&indicator(&a.mask)));
            let design = DenseMatrix::from_fn(n, p, |i, j| (0..k).map(|b| masked[(b * n + i, j)]).sum());
            ProgramBlock {
                mask: a.mask.clone(),
                design,
                constraint: wb.u_prime.scale_rows(&lit_vec(&signs(&a.mask))),
                lift: lift.clone(),
            }
        })
        .collect();
    Ok(ConvexProgram {
        variant: Variant::Cnn,
        blocks,
        y: y.to_vec(),
        beta,
        fan_in: m.cols(),
        patches: k,
        rank: svd.rank,
        exhaustive: arr.exhaustive,
    })
}

/// BN-after-ReLU program: per pattern the whitened basis `U'_i` of the
/// centered `D_i X`, with cones `(2 D_i - I) X V_i S_i^{-1} s_{1:r_i} >= 0`
/// on the leading coordinates. Patterns whose `D_i X` centers to zero are
/// dropped.
pub fn build_postbn_program<T: Real>(
    x: &DenseMatrix<T>,
    y: &[T],
    beta: T,
    arr: &ArrangementSet<T>,
) -> Result<ConvexProgram<T>> {
    check_targets(x.rows(), y, beta)?;
    let arr = arr.rederive(x)?;
    let rank = compact_svd(&center(x)?, T::lit(DEFAULT_RANK_TOL))?.rank;
    let mut blocks = Vec::new();
    for a in &arr.arrangements {
        if !a.mask.iter().any(|&on| on) {
            continue;
        }
        let dx = x.scale_rows(&lit_vec(&indicator(&a.mask)));
        let c = center(&dx)?;
        if c.frobenius_norm() <= T::lit(64.0) * T::epsilon() * dx.frobenius_norm() {
            continue;
        }
        let svd = compact_svd(&c, T::lit(DEFAULT_RANK_TOL))?;
        if svd.rank == 0 {
            continue;
        }
        let wb = append_constant(&svd.u);
        let lift = svd.v_sigma_inv();
        let lead = x.scale_rows(&lit_vec(&signs(&a.mask))).matmul(&lift);
        let zero = DenseMatrix::zeros(x.rows(), 1);
        blocks.push(ProgramBlock {
            mask: a.mask.clone(),
            design: wb.u_prime,
            constraint: DenseMatrix::hstack(&[lead, zero])?,
            lift,
        });
    }
    Ok(ConvexProgram {
        variant: Variant::PostBn,
        blocks,
        y: y.to_vec(),
        beta,
        fan_in: x.cols(),
        patches: 1,
        rank,
        exhaustive: arr.exhaustive,
    })
}
