use serde::{Deserialize, Serialize};

use super::params::{Arch, BnNetwork, DeepBnNetwork};
use crate::error::{Error, Result};
use crate::linalg::vector::{centered, dot, norm2, relu};
use crate::linalg::DenseMatrix;
use crate::scalar::Real;

/// Data fed to a two-layer network: a dense design matrix, or the `K`
/// patch matrices of a convolutional model (all `n x h`).
#[derive(Debug, Clone, PartialEq)]
pub enum NetInput<T> {
    Dense(DenseMatrix<T>),
    Patches(Vec<DenseMatrix<T>>),
}

impl<T: Real> NetInput<T> {
    pub fn rows(&self) -> usize {
        match self {
            NetInput::Dense(x) => x.rows(),
            NetInput::Patches(p) => p.first().map_or(0, DenseMatrix::rows),
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            NetInput::Dense(x) => x.cols(),
            NetInput::Patches(p) => p.first().map_or(0, DenseMatrix::cols),
        }
    }

    /// Number of blocks whose rows share one normalization (1 for dense input).
    pub fn blocks(&self) -> usize {
        match self {
            NetInput::Dense(_) => 1,
            NetInput::Patches(p) => p.len(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        match self {
            NetInput::Dense(x) => NetInput::Dense(x.select_rows(idx)),
            NetInput::Patches(p) => NetInput::Patches(p.iter().map(|x| x.select_rows(idx)).collect()),
        }
    }

    fn check(&self, arch: Arch, fan_in: usize) -> Result<()> {
        match (self, arch) {
            (NetInput::Patches(_), Arch::Cnn) => {}
            (NetInput::Dense(_), Arch::Cnn) => {
                return Err(Error::Argument("cnn networks take patch matrices".into()))
            }
            (NetInput::Patches(_), _) => {
                return Err(Error::Argument("patch input needs a cnn network".into()))
            }
            _ => {}
        }
        if let NetInput::Patches(p) = self {
            if p.is_empty() {
                return Err(Error::Dimension("no patch matrices".into()));
            }
            if p.iter().any(|x| x.shape() != p[0].shape()) {
                return Err(Error::Dimension("patch matrices differ in shape".into()));
            }
        }
        if self.fan_in() != fan_in {
            return Err(Error::Dimension(format!(
                "input has {} features, network expects {fan_in}",
                self.fan_in()
            )));
        }
        Ok(())
    }

    /// Pre-activations of one hidden direction, patches stacked row-wise.
    fn project(&self, w: &[T]) -> Vec<T> {
        match self {
            NetInput::Dense(x) => x.matvec(w),
            NetInput::Patches(p) => p.iter().flat_map(|x| x.matvec(w)).collect(),
        }
    }

    /// Adjoint of [`NetInput::project`].
    pub(crate) fn project_adjoint(&self, g: &[T]) -> Vec<T> {
        match self {
            NetInput::Dense(x) => x.t_matvec(g),
            NetInput::Patches(p) => {
                let n = self.rows();
                let mut out = vec![T::zero(); self.fan_in()];
                for (k, x) in p.iter().enumerate() {
                    let part = x.t_matvec(&g[k * n..(k + 1) * n]);
                    out.iter_mut().zip(part).for_each(|(o, v)| *o = *o + v);
                }
                out
            }
        }
    }
}

/// Forward quantities of one hidden unit. Vectors of length `n K` stack
/// the patches (`K = 1` for dense input).
#[derive(Debug, Clone)]
pub(crate) struct UnitState<T> {
    /// `X w` (or `U q` for the whitened model)
    pub pre: Vec<T>,
    /// Unit-norm centered direction entering BN
    pub h: Vec<T>,
    /// Normalizer `|centered direction|` (or `|q|`)
    pub nu: T,
    /// BN output
    pub z: Vec<T>,
    /// Length-`n` activation multiplied by the output weights
    pub act: Vec<T>,
    /// Factor applied to `gamma h`; 1 in full batch.
    pub kappa: T,
    pub degenerate: bool,
}

/// Sample count the BN shift `alpha / sqrt(n)` refers to. In full batch it
/// equals the batch size; mini-batches keep the full training size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BnScale {
    pub n_ref: usize,
}

pub(crate) fn is_degenerate<T: Real>(nu: T, scale: T) -> bool {
    !(nu > T::lit(64.0) * T::epsilon() * scale)
}

pub(crate) fn unit_state<T: Real>(
    arch: Arch,
    input: &NetInput<T>,
    w: &[T],
    gamma: T,
    alpha: T,
    scale: BnScale,
) -> UnitState<T> {
    let n = input.rows();
    let blocks = input.blocks();
    let pre = input.project(w);
    let total = pre.len();
    let shift = alpha / T::from_count(scale.n_ref * blocks).sqrt();
    let kappa = (T::from_count(n) / T::from_count(scale.n_ref)).sqrt();

    let (normalized_source, nu, src_scale) = match arch {
        Arch::Whitened => {
            let nu = norm2(w);
            (pre.clone(), nu, nu)
        }
        Arch::FcPostBn => {
            let r = relu(&pre);
            let c = centered(&r);
            let s = norm2(&r);
            (c.clone(), norm2(&c), s)
        }
        Arch::FcPreBn | Arch::Cnn => {
            let c = centered(&pre);
            (c.clone(), norm2(&c), norm2(&pre))
        }
    };
    let degenerate = is_degenerate(nu, src_scale);
    let h: Vec<T> = if degenerate {
        vec![T::zero(); total]
    } else {
        normalized_source.iter().map(|&v| v / nu).collect()
    };
    let z: Vec<T> = h.iter().map(|&hi| gamma * kappa * hi + shift).collect();
    let act = match arch {
        Arch::FcPostBn => z.clone(),
        Arch::FcPreBn | Arch::Whitened => relu(&z),
        Arch::Cnn => {
            let mut a = vec![T::zero(); n];
            for k in 0..blocks {
                for (ai, &zi) in a.iter_mut().zip(&z[k * n..(k + 1) * n]) {
                    *ai = *ai + zi.relu();
                }
            }
            a
        }
    };
    UnitState {
        pre,
        h,
        nu,
        z,
        act,
        kappa,
        degenerate: degenerate && gamma != T::zero(),
    }
}

/// Full-batch BN of one direction: `gamma c / |c| + alpha 1 / sqrt(n)` with
/// `c` the centered `a w`. With `gamma = 0` the normalizer is not needed.
pub fn bn_apply<T: Real>(a: &DenseMatrix<T>, w: &[T], gamma: T, alpha: T) -> Result<Vec<T>> {
    if w.len() != a.cols() {
        return Err(Error::Dimension("weight length does not match the input columns".into()));
    }
    let s = unit_state(
        Arch::FcPreBn,
        &NetInput::Dense(a.clone()),
        w,
        gamma,
        alpha,
        BnScale { n_ref: a.rows() },
    );
    if s.degenerate {
        return Err(Error::DegenerateDirection { unit: 0 });
    }
    Ok(s.z)
}

/// Convolutional BN: one mean and one normalizer shared by all patches,
/// shift `alpha / sqrt(n K)`. Returns the per-patch outputs.
pub fn bn_apply_cnn<T: Real>(
    patches: &[DenseMatrix<T>],
    z: &[T],
    gamma: T,
    alpha: T,
) -> Result<Vec<Vec<T>>> {
    let input = NetInput::Patches(patches.to_vec());
    input.check(Arch::Cnn, z.len())?;
    let n = input.rows();
    let s = unit_state(Arch::Cnn, &input, z, gamma, alpha, BnScale { n_ref: n });
    if s.degenerate {
        return Err(Error::DegenerateDirection { unit: 0 });
    }
    Ok(s.z.chunks(n).map(<[T]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardReport<T> {
    pub output: DenseMatrix<T>,
    /// Units whose normalizer vanished; their contribution is zero.
    pub degenerate_units: Vec<usize>,
}

pub(crate) fn forward_states<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    scale: BnScale,
) -> Result<Vec<UnitState<T>>> {
    input.check(net.arch, net.hidden.fan_in())?;
    Ok((0..net.width())
        .map(|j| {
            unit_state(
                net.arch,
                input,
                &net.unit_weights(j),
                net.hidden.gamma[j],
                net.hidden.alpha[j],
                scale,
            )
        })
        .collect())
}

pub(crate) fn combine<T: Real>(net: &BnNetwork<T>, n: usize, states: &[UnitState<T>]) -> ForwardReport<T> {
    let mut out = DenseMatrix::zeros(n, net.outputs());
    let mut degenerate_units = Vec::new();
    for (j, s) in states.iter().enumerate() {
        if s.degenerate {
            degenerate_units.push(j);
            continue;
        }
        let w2 = net.w2.row(j);
        for (i, &a) in s.act.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            for (o, &w) in out.row_mut(i).iter_mut().zip(w2) {
                *o = *o + a * w;
            }
        }
    }
    ForwardReport { output: out, degenerate_units }
}

/// Forward pass with degenerate units reported and zeroed.
pub fn forward_input<T: Real>(net: &BnNetwork<T>, input: &NetInput<T>) -> Result<ForwardReport<T>> {
    let n = input.rows();
    let states = forward_states(net, input, BnScale { n_ref: n })?;
    Ok(combine(net, n, &states))
}

/// Network output on dense input (`X`, or `U` for the whitened model).
pub fn forward<T: Real>(net: &BnNetwork<T>, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    Ok(forward_input(net, &NetInput::Dense(x.clone()))?.output)
}

/// Network output of a convolutional model.
pub fn forward_patches<T: Real>(net: &BnNetwork<T>, patches: &[DenseMatrix<T>]) -> Result<DenseMatrix<T>> {
    Ok(forward_input(net, &NetInput::Patches(patches.to_vec()))?.output)
}

/// Loss seam: only the squared loss is implemented.
pub trait Loss<T: Real> {
    fn value(&self, prediction: &DenseMatrix<T>, target: &DenseMatrix<T>) -> T;
    /// Derivative with respect to the prediction.
    fn gradient(&self, prediction: &DenseMatrix<T>, target: &DenseMatrix<T>) -> DenseMatrix<T>;
}

/// `1/2 |F - Y|_F^2`
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredLoss;

impl<T: Real> Loss<T> for SquaredLoss {
    fn value(&self, prediction: &DenseMatrix<T>, target: &DenseMatrix<T>) -> T {
        let r = prediction.sub(target);
        T::lit(0.5) * dot(r.as_slice(), r.as_slice())
    }

    fn gradient(&self, prediction: &DenseMatrix<T>, target: &DenseMatrix<T>) -> DenseMatrix<T> {
        prediction.sub(target)
    }
}

/// Which weights the weight decay touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// BN scale, shift and output weights.
    #[default]
    Head,
    /// Also the hidden weights.
    Full,
}

/// `1/2 |f - Y|^2 + beta/2 sum_j (gamma_j^2 + alpha_j^2 + |w2_j|^2)`,
/// plus `beta/2 |W|^2` under [`Regularization::Full`].
pub fn objective_input<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    y: &DenseMatrix<T>,
    beta: T,
    reg: Regularization,
) -> Result<T> {
    let f = forward_input(net, input)?.output;
    if f.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "targets are {}x{}, predictions {}x{}",
            y.rows(),
            y.cols(),
            f.rows(),
            f.cols()
        )));
    }
    let mut value = SquaredLoss.value(&f, y) + beta * net.head_regularizer();
    if reg == Regularization::Full {
        let w = net.hidden.w.as_slice();
        value = value + T::lit(0.5) * beta * dot(w, w);
    }
    Ok(value)
}

pub fn objective<T: Real>(net: &BnNetwork<T>, x: &DenseMatrix<T>, y: &DenseMatrix<T>, beta: T) -> Result<T> {
    objective_input(net, &NetInput::Dense(x.clone()), y, beta, Regularization::Head)
}

/// Running BN statistics of the pre-activation (post-activation for
/// `fc_post_bn`) of every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    /// Training-set size used in the shift `alpha / sqrt(n)`.
    pub n_ref: usize,
}

impl<T: Real> BnStats<T> {
    pub(crate) fn from_states(arch: Arch, states: &[UnitState<T>], n_ref: usize) -> Self {
        let mut mean = Vec::with_capacity(states.len());
        let mut std = Vec::with_capacity(states.len());
        for s in states {
            let src = if arch == Arch::FcPostBn { relu(&s.pre) } else { s.pre.clone() };
            let m = crate::linalg::vector::mean(&src);
            let c = centered(&src);
            mean.push(m);
            std.push(norm2(&c) / T::from_count(src.len().max(1)).sqrt());
        }
        Self { mean, std, n_ref }
    }
}

/// Inference with stored statistics:
/// `(gamma (a - mean) / std + alpha) / sqrt(n_ref K)` per unit.
pub fn predict_with_stats<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    stats: &BnStats<T>,
) -> Result<DenseMatrix<T>> {
    input.check(net.arch, net.hidden.fan_in())?;
    if stats.mean.len() != net.width() || stats.std.len() != net.width() {
        return Err(Error::Dimension("statistics do not match the network width".into()));
    }
    if net.arch == Arch::Whitened {
        return Err(Error::Argument("the whitened model has no running statistics".into()));
    }
    let n = input.rows();
    let blocks = input.blocks();
    let root = T::from_count(stats.n_ref * blocks).sqrt();
    let mut states = Vec::with_capacity(net.width());
    for j in 0..net.width() {
        let pre = input.project(&net.unit_weights(j));
        let src = if net.arch == Arch::FcPostBn { relu(&pre) } else { pre.clone() };
        let sd = stats.std[j];
        let degenerate = !(sd > T::zero());
        let (g, a) = (net.hidden.gamma[j], net.hidden.alpha[j]);
        let z: Vec<T> = src
            .iter()
            .map(|&v| {
                let normed = if degenerate { T::zero() } else { (v - stats.mean[j]) / sd };
                (g * normed + a) / root
            })
            .collect();
        let act = match net.arch {
            Arch::FcPostBn => z.clone(),
            Arch::Cnn => (0..n)
                .map(|i| (0..blocks).map(|k| z[k * n + i].relu()).sum())
                .collect(),
            _ => relu(&z),
        };
        states.push(UnitState {
            pre,
            h: Vec::new(),
            nu: sd,
            z,
            act,
            kappa: T::one(),
            degenerate: degenerate && g != T::zero(),
        });
    }
    Ok(combine(net, n, &states).output)
}

/// `A^{(upto)}` of a deep BN-ReLU stack; `A^{(0)} = X`. Degenerate units
/// produce a zero column.
pub fn deep_forward_activations<T: Real>(
    net: &DeepBnNetwork<T>,
    x: &DenseMatrix<T>,
    upto: usize,
) -> Result<DenseMatrix<T>> {
    if upto > net.layers.len() {
        return Err(Error::Argument(format!(
            "layer index {upto} exceeds the {} hidden layers",
            net.layers.len()
        )));
    }
    let mut a = x.clone();
    for layer in &net.layers[..upto] {
        if a.cols() != layer.fan_in() {
            return Err(Error::Dimension("activation width does not match the layer".into()));
        }
        let input = NetInput::Dense(a);
        let cols: Vec<Vec<T>> = (0..layer.width())
            .map(|j| {
                let s = unit_state(
                    Arch::FcPreBn,
                    &input,
                    &layer.w.column(j),
                    layer.gamma[j],
                    layer.alpha[j],
                    BnScale { n_ref: input.rows() },
                );
                if s.degenerate {
                    vec![T::zero(); input.rows()]
                } else {
                    s.act
                }
            })
            .collect();
        a = DenseMatrix::from_columns(input.rows(), &cols);
    }
    Ok(a)
}

/// Output of a deep network.
pub fn deep_forward<T: Real>(net: &DeepBnNetwork<T>, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let a = deep_forward_activations(net, x, net.layers.len())?;
    a.try_matmul(&net.w_out)
}
