use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CompactSvd, DenseMatrix};
use crate::rng::Prng;
use crate::scalar::Real;

/// Where batch normalization sits and what the hidden weights act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// `ReLU(BN(X w_j))`
    FcPreBn,
    /// `BN(ReLU(X w_j))`
    FcPostBn,
    /// `sum_k ReLU(BN_K(X_k z_j))` over patch matrices `X_k`
    Cnn,
    /// `ReLU(U q_j / |q_j| gamma_j + alpha_j / sqrt(n))`, input is `U`
    Whitened,
}

/// Hidden weights with per-unit BN scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BnLayerParams<T> {
    /// `fan_in x m`, column `j` is unit `j`.
    pub w: DenseMatrix<T>,
    pub gamma: Vec<T>,
    pub alpha: Vec<T>,
}

impl<T: Real> BnLayerParams<T> {
    pub fn new(w: DenseMatrix<T>, gamma: Vec<T>, alpha: Vec<T>) -> Result<Self> {
        let p = Self { w, gamma, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.w.cols();
        if self.gamma.len() != m || self.alpha.len() != m {
            return Err(Error::Dimension(format!(
                "layer has {m} units but {} scales and {} shifts",
                self.gamma.len(),
                self.alpha.len()
            )));
        }
        let finite = self.w.as_slice().iter().chain(&self.gamma).chain(&self.alpha).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Argument("layer parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.w.cols()
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, `gamma = 1`, `alpha = 0`.
    pub fn init(fan_in: usize, width: usize, rng: &mut Prng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = DenseMatrix::from_fn(fan_in, width, |_, _| rng.uniform(-bound, bound));
        Self { w, gamma: vec![T::one(); width], alpha: vec![T::zero(); width] }
    }

    pub(crate) fn reinit_unit(&mut self, j: usize, rng: &mut Prng) {
        let bound = 1.0 / (self.fan_in().max(1) as f64).sqrt();
        for i in 0..self.fan_in() {
            self.w[(i, j)] = rng.uniform(-bound, bound);
        }
        self.gamma[j] = T::one();
        self.alpha[j] = T::zero();
    }
}

/// Two-layer network `f(X) = sum_j act_j(X) w2_j^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BnNetwork<T> {
    pub hidden: BnLayerParams<T>,
    /// `m x C` output weights, row `j` belongs to hidden unit `j`.
    pub w2: DenseMatrix<T>,
    pub arch: Arch,
}

impl<T: Real> BnNetwork<T> {
    pub fn new(hidden: BnLayerParams<T>, w2: DenseMatrix<T>, arch: Arch) -> Result<Self> {
        hidden.validate()?;
        if w2.rows() != hidden.width() {
            return Err(Error::Dimension(format!(
                "output weights have {} rows for {} hidden units",
                w2.rows(),
                hidden.width()
            )));
        }
        if w2.cols() == 0 {
            return Err(Error::Dimension("network needs at least one output".into()));
        }
        Ok(Self { hidden, w2, arch })
    }

    /// Network without hidden units; it predicts zero.
    pub fn empty(fan_in: usize, outputs: usize, arch: Arch) -> Self {
        Self {
            hidden: BnLayerParams {
                w: DenseMatrix::zeros(fan_in, 0),
                gamma: Vec::new(),
                alpha: Vec::new(),
            },
            w2: DenseMatrix::zeros(0, outputs),
            arch,
        }
    }

    /// Random hidden layer (see [`BnLayerParams::init`]) and uniform output
    /// weights in `[-1/sqrt(m), 1/sqrt(m))`.
    pub fn init(fan_in: usize, width: usize, outputs: usize, arch: Arch, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        let hidden = BnLayerParams::init(fan_in, width, &mut rng);
        let bound = 1.0 / (width.max(1) as f64).sqrt();
        let w2 = DenseMatrix::from_fn(width, outputs, |_, _| rng.uniform(-bound, bound));
        Self { hidden, w2, arch }
    }

    pub fn width(&self) -> usize {
        self.hidden.width()
    }

    pub fn outputs(&self) -> usize {
        self.w2.cols()
    }

    pub fn unit_weights(&self, j: usize) -> Vec<T> {
        self.hidden.w.column(j)
    }

    /// `beta/2 * sum_j (gamma_j^2 + alpha_j^2 + |w2_j|^2)` without `beta`.
    pub fn head_regularizer(&self) -> T {
        let half = T::lit(0.5);
        (0..self.width())
            .map(|j| {
                let g = self.hidden.gamma[j];
                let a = self.hidden.alpha[j];
                let w2 = self.w2.row(j).iter().map(|&v| v * v).sum::<T>();
                half * (g * g + a * a + w2)
            })
            .sum()
    }

    /// `sum_j |w2_j| sqrt(gamma_j^2 + alpha_j^2)`, the value the head
    /// regularizer reaches once every unit is balanced.
    pub fn balanced_regularizer(&self) -> T {
        (0..self.width())
            .map(|j| {
                let g = self.hidden.gamma[j];
                let a = self.hidden.alpha[j];
                let w2 = self.w2.row(j).iter().map(|&v| v * v).sum::<T>().sqrt();
                w2 * (g * g + a * a).sqrt()
            })
            .sum()
    }

    /// Keeps only the listed hidden units (in the given order).
    pub fn select_units(&self, units: &[usize]) -> Self {
        Self {
            hidden: BnLayerParams {
                w: self.hidden.w.select_columns(units),
                gamma: units.iter().map(|&j| self.hidden.gamma[j]).collect(),
                alpha: units.iter().map(|&j| self.hidden.alpha[j]).collect(),
            },
            w2: self.w2.select_rows(units),
            arch: self.arch,
        }
    }

    /// Whitened twin with `q_j = S V^T w_j` for the SVD of the centered data.
    pub fn to_whitened(&self, svd: &CompactSvd<T>) -> Result<Self> {
        if self.arch != Arch::FcPreBn {
            return Err(Error::Argument("only fc_pre_bn networks have a whitened twin".into()));
        }
        if svd.v.rows() != self.hidden.fan_in() {
            return Err(Error::Dimension("SVD does not match the hidden fan-in".into()));
        }
        let q = svd.v.t_matmul(&self.hidden.w).scale_rows(&svd.sigma);
        Ok(Self {
            hidden: BnLayerParams { w: q, ..self.hidden.clone() },
            w2: self.w2.clone(),
            arch: Arch::Whitened,
        })
    }
}

/// Unit-wise rescaling `gamma -> eta gamma`, `alpha -> eta alpha`,
/// `w2 -> w2 / eta`, which leaves the network function unchanged.
pub fn rescale_units<T: Real>(net: &BnNetwork<T>, eta: &[T]) -> Result<BnNetwork<T>> {
    if eta.len() != net.width() {
        return Err(Error::Dimension(format!("{} factors for {} units", eta.len(), net.width())));
    }
    if eta.iter().any(|&e| !(e > T::zero()) || !e.is_finite()) {
        return Err(Error::Argument("rescaling factors must be positive and finite".into()));
    }
    let mut out = net.clone();
    for (j, &e) in eta.iter().enumerate() {
        out.hidden.gamma[j] = out.hidden.gamma[j] * e;
        out.hidden.alpha[j] = out.hidden.alpha[j] * e;
        for v in out.w2.row_mut(j) {
            *v = *v / e;
        }
    }
    Ok(out)
}

/// `eta_j = (|w2_j| / sqrt(gamma_j^2 + alpha_j^2))^{1/2}`; units where
/// either side vanishes get `eta_j = 1`.
pub fn balancing_eta<T: Real>(net: &BnNetwork<T>) -> Vec<T> {
    (0..net.width())
        .map(|j| {
            let g = net.hidden.gamma[j];
            let a = net.hidden.alpha[j];
            let head = (g * g + a * a).sqrt();
            let out = net.w2.row(j).iter().map(|&v| v * v).sum::<T>().sqrt();
            if head > T::zero() && out > T::zero() {
                (out / head).sqrt()
            } else {
                T::one()
            }
        })
        .collect()
}

/// Deep stack of BN-ReLU layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DeepBnNetwork<T> {
    pub layers: Vec<BnLayerParams<T>>,
    pub w_out: DenseMatrix<T>,
}

impl<T: Real> DeepBnNetwork<T> {
    pub fn new(layers: Vec<BnLayerParams<T>>, w_out: DenseMatrix<T>) -> Result<Self> {
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].width() != pair[1].fan_in() {
                return Err(Error::Dimension(format!(
                    "layer {l} has {} units but layer {} expects {} inputs",
                    pair[0].width(),
                    l + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for layer in &layers {
            layer.validate()?;
        }
        let last = layers.last().map(BnLayerParams::width);
        if let Some(m) = last {
            if w_out.rows() != m {
                return Err(Error::Dimension("output layer does not match the last width".into()));
            }
        }
        Ok(Self { layers, w_out })
    }

    /// Random stack with the given widths (`widths[0]` is the input dimension).
    pub fn init(widths: &[usize], outputs: usize, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        let layers: Vec<_> = widths
            .windows(2)
            .map(|p| BnLayerParams::init(p[0], p[1], &mut rng))
            .collect();
        let last = *widths.last().expect("at least the input width");
        let bound = 1.0 / (last.max(1) as f64).sqrt();
        let w_out = DenseMatrix::from_fn(last, outputs, |_, _| rng.uniform(-bound, bound));
        Self { layers, w_out }
    }

    /// Number of weight layers `L` (hidden layers plus the output layer).
    pub fn depth(&self) -> usize {
        self.layers.len() + 1
    }
}
