use serde::{Deserialize, Serialize};

use super::forward::{forward_input, predict_with_stats, BnScale, BnStats, NetInput, Regularization};
use super::grad::gradients_with_states;
use super::params::BnNetwork;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::Prng;
use crate::scalar::Real;

fn default_bn_momentum() -> f64 {
    0.1
}

/// Gradient-descent settings. `batch_size = None` means full batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Weight of the newest batch in the running BN statistics.
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    /// Heavy-ball coefficient; 0 is plain gradient descent.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub regularization: Regularization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            lr: 1e-2,
            epochs: 100,
            batch_size: None,
            seed: 0,
            bn_momentum: default_bn_momentum(),
            momentum: 0.0,
            regularization: Regularization::Head,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad("beta must be a finite non-negative number");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TrainLog<T> {
    pub initial_objective: f64,
    pub records: Vec<EpochRecord>,
    pub network: BnNetwork<T>,
    pub stats: BnStats<T>,
    /// `(epoch, unit)` pairs of units re-drawn after their direction collapsed.
    pub reinitialized: Vec<(usize, usize)>,
}

impl<T: Real> TrainLog<T> {
    pub fn final_objective(&self) -> f64 {
        self.records.last().map_or(self.initial_objective, |r| r.objective)
    }
}

#[derive(Debug)]
pub enum TrainError<T> {
    /// The objective stopped being finite; `last` holds the final finite state.
    Divergence { epoch: usize, last: Box<TrainLog<T>> },
    Failed(Error),
}

impl<T> From<Error> for TrainError<T> {
    fn from(e: Error) -> Self {
        TrainError::Failed(e)
    }
}

impl<T: Real> From<TrainError<T>> for Error {
    fn from(e: TrainError<T>) -> Self {
        match e {
            TrainError::Divergence { epoch, last } => Error::Divergence {
                epoch,
                last_objective: last.final_objective(),
            },
            TrainError::Failed(e) => e,
        }
    }
}

impl<T: Real> std::fmt::Display for TrainError<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Divergence { epoch, last } => write!(
                f,
                "training diverged at epoch {epoch} (last finite objective {:e})",
                last.final_objective()
            ),
            TrainError::Failed(e) => write!(f, "{e}"),
        }
    }
}

impl<T: Real> std::error::Error for TrainError<T> {}

/// Held-out data scored after every epoch.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a, T> {
    pub input: &'a NetInput<T>,
    pub y: &'a DenseMatrix<T>,
}

fn accuracy<T: Real>(pred: &DenseMatrix<T>, y: &DenseMatrix<T>) -> f64 {
    if pred.rows() == 0 {
        return 0.0;
    }
    let argmax = |row: &[T]| {
        row.iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let hits = (0..pred.rows())
        .filter(|&i| {
            if pred.cols() == 1 {
                (pred[(i, 0)] >= T::zero()) == (y[(i, 0)] >= T::zero())
            } else {
                argmax(pred.row(i)) == argmax(y.row(i))
            }
        })
        .count();
    hits as f64 / pred.rows() as f64
}

fn squared_error<T: Real>(pred: &DenseMatrix<T>, y: &DenseMatrix<T>) -> f64 {
    let r = pred.sub(y);
    0.5 * r.as_slice().iter().map(|v| v.as_f64().powi(2)).sum::<f64>()
}

/// Gradient descent on the regularized objective. Deterministic for a
/// fixed seed; mini-batches come from a seeded shuffle per epoch.
pub fn train_gd<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    y: &DenseMatrix<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog<T>, TrainError<T>> {
    train_gd_eval(net, input, y, cfg, None)
}

pub fn train_gd_eval<T: Real>(
    net: &BnNetwork<T>,
    input: &NetInput<T>,
    y: &DenseMatrix<T>,
    cfg: &TrainConfig,
    eval: Option<EvalSet<'_, T>>,
) -> Result<TrainLog<T>, TrainError<T>> {
    cfg.validate()?;
    let n = input.rows();
    if y.rows() != n {
        return Err(Error::Dimension("label rows do not match the input".into()).into());
    }
    let batch = cfg.batch_size.unwrap_or(n).min(n).max(1);
    let full = batch == n;
    let beta = T::lit(cfg.beta);
    let lr = T::lit(cfg.lr);
    let mu = T::lit(cfg.momentum);
    let scale = BnScale { n_ref: n };
    let mut rng = Prng::derive(cfg.seed, 1);

    let mut net = net.clone();
    let mut velocity: Option<[Vec<T>; 4]> = None;
    let mut stats: Option<BnStats<T>> = None;
    let mut reinitialized = Vec::new();

    type Evaluation = (f64, f64, Option<(f64, f64)>);
    let evaluate = |net: &BnNetwork<T>, stats: &BnStats<T>| -> Result<Evaluation> {
        let f = forward_input(net, input)?.output;
        let loss = squared_error(&f, y);
        let mut obj = loss + cfg.beta * net.head_regularizer().as_f64();
        if cfg.regularization == Regularization::Full {
            obj += 0.5 * cfg.beta * net.hidden.w.as_slice().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
        }
        let test = match eval {
            Some(ev) => {
                let p = predict_with_stats(net, ev.input, stats)?;
                Some((squared_error(&p, ev.y), accuracy(&p, ev.y)))
            }
            None => None,
        };
        Ok((obj, loss, test))
    };

    let initial_stats = {
        let states = super::forward::forward_states(&net, input, scale)?;
        BnStats::from_states(net.arch, &states, n)
    };
    let initial_objective = evaluate(&net, &initial_stats)?.0;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut last_stats = initial_stats;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if !full {
            rng.shuffle(&mut order);
        }
        let prev = net.clone();
        for chunk in order.chunks(batch) {
            let sub;
            let (bx, by) = if full {
                (input, y)
            } else {
                sub = (input.select_rows(chunk), y.select_rows(chunk));
                (&sub.0, &sub.1)
            };
            let mut attempts = 0;
            let (grads, _, states) = loop {
                match gradients_with_states(&net, bx, by, beta, cfg.regularization, scale) {
                    Ok(out) => break out,
                    Err(Error::DegenerateDirection { unit }) if attempts <= net.width() => {
                        attempts += 1;
                        net.hidden.reinit_unit(unit, &mut rng);
                        reinitialized.push((epoch, unit));
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            let batch_stats = BnStats::from_states(net.arch, &states, n);
            stats = Some(match stats.take() {
                Some(run) if !full => blend(run, &batch_stats, T::lit(cfg.bn_momentum)),
                _ => batch_stats,
            });

            let steps = [
                grads.w.into_vec(),
                grads.gamma,
                grads.alpha,
                grads.w2.into_vec(),
            ];
            let steps = match velocity.as_mut() {
                Some(v) => {
                    for (vk, gk) in v.iter_mut().zip(&steps) {
                        for (a, &g) in vk.iter_mut().zip(gk) {
                            *a = mu * *a + g;
                        }
                    }
                    v.clone()
                }
                None if cfg.momentum > 0.0 => {
                    velocity = Some(steps.clone());
                    steps
                }
                None => steps,
            };
            apply_step(&mut net, &steps, lr);
        }

        let run_stats = if full {
            let states = super::forward::forward_states(&net, input, scale)?;
            BnStats::from_states(net.arch, &states, n)
        } else {
            stats.clone().expect("at least one batch per epoch")
        };
        let (objective, train_loss, test) = evaluate(&net, &run_stats)?;
        if !objective.is_finite() || net.hidden.w.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Divergence {
                epoch,
                last: Box::new(TrainLog {
                    initial_objective,
                    records,
                    network: prev,
                    stats: last_stats,
                    reinitialized,
                }),
            });
        }
        records.push(EpochRecord {
            epoch,
            objective,
            train_loss,
            test_loss: test.map(|t| t.0),
            test_accuracy: test.map(|t| t.1),
        });
        last_stats = run_stats;
    }
    Ok(TrainLog { initial_objective, records, network: net, stats: last_stats, reinitialized })
}

fn blend<T: Real>(run: BnStats<T>, batch: &BnStats<T>, m: T) -> BnStats<T> {
    let mix = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| (T::one() - m) * x + m * y).collect();
    BnStats { mean: mix(&run.mean, &batch.mean), std: mix(&run.std, &batch.std), n_ref: run.n_ref }
}

fn apply_step<T: Real>(net: &mut BnNetwork<T>, steps: &[Vec<T>; 4], lr: T) {
    let (rows, cols) = net.hidden.w.shape();
    let w: Vec<T> = net.hidden.w.as_slice().iter().zip(&steps[0]).map(|(&p, &g)| p - lr * g).collect();
    net.hidden.w = DenseMatrix::from_raw(rows, cols, w);
    for (p, &g) in net.hidden.gamma.iter_mut().zip(&steps[1]) {
        *p = *p - lr * g;
    }
    for (p, &g) in net.hidden.alpha.iter_mut().zip(&steps[2]) {
        *p = *p - lr * g;
    }
    let (rows, cols) = net.w2.shape();
    let w2: Vec<T> = net.w2.as_slice().iter().zip(&steps[3]).map(|(&p, &g)| p - lr * g).collect();
    net.w2 = DenseMatrix::from_raw(rows, cols, w2);
}
