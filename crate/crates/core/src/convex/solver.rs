use serde::{Deserialize, Serialize};

use super::program::ConvexProgram;
use crate::error::{Error, Result};
use crate::linalg::vector::{dot, norm2};
use crate::linalg::{nnls, DenseMatrix};
use crate::scalar::Real;

/// Penalty applied to the cone violation `(-K s)_+`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `rho/2 |(-K s)_+|^2`, optionally shifted by multiplier estimates.
    #[default]
    SquaredHinge,
    /// `rho 1^T (-K s)_+`, smoothed on a band of width `1e-3 |y| / rho_k`
    /// for schedule entry `rho_k`.
    LinearHinge,
}

fn default_schedule() -> Vec<f64> {
    vec![1.0, 10.0, 100.0, 1000.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Penalty weights, multiplied by `|y|^2 / n`.
    pub rho_schedule: Vec<f64>,
    /// Iteration cap of one proximal-gradient stage.
    pub max_iters: usize,
    /// Target for the largest cone violation before the final projection.
    pub tolerance: f64,
    /// A stage stops once a step, or the objective decrease over 50
    /// iterations, falls below this relative size.
    pub inner_tolerance: f64,
    /// Extra stages at the last penalty weight when still infeasible.
    pub max_extra_stages: usize,
    /// Step shrink factor of the backtracking line search.
    pub backtrack: f64,
    pub penalty: PenaltyKind,
    /// Shift the squared hinge by multiplier estimates between stages.
    pub augmented: bool,
    /// Finish with the exact Euclidean projection of every block onto its cone.
    pub project: bool,
    /// Trace sampling period in iterations.
    pub trace_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho_schedule: default_schedule(),
            max_iters: 5000,
            tolerance: 1e-9,
            inner_tolerance: 1e-12,
            max_extra_stages: 40,
            backtrack: 0.5,
            penalty: PenaltyKind::SquaredHinge,
            augmented: true,
            project: true,
            trace_every: 25,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho_schedule.is_empty() || self.rho_schedule.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("rho_schedule needs positive finite entries".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::Config("backtrack must lie in (0, 1)".into()));
        }
        if self.max_iters == 0 || self.trace_every == 0 {
            return Err(Error::Config("max_iters and trace_every must be positive".into()));
        }
        if !(self.tolerance >= 0.0) || !(self.inner_tolerance >= 0.0) {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub stage: usize,
    pub rho: f64,
    /// Loss plus group penalty (no constraint penalty).
    pub objective: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
    pub warnings: Vec<String>,
    pub iterations: usize,
    pub stages: usize,
    /// Largest cone violation right before the final projection.
    pub violation_before_projection: f64,
}

impl SolverTrace {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iter", "objective", "violation", "rho", "stage"])?;
        for r in &self.rows {
            out.write_record([
                r.iter.to_string(),
                format!("{:e}", r.objective),
                format!("{:e}", r.violation),
                format!("{:e}", r.rho),
                r.stage.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ConvexSolution<T> {
    pub s: Vec<Vec<T>>,
    pub s_prime: Vec<Vec<T>>,
    pub objective: T,
    pub max_violation: T,
    pub trace: SolverTrace,
}

impl<T: Real> ConvexSolution<T> {
    pub fn zeros(prog: &ConvexProgram<T>) -> Self {
        let z: Vec<Vec<T>> = prog.blocks.iter().map(|b| vec![T::zero(); b.dim()]).collect();
        let (objective, max_violation) = evaluate(prog, &interleave(&z, &z));
        Self { s: z.clone(), s_prime: z, objective, max_violation, trace: SolverTrace::default() }
    }

    /// Indices of blocks with a nonzero `s_i` (first) or `s_i'` (second).
    pub fn active_blocks(&self) -> (Vec<usize>, Vec<usize>) {
        let pick = |v: &[Vec<T>]| {
            v.iter()
                .enumerate()
                .filter(|(_, s)| s.iter().any(|&x| x != T::zero()))
                .map(|(i, _)| i)
                .collect()
        };
        (pick(&self.s), pick(&self.s_prime))
    }
}

/// Variables in solver order: `s_0, s_0', s_1, s_1', ...`.
type Vars<T> = Vec<Vec<T>>;

fn interleave<T: Real>(s: &[Vec<T>], sp: &[Vec<T>]) -> Vars<T> {
    s.iter().zip(sp).flat_map(|(a, b)| [a.clone(), b.clone()]).collect()
}

fn sign<T: Real>(k: usize) -> T {
    if k.is_multiple_of(2) {
        T::one()
    } else {
        -T::one()
    }
}

fn constraint<T: Real>(prog: &ConvexProgram<T>, k: usize) -> &DenseMatrix<T> {
    &prog.blocks[k / 2].constraint
}

fn predict<T: Real>(prog: &ConvexProgram<T>, x: &Vars<T>) -> Vec<T> {
    let mut f = vec![T::zero(); prog.n()];
    for (k, v) in x.iter().enumerate() {
        if v.iter().all(|&e| e == T::zero()) {
            continue;
        }
        let g = prog.blocks[k / 2].design.matvec(v);
        let sg = sign::<T>(k);
        f.iter_mut().zip(g).for_each(|(fi, gi)| *fi = *fi + sg * gi);
    }
    f
}

fn violation<T: Real>(prog: &ConvexProgram<T>, x: &Vars<T>) -> T {
    x.iter()
        .enumerate()
        .flat_map(|(k, v)| constraint(prog, k).matvec(v))
        .fold(T::zero(), |m, c| if -c > m { -c } else { m })
}

/// Objective and largest cone violation of the interleaved variables.
fn evaluate<T: Real>(prog: &ConvexProgram<T>, x: &Vars<T>) -> (T, T) {
    let f = predict(prog, x);
    let r: Vec<T> = f.iter().zip(&prog.y).map(|(&a, &b)| a - b).collect();
    let group: T = x.iter().map(|v| norm2(v)).sum();
    (T::lit(0.5) * dot(&r, &r) + prog.beta * group, violation(prog, x))
}

/// Objective `1/2 |sum G_i (s_i - s_i') - y|^2 + beta sum (|s_i| + |s_i'|)`
/// and the largest cone violation (0 when feasible).
pub fn convex_objective<T: Real>(prog: &ConvexProgram<T>, sol: &ConvexSolution<T>) -> Result<(T, T)> {
    if sol.s.len() != prog.blocks.len() || sol.s_prime.len() != prog.blocks.len() {
        return Err(Error::Dimension("solution and program have different block counts".into()));
    }
    for (b, (s, sp)) in prog.blocks.iter().zip(sol.s.iter().zip(&sol.s_prime)) {
        if s.len() != b.dim() || sp.len() != b.dim() {
            return Err(Error::Dimension("block variable has the wrong length".into()));
        }
    }
    Ok(evaluate(prog, &interleave(&sol.s, &sol.s_prime)))
}

struct Smooth<'a, T> {
    prog: &'a ConvexProgram<T>,
    rho: T,
    lambda: &'a [Vec<T>],
    kind: PenaltyKind,
    delta: T,
}

impl<T: Real> Smooth<'_, T> {
    fn value(&self, x: &Vars<T>) -> T {
        let f = predict(self.prog, x);
        let r: Vec<T> = f.iter().zip(&self.prog.y).map(|(&a, &b)| a - b).collect();
        let mut v = T::lit(0.5) * dot(&r, &r);
        for (k, xk) in x.iter().enumerate() {
            let ks = constraint(self.prog, k).matvec(xk);
            v = v + self.penalty(&ks, &self.lambda[k]);
        }
        v
    }

    fn penalty(&self, ks: &[T], lambda: &[T]) -> T {
        let half = T::lit(0.5);
        match self.kind {
            PenaltyKind::SquaredHinge => {
                let s: T = ks
                    .iter()
                    .zip(lambda)
                    .map(|(&c, &l)| {
                        let t = (l - self.rho * c).relu();
                        t * t
                    })
                    .sum();
                half * s / self.rho
            }
            PenaltyKind::LinearHinge => {
                let d = self.delta;
                ks.iter()
                    .map(|&c| {
                        let t = -c;
                        if t <= T::zero() {
                            T::zero()
                        } else if t <= d {
                            self.rho * t * t * half / d
                        } else {
                            self.rho * (t - half * d)
                        }
                    })
                    .sum()
            }
        }
    }

    fn value_and_grad(&self, x: &Vars<T>) -> (T, Vars<T>) {
        let f = predict(self.prog, x);
        let r: Vec<T> = f.iter().zip(&self.prog.y).map(|(&a, &b)| a - b).collect();
        let mut v = T::lit(0.5) * dot(&r, &r);
        let mut grads = Vec::with_capacity(x.len());
        for (k, xk) in x.iter().enumerate() {
            let block = &self.prog.blocks[k / 2];
            let kmat = &block.constraint;
            let ks = kmat.matvec(xk);
            v = v + self.penalty(&ks, &self.lambda[k]);
            let mut g = block.design.t_matvec(&r);
            let sg = sign::<T>(k);
            g.iter_mut().for_each(|e| *e = *e * sg);
            let weights: Vec<T> = match self.kind {
                PenaltyKind::SquaredHinge => ks
                    .iter()
                    .zip(&self.lambda[k])
                    .map(|(&c, &l)| -(l - self.rho * c).relu())
                    .collect(),
                PenaltyKind::LinearHinge => ks
                    .iter()
                    .map(|&c| -self.rho * (-c / self.delta).max(T::zero()).min(T::one()))
                    .collect(),
            };
            let pg = kmat.t_matvec(&weights);
            g.iter_mut().zip(pg).for_each(|(a, b)| *a = *a + b);
            grads.push(g);
        }
        (v, grads)
    }
}

fn group_prox<T: Real>(v: &mut [T], thresh: T) {
    let nrm = norm2(v);
    let factor = if nrm > thresh { T::one() - thresh / nrm } else { T::zero() };
    v.iter_mut().for_each(|e| *e = *e * factor);
}

fn group_norms<T: Real>(x: &Vars<T>) -> T {
    x.iter().map(|v| norm2(v)).sum()
}

fn flat_dist<T: Real>(a: &Vars<T>, b: &Vars<T>) -> T {
    a.iter()
        .zip(b)
        .map(|(u, v)| u.iter().zip(v).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>())
        .sum::<T>()
        .sqrt()
}

fn flat_norm<T: Real>(a: &Vars<T>) -> T {
    a.iter().map(|v| dot(v, v)).sum::<T>().sqrt()
}

/// Iterations between checks of the penalized-objective decrease.
const STALL_WINDOW: usize = 50;

struct StageOutcome {
    iterations: usize,
    start: f64,
    end: f64,
}

#[allow(clippy::too_many_arguments)]
fn fista_stage<T: Real>(
    smooth: &Smooth<'_, T>,
    cfg: &SolverConfig,
    x: &mut Vars<T>,
    step: &mut T,
    iter_base: usize,
    stage: usize,
    trace: &mut SolverTrace,
) -> Result<StageOutcome> {
    let beta = smooth.prog.beta;
    let penalized = |v: &Vars<T>, s: T| s + beta * group_norms(v);
    let mut y = x.clone();
    let mut theta = T::one();
    let mut current = penalized(x, smooth.value(x));
    let start = current.as_f64();
    let shrink = T::lit(cfg.backtrack);
    let grow = T::lit(1.25);
    let mut iters = 0;
    let mut checkpoint = current;
    for it in 0..cfg.max_iters {
        iters = it + 1;
        let (fy, gy) = smooth.value_and_grad(&y);
        if !fy.is_finite() {
            return Err(Error::Numerical("penalty solver produced a non-finite objective".into()));
        }
        let mut t = *step * grow;
        let (x_new, f_new) = loop {
            let mut cand: Vars<T> = y
                .iter()
                .zip(&gy)
                .map(|(yv, gv)| yv.iter().zip(gv).map(|(&a, &b)| a - t * b).collect())
                .collect();
            cand.iter_mut().for_each(|v| group_prox(v, beta * t));
            let f_c = smooth.value(&cand);
            let mut lin = T::zero();
            let mut sq = T::zero();
            for ((c, yv), gv) in cand.iter().zip(&y).zip(&gy) {
                for ((&ci, &yi), &gi) in c.iter().zip(yv).zip(gv) {
                    let d = ci - yi;
                    lin = lin + gi * d;
                    sq = sq + d * d;
                }
            }
            let bound = fy + lin + sq / (T::lit(2.0) * t);
            let slack = T::lit(1e-12) * (T::one() + fy.abs());
            if f_c <= bound + slack {
                break (cand, f_c);
            }
            t = t * shrink;
            if t < T::lit(1e-30) {
                return Err(Error::Numerical("backtracking step collapsed".into()));
            }
        };
        *step = t;
        let total = penalized(&x_new, f_new);
        if !total.is_finite() {
            return Err(Error::Numerical("penalty solver produced a non-finite objective".into()));
        }
        let moved = flat_dist(&x_new, x);
        let scale = flat_norm(&x_new).max(T::one());
        if total > current {
            // Restart the momentum from the last iterate.
            theta = T::one();
            y = x_new.clone();
        } else {
            let theta_next = (T::one() + (T::one() + T::lit(4.0) * theta * theta).sqrt()) / T::lit(2.0);
            let mom = (theta - T::one()) / theta_next;
            y = x_new
                .iter()
                .zip(x.iter())
                .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p + mom * (p - q)).collect())
                .collect();
            theta = theta_next;
        }
        *x = x_new;
        current = total;
        let global = iter_base + iters;
        if global.is_multiple_of(cfg.trace_every) {
            let (obj, viol) = evaluate(smooth.prog, x);
            trace.rows.push(TraceRow {
                iter: global,
                stage,
                rho: smooth.rho.as_f64(),
                objective: obj.as_f64(),
                violation: viol.as_f64(),
            });
        }
        if moved <= T::lit(cfg.inner_tolerance) * scale {
            break;
        }
        if iters % STALL_WINDOW == 0 {
            if checkpoint - current <= T::lit(cfg.inner_tolerance) * (T::one() + current.abs()) {
                break;
            }
            checkpoint = current;
        }
    }
    Ok(StageOutcome { iterations: iters, start, end: current.as_f64() })
}

/// Accelerated proximal gradient on the penalized program with penalty
/// continuation, followed by an exact projection of every block onto its
/// cone.
pub fn solve_penalty<T: Real>(prog: &ConvexProgram<T>, cfg: &SolverConfig) -> Result<ConvexSolution<T>> {
    cfg.validate()?;
    let n = prog.n().max(1);
    let y_sq = dot(&prog.y, &prog.y);
    let scale = if y_sq > T::zero() { y_sq / T::from_count(n) } else { T::one() };
    let mut x: Vars<T> = prog
        .blocks
        .iter()
        .flat_map(|b| [vec![T::zero(); b.dim()], vec![T::zero(); b.dim()]])
        .collect();
    let mut lambda: Vec<Vec<T>> = prog
        .blocks
        .iter()
        .flat_map(|b| [vec![T::zero(); b.constraint.rows()], vec![T::zero(); b.constraint.rows()]])
        .collect();
    let y_norm = y_sq.sqrt().max(T::min_positive_value());
    let use_shift = cfg.augmented && cfg.penalty == PenaltyKind::SquaredHinge;

    let mut trace = SolverTrace::default();
    let mut step = T::one();
    let mut iter_base = 0;
    let tol = T::lit(cfg.tolerance);
    let last_rho = *cfg.rho_schedule.last().expect("validated non-empty");

    let stages = cfg.rho_schedule.len() + cfg.max_extra_stages;
    for stage in 0..stages {
        let extra = stage >= cfg.rho_schedule.len();
        if extra && violation(prog, &x) <= tol {
            break;
        }
        let mult = if extra { last_rho } else { cfg.rho_schedule[stage] };
        let rho = T::lit(mult) * scale;
        let delta = T::lit(1e-3 / mult) * y_norm;
        let smooth = Smooth { prog, rho, lambda: &lambda, kind: cfg.penalty, delta };
        let outcome = fista_stage(&smooth, cfg, &mut x, &mut step, iter_base, stage, &mut trace)?;
        iter_base += outcome.iterations;
        trace.stages = stage + 1;
        if outcome.iterations > 1 && outcome.end >= outcome.start && outcome.start > 0.0 {
            trace
                .warnings
                .push(format!("stage {stage}: penalized objective did not decrease (stagnation)"));
        }
        if use_shift {
            for (k, xk) in x.iter().enumerate() {
                let ks = constraint(prog, k).matvec(xk);
                for (l, c) in lambda[k].iter_mut().zip(ks) {
                    *l = (*l - rho * c).relu();
                }
            }
        }
        let (obj, viol) = evaluate(prog, &x);
        trace.rows.push(TraceRow {
            iter: iter_base,
            stage,
            rho: rho.as_f64(),
            objective: obj.as_f64(),
            violation: viol.as_f64(),
        });
    }
    trace.iterations = iter_base;
    let before = violation(prog, &x);
    trace.violation_before_projection = before.as_f64();
    if before > tol {
        trace.warnings.push(format!(
            "feasibility tolerance {:e} not reached (violation {:e})",
            cfg.tolerance,
            before.as_f64()
        ));
    }
    if cfg.project {
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = project_onto_cone(constraint(prog, k), xk)?;
        }
    }
    let (objective, max_violation) = evaluate(prog, &x);
    let (s, s_prime): (Vec<_>, Vec<_>) = x.chunks(2).map(|p| (p[0].clone(), p[1].clone())).unzip();
    Ok(ConvexSolution { s, s_prime, objective, max_violation, trace })
}

/// Euclidean projection onto `{s : K s >= 0}`: `s0 + K^T lambda` with
/// `lambda = argmin_{lambda >= 0} |s0 + K^T lambda|`.
pub fn project_onto_cone<T: Real>(k: &DenseMatrix<T>, s0: &[T]) -> Result<Vec<T>> {
    let ks = k.matvec(s0);
    if ks.iter().all(|&c| c >= T::zero()) {
        return Ok(s0.to_vec());
    }
    let neg: Vec<T> = s0.iter().map(|&v| -v).collect();
    let sol = nnls(&k.transpose(), &neg)?;
    let shift = k.t_matvec(&sol.x);
    Ok(s0.iter().zip(shift).map(|(&a, b)| a + b).collect())
}
