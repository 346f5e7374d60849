use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, Mode};
use super::dataset::Dataset;
use crate::closed_form::{closed_form_postbn, closed_form_scalar, closed_form_vector_onehot, ClosedFormResult};
use crate::convex::{
    build_cnn_program, build_fc_program, build_postbn_program, certify_program, cnn_arrangements,
    convex_objective, fc_arrangements, postbn_arrangements, recover_network, solve_penalty, ConvexProgram,
};
use crate::error::{Error, Result};
use crate::linalg::{center, compact_svd, DenseMatrix, DEFAULT_RANK_TOL};
use crate::network::{
    forward_input, objective_input, train_gd_eval, Arch, BnNetwork, EpochRecord, EvalSet, NetInput,
    Regularization, TrainConfig, TrainError, TrainLog,
};
use crate::probes::{gradient_identity_probe, training_direction_probe, truncate_with_report};
use crate::rng::Prng;

type M = DenseMatrix<f64>;

/// What a finished run left on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    /// File names written inside `out_dir`, in order of creation.
    pub files: Vec<String>,
    pub summary: Value,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
    phases: Vec<(String, f64)>,
    started: Instant,
}

impl Artifacts {
    fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: Vec::new(), phases: Vec::new(), started: Instant::now() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn timed<R>(&mut self, phase: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let t = Instant::now();
        let out = f();
        self.phases.push((phase.to_string(), t.elapsed().as_secs_f64()));
        out
    }

    fn finish_timing(&mut self) -> Result<()> {
        let phases: serde_json::Map<String, Value> =
            self.phases.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let total = self.started.elapsed().as_secs_f64();
        self.json("timing.json", &json!({ "total_seconds": total, "phases": phases }))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn epoch_row(prefix: &str, r: &EpochRecord) -> Vec<String> {
    vec![
        prefix.to_string(),
        r.epoch.to_string(),
        r.objective.to_string(),
        r.train_loss.to_string(),
        opt(r.test_loss),
        opt(r.test_accuracy),
    ]
}

const GD_HEADER: [&str; 5] = ["epoch", "objective", "train_loss", "test_loss", "test_accuracy"];

fn gd_header(first: &'static str) -> Vec<&'static str> {
    std::iter::once(first).chain(GD_HEADER).collect()
}

fn train_error(e: TrainError<f64>) -> Error {
    match e {
        TrainError::Divergence { epoch, last } => Error::Divergence { epoch, last_objective: last.final_objective() },
        TrainError::Failed(e) => e,
    }
}

/// Splits the feature columns into `k` equal contiguous patch blocks.
fn patches_of(x: &M, k: usize) -> Result<Vec<M>> {
    if k == 0 || !x.cols().is_multiple_of(k) {
        return Err(Error::Config(format!("{} features do not split into {k} equal patches", x.cols())));
    }
    let h = x.cols() / k;
    Ok((0..k)
        .map(|b| x.select_columns(&(b * h..(b + 1) * h).collect::<Vec<_>>()))
        .collect())
}

fn input_for(cfg: &ExperimentConfig, x: &M) -> Result<NetInput<f64>> {
    Ok(match cfg.arch {
        Arch::Cnn => NetInput::Patches(patches_of(x, cfg.patches.unwrap_or(1))?),
        _ => NetInput::Dense(x.clone()),
    })
}

/// Training input of the model: the whitened model reads the `U` factor
/// of the centered training data.
fn train_input(cfg: &ExperimentConfig, xtr: &M) -> Result<NetInput<f64>> {
    if cfg.arch != Arch::Whitened {
        return input_for(cfg, xtr);
    }
    Ok(NetInput::Dense(compact_svd(&center(xtr)?, DEFAULT_RANK_TOL)?.u))
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    Prng::derive(seed, restart as u64).next_u64()
}

fn train_restarts(
    cfg: &ExperimentConfig,
    train: &NetInput<f64>,
    y: &M,
    test: Option<(&NetInput<f64>, &M)>,
) -> Result<Vec<TrainLog<f64>>> {
    (0..cfg.restarts)
        .map(|r| {
            let seed = restart_seed(cfg.seed, r);
            let net = BnNetwork::init(train.fan_in(), cfg.width, y.cols(), cfg.arch, seed);
            let tc = TrainConfig { seed, ..cfg.train_config() };
            let eval = test.map(|(input, y)| EvalSet { input, y });
            train_gd_eval(&net, train, y, &tc, eval).map_err(train_error)
        })
        .collect()
}

fn best_log(logs: &[TrainLog<f64>]) -> usize {
    let mut best = 0;
    for (i, l) in logs.iter().enumerate() {
        if l.final_objective() < logs[best].final_objective() {
            best = i;
        }
    }
    best
}

fn log_summary(log: &TrainLog<f64>) -> Value {
    let last = log.records.last();
    json!({
        "initial_objective": log.initial_objective,
        "final_objective": log.final_objective(),
        "train_loss": last.map(|r| r.train_loss),
        "test_loss": last.and_then(|r| r.test_loss),
        "test_accuracy": last.and_then(|r| r.test_accuracy),
        "reinitialized_units": log.reinitialized.len(),
    })
}

fn test_pair(data: &Dataset) -> Option<(M, M)> {
    (!data.split.test.is_empty()).then(|| data.test())
}

fn fit_gd(cfg: &ExperimentConfig, data: &Dataset, art: &mut Artifacts) -> Result<Value> {
    let (xtr, ytr) = data.train();
    let train = train_input(cfg, &xtr)?;
    // The whitened model normalizes with batch statistics only and has no
    // test-time forward.
    let test = if cfg.arch == Arch::Whitened { None } else { test_pair(data) };
    let test_input = test.as_ref().map(|(x, _)| input_for(cfg, x)).transpose()?;
    let eval = test_input.as_ref().zip(test.as_ref().map(|(_, y)| y));
    let logs = art.timed("train", || train_restarts(cfg, &train, &ytr, eval))?;
    let rows: Vec<Vec<String>> = logs
        .iter()
        .enumerate()
        .flat_map(|(r, l)| l.records.iter().map(move |rec| epoch_row(&r.to_string(), rec)))
        .collect();
    art.csv("curves.csv", &gd_header("restart"), &rows)?;
    let best = best_log(&logs);
    art.json("model.json", &json!({ "network": logs[best].network, "bn_stats": logs[best].stats }))?;
    let mut summary = log_summary(&logs[best]);
    summary["best_restart"] = json!(best);
    summary["restart_objectives"] = json!(logs.iter().map(TrainLog::final_objective).collect::<Vec<_>>());
    Ok(summary)
}

fn single_target(y: &M, mode: &str) -> Result<Vec<f64>> {
    if y.cols() != 1 {
        return Err(Error::Config(format!("{mode} needs a single target column, found {}", y.cols())));
    }
    Ok(y.as_slice().to_vec())
}

fn build_program(cfg: &ExperimentConfig, input: &NetInput<f64>, y: &[f64]) -> Result<ConvexProgram<f64>> {
    match (cfg.arch, input) {
        (Arch::FcPreBn, NetInput::Dense(x)) => {
            build_fc_program(x, y, cfg.beta, &fc_arrangements(x, cfg.arrangements)?)
        }
        (Arch::FcPostBn, NetInput::Dense(x)) => {
            build_postbn_program(x, y, cfg.beta, &postbn_arrangements(x, cfg.arrangements)?)
        }
        (Arch::Cnn, NetInput::Patches(p)) => {
            build_cnn_program(p, y, cfg.beta, &cnn_arrangements(p, cfg.arrangements)?)
        }
        _ => Err(Error::Config("fit-convex needs fc_pre_bn, fc_post_bn or cnn".into())),
    }
}

fn fit_convex(cfg: &ExperimentConfig, data: &Dataset, art: &mut Artifacts) -> Result<Value> {
    let (xtr, ytr) = data.train();
    let y = single_target(&ytr, "fit-convex")?;
    let input = input_for(cfg, &xtr)?;
    let prog = art.timed("build", || build_program(cfg, &input, &y))?;
    let sol = art.timed("solve", || solve_penalty(&prog, &cfg.solver))?;
    let mut trace = Vec::new();
    sol.trace.write_csv(&mut trace)?;
    fs::write(art.path("curves.csv"), trace)?;
    let (objective, violation) = convex_objective(&prog, &sol)?;
    let net = recover_network(&prog, &sol)?;
    art.json("model.json", &json!({ "network": net }))?;
    let recovered = objective_input(&net, &input, &ytr, cfg.beta, Regularization::Head)?;
    let f = forward_input(&net, &input)?.output;
    let v: Vec<f64> = y.iter().zip(f.as_slice()).map(|(a, b)| a - b).collect();
    let mut cert = art.timed("certify", || certify_program(&prog, &v))?;
    // The constrained norms are homogeneous in v: shrinking the residual
    // onto the feasible set turns it into a valid lower bound.
    let mut dual_scale = 1.0;
    if cert.max_constraint_excess > 0.0 {
        dual_scale = cfg.beta / cert.max_constraint_norm;
        let scaled: Vec<f64> = v.iter().map(|e| e * dual_scale).collect();
        cert = certify_program(&prog, &scaled)?;
    }
    let (pos, neg) = sol.active_blocks();
    let mut summary = json!({
        "convex_objective": objective,
        "max_violation": violation,
        "recovered_objective": recovered,
        "recovery_gap": (recovered - objective).abs() / objective.abs().max(1.0),
        "dual_objective": cert.dual_objective,
        "duality_gap": objective - cert.dual_objective,
        "max_constraint_excess": cert.max_constraint_excess,
        "dual_scale": dual_scale,
        "lower_bound_only": cert.lower_bound_only,
        "arrangements": prog.blocks.len(),
        "active_units": pos.len() + neg.len(),
        "iterations": sol.trace.iterations,
        "stages": sol.trace.stages,
        "warnings": sol.trace.warnings,
    });
    if let Some((xte, yte)) = test_pair(data) {
        let pred = forward_input(&net, &input_for(cfg, &xte)?)?.output;
        summary["test_loss"] = json!(0.5 * pred.sub(&yte).frobenius_norm().powi(2));
    }
    Ok(summary)
}

fn closed_form(cfg: &ExperimentConfig, data: &Dataset, art: &mut Artifacts) -> Result<Value> {
    let (xtr, ytr) = data.train();
    let result: ClosedFormResult<f64> = art.timed("solve", || match cfg.arch {
        Arch::FcPreBn if ytr.cols() == 1 => closed_form_scalar(&xtr, ytr.as_slice(), cfg.beta),
        Arch::FcPreBn => closed_form_vector_onehot(&xtr, &ytr, cfg.beta),
        Arch::FcPostBn => closed_form_postbn(&xtr, &single_target(&ytr, "closed-form with fc_post_bn")?, cfg.beta),
        _ => Err(Error::Config("closed-form needs fc_pre_bn or fc_post_bn".into())),
    })?;
    art.json("model.json", &json!({ "network": result.network, "v_star": result.v_star }))?;
    Ok(json!({
        "primal_objective": result.primal_objective,
        "dual_objective": result.dual_objective,
        "duality_gap": result.duality_gap(),
        "regime": result.regime,
        "units": result.network.width(),
        "unit_targets": result.unit_targets,
    }))
}

fn probe(cfg: &ExperimentConfig, data: &Dataset, art: &mut Artifacts) -> Result<Value> {
    let (xtr, ytr) = data.train();
    let net = BnNetwork::init(xtr.cols(), cfg.width, ytr.cols(), Arch::FcPreBn, restart_seed(cfg.seed, 0));
    let identity = art.timed("identity", || gradient_identity_probe(&xtr, &ytr, &net, cfg.beta))?;
    let training = art.timed("train", || training_direction_probe(&xtr, &ytr, &net, &cfg.train_config()))?;
    let mut buf = Vec::new();
    training.similarity.write_csv(&mut buf)?;
    fs::write(art.path("directions.csv"), buf)?;
    art.json("model.json", &json!({ "initial": net, "trained": training.network }))?;
    Ok(json!({
        "gradient_identity": identity,
        "direction_trend": training.trend,
        "initial_objective": training.initial_objective,
        "final_objective": training.final_objective,
    }))
}

fn truncate_study(cfg: &ExperimentConfig, data: &Dataset, art: &mut Artifacts) -> Result<Value> {
    let spec = cfg.truncation.ok_or_else(|| Error::Config("truncate-study needs a truncation spec".into()))?;
    let (xtr, ytr) = data.train();
    let (xte, yte) = data.test();
    let truncation = art.timed("truncate", || truncate_with_report(&xtr, &spec))?;
    let test = input_for(cfg, &xte)?;
    let eval = test_pair(data).map(|_| (&test, &yte));
    let original = art.timed("train_original", || train_restarts(cfg, &input_for(cfg, &xtr)?, &ytr, eval))?;
    let truncated =
        art.timed("train_truncated", || train_restarts(cfg, &input_for(cfg, &truncation.data)?, &ytr, eval))?;
    let (bo, bt) = (best_log(&original), best_log(&truncated));
    let mut rows = Vec::new();
    for (name, log) in [("original", &original[bo]), ("truncated", &truncated[bt])] {
        rows.extend(log.records.iter().map(|r| epoch_row(name, r)));
    }
    art.csv("curves.csv", &gd_header("data"), &rows)?;
    art.json(
        "model.json",
        &json!({ "original": original[bo].network, "truncated": truncated[bt].network }),
    )?;
    Ok(json!({
        "k": truncation.k,
        "explained_variance": truncation.explained,
        "tail_energy": truncation.tail_energy,
        "sigma": truncation.sigma,
        "original": log_summary(&original[bo]),
        "truncated": log_summary(&truncated[bt]),
    }))
}

fn manifest(cfg: &ExperimentConfig, data: &Dataset) -> Value {
    json!({
        "tool": "bnconvex",
        "version": env!("CARGO_PKG_VERSION"),
        "mode": cfg.mode.name(),
        "seed": cfg.seed,
        "config": cfg,
        "data": {
            "rows": data.rows(),
            "features": data.x.cols(),
            "outputs": data.y.cols(),
            "train_rows": data.split.train.len(),
            "test_rows": data.split.test.len(),
            "feature_names": data.feature_names,
            "label_names": data.label_names,
        },
    })
}

/// Runs one experiment and writes `manifest.json`, the mode's curves and
/// model files, `summary.json` and `timing.json` into the output directory.
///
/// Everything except `timing.json` is a function of the configuration and
/// the data. A positive `test_fraction` replaces the split of `data` with
/// a seeded one. On failure the manifest is still on disk.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    let data = if cfg.test_fraction > 0.0 {
        data.clone().random_split(cfg.test_fraction, cfg.seed)?
    } else {
        data.clone()
    };
    let mut art = Artifacts::create(cfg.resolved_output_dir())?;
    art.json("manifest.json", &manifest(cfg, &data))?;
    let result = match cfg.mode {
        Mode::FitGd => fit_gd(cfg, &data, &mut art),
        Mode::FitConvex => fit_convex(cfg, &data, &mut art),
        Mode::ClosedForm => closed_form(cfg, &data, &mut art),
        Mode::Probe => probe(cfg, &data, &mut art),
        Mode::TruncateStudy => truncate_study(cfg, &data, &mut art),
    };
    let mut summary = result?;
    summary["mode"] = json!(cfg.mode.name());
    art.json("summary.json", &summary)?;
    art.finish_timing()?;
    Ok(RunReport { out_dir: art.dir, files: art.files, summary })
}

/// Reads `summary.json` of a finished run.
pub fn read_summary(dir: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::TruncationSpec;

    fn toy(n: usize, d: usize, outputs: usize, seed: u64) -> Dataset {
        let mut rng = Prng::new(seed);
        let x = M::from_fn(n, d, |_, _| rng.gaussian());
        let y = M::from_fn(n, outputs, |_, _| rng.gaussian());
        Dataset::new(x, y).unwrap()
    }

    fn cfg(mode: Mode, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(mode);
        c.output_dir = Some(dir.to_path_buf());
        c.width = 4;
        c.train.epochs = 20;
        c
    }

    #[test]
    fn closed_form_summary_has_zero_gap() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Mode::ClosedForm, dir.path());
        c.beta = 0.1;
        let report = run_experiment(&c, &toy(4, 6, 1, 1)).unwrap();
        assert!(report.summary["duality_gap"].as_f64().unwrap() <= 1e-9);
        assert_eq!(report.files, ["manifest.json", "model.json", "summary.json", "timing.json"]);
        assert_eq!(read_summary(dir.path()).unwrap(), report.summary);
    }

    #[test]
    fn fit_convex_recovers() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Mode::FitConvex, dir.path());
        c.beta = 0.05;
        let report = run_experiment(&c, &toy(5, 2, 1, 2)).unwrap();
        let s = &report.summary;
        assert!(s["recovery_gap"].as_f64().unwrap() <= 1e-6, "{s}");
        assert!(s["max_violation"].as_f64().unwrap() <= 1e-6);
        assert!(s["duality_gap"].as_f64().unwrap() >= -1e-9);
        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert!(curves.starts_with("iter,objective,violation,rho,stage"));
    }

    #[test]
    fn gd_runs_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let data = toy(12, 3, 2, 3);
        let mut ca = cfg(Mode::FitGd, a.path());
        ca.restarts = 2;
        ca.test_fraction = 0.25;
        let mut cb = ca.clone();
        cb.output_dir = Some(b.path().to_path_buf());
        run_experiment(&ca, &data).unwrap();
        run_experiment(&cb, &data).unwrap();
        for f in ["curves.csv", "model.json", "summary.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let curves = fs::read_to_string(a.path().join("curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 1 + 2 * 20);
        assert!(curves.lines().nth(1).unwrap().split(',').nth(4).is_some_and(|s| !s.is_empty()));
    }

    #[test]
    fn other_modes_and_archs() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy(10, 4, 1, 4);
        let p = run_experiment(&cfg(Mode::Probe, dir.path()), &data).unwrap();
        assert!(p.summary["gradient_identity"]["max_relative_error"].as_f64().unwrap() < 1e-10);
        let mut t = cfg(Mode::TruncateStudy, dir.path());
        t.truncation = Some(TruncationSpec::rank(2));
        t.test_fraction = 0.2;
        let s = run_experiment(&t, &data).unwrap().summary;
        assert_eq!(s["k"], 2);
        for arch in [Arch::Whitened, Arch::Cnn, Arch::FcPostBn] {
            let mut g = cfg(Mode::FitGd, dir.path());
            g.arch = arch;
            g.patches = Some(2);
            g.test_fraction = 0.2;
            run_experiment(&g, &data).unwrap();
        }
    }

    #[test]
    fn errors_keep_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Mode::ClosedForm, dir.path());
        c.beta = 0.1;
        let err = run_experiment(&c, &toy(6, 3, 1, 5)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert!(dir.path().join("manifest.json").exists());
        let mut bad = cfg(Mode::FitConvex, dir.path());
        bad.beta = 0.0;
        assert_eq!(run_experiment(&bad, &toy(4, 2, 1, 6)).unwrap_err().exit_code(), 2);
    }
}
