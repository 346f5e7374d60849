use bnconvex::harness::{read_summary, run_experiment, Dataset, ExperimentConfig, Mode};
use bnconvex::rng::Prng;
use bnconvex::Matrix;

fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = Prng::new(seed);
    let x = Matrix::from_fn(n, d, |_, _| rng.gaussian());
    let y = Matrix::from_fn(n, 1, |_, _| rng.gaussian());
    Dataset::new(x, y).unwrap()
}

fn run(mode: Mode, data: &Dataset, dir: &std::path::Path) -> serde_json::Value {
    let mut cfg = ExperimentConfig::new(mode);
    cfg.beta = 0.1;
    cfg.output_dir = Some(dir.join(mode.name()));
    let report = run_experiment(&cfg, data).unwrap();
    for name in ["manifest.json", "summary.json", "model.json", "timing.json"] {
        assert!(report.out_dir.join(name).is_file(), "{name} missing for {}", mode.name());
    }
    assert_eq!(read_summary(&report.out_dir).unwrap(), report.summary);
    report.summary
}

#[test]
fn convex_program_reaches_the_closed_form_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(4, 5, 41);
    let closed = run(Mode::ClosedForm, &data, dir.path());
    let convex = run(Mode::FitConvex, &data, dir.path());
    let optimum = closed["primal_objective"].as_f64().unwrap();
    let solved = convex["convex_objective"].as_f64().unwrap();
    assert!((solved - optimum).abs() <= 1e-4 * optimum.abs().max(1.0), "convex {solved} vs closed form {optimum}");
    let lower = convex["dual_objective"].as_f64().unwrap();
    assert!(lower <= solved + 1e-9);
    assert!(convex["max_violation"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn gradient_descent_does_not_beat_the_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(5, 6, 42);
    let closed = run(Mode::ClosedForm, &data, dir.path());
    let mut cfg = ExperimentConfig::new(Mode::FitGd);
    cfg.beta = 0.1;
    cfg.train.epochs = 300;
    cfg.output_dir = Some(dir.path().join("gd"));
    let gd = run_experiment(&cfg, &data).unwrap();
    let trained = gd.summary["final_objective"].as_f64().unwrap();
    let optimum = closed["primal_objective"].as_f64().unwrap();
    assert!(trained >= optimum - 1e-6 * optimum.abs().max(1.0), "GD {trained} below optimum {optimum}");
    assert!(gd.out_dir.join("curves.csv").is_file());
}
