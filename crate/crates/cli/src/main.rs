use std::path::PathBuf;
use std::process::ExitCode;

use bnconvex::harness::{load_csv, run_experiment, DataSource, ExperimentConfig, Mode};
use bnconvex::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

/// Convex and gradient-descent experiments on two-layer BN-ReLU networks.
#[derive(Parser, Debug)]
#[command(name = "bnconvex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train networks by gradient descent.
    FitGd(Flags),
    /// Solve the convex program and recover a network.
    FitConvex(Flags),
    /// Evaluate the closed-form optimum.
    ClosedForm(Flags),
    /// Check the whitened-twin gradient identity and track direction similarity.
    Probe(Flags),
    /// Compare training on the data and on its low-rank truncation.
    TruncateStudy(Flags),
}

/// Every flag mirrors a field of the JSON configuration. Values in the file
/// given by `--config` take precedence over flags.
#[derive(Args, Debug, Default)]
struct Flags {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Label column name; repeat or separate with commas.
    #[arg(long = "label", value_delimiter = ',')]
    labels: Vec<String>,
    /// Expand the single integer label column into indicator columns.
    #[arg(long)]
    one_hot: bool,
    /// fc_pre_bn, fc_post_bn, cnn or whitened.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Number of equal feature blocks forming the patches of a cnn model.
    #[arg(long)]
    patches: Option<usize>,
    /// Sample this many activation patterns instead of enumerating them.
    #[arg(long)]
    sample_patterns: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Keep this many leading singular values.
    #[arg(long, conflicts_with = "variance_target")]
    k: Option<usize>,
    /// Keep the fewest singular values explaining this fraction of the energy.
    #[arg(long)]
    variance_target: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $BNCONVEX_OUT_DIR, then ./bnconvex-out.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn set<T: serde::Serialize>(obj: &mut Map<String, Value>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        obj.insert(key.to_string(), json!(v));
    }
}

impl Flags {
    fn overrides(&self) -> Value {
        let mut top = Map::new();
        set(&mut top, "arch", self.arch.clone());
        set(&mut top, "beta", self.beta);
        set(&mut top, "width", self.width);
        set(&mut top, "restarts", self.restarts);
        set(&mut top, "patches", self.patches);
        set(&mut top, "test_fraction", self.test_fraction);
        set(&mut top, "seed", self.seed);
        set(&mut top, "output_dir", self.out_dir.clone());
        let mut train = Map::new();
        set(&mut train, "lr", self.lr);
        set(&mut train, "epochs", self.epochs);
        set(&mut train, "batch_size", self.batch_size);
        set(&mut train, "momentum", self.momentum);
        top.insert("train".into(), Value::Object(train));
        let mut solver = Map::new();
        set(&mut solver, "max_iters", self.max_iters);
        set(&mut solver, "tolerance", self.tolerance);
        top.insert("solver".into(), Value::Object(solver));
        if self.k.is_some() || self.variance_target.is_some() {
            top.insert("truncation".into(), json!({ "k": self.k, "variance_target": self.variance_target }));
        }
        if let Some(count) = self.sample_patterns {
            let seed = self.seed.unwrap_or(0);
            top.insert("arrangements".into(), json!({ "kind": "sample", "count": count, "seed": seed }));
        }
        if let Some(path) = &self.data {
            top.insert(
                "data".into(),
                json!(DataSource { path: path.clone(), label_columns: self.labels.clone(), one_hot: self.one_hot }),
            );
        }
        Value::Object(top)
    }
}

/// Recursive merge where `over` wins; objects merge key by key.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config(mode: Mode, flags: &Flags) -> Result<ExperimentConfig, Error> {
    let mut value = serde_json::to_value(ExperimentConfig::new(mode))?;
    merge(&mut value, flags.overrides());
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(m) = file.get("mode") {
            if m != &json!(mode.name()) {
                return Err(Error::Config(format!("config file mode {m} does not match the {} subcommand", mode.name())));
            }
        }
        merge(&mut value, file);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

fn run(cli: Cli) -> Result<Value, Error> {
    let (mode, flags) = match cli.command {
        Command::FitGd(f) => (Mode::FitGd, f),
        Command::FitConvex(f) => (Mode::FitConvex, f),
        Command::ClosedForm(f) => (Mode::ClosedForm, f),
        Command::Probe(f) => (Mode::Probe, f),
        Command::TruncateStudy(f) => (Mode::TruncateStudy, f),
    };
    let cfg = config(mode, &flags)?;
    cfg.validate()?;
    let source = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no data: pass --data and --label, or set `data` in the config".into()))?;
    let data = load_csv(&source.path, &source.label_columns, source.one_hot)?;
    let report = run_experiment(&cfg, &data)?;
    Ok(json!({ "out_dir": report.out_dir, "files": report.files, "summary": report.summary }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            let msg = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
            eprintln!("{msg}");
            ExitCode::from(code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_beats_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"beta": 0.5, "train": {"epochs": 7}}"#).unwrap();
        let flags = Flags { beta: Some(0.1), lr: Some(0.2), config: Some(path), ..Flags::default() };
        let cfg = config(Mode::FitGd, &flags).unwrap();
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr, 0.2);
    }

    #[test]
    fn flags_fill_nested_fields() {
        let flags = Flags {
            arch: Some("cnn".into()),
            patches: Some(2),
            sample_patterns: Some(30),
            k: Some(3),
            ..Flags::default()
        };
        let cfg = config(Mode::FitConvex, &flags).unwrap();
        assert_eq!(cfg.patches, Some(2));
        assert_eq!(cfg.truncation.unwrap().k, Some(3));
        assert!(matches!(cfg.arrangements, bnconvex::convex::ArrangementStrategy::Sample { count: 30, .. }));
        let bad = Flags { arch: Some("resnet".into()), ..Flags::default() };
        assert!(matches!(config(Mode::FitGd, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"mode": "probe"}"#).unwrap();
        let flags = Flags { config: Some(path), ..Flags::default() };
        assert!(config(Mode::FitGd, &flags).is_err());
    }
}
