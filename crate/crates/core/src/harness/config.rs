use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::convex::{ArrangementStrategy, SolverConfig};
use crate::error::{Error, Result};
use crate::network::{Arch, Regularization, TrainConfig};
use crate::probes::TruncationSpec;

/// Environment variable naming the output directory used when the
/// configuration leaves it unset.
pub const OUT_DIR_ENV: &str = "BNCONVEX_OUT_DIR";

/// Output directory when neither the configuration nor [`OUT_DIR_ENV`] set one.
pub const DEFAULT_OUT_DIR: &str = "bnconvex-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FitGd,
    FitConvex,
    ClosedForm,
    Probe,
    TruncateStudy,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FitGd => "fit-gd",
            Mode::FitConvex => "fit-convex",
            Mode::ClosedForm => "closed-form",
            Mode::Probe => "probe",
            Mode::TruncateStudy => "truncate-study",
        }
    }
}

/// Gradient-descent settings; `beta` and `seed` come from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub momentum: f64,
    pub bn_momentum: f64,
    pub regularization: Regularization,
}

impl Default for GdSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            lr: base.lr,
            epochs: base.epochs,
            batch_size: base.batch_size,
            momentum: base.momentum,
            bn_momentum: base.bn_momentum,
            regularization: base.regularization,
        }
    }
}

impl GdSettings {
    pub fn to_train(&self, beta: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            beta,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            bn_momentum: self.bn_momentum,
            momentum: self.momentum,
            regularization: self.regularization,
        }
    }
}

/// Where the CLI reads the data from. Kept in the configuration so that a
/// run manifest is enough to repeat the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub label_columns: Vec<String>,
    #[serde(default)]
    pub one_hot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default = "default_arch")]
    pub arch: Arch,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Hidden width of gradient-trained networks.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Independent initializations for `fit-gd`; the lowest final objective wins.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub train: GdSettings,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub truncation: Option<TruncationSpec>,
    #[serde(default = "default_arrangements")]
    pub arrangements: ArrangementStrategy,
    /// Number of equal contiguous feature blocks forming the patches of a
    /// `cnn` model.
    #[serde(default)]
    pub patches: Option<usize>,
    #[serde(default)]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataSource>,
}

fn default_arch() -> Arch {
    Arch::FcPreBn
}

fn default_beta() -> f64 {
    1e-3
}

fn default_width() -> usize {
    16
}

fn default_restarts() -> usize {
    1
}

fn default_arrangements() -> ArrangementStrategy {
    ArrangementStrategy::Exact
}

impl ExperimentConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            arch: default_arch(),
            beta: default_beta(),
            width: default_width(),
            restarts: default_restarts(),
            train: GdSettings::default(),
            solver: SolverConfig::default(),
            truncation: None,
            arrangements: default_arrangements(),
            patches: None,
            test_fraction: 0.0,
            seed: 0,
            output_dir: None,
            data: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_train(self.beta, self.seed)
    }

    /// `output_dir`, else `$BNCONVEX_OUT_DIR`, else `bnconvex-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// Checks the fields the selected mode relies on.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let mode = self.mode.name();
        if !self.beta.is_finite() || self.beta < 0.0 {
            return bad("beta must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction {} outside [0, 1)", self.test_fraction));
        }
        if self.arch == Arch::Cnn && !matches!(self.patches, Some(k) if k >= 1) {
            return bad("a cnn model needs patches >= 1".into());
        }
        if let ArrangementStrategy::Sample { count: 0, .. } = self.arrangements {
            return bad("sampled arrangements need a positive count".into());
        }
        let needs_positive_beta = matches!(self.mode, Mode::FitConvex | Mode::ClosedForm);
        if needs_positive_beta && self.beta == 0.0 {
            return bad(format!("{mode} needs beta > 0"));
        }
        match self.mode {
            Mode::FitGd | Mode::TruncateStudy | Mode::Probe => {
                if self.width == 0 || self.restarts == 0 {
                    return bad("width and restarts must be positive".into());
                }
                self.train_config().validate()?;
            }
            Mode::FitConvex => self.solver.validate()?,
            Mode::ClosedForm => {}
        }
        let arch_ok = match self.mode {
            Mode::FitGd => true,
            Mode::FitConvex => matches!(self.arch, Arch::FcPreBn | Arch::FcPostBn | Arch::Cnn),
            Mode::ClosedForm => matches!(self.arch, Arch::FcPreBn | Arch::FcPostBn),
            Mode::Probe => self.arch == Arch::FcPreBn,
            Mode::TruncateStudy => self.arch != Arch::Whitened,
        };
        if !arch_ok {
            let arch = serde_json::to_string(&self.arch)?;
            return bad(format!("{mode} does not support arch {arch}"));
        }
        match (self.mode, &self.truncation) {
            (Mode::TruncateStudy, None) => bad("truncate-study needs a truncation spec".into()),
            (_, Some(t)) => t.validate().map_err(|e| Error::Config(e.to_string())),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_uses_defaults() {
        let cfg = ExperimentConfig::from_json_str(r#"{"mode": "fit-gd"}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::new(Mode::FitGd));
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn nested_fields() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"mode": "fit-convex", "arch": "cnn", "patches": 2, "beta": 0.1,
                "arrangements": {"kind": "sample", "count": 50, "seed": 3},
                "solver": {"max_iters": 100}}"#,
        )
        .unwrap();
        assert_eq!(cfg.arrangements, ArrangementStrategy::Sample { count: 50, seed: 3 });
        assert_eq!(cfg.solver.max_iters, 100);
        assert_eq!(cfg.solver.tolerance, SolverConfig::default().tolerance);
        cfg.validate().unwrap();
    }

    #[test]
    fn mode_requirements() {
        let mut cfg = ExperimentConfig::new(Mode::TruncateStudy);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.truncation = Some(TruncationSpec::rank(2));
        cfg.validate().unwrap();
        let mut cf = ExperimentConfig::new(Mode::ClosedForm);
        cf.arch = Arch::Cnn;
        cf.patches = Some(2);
        assert!(cf.validate().is_err());
        cf.arch = Arch::FcPostBn;
        cf.validate().unwrap();
        cf.beta = 0.0;
        assert!(cf.validate().is_err());
        let mut probe = ExperimentConfig::new(Mode::Probe);
        probe.arch = Arch::FcPostBn;
        assert!(probe.validate().is_err());
        let mut cnn = ExperimentConfig::new(Mode::FitGd);
        cnn.arch = Arch::Cnn;
        assert!(cnn.validate().is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"mode": "fit-gd", "typo": 1}"#).is_err());
        assert!(ExperimentConfig::from_json_str(r#"{"mode": "train"}"#).is_err());
    }

    #[test]
    fn explicit_output_dir_wins() {
        let mut cfg = ExperimentConfig::new(Mode::FitGd);
        cfg.output_dir = Some(PathBuf::from("somewhere"));
        assert_eq!(cfg.resolved_output_dir(), PathBuf::from("somewhere"));
    }
}
