use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::Prng;

const SPLIT_STREAM: u64 = 0x5917;

/// Features, targets and a train/test split of the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DenseMatrix<f64>,
    pub y: DenseMatrix<f64>,
    #[serde(default)]
    pub feature_names: Option<Vec<String>>,
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Every row in the training split.
    pub fn new(x: DenseMatrix<f64>, y: DenseMatrix<f64>) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::Dimension(format!("{} feature rows but {} label rows", x.rows(), y.rows())));
        }
        if let Some(index) = y.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let split = Split { train: (0..x.rows()).collect(), test: Vec::new() };
        Ok(Self { x, y, feature_names: None, label_names: None, split })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn with_split(mut self, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let n = self.rows();
        let mut seen = BTreeSet::new();
        for &i in train.iter().chain(&test) {
            if i >= n || !seen.insert(i) {
                return Err(Error::Argument(format!("split index {i} is out of range or repeated")));
            }
        }
        if train.is_empty() {
            return Err(Error::Argument("the training split is empty".into()));
        }
        self.split = Split { train, test };
        Ok(self)
    }

    /// Holds out `round(fraction * n)` rows chosen by a seeded shuffle;
    /// both index lists come back sorted.
    pub fn random_split(self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("test fraction {fraction} outside [0, 1)")));
        }
        let n = self.rows();
        let mut idx: Vec<usize> = (0..n).collect();
        Prng::derive(seed, SPLIT_STREAM).shuffle(&mut idx);
        let held = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        let mut test = idx[..held].to_vec();
        let mut train = idx[held..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        self.with_split(train, test)
    }

    pub fn train(&self) -> (DenseMatrix<f64>, DenseMatrix<f64>) {
        (self.x.select_rows(&self.split.train), self.y.select_rows(&self.split.train))
    }

    pub fn test(&self) -> (DenseMatrix<f64>, DenseMatrix<f64>) {
        (self.x.select_rows(&self.split.test), self.y.select_rows(&self.split.test))
    }
}

fn parse_error(row: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Parse { row, col, msg: msg.into() }
}

/// Reads a numeric CSV file with a header row. Columns named in
/// `label_columns` become targets, the rest features. With `one_hot`, the
/// single label column must hold non-negative integers and is expanded to
/// one indicator column per distinct class.
///
/// Locations in errors are 1-based, with the header on row 1.
pub fn load_csv<P: AsRef<Path>, S: AsRef<str>>(path: P, label_columns: &[S], one_hot: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(parse_error(1, 1, "empty file, expected a header row")),
    };
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    if names.iter().all(|s| s.parse::<f64>().is_ok()) {
        return Err(parse_error(1, 1, "missing header row (first row is numeric)"));
    }
    let mut unique = BTreeSet::new();
    for (c, name) in names.iter().enumerate() {
        if name.is_empty() || !unique.insert(name.as_str()) {
            return Err(parse_error(1, c + 1, format!("empty or duplicate column name {name:?}")));
        }
    }
    let mut label_idx = Vec::new();
    for label in label_columns {
        let label = label.as_ref();
        match names.iter().position(|n| n == label) {
            Some(c) => label_idx.push(c),
            None => return Err(parse_error(1, 0, format!("unknown label column {label:?}"))),
        }
    }
    if label_idx.is_empty() {
        return Err(Error::Config("at least one label column is required".into()));
    }
    if one_hot && label_idx.len() != 1 {
        return Err(Error::Config("one-hot encoding needs exactly one label column".into()));
    }
    let feature_idx: Vec<usize> = (0..names.len()).filter(|c| !label_idx.contains(c)).collect();

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    for (r, record) in records.enumerate() {
        let record = record?;
        let row = r + 2;
        if record.len() != names.len() {
            return Err(parse_error(row, record.len().min(names.len()) + 1, format!(
                "expected {} cells, found {}",
                names.len(),
                record.len()
            )));
        }
        let cell = |c: usize| -> Result<f64> {
            let text = record[c].trim();
            let v: f64 = text.parse().map_err(|_| parse_error(row, c + 1, format!("non-numeric cell {text:?}")))?;
            if !v.is_finite() {
                return Err(parse_error(row, c + 1, "non-finite cell"));
            }
            Ok(v)
        };
        for &c in &feature_idx {
            x.push(cell(c)?);
        }
        for &c in &label_idx {
            y.push(cell(c)?);
        }
        rows += 1;
    }
    let lc = label_idx.len();
    let (y, label_names) = if one_hot {
        let col = label_idx[0] + 1;
        let mut classes = BTreeSet::new();
        for (r, &v) in y.iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(parse_error(r + 2, col, format!("label {v} is not a non-negative integer")));
            }
            classes.insert(v as u64);
        }
        let classes: Vec<u64> = classes.into_iter().collect();
        let mut onehot = DenseMatrix::zeros(rows, classes.len());
        for (r, &v) in y.iter().enumerate() {
            let k = classes.binary_search(&(v as u64)).expect("class collected above");
            onehot[(r, k)] = 1.0;
        }
        let base = &names[label_idx[0]];
        (onehot, classes.iter().map(|c| format!("{base}={c}")).collect())
    } else {
        (DenseMatrix::from_vec(rows, lc, y)?, label_idx.iter().map(|&c| names[c].clone()).collect())
    };
    let x = DenseMatrix::from_vec(rows, feature_idx.len(), x)?;
    let mut data = Dataset::new(x, y)?;
    data.feature_names = Some(feature_idx.iter().map(|&c| names[c].clone()).collect());
    data.label_names = Some(label_names);
    Ok(data)
}
