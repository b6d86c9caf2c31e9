//! CSV ingestion, train-split standardization and seeded splitting.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeedStream;

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    BinaryClassification,
}

/// How to pick the target column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    Index(usize),
    Name(String),
}

impl From<usize> for TargetColumn {
    fn from(i: usize) -> Self {
        TargetColumn::Index(i)
    }
}

impl From<&str> for TargetColumn {
    fn from(s: &str) -> Self {
        TargetColumn::Name(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub column_names: Vec<String>,
    /// All columns including the target, n × (d + 1).
    pub rows: Matrix,
    pub target_column: usize,
    pub task_kind: TaskKind,
}

impl RawDataset {
    pub fn new(
        column_names: Vec<String>,
        rows: Matrix,
        target_column: usize,
        task_kind: TaskKind,
    ) -> Result<Self> {
        ensure!(
            column_names.len() == rows.cols(),
            Structure,
            "{} column names for {} columns",
            column_names.len(),
            rows.cols()
        );
        ensure!(
            target_column < rows.cols(),
            Structure,
            "target column {} out of range",
            target_column
        );
        ensure!(rows.cols() >= 2, Structure, "need at least one feature and a target");
        if task_kind == TaskKind::BinaryClassification {
            for i in 0..rows.rows() {
                let v = rows[(i, target_column)];
                ensure!(
                    v == 0.0 || v == 1.0,
                    Structure,
                    "binary target must be 0 or 1, found {} in data row {}",
                    v,
                    i + 1
                );
            }
        }
        Ok(RawDataset {
            column_names,
            rows,
            target_column,
            task_kind,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.rows()
    }

    pub fn d(&self) -> usize {
        self.rows.cols() - 1
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.column_names
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != self.target_column)
            .map(|(_, s)| s.clone())
            .collect()
    }

    pub fn target_name(&self) -> &str {
        &self.column_names[self.target_column]
    }

    fn split_columns(&self) -> (Matrix, Vec<f64>) {
        let (n, d) = (self.n(), self.d());
        let mut feats = Vec::with_capacity(n * d);
        let mut targets = Vec::with_capacity(n);
        for row in self.rows.iter_rows() {
            for (j, &v) in row.iter().enumerate() {
                if j == self.target_column {
                    targets.push(v);
                } else {
                    feats.push(v);
                }
            }
        }
        (Matrix::from_vec(n, d, feats).expect("consistent"), targets)
    }
}

/// Read a headered, comma-separated file of reals. Row numbers in errors are
/// 1-based data rows (the header is row 0); columns are 1-based.
pub fn load_csv(
    path: impl AsRef<Path>,
    target: impl Into<TargetColumn>,
    task_kind: TaskKind,
) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Structure(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(|s| s.to_owned())
        .collect();
    let width = header.len();
    let mut data = Vec::new();
    let mut n = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Structure(format!("data row {row}: {e}")))?;
        ensure!(
            record.len() == width,
            Structure,
            "data row {} has {} fields, header has {}",
            row,
            record.len(),
            width
        );
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: j + 1,
                message: format!("{cell:?} in column {:?} is not a number", header[j]),
            })?;
            data.push(v);
        }
        n += 1;
    }
    let target_column = match target.into() {
        TargetColumn::Index(i) => i,
        TargetColumn::Name(name) => header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Structure(format!("no column named {name:?}")))?,
    };
    let rows = Matrix::from_vec(n, width, data)?;
    let raw = RawDataset::new(header, rows, target_column, task_kind)?;
    log::info!(
        "loaded {}: {} rows, {} features",
        path.display(),
        raw.n(),
        raw.d()
    );
    Ok(raw)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedDataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub task_kind: TaskKind,
    pub splits: Splits,
    pub seed: u64,
}

impl StandardizedDataset {
    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.d());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Matrix::from_vec(indices.len(), self.d(), data).expect("consistent")
    }

    pub fn targets_at(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.targets[i]).collect()
    }

    /// Map a standardized regression value back to original units.
    pub fn destandardize_prediction(&self, value: f64) -> Result<f64> {
        destandardize_prediction(value, self)
    }
}

/// Deterministic partition of `0..n` into three index lists.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = fractions;
    ensure!(
        a > 0.0 && b > 0.0 && c > 0.0 && ((a + b + c) - 1.0).abs() <= 1e-9,
        Config,
        "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).child(0x5911).rng());
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let val_end = n_train + n_val;
    Ok(Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..val_end].to_vec(),
        test: order[val_end..].to_vec(),
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardize with statistics from the train split only (population std).
/// Zero-variance train columns keep std 1 and so map to zeros.
pub fn standardize_and_split(
    raw: &RawDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<StandardizedDataset> {
    let splits = split_indices(raw.n(), fractions, seed)?;
    ensure!(!splits.train.is_empty(), Config, "train split is empty");
    let (mut features, mut targets) = raw.split_columns();
    let names = raw.feature_names();
    let d = raw.d();
    let mut means = Vec::with_capacity(d);
    let mut stds = Vec::with_capacity(d);
    for j in 0..d {
        let (mean, mut std) = mean_std(splits.train.iter().map(|&i| features[(i, j)]));
        if std <= f64::EPSILON * mean.abs().max(1.0) {
            log::warn!("feature {:?} is constant on the train split; leaving std at 1", names[j]);
            std = 1.0;
        }
        means.push(mean);
        stds.push(std);
    }
    for i in 0..raw.n() {
        for j in 0..d {
            features[(i, j)] = (features[(i, j)] - means[j]) / stds[j];
        }
    }
    let (target_mean, target_std) = match raw.task_kind {
        TaskKind::Regression => {
            let (mean, std) = mean_std(splits.train.iter().map(|&i| targets[i]));
            let std = if std > 0.0 { std } else { 1.0 };
            for t in targets.iter_mut() {
                *t = (*t - mean) / std;
            }
            (mean, std)
        }
        TaskKind::BinaryClassification => (0.0, 1.0),
    };
    Ok(StandardizedDataset {
        features,
        targets,
        feature_names: names,
        target_name: raw.target_name().to_owned(),
        feature_means: means,
        feature_stds: stds,
        target_mean,
        target_std,
        task_kind: raw.task_kind,
        splits,
        seed,
    })
}

pub fn destandardize_prediction(value: f64, dataset: &StandardizedDataset) -> Result<f64> {
    ensure!(
        dataset.task_kind == TaskKind::Regression,
        Contract,
        "destandardizing a prediction requires a regression dataset"
    );
    Ok(value * dataset.target_std + dataset.target_mean)
}

fn default_task_kind() -> TaskKind {
    TaskKind::Regression
}

fn default_fractions() -> [f64; 3] {
    [DEFAULT_FRACTIONS.0, DEFAULT_FRACTIONS.1, DEFAULT_FRACTIONS.2]
}

/// A dataset manifest, `{path, target, task_kind, fractions, seed}`. Relative
/// paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub target: TargetColumn,
    #[serde(default = "default_task_kind")]
    pub task_kind: TaskKind,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl DatasetManifest {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.path.is_relative() {
            if let Some(dir) = path.parent() {
                manifest.path = dir.join(&manifest.path);
            }
        }
        Ok(manifest)
    }

    pub fn load(&self) -> Result<StandardizedDataset> {
        let raw = load_csv(&self.path, self.target.clone(), self.task_kind)?;
        let [a, b, c] = self.fractions;
        standardize_and_split(&raw, (a, b, c), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_small_file() {
        let f = write("a,b,y\n1,2,3\n4,5,6\n7,8,9\n10,11,12\n");
        let raw = load_csv(f.path(), "y", TaskKind::Regression).unwrap();
        assert_eq!((raw.n(), raw.d()), (4, 2));
        assert_eq!(raw.target_column, 2);
        assert_eq!(raw.feature_names(), vec!["a", "b"]);
        let by_index = load_csv(f.path(), 2, TaskKind::Regression).unwrap();
        assert_eq!(by_index, raw);
    }

    #[test]
    fn parse_error_names_row_and_column() {
        let mut text = String::from("a,b,y\n");
        for i in 1..=8 {
            if i == 7 {
                text.push_str("1,oops,3\n");
            } else {
                text.push_str("1,2,3\n");
            }
        }
        let f = write(&text);
        match load_csv(f.path(), "y", TaskKind::Regression) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (7, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_rows_are_structural() {
        let f = write("a,b,y\n1,2,3\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), "y", TaskKind::Regression),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn binary_targets_checked() {
        let f = write("a,y\n1,0\n2,1\n3,2\n");
        assert!(load_csv(f.path(), "y", TaskKind::BinaryClassification).is_err());
        assert!(load_csv(f.path(), "missing", TaskKind::Regression).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_csv("/nonexistent/file.csv", 0, TaskKind::Regression),
            Err(Error::Io { .. })
        ));
    }

    fn raw_from(rows: &[Vec<f64>]) -> RawDataset {
        let m = Matrix::from_rows(rows).unwrap();
        let names = (0..m.cols()).map(|j| format!("c{j}")).collect();
        let t = m.cols() - 1;
        RawDataset::new(names, m, t, TaskKind::Regression).unwrap()
    }

    #[test]
    fn two_point_column_maps_to_unit_values() {
        let raw = raw_from(&[vec![1.0, 0.0], vec![3.0, 1.0]]);
        // train on both rows by giving the other splits nothing to take
        let (features, _) = raw.split_columns();
        let (mean, std) = mean_std(features.column(0).into_iter());
        assert_eq!((mean, std), (2.0, 1.0));
        assert_eq!(((1.0 - mean) / std, (3.0 - mean) / std), (-1.0, 1.0));
    }

    #[test]
    fn constant_column_becomes_zeros() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![5.0, i as f64, (i * 2) as f64]).collect();
        let ds = standardize_and_split(&raw_from(&rows), DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!(ds.feature_stds[0], 1.0);
        assert!(ds.features.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn destandardize_is_affine() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * 3) as f64]).collect();
        let mut ds = standardize_and_split(&raw_from(&rows), DEFAULT_FRACTIONS, 0).unwrap();
        ds.target_mean = 10.0;
        ds.target_std = 2.0;
        assert_eq!(ds.destandardize_prediction(0.0).unwrap(), 10.0);
        assert_eq!(ds.destandardize_prediction(1.0).unwrap(), 12.0);
        ds.task_kind = TaskKind::BinaryClassification;
        assert!(matches!(ds.destandardize_prediction(1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn manifest_resolves_relative_path() {
        let dir = tempfile::tempdir().unwrap();
        let rows: String = (0..10).map(|i| format!("{i},{}\n", i * i)).collect();
        std::fs::write(dir.path().join("d.csv"), format!("x,y\n{rows}")).unwrap();
        std::fs::write(dir.path().join("d.json"), r#"{"path": "d.csv", "target": "y"}"#).unwrap();
        let m = DatasetManifest::from_file(dir.path().join("d.json")).unwrap();
        assert_eq!(m.fractions, [0.6, 0.2, 0.2]);
        let ds = m.load().unwrap();
        assert_eq!(ds.splits.train.len() + ds.splits.val.len() + ds.splits.test.len(), 10);
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split_indices(10, (0.5, 0.5, 0.5), 0).is_err());
        assert!(split_indices(10, (1.0, 0.0, 0.0), 0).is_err());
    }
}
