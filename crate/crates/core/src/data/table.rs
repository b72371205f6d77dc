use std::collections::HashMap;
use std::path::Path;

use super::DataError;
use crate::numkernel::Tensor;

/// Which CSV column holds the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LabelColumn {
    Index(usize),
    #[default]
    Last,
}

impl std::str::FromStr for LabelColumn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("last") {
            return Ok(Self::Last);
        }
        s.parse::<usize>()
            .map(Self::Index)
            .map_err(|_| format!("label column must be an index or \"last\", got {s:?}"))
    }
}

/// A named dataset: real feature matrix plus integer labels in `0..n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetTable {
    name: String,
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl DatasetTable {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<usize>) -> Result<Self, DataError> {
        let name = name.into();
        if features.ndim() != 2 || features.rows() == 0 {
            return Err(DataError::Invalid { dataset: name, reason: "needs at least one row".into() });
        }
        if features.cols() < 2 {
            return Err(DataError::TooFewColumns { dataset: name, found: features.cols() });
        }
        if labels.len() != features.rows() {
            return Err(DataError::Invalid {
                dataset: name,
                reason: format!("{} labels for {} rows", labels.len(), features.rows()),
            });
        }
        if let Some(pos) = features.data().iter().position(|v| !v.is_finite()) {
            let c = features.cols();
            return Err(DataError::Invalid {
                dataset: name,
                reason: format!("non-finite value at row {}, column {}", pos / c, pos % c),
            });
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self { name, features, labels, n_classes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.features.cols()
    }

    /// Row indices grouped by class.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.rows_by_class().iter().map(Vec::len).collect()
    }

    /// Copy restricted to the given rows, in order.
    pub fn subset_rows(&self, name: impl Into<String>, rows: &[usize]) -> Result<Self, DataError> {
        let features = self.features.select_rows(rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        let mut t = Self::new(name, features, labels)?;
        t.n_classes = t.n_classes.max(self.n_classes);
        Ok(t)
    }

    /// Whether tasks of the given sizes can be drawn at all.
    pub fn supports(&self, n_meta: usize, n_target: usize) -> bool {
        if self.n_rows() < n_meta + n_target {
            return false;
        }
        let counts = self.class_counts();
        let needs_all = n_meta >= self.n_classes.max(2);
        !needs_all || counts.iter().all(|&c| c >= 1)
    }
}

/// Reads a CSV file; labels are re-encoded to `0..K` by first appearance.
pub fn load_csv(path: &Path, label_column: LabelColumn, has_header: bool) -> Result<DatasetTable, DataError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut codes: HashMap<String, usize> = HashMap::new();
    let mut width = None;
    let first_line = if has_header { 2 } else { 1 };
    for (i, record) in reader.records().enumerate() {
        let line = first_line + i;
        let record = record.map_err(|e| DataError::Parse { dataset: name.clone(), line, column: 0, value: e.to_string() })?;
        let n = record.len();
        let label_idx = match label_column {
            LabelColumn::Last => n.saturating_sub(1),
            LabelColumn::Index(k) => k,
        };
        if label_idx >= n {
            return Err(DataError::Parse {
                dataset: name,
                line,
                column: label_idx,
                value: format!("row has only {n} fields"),
            });
        }
        match width {
            None => {
                if n < 3 {
                    return Err(DataError::TooFewColumns { dataset: name, found: n.saturating_sub(1) });
                }
                width = Some(n);
            }
            Some(w) if w != n => {
                return Err(DataError::Parse { dataset: name, line, column: n, value: format!("expected {w} fields, found {n}") })
            }
            _ => {}
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                let next = codes.len();
                labels.push(*codes.entry(cell.to_string()).or_insert(next));
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => features.push(v),
                _ => return Err(DataError::Parse { dataset: name, line, column: j, value: cell.to_string() }),
            }
        }
    }
    let Some(w) = width else {
        return Err(DataError::Empty { path: path.display().to_string() });
    };
    let rows = labels.len();
    DatasetTable::new(name, Tensor::matrix(rows, w - 1, features), labels)
}

/// Loads every `*.csv` under `dir`, sorted by file name.
pub fn load_dir(dir: &Path, label_column: LabelColumn, has_header: bool) -> Result<Vec<DatasetTable>, DataError> {
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::Io { path: dir.display().to_string(), reason: e.to_string() })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_csv(p, label_column, has_header)).collect()
}

/// Most frequent class becomes 1, every other class 0. Ties go to the smaller label.
pub fn binarize_one_vs_all(d: &DatasetTable) -> DatasetTable {
    let counts = d.class_counts();
    let positive = counts
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
        .map_or(0, |(i, _)| i);
    let labels = d.labels.iter().map(|&y| usize::from(y == positive)).collect();
    DatasetTable { name: d.name.clone(), features: d.features.clone(), labels, n_classes: 2 }
}
