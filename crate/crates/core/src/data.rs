//! Datasets: CSV ingestion, one-hot encoding, splits, PCA, normalization and
//! the synthetic sum task.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Feature column metadata. Categorical cells are stored as the index into
/// `categories`, which is sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub categories: Vec<String>,
}

impl Column {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: Vec::new(),
        }
    }
}

/// A single supervised target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Real(f64),
}

impl Target {
    /// Target as a real number; class `c` maps to `c as f64`.
    pub fn as_real(self) -> f64 {
        match self {
            Target::Class(c) => c as f64,
            Target::Real(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    /// Class indices into `names`.
    Class {
        values: Vec<usize>,
        names: Vec<String>,
    },
    Real(Vec<f64>),
}

impl Labels {
    pub fn binary(values: Vec<usize>) -> Self {
        Labels::Class {
            values,
            names: vec!["0".into(), "1".into()],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Class { values, .. } => values.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of classes, or `None` for real-valued labels.
    pub fn classes(&self) -> Option<usize> {
        match self {
            Labels::Class { names, .. } => Some(names.len()),
            Labels::Real(_) => None,
        }
    }

    pub fn target(&self, i: usize) -> Target {
        match self {
            Labels::Class { values, .. } => Target::Class(values[i]),
            Labels::Real(v) => Target::Real(v[i]),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Labels::Class { values, names } => Labels::Class {
                values: idx.iter().map(|&i| values[i]).collect(),
                names: names.clone(),
            },
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Labels,
    pub columns: Vec<Column>,
    /// One tag per row; `None` rows belong to no split.
    pub splits: Vec<Option<Split>>,
}

impl Dataset {
    /// A dataset of numeric columns named `x0, x1, ...` with no split tags.
    pub fn new(x: Matrix, y: Labels) -> Result<Self> {
        let columns = (0..x.cols())
            .map(|j| Column::numeric(format!("x{j}")))
            .collect();
        Self::with_columns(x, y, columns)
    }

    pub fn with_columns(x: Matrix, y: Labels, columns: Vec<Column>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                got: y.len(),
            });
        }
        if columns.len() != x.cols() {
            return Err(Error::DimensionMismatch {
                expected: x.cols(),
                got: columns.len(),
            });
        }
        if let Labels::Class { values, names } = &y {
            if let Some(&bad) = values.iter().find(|&&c| c >= names.len()) {
                return Err(Error::arg(format!(
                    "class index {bad} out of range {}",
                    names.len()
                )));
            }
        }
        let splits = vec![None; x.rows()];
        Ok(Self {
            x,
            y,
            columns,
            splits,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn m(&self) -> usize {
        self.x.cols()
    }

    /// Rows in the given order, split tags kept.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: self.y.select(rows),
            columns: self.columns.clone(),
            splits: rows.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn split_rows(&self, split: Split) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.splits[i] == Some(split))
            .collect()
    }

    /// Rows tagged `split`.
    pub fn part(&self, split: Split) -> Self {
        self.subset(&self.split_rows(split))
    }

    /// Projection onto the given feature columns.
    pub fn select_features(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&j| j >= self.m()) {
            return Err(Error::arg(format!(
                "feature index {bad} out of range {}",
                self.m()
            )));
        }
        Ok(Self {
            x: self.x.select_cols(cols),
            y: self.y.clone(),
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
            splits: self.splits.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Class,
    Real,
}

/// How to type the columns of a CSV file. Columns not listed as categorical
/// are numeric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label: String,
    pub label_kind: LabelKind,
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Allowed class names; inferred (sorted) from the file when absent.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "?" | "NA" | "NaN" | "nan")
}

fn parse_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads a headed, comma-separated file. Rows are numbered from 1 (the first
/// data row) in error messages. Missing cells are rejected.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path.as_ref())?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = header
        .iter()
        .position(|h| *h == schema.label)
        .ok_or_else(|| Error::Config(format!("label column '{}' not in header", schema.label)))?;
    for c in &schema.categorical {
        if !header.contains(c) {
            return Err(Error::Config(format!(
                "categorical column '{c}' not in header"
            )));
        }
    }

    let mut cells: Vec<Vec<String>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != header.len() {
            return Err(parse_err(
                row,
                "*",
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let fields: Vec<String> = record.iter().map(|s| s.trim().to_string()).collect();
        if let Some(j) = fields.iter().position(|f| is_missing(f)) {
            return Err(parse_err(row, &header[j], "missing value"));
        }
        cells.push(fields);
    }

    let feature_idx: Vec<usize> = (0..header.len()).filter(|&j| j != label_idx).collect();
    let mut columns = Vec::with_capacity(feature_idx.len());
    let mut x = Matrix::zeros(cells.len(), feature_idx.len());
    for (out_j, &j) in feature_idx.iter().enumerate() {
        let name = &header[j];
        if schema.categorical.contains(name) {
            let categories: Vec<String> = cells
                .iter()
                .map(|r| r[j].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            for (i, r) in cells.iter().enumerate() {
                let code = categories
                    .binary_search(&r[j])
                    .expect("category collected above");
                x.set(i, out_j, code as f64);
            }
            columns.push(Column {
                name: name.clone(),
                kind: ColumnKind::Categorical,
                categories,
            });
        } else {
            for (i, r) in cells.iter().enumerate() {
                let v: f64 = r[j]
                    .parse()
                    .map_err(|_| parse_err(i + 1, name, format!("'{}' is not a number", r[j])))?;
                if !v.is_finite() {
                    return Err(parse_err(i + 1, name, "non-finite number"));
                }
                x.set(i, out_j, v);
            }
            columns.push(Column::numeric(name.clone()));
        }
    }

    let y = match schema.label_kind {
        LabelKind::Real => Labels::Real(
            cells
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r[label_idx].parse().map_err(|_| {
                        parse_err(
                            i + 1,
                            &schema.label,
                            format!("'{}' is not a number", r[label_idx]),
                        )
                    })
                })
                .collect::<Result<_>>()?,
        ),
        LabelKind::Class => {
            let names: Vec<String> = match &schema.classes {
                Some(c) => c.clone(),
                None => cells
                    .iter()
                    .map(|r| r[label_idx].clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            };
            let index: BTreeMap<&str, usize> = names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.as_str(), i))
                .collect();
            let values = cells
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    index.get(r[label_idx].as_str()).copied().ok_or_else(|| {
                        parse_err(
                            i + 1,
                            &schema.label,
                            format!("unknown class '{}'", r[label_idx]),
                        )
                    })
                })
                .collect::<Result<_>>()?;
            Labels::Class { values, names }
        }
    };
    Dataset::with_columns(x, y, columns)
}

/// Writes features then the label column under `label_name`.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>, label_name: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<&str> = ds.columns.iter().map(|c| c.name.as_str()).collect();
    header.push(label_name);
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds
            .columns
            .iter()
            .zip(ds.x.row(i))
            .map(|(c, &v)| match c.kind {
                ColumnKind::Numeric => v.to_string(),
                ColumnKind::Categorical => c.categories[v as usize].clone(),
            })
            .collect();
        rec.push(match &ds.y {
            Labels::Class { values, names } => names[values[i]].clone(),
            Labels::Real(v) => v[i].to_string(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Train/validation/test fractions and the seed used to draw them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

/// Everything needed to rebuild a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub schema: CsvSchema,
    #[serde(default)]
    pub one_hot: bool,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub split: Option<SplitSpec>,
}

impl DatasetManifest {
    /// Reads a TOML manifest; a relative `path` is resolved against the manifest's directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        if m.path.is_relative() {
            if let Some(dir) = path.as_ref().parent() {
                m.path = dir.join(&m.path);
            }
        }
        Ok(m)
    }

    pub fn load(&self) -> Result<Dataset> {
        let mut ds = load_csv(&self.path, &self.schema)?;
        if self.one_hot {
            let cats: Vec<usize> = (0..ds.m())
                .filter(|&j| ds.columns[j].kind == ColumnKind::Categorical)
                .collect();
            ds = one_hot(&ds, &cats)?;
        }
        if self.normalize {
            ds = normalize(&ds);
        }
        if let Some(s) = self.split {
            ds = split(
                &ds,
                [s.train, s.val, s.test],
                &mut RngStream::derive(s.seed, "split"),
            )?;
        }
        Ok(ds)
    }
}

/// Replaces each listed categorical column by one indicator per category, in
/// category (lexicographic) order, at the column's original position.
pub fn one_hot(ds: &Dataset, columns: &[usize]) -> Result<Dataset> {
    for &j in columns {
        let col = ds
            .columns
            .get(j)
            .ok_or_else(|| Error::arg(format!("column {j} out of range")))?;
        if col.kind != ColumnKind::Categorical {
            return Err(Error::arg(format!(
                "column '{}' is not categorical",
                col.name
            )));
        }
    }
    let encode: BTreeSet<usize> = columns.iter().copied().collect();
    let mut out_cols = Vec::new();
    for (j, c) in ds.columns.iter().enumerate() {
        if encode.contains(&j) {
            out_cols.extend(
                c.categories
                    .iter()
                    .map(|cat| Column::numeric(format!("{}={}", c.name, cat))),
            );
        } else {
            out_cols.push(c.clone());
        }
    }
    let mut x = Matrix::zeros(ds.n(), out_cols.len());
    for i in 0..ds.n() {
        let mut k = 0;
        for (j, c) in ds.columns.iter().enumerate() {
            let v = ds.x.get(i, j);
            if encode.contains(&j) {
                x.set(i, k + v as usize, 1.0);
                k += c.categories.len();
            } else {
                x.set(i, k, v);
                k += 1;
            }
        }
    }
    Ok(Dataset {
        x,
        y: ds.y.clone(),
        columns: out_cols,
        splits: ds.splits.clone(),
    })
}

/// Tags `floor(f * n)` random rows for each of train/val/test; the rest stay untagged.
pub fn split(ds: &Dataset, fractions: [f64; 3], rng: &mut RngStream) -> Result<Dataset> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::arg(format!(
            "split fractions {fractions:?} must be >= 0 and sum to <= 1"
        )));
    }
    let n = ds.n();
    let sizes = fractions.map(|f| (f * n as f64 + 1e-9).floor() as usize);
    if sizes.iter().sum::<usize>() > n {
        return Err(Error::arg("split sizes exceed dataset size"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = ds.clone();
    out.splits = vec![None; n];
    let mut it = order.into_iter();
    for (tag, size) in [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .zip(sizes)
    {
        for i in it.by_ref().take(size) {
            out.splits[i] = Some(tag);
        }
    }
    Ok(out)
}

/// Sum task: `base_dim` uniform features, each split into `expansion`
/// nonnegative parts with Dirichlet(1, ..., 1) proportions; the label is
/// `1` iff the base sum exceeds `base_dim / 2`.
///
/// Base features come from `rng.child("base")` and proportions from
/// `rng.child("parts")`, so the same stream yields the same base data at
/// every expansion.
pub fn synthetic_sum_dataset(
    n: usize,
    base_dim: usize,
    expansion: usize,
    rng: &RngStream,
) -> Result<Dataset> {
    if n == 0 || base_dim == 0 || expansion == 0 {
        return Err(Error::arg("n, base_dim and expansion must be >= 1"));
    }
    let mut base_rng = rng.child("base");
    let mut part_rng = rng.child("parts");
    let m = base_dim * expansion;
    let mut x = Matrix::zeros(n, m);
    let mut labels = Vec::with_capacity(n);
    let mut w = vec![0.0; expansion];
    for i in 0..n {
        let base: Vec<f64> = (0..base_dim).map(|_| base_rng.uniform()).collect();
        let row = x.row_mut(i);
        for (b, &v) in base.iter().enumerate() {
            let cells = &mut row[b * expansion..(b + 1) * expansion];
            if expansion == 1 {
                cells[0] = v;
                continue;
            }
            for wk in w.iter_mut() {
                *wk = -(1.0 - part_rng.uniform()).ln();
            }
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            for (cell, wk) in cells.iter_mut().zip(&w).take(expansion - 1) {
                *cell = v * wk / total;
                acc += *cell;
            }
            // Last part absorbs rounding so the parts sum to v.
            cells[expansion - 1] = (v - acc).max(0.0);
        }
        labels.push(usize::from(
            base.iter().sum::<f64>() > base_dim as f64 / 2.0,
        ));
    }
    Dataset::new(x, Labels::binary(labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `m x k`, orthonormal columns.
    pub components: Matrix,
    /// Descending.
    pub variances: Vec<f64>,
}

fn covariance(x: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let (n, m) = (x.rows(), x.cols());
    let mut mean = vec![0.0; m];
    for row in x.iter_rows() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(m, m);
    let mut centered = vec![0.0; m];
    for row in x.iter_rows() {
        for ((c, v), mu) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - mu;
        }
        for a in 0..m {
            for b in a..m {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..m {
        for b in a..m {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

/// Top-`k` principal components of the (sample) covariance.
pub fn pca_fit(ds: &Dataset, k: usize) -> Result<PcaModel> {
    let m = ds.m();
    if k == 0 || k > m {
        return Err(Error::arg(format!("PCA needs 1 <= k <= {m}, got {k}")));
    }
    if ds.n() < 2 {
        return Err(Error::arg("PCA needs at least two rows"));
    }
    ds.x.ensure_finite()?;
    let (mean, cov) = covariance(&ds.x);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut components = Matrix::zeros(m, k);
    let mut variances = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        variances.push(eig.eigenvalues[idx].max(0.0));
        for r in 0..m {
            components.set(r, c, eig.eigenvectors[(r, idx)]);
        }
    }
    Ok(PcaModel {
        mean,
        components,
        variances,
    })
}

pub fn pca_transform(model: &PcaModel, ds: &Dataset) -> Result<Dataset> {
    let (m, k) = (model.components.rows(), model.components.cols());
    if ds.m() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: ds.m(),
        });
    }
    let mut x = Matrix::zeros(ds.n(), k);
    for i in 0..ds.n() {
        let row = ds.x.row(i);
        for c in 0..k {
            let v = (0..m)
                .map(|r| (row[r] - model.mean[r]) * model.components.get(r, c))
                .sum();
            x.set(i, c, v);
        }
    }
    Ok(Dataset {
        x,
        y: ds.y.clone(),
        columns: (0..k)
            .map(|c| Column::numeric(format!("pc{}", c + 1)))
            .collect(),
        splits: ds.splits.clone(),
    })
}

/// Per-column min-max scaling of numeric columns to `[0, 1]`; constant columns become 0.
pub fn normalize(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for (j, col) in ds.columns.iter().enumerate() {
        if col.kind != ColumnKind::Numeric || ds.n() == 0 {
            continue;
        }
        let values = ds.x.column(j);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in values.iter().enumerate() {
            let scaled = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            out.x.set(i, j, scaled);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    fn schema() -> CsvSchema {
        CsvSchema {
            label: "y".into(),
            label_kind: LabelKind::Class,
            categorical: vec!["color".into()],
            classes: None,
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.csv",
            "age,color,y\n31.5,red,yes\n22,blue,no\n47,red,no\n",
        );
        let ds = load_csv(&p, &schema()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.columns[1].categories, vec!["blue", "red"]);
        assert_eq!(ds.x.row(0), &[31.5, 1.0]);
        let q = dir.path().join("b.csv");
        save_csv(&ds, &q, "y").unwrap();
        assert_eq!(load_csv(&q, &schema()).unwrap(), ds);
    }

    #[test]
    fn csv_errors_name_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "age,color,y\n1,red,yes\n2,red\n");
        match load_csv(&p, &schema()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
        let p = write(&dir, "b.csv", "age,color,y\nabc,red,yes\n");
        match load_csv(&p, &schema()) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (1, "age")),
            other => panic!("{other:?}"),
        }
        let p = write(&dir, "c.csv", "age,color,y\n1,?,yes\n");
        assert!(matches!(load_csv(&p, &schema()), Err(Error::Parse { .. })));
        let p = write(&dir, "d.csv", "age,color,y\n1,red,maybe\n");
        let s = CsvSchema {
            classes: Some(vec!["no".into(), "yes".into()]),
            ..schema()
        };
        assert!(matches!(load_csv(&p, &s), Err(Error::Parse { .. })));
    }

    fn categorical_fixture(cards: &[usize], numeric: usize) -> Dataset {
        let rows = *cards.iter().max().unwrap();
        let mut columns: Vec<Column> = cards
            .iter()
            .enumerate()
            .map(|(j, &c)| Column {
                name: format!("c{j}"),
                kind: ColumnKind::Categorical,
                categories: (0..c).map(|v| format!("v{v:02}")).collect(),
            })
            .collect();
        columns.extend((0..numeric).map(|j| Column::numeric(format!("n{j}"))));
        let mut x = Matrix::zeros(rows, columns.len());
        for i in 0..rows {
            for (j, &c) in cards.iter().enumerate() {
                x.set(i, j, (i % c) as f64);
            }
            for j in 0..numeric {
                x.set(i, cards.len() + j, i as f64 * 0.5);
            }
        }
        Dataset::with_columns(x, Labels::Real(vec![0.0; rows]), columns).unwrap()
    }

    #[test]
    fn one_hot_binary_and_numeric_passthrough() {
        let ds = categorical_fixture(&[2], 1);
        let out = one_hot(&ds, &[0]).unwrap();
        assert_eq!(out.m(), 3);
        for i in 0..out.n() {
            assert_eq!(out.x.get(i, 0) + out.x.get(i, 1), 1.0);
            assert_eq!(out.x.get(i, 2), ds.x.get(i, 1));
        }
        assert!(one_hot(&ds, &[1]).is_err());
    }

    #[test]
    fn adult_style_cardinalities_give_108_features() {
        // workclass, education, marital-status, occupation, relationship, race,
        // sex, native-country; plus six numeric attributes.
        let ds = categorical_fixture(&[9, 16, 7, 15, 6, 5, 2, 42], 6);
        let cats: Vec<usize> = (0..8).collect();
        assert_eq!(one_hot(&ds, &cats).unwrap().m(), 108);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = synthetic_sum_dataset(100, 2, 1, &derive_stream(1, "d")).unwrap();
        let mut r = derive_stream(1, "s");
        let s = split(&ds, [0.8, 0.1, 0.1], &mut r).unwrap();
        assert_eq!(s.split_rows(Split::Train).len(), 80);
        assert_eq!(s.split_rows(Split::Val).len(), 10);
        assert_eq!(s.split_rows(Split::Test).len(), 10);
        let all = split(&ds, [1.0, 0.0, 0.0], &mut r).unwrap();
        assert_eq!(all.split_rows(Split::Train).len(), 100);
        assert!(split(&ds, [0.8, 0.3, 0.0], &mut r).is_err());
    }

    #[test]
    fn synthetic_sum_conserves_base() {
        let rng = derive_stream(3, "sum");
        let base = synthetic_sum_dataset(200, 10, 1, &rng).unwrap();
        assert_eq!(base.m(), 10);
        for e in [5, 10, 50, 100] {
            let ds = synthetic_sum_dataset(200, 10, e, &rng).unwrap();
            assert_eq!(ds.m(), 10 * e);
            assert_eq!(ds.y, base.y);
            for i in 0..200 {
                let s: f64 = ds.x.row(i).iter().sum();
                let b: f64 = base.x.row(i).iter().sum();
                assert!((s - b).abs() < 1e-12);
                assert!(ds.x.row(i).iter().all(|&v| v >= 0.0));
                for k in 0..10 {
                    let part: f64 = ds.x.row(i)[k * e..(k + 1) * e].iter().sum();
                    assert!((part - base.x.get(i, k)).abs() < 1e-12);
                }
            }
        }
        let ones = base.y.clone();
        if let Labels::Class { values, .. } = ones {
            let frac = values.iter().sum::<usize>() as f64 / 200.0;
            assert!((0.3..0.7).contains(&frac));
        }
    }

    /// Cyclic Jacobi eigenvalue solver used as an independent oracle.
    #[allow(clippy::needless_range_loop)]
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn random_dataset(n: usize, m: usize, seed: u64) -> Dataset {
        let mut r = derive_stream(seed, "pca");
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|j| r.standard_normal() * (1.0 + j as f64))
                    .collect()
            })
            .collect();
        Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            Labels::Real(vec![0.0; n]),
        )
        .unwrap()
    }

    #[test]
    fn pca_matches_jacobi_oracle() {
        let ds = random_dataset(50, 10, 4);
        let model = pca_fit(&ds, 4).unwrap();
        let (_, cov) = covariance(&ds.x);
        let dense: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..10).map(|j| cov[(i, j)]).collect())
            .collect();
        let oracle = jacobi_eigenvalues(dense);
        for (a, b) in model.variances.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
        for w in model.variances.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..10)
                    .map(|r| model.components.get(r, a) * model.components.get(r, b))
                    .sum();
                assert!((d - f64::from(u8::from(a == b))).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_full_rank_is_orthogonal() {
        let ds = random_dataset(30, 5, 5);
        let model = pca_fit(&ds, 5).unwrap();
        let z = pca_transform(&model, &ds).unwrap();
        for i in 0..ds.n() {
            for r in 0..5 {
                let back: f64 = model.mean[r]
                    + (0..5)
                        .map(|c| z.x.get(i, c) * model.components.get(r, c))
                        .sum::<f64>();
                assert!((back - ds.x.get(i, r)).abs() < 1e-8);
            }
        }
        assert!(pca_fit(&ds, 6).is_err());
    }

    #[test]
    fn pca_rank_one_line() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64, 2.0 * i as f64 + 1.0])
            .collect();
        let ds = Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            Labels::Real(vec![0.0; 20]),
        )
        .unwrap();
        let model = pca_fit(&ds, 2).unwrap();
        assert!(model.variances[1].abs() < 1e-10);
    }

    #[test]
    fn normalize_examples() {
        let rows = vec![
            vec![-1.0, 0.2, 5.0],
            vec![1.0, 0.0, 5.0],
            vec![0.0, 1.0, 5.0],
        ];
        let ds = Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            Labels::Real(vec![0.0; 3]),
        )
        .unwrap();
        let n = normalize(&ds);
        assert_eq!(n.x.column(0), vec![0.0, 1.0, 0.5]);
        assert_eq!(n.x.column(1), vec![0.2, 0.0, 1.0]);
        assert_eq!(n.x.column(2), vec![0.0, 0.0, 0.0]);
        assert_eq!(normalize(&n), n);
    }
}
