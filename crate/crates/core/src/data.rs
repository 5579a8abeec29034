//! Labeled datasets with a binary protected attribute.
//!
//! Points carry their feature vector (without the intercept; the trainer
//! appends it), the protected group bit and the binary label. When the
//! protected attribute is used as a model feature it is always coordinate 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Raw CSV values treated as missing.
const MISSING_MARKERS: [&str; 4] = ["", "NA", "N/A", "?"];

/// One of the four cells `S_ay` of the protected-group by label partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub protected: bool,
    pub label: bool,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::new(false, false),
        Group::new(false, true),
        Group::new(true, false),
        Group::new(true, true),
    ];

    pub const fn new(protected: bool, label: bool) -> Self {
        Group { protected, label }
    }

    /// Position in `[S_00, S_01, S_10, S_11]`.
    pub fn index(self) -> usize {
        2 * self.protected as usize + self.label as usize
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S_{}{}", self.protected as u8, self.label as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub features: Vec<f64>,
    pub protected: bool,
    pub label: bool,
}

impl LabeledPoint {
    pub fn new(features: Vec<f64>, protected: bool, label: bool) -> Self {
        LabeledPoint {
            features,
            protected,
            label,
        }
    }

    pub fn group(&self) -> Group {
        Group::new(self.protected, self.label)
    }
}

/// Column-level metadata shared by a dataset and every subset cut from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub feature_names: Vec<String>,
    /// Feature coordinate holding the protected bit, if it is a model input.
    pub protected_index: Option<usize>,
    pub protected_name: String,
    pub label_name: String,
}

impl FeatureMeta {
    /// Metadata for anonymous features `x0, x1, ...`, optionally with the
    /// protected attribute as coordinate 0.
    pub fn anonymous(dim: usize, protected_as_feature: bool) -> Self {
        let feature_names = (0..dim)
            .map(|j| {
                if protected_as_feature && j == 0 {
                    "protected".to_string()
                } else {
                    format!("x{j}")
                }
            })
            .collect();
        FeatureMeta {
            feature_names,
            protected_index: protected_as_feature.then_some(0),
            protected_name: "protected".into(),
            label_name: "label".into(),
        }
    }
}

/// An immutable collection of labeled points of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<LabeledPoint>,
    group_counts: [usize; 4],
    meta: FeatureMeta,
}

impl Dataset {
    pub fn new(points: Vec<LabeledPoint>, meta: FeatureMeta) -> Result<Self> {
        let dim = meta.feature_names.len();
        if let Some(p) = meta.protected_index {
            if p >= dim {
                return Err(Error::invalid(format!(
                    "protected index {p} out of range for dimension {dim}"
                )));
            }
        }
        let mut group_counts = [0usize; 4];
        for (row, point) in points.iter().enumerate() {
            if point.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: point.features.len(),
                });
            }
            if let Some(j) = point.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidValue {
                    column: meta.feature_names[j].clone(),
                    row,
                    message: "non-finite feature value".into(),
                });
            }
            if let Some(p) = meta.protected_index {
                let expected = if point.protected { 1.0 } else { 0.0 };
                if point.features[p] != expected {
                    return Err(Error::InvalidValue {
                        column: meta.feature_names[p].clone(),
                        row,
                        message: "protected feature disagrees with protected field".into(),
                    });
                }
            }
            group_counts[point.group().index()] += 1;
        }
        Ok(Dataset {
            points,
            group_counts,
            meta,
        })
    }

    /// Builds a dataset from raw rows; `protected_as_feature` prepends the
    /// protected bit as coordinate 0.
    pub fn from_rows(
        rows: impl IntoIterator<Item = (Vec<f64>, bool, bool)>,
        protected_as_feature: bool,
    ) -> Result<Self> {
        let points: Vec<LabeledPoint> = rows
            .into_iter()
            .map(|(mut x, a, y)| {
                if protected_as_feature {
                    x.insert(0, if a { 1.0 } else { 0.0 });
                }
                LabeledPoint::new(x, a, y)
            })
            .collect();
        let dim = points.first().map_or(0, |p| p.features.len());
        Dataset::new(points, FeatureMeta::anonymous(dim, protected_as_feature))
    }

    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Feature dimension, without the intercept.
    pub fn dim(&self) -> usize {
        self.meta.feature_names.len()
    }

    /// `|S_00|, |S_01|, |S_10|, |S_11|`.
    pub fn group_counts(&self) -> [usize; 4] {
        self.group_counts
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.group_counts[group.index()]
    }

    pub fn meta(&self) -> &FeatureMeta {
        &self.meta
    }

    pub fn labels(&self) -> impl Iterator<Item = bool> + '_ {
        self.points.iter().map(|p| p.label)
    }

    /// Errors with the first empty `S_ay`.
    pub fn require_all_groups(&self) -> Result<()> {
        match Group::ALL.iter().find(|g| self.group_count(**g) == 0) {
            Some(g) => Err(Error::EmptyGroup(*g)),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let points: Vec<LabeledPoint> = indices.iter().map(|&i| self.points[i].clone()).collect();
        let mut group_counts = [0usize; 4];
        for p in &points {
            group_counts[p.group().index()] += 1;
        }
        Dataset {
            points,
            group_counts,
            meta: self.meta.clone(),
        }
    }

    /// Flips every protected bit (and the protected feature, if present).
    pub fn swap_protected(&self) -> Dataset {
        let points = self
            .points
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.protected = !p.protected;
                if let Some(j) = self.meta.protected_index {
                    q.features[j] = 1.0 - q.features[j];
                }
                q
            })
            .collect();
        Dataset::new(points, self.meta.clone()).expect("swapping preserves validity")
    }

    /// Writes the encoded dataset as CSV: protected column, the remaining
    /// feature columns, then the label column. Loading the file back with
    /// [`Dataset::reload_schema`] reproduces the dataset.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let others: Vec<usize> = (0..self.dim())
            .filter(|&j| Some(j) != self.meta.protected_index)
            .collect();
        let mut header = vec![self.meta.protected_name.clone()];
        header.extend(others.iter().map(|&j| self.meta.feature_names[j].clone()));
        header.push(self.meta.label_name.clone());
        wtr.write_record(&header)?;
        for p in &self.points {
            let mut rec = vec![(p.protected as u8).to_string()];
            rec.extend(others.iter().map(|&j| p.features[j].to_string()));
            rec.push((p.label as u8).to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Schema matching the layout produced by [`Dataset::write_csv`].
    pub fn reload_schema(&self) -> DataSchema {
        DataSchema {
            label_column: self.meta.label_name.clone(),
            protected_column: self.meta.protected_name.clone(),
            positive_label: "1".into(),
            protected_one: "1".into(),
            categorical_columns: Vec::new(),
            include_protected_as_feature: self.meta.protected_index.is_some(),
        }
    }
}

/// How raw CSV columns map onto a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSchema {
    pub label_column: String,
    pub protected_column: String,
    /// Raw label value mapped to 1; the one other observed value maps to 0.
    pub positive_label: String,
    /// Raw protected value mapped to 1.
    pub protected_one: String,
    pub categorical_columns: Vec<String>,
    pub include_protected_as_feature: bool,
}

impl DataSchema {
    pub fn new(label: &str, protected: &str) -> Self {
        DataSchema {
            label_column: label.into(),
            protected_column: protected.into(),
            positive_label: "1".into(),
            protected_one: "1".into(),
            categorical_columns: Vec::new(),
            include_protected_as_feature: true,
        }
    }

    /// Parses a `key = value` file. Keys: `label`, `protected`,
    /// `positive_label`, `protected_one`, `categoricals` (comma separated),
    /// `include_protected` (`true`/`false`). `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("schema line {}: expected key = value", lineno + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().trim_matches('"').to_string());
        }
        let take = |k: &str| kv.get(k).cloned();
        let label = take("label").ok_or_else(|| Error::invalid("schema: missing `label`"))?;
        let protected = take("protected").ok_or_else(|| Error::invalid("schema: missing `protected`"))?;
        let mut schema = DataSchema::new(&label, &protected);
        if let Some(v) = take("positive_label") {
            schema.positive_label = v;
        }
        if let Some(v) = take("protected_one") {
            schema.protected_one = v;
        }
        if let Some(v) = take("categoricals") {
            schema.categorical_columns = split_list(&v);
        }
        if let Some(v) = take("include_protected") {
            schema.include_protected_as_feature = v
                .parse()
                .map_err(|_| Error::invalid(format!("schema: include_protected = {v}")))?;
        }
        for k in kv.keys() {
            if !matches!(
                k.as_str(),
                "label" | "protected" | "positive_label" | "protected_one" | "categoricals" | "include_protected"
            ) {
                return Err(Error::invalid(format!("schema: unknown key `{k}`")));
            }
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DataSchema::from_kv_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_column == self.protected_column {
            return Err(Error::invalid("label and protected columns must differ"));
        }
        for c in &self.categorical_columns {
            if *c == self.label_column || *c == self.protected_column {
                return Err(Error::invalid(format!(
                    "column `{c}` cannot be both categorical and label/protected"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Ordered one-hot levels per categorical column.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoding {
    pub levels: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub dropped_rows: usize,
    pub encoding: Encoding,
}

/// Loads a CSV, one-hot encoding categoricals over their observed levels
/// (sorted), and dropping rows with any missing value.
pub fn load_csv(path: &Path, schema: &DataSchema) -> Result<LoadedCsv> {
    load_csv_inner(path, schema, None)
}

/// Like [`load_csv`] but with fixed one-hot levels, e.g. those stored with a
/// trained model. Unseen levels encode as all-zero.
pub fn load_csv_with_encoding(path: &Path, schema: &DataSchema, encoding: &Encoding) -> Result<LoadedCsv> {
    load_csv_inner(path, schema, Some(encoding))
}

enum ColumnKind {
    Label,
    Protected,
    Numeric,
    Categorical,
}

fn load_csv_inner(path: &Path, schema: &DataSchema, fixed: Option<&Encoding>) -> Result<LoadedCsv> {
    schema.validate()?;
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let label_col = col(&schema.label_column)?;
    let protected_col = col(&schema.protected_column)?;
    for c in &schema.categorical_columns {
        col(c)?;
    }
    let kinds: Vec<ColumnKind> = header
        .iter()
        .enumerate()
        .map(|(i, h)| {
            if i == label_col {
                ColumnKind::Label
            } else if i == protected_col {
                ColumnKind::Protected
            } else if schema.categorical_columns.contains(h) {
                ColumnKind::Categorical
            } else {
                ColumnKind::Numeric
            }
        })
        .collect();

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        let fields: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
        if fields.iter().any(|f| MISSING_MARKERS.contains(&f.as_str())) {
            dropped += 1;
            continue;
        }
        rows.push(fields);
    }
    if rows.is_empty() {
        return Err(Error::NoRows { dropped });
    }

    check_binary(&rows, label_col, &schema.label_column, &schema.positive_label)?;
    check_binary(&rows, protected_col, &schema.protected_column, &schema.protected_one)?;

    let encoding = match fixed {
        Some(enc) => enc.clone(),
        None => {
            let mut levels = BTreeMap::new();
            for (i, k) in kinds.iter().enumerate() {
                if let ColumnKind::Categorical = k {
                    let set: BTreeSet<&str> = rows.iter().map(|r| r[i].as_str()).collect();
                    levels.insert(header[i].clone(), set.into_iter().map(String::from).collect());
                }
            }
            Encoding { levels }
        }
    };

    let mut feature_names = Vec::new();
    if schema.include_protected_as_feature {
        feature_names.push(schema.protected_column.clone());
    }
    for (i, k) in kinds.iter().enumerate() {
        match k {
            ColumnKind::Numeric => feature_names.push(header[i].clone()),
            ColumnKind::Categorical => {
                let lv = encoding
                    .levels
                    .get(&header[i])
                    .ok_or_else(|| Error::invalid(format!("no encoding for categorical `{}`", header[i])))?;
                feature_names.extend(lv.iter().map(|l| format!("{}={}", header[i], l)));
            }
            _ => {}
        }
    }

    let mut points = Vec::with_capacity(rows.len());
    for (r, fields) in rows.iter().enumerate() {
        let protected = fields[protected_col] == schema.protected_one;
        let label = fields[label_col] == schema.positive_label;
        let mut x = Vec::with_capacity(feature_names.len());
        if schema.include_protected_as_feature {
            x.push(if protected { 1.0 } else { 0.0 });
        }
        for (i, k) in kinds.iter().enumerate() {
            match k {
                ColumnKind::Numeric => {
                    let v: f64 = fields[i].parse().map_err(|_| Error::InvalidValue {
                        column: header[i].clone(),
                        row: r,
                        message: format!("`{}` is not numeric; list it as categorical", fields[i]),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::InvalidValue {
                            column: header[i].clone(),
                            row: r,
                            message: "non-finite value".into(),
                        });
                    }
                    x.push(v);
                }
                ColumnKind::Categorical => {
                    for l in &encoding.levels[&header[i]] {
                        x.push(if *l == fields[i] { 1.0 } else { 0.0 });
                    }
                }
                _ => {}
            }
        }
        points.push(LabeledPoint::new(x, protected, label));
    }

    let meta = FeatureMeta {
        feature_names,
        protected_index: schema.include_protected_as_feature.then_some(0),
        protected_name: schema.protected_column.clone(),
        label_name: schema.label_column.clone(),
    };
    Ok(LoadedCsv {
        dataset: Dataset::new(points, meta)?,
        dropped_rows: dropped,
        encoding,
    })
}

/// A binary column may hold the declared value plus at most one other.
fn check_binary(rows: &[Vec<String>], col: usize, name: &str, one: &str) -> Result<()> {
    let mut other: Option<&str> = None;
    for (r, row) in rows.iter().enumerate() {
        let v = row[col].as_str();
        if v == one {
            continue;
        }
        match other {
            None => other = Some(v),
            Some(o) if o == v => {}
            Some(o) => {
                return Err(Error::InvalidValue {
                    column: name.to_string(),
                    row: r,
                    message: format!("expected `{one}` or `{o}`, found `{v}`"),
                })
            }
        }
    }
    Ok(())
}

/// Index sets `[S_00, S_01, S_10, S_11]`.
pub fn partition_groups(ds: &Dataset) -> [Vec<usize>; 4] {
    let mut out: [Vec<usize>; 4] = Default::default();
    for (i, p) in ds.points().iter().enumerate() {
        out[p.group().index()].push(i);
    }
    out
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Train/test index sets for a uniform random split; `|test| = round(n * f)`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_test = test_size(n, test_fraction)?;
    let idx = shuffled_indices(n, seed);
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

fn test_size(n: usize, test_fraction: f64) -> Result<usize> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::invalid(format!(
            "test fraction {test_fraction} leaves a side empty for n = {n}"
        )));
    }
    Ok(n_test)
}

pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Split stratified on the four `S_ay` cells: same total test size as
/// [`split`], each cell's share within one point of proportional.
pub fn split_stratified(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    let n_test = test_size(n, test_fraction)?;
    let mut idx = shuffled_indices(n, seed);
    idx.sort_by_key(|&i| ds.points()[i].group().index());
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (k, &i) in idx.iter().enumerate() {
        if (k + 1) * n_test / n > k * n_test / n {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Validation index sets for `k` folds; the first `n % k` folds get one
/// extra point.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::invalid(format!("fold count {k} outside [2, {n}]")));
    }
    let idx = shuffled_indices(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut v = idx[start..start + len].to_vec();
        v.sort_unstable();
        folds.push(v);
        start += len;
    }
    Ok(folds)
}

/// `(train, validation)` pairs.
pub fn kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    let folds = kfold_indices(ds.len(), k, seed)?;
    let mut in_fold = vec![0usize; ds.len()];
    for (f, v) in folds.iter().enumerate() {
        for &i in v {
            in_fold[i] = f;
        }
    }
    Ok(folds
        .iter()
        .enumerate()
        .map(|(f, val)| {
            let train: Vec<usize> = (0..ds.len()).filter(|&i| in_fold[i] != f).collect();
            (ds.subset(&train), ds.subset(val))
        })
        .collect())
}

/// Per-coordinate affine map `x -> (x - mean) / stddev`, fit on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    /// False for the protected coordinate and zero-variance columns.
    pub scaled: Vec<bool>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            means: vec![0.0; dim],
            stddevs: vec![1.0; dim],
            scaled: vec![false; dim],
        }
    }

    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.dim();
        let n = ds.len() as f64;
        let mut st = Standardization::identity(d);
        if ds.is_empty() {
            return st;
        }
        for j in 0..d {
            let mean = ds.points().iter().map(|p| p.features[j]).sum::<f64>() / n;
            let var = ds.points().iter().map(|p| (p.features[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            st.means[j] = mean;
            st.stddevs[j] = sd;
            st.scaled[j] = Some(j) != ds.meta().protected_index && sd > 1e-12 * (1.0 + mean.abs());
        }
        st
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                got: ds.dim(),
            });
        }
        let points = ds
            .points()
            .iter()
            .map(|p| {
                let mut q = p.clone();
                self.apply_in_place(&mut q.features);
                q
            })
            .collect();
        Dataset::new(points, ds.meta().clone())
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            if self.scaled[j] {
                *v = (*v - self.means[j]) / self.stddevs[j];
            }
        }
    }
}

/// Z-scores `train` and applies the same map to `test`.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Standardization)> {
    let st = Standardization::fit(train);
    Ok((st.apply(train)?, st.apply(test)?, st))
}
