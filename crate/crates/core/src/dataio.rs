//! Tabular data ingestion: CSV loading with kind inference, stratified
//! train/test split with cross-validation folds, and the shared numeric
//! encoding every model family consumes.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("label column `{0}` not found in header")]
    MissingLabel(String),
    #[error("column `{0}` named in a schema hint does not exist")]
    UnknownHint(String),
    #[error("column `{column}` forced numeric but value `{value}` is not a number")]
    NotNumeric { column: String, value: String },
    #[error("no feature columns besides the label")]
    NoAttributes,
    #[error("no complete rows ({dropped} dropped for missing values)")]
    NoRows { dropped: usize },
    #[error("need at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("invalid split parameters: {0}")]
    InvalidSplit(String),
    #[error("class `{class}` has {train_rows} training rows, fewer than {folds} folds")]
    ClassTooSmall { class: String, train_rows: usize, folds: usize },
    #[error("dataset has no train/test split yet")]
    NotSplit,
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributeKind {
    /// `min`/`max` are taken over training rows once the dataset is split.
    Numeric {
        min: f64,
        max: f64,
    },
    Categorical {
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub kind: AttributeKind,
}

impl Attribute {
    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, AttributeKind::Numeric { .. })
    }

    pub fn categories(&self) -> &[String] {
        match &self.kind {
            AttributeKind::Categorical { categories } => categories,
            AttributeKind::Numeric { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Indices into the attribute's category list.
    Categorical(Vec<u32>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    /// Numeric value, or the category index for categorical columns.
    pub fn value(&self, row: usize) -> f64 {
        match self {
            Column::Numeric(v) => v[row],
            Column::Categorical(v) => v[row] as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub split: Vec<Split>,
    /// Fold index for training rows, `None` for test rows.
    pub folds: Vec<Option<usize>>,
    pub n_folds: usize,
}

/// Per-column kind overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct SchemaHints {
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub attributes: Vec<Attribute>,
    pub columns: Vec<Column>,
    pub label_name: String,
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
    pub partition: Option<Partition>,
    /// Rows removed at load time because a field was missing.
    pub dropped_rows: usize,
}

fn is_missing(s: &str) -> bool {
    s.is_empty() || s == "?"
}

pub fn load_csv(path: impl AsRef<Path>, label: &str, hints: &SchemaHints) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_csv_reader(file, label, hints)
}

pub fn load_csv_reader<R: Read>(reader: R, label: &str, hints: &SchemaHints) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label)
        .ok_or_else(|| DataError::MissingLabel(label.to_owned()))?;
    for h in hints.categorical.iter().chain(&hints.numeric) {
        if !header.contains(h) {
            return Err(DataError::UnknownHint(h.clone()));
        }
    }
    if header.len() < 2 {
        return Err(DataError::NoAttributes);
    }

    let mut raw: Vec<Vec<String>> = Vec::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.iter().any(is_missing) {
            dropped += 1;
            continue;
        }
        raw.push(rec.iter().map(str::to_owned).collect());
    }
    if raw.is_empty() {
        return Err(DataError::NoRows { dropped });
    }

    let mut classes: Vec<String> = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::with_capacity(raw.len());
    for row in &raw {
        let v = &row[label_idx];
        let id = *class_index.entry(v.clone()).or_insert_with(|| {
            classes.push(v.clone());
            classes.len() - 1
        });
        labels.push(id);
    }
    if classes.len() < 2 {
        return Err(DataError::TooFewClasses(classes.len()));
    }

    let mut attributes = Vec::new();
    let mut columns = Vec::new();
    for (j, name) in header.iter().enumerate() {
        if j == label_idx {
            continue;
        }
        let forced_cat = hints.categorical.contains(name);
        let forced_num = hints.numeric.contains(name);
        let parsed: Option<Vec<f64>> = if forced_cat {
            None
        } else {
            raw.iter().map(|r| r[j].parse::<f64>().ok().filter(|x| x.is_finite())).collect()
        };
        match parsed {
            Some(values) => {
                let (min, max) = min_max(values.iter().copied());
                attributes.push(Attribute {
                    name: name.clone(),
                    kind: AttributeKind::Numeric { min, max },
                });
                columns.push(Column::Numeric(values));
            }
            None => {
                if forced_num {
                    let bad = raw
                        .iter()
                        .map(|r| &r[j])
                        .find(|s| s.parse::<f64>().map_or(true, |x| !x.is_finite()))
                        .cloned()
                        .unwrap_or_default();
                    return Err(DataError::NotNumeric {
                        column: name.clone(),
                        value: bad,
                    });
                }
                let mut categories: Vec<String> = Vec::new();
                let mut index: HashMap<&str, u32> = HashMap::new();
                let mut codes = Vec::with_capacity(raw.len());
                for r in &raw {
                    let v = r[j].as_str();
                    let code = *index.entry(v).or_insert_with(|| {
                        categories.push(v.to_owned());
                        (categories.len() - 1) as u32
                    });
                    codes.push(code);
                }
                attributes.push(Attribute {
                    name: name.clone(),
                    kind: AttributeKind::Categorical { categories },
                });
                columns.push(Column::Categorical(codes));
            }
        }
    }

    Ok(Dataset {
        attributes,
        columns,
        label_name: label.to_owned(),
        classes,
        labels,
        partition: None,
        dropped_rows: dropped,
    })
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn partition(&self) -> Result<&Partition> {
        self.partition.as_ref().ok_or(DataError::NotSplit)
    }

    /// Training row indices in ascending order.
    pub fn train_rows(&self) -> Vec<usize> {
        self.rows_with(Split::Train)
    }

    /// Test row indices in ascending order; position in this list is the
    /// test instance id used throughout the session API.
    pub fn test_rows(&self) -> Vec<usize> {
        self.rows_with(Split::Test)
    }

    fn rows_with(&self, which: Split) -> Vec<usize> {
        match &self.partition {
            Some(p) => (0..self.n_rows()).filter(|&i| p.split[i] == which).collect(),
            None => Vec::new(),
        }
    }

    /// SHA-256 over classes, attribute schema, every row, labels, split and
    /// folds.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let put_str = |h: &mut Sha256, s: &str| {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        };
        put_str(&mut h, &self.label_name);
        h.update((self.classes.len() as u64).to_le_bytes());
        for c in &self.classes {
            put_str(&mut h, c);
        }
        for (a, col) in self.attributes.iter().zip(&self.columns) {
            put_str(&mut h, &a.name);
            match col {
                Column::Numeric(v) => {
                    h.update([0u8]);
                    for x in v {
                        h.update(x.to_le_bytes());
                    }
                }
                Column::Categorical(v) => {
                    h.update([1u8]);
                    for c in a.categories() {
                        put_str(&mut h, c);
                    }
                    for x in v {
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        if let Some(p) = &self.partition {
            h.update((p.n_folds as u32).to_le_bytes());
            for (s, f) in p.split.iter().zip(&p.folds) {
                h.update([*s as u8]);
                h.update(f.map_or(u32::MAX, |f| f as u32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stratified train/test split and stratified fold assignment.
///
/// The test size is `round(N * test_fraction)`, apportioned to classes by
/// largest remainder. Training rows of each class are dealt round-robin into
/// folds with one counter shared across classes, so both per-class and
/// overall fold sizes differ by at most one.
pub fn split_and_fold(mut ds: Dataset, test_fraction: f64, folds: usize, seed: u64) -> Result<Dataset> {
    let n = ds.n_rows();
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidSplit(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    if folds < 2 {
        return Err(DataError::InvalidSplit(format!("folds = {folds}, need >= 2")));
    }
    let n_f = n as f64;
    if n_f * test_fraction < 1.0 {
        return Err(DataError::InvalidSplit(format!(
            "{n} rows x {test_fraction} gives an empty test set"
        )));
    }
    if n_f * (1.0 - test_fraction) < folds as f64 {
        return Err(DataError::InvalidSplit(format!(
            "{n} rows leave fewer training rows than {folds} folds"
        )));
    }

    let k = ds.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let n_test = ((n_f * test_fraction).round() as usize).clamp(1, n - 1);
    let quotas: Vec<f64> = by_class.iter().map(|rows| rows.len() as f64 * n_test as f64 / n_f).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = n_test - take.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }

    for (c, rows) in by_class.iter().enumerate() {
        let train = rows.len() - take[c];
        if train < folds {
            return Err(DataError::ClassTooSmall {
                class: ds.classes[c].clone(),
                train_rows: train,
                folds,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = vec![Split::Train; n];
    let mut fold_of = vec![None; n];
    let mut counter = 0usize;
    for (c, rows) in by_class.iter_mut().enumerate() {
        rows.shuffle(&mut rng);
        for &i in &rows[..take[c]] {
            split[i] = Split::Test;
        }
        for &i in &rows[take[c]..] {
            fold_of[i] = Some(counter % folds);
            counter += 1;
        }
    }

    ds.partition = Some(Partition {
        split,
        folds: fold_of,
        n_folds: folds,
    });

    let train_rows = ds.train_rows();
    for (attr, col) in ds.attributes.iter_mut().zip(&ds.columns) {
        if let (AttributeKind::Numeric { min, max }, Column::Numeric(v)) = (&mut attr.kind, col) {
            let (lo, hi) = min_max(train_rows.iter().map(|&i| v[i]));
            *min = lo;
            *max = hi;
        }
    }
    Ok(ds)
}

/// Which source attribute (and category) an encoded column comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub attribute: usize,
    pub category: Option<usize>,
}

/// One-hot categoricals and train-standardized numerics, `N x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedView {
    pub matrix: Matrix,
    pub column_map: Vec<EncodedColumn>,
    /// Numeric attributes with zero training variance, encoded as zeros.
    pub zero_variance: Vec<usize>,
}

impl EncodedView {
    pub fn n_rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    /// Column range of each attribute, in attribute order.
    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut out: Vec<std::ops::Range<usize>> = Vec::new();
        for (j, c) in self.column_map.iter().enumerate() {
            match out.get_mut(c.attribute) {
                Some(r) => r.end = j + 1,
                None => out.push(j..j + 1),
            }
        }
        out
    }

    /// Recovers the category index of a categorical attribute from its
    /// one-hot block.
    pub fn decode_category(&self, attribute: usize, row: usize) -> Option<usize> {
        let block = self.blocks().into_iter().nth(attribute)?;
        self.column_map[block.start].category?;
        let values = &self.row(row)[block.clone()];
        values.iter().position(|&v| v == 1.0)
    }
}

pub fn encode(ds: &Dataset) -> Result<EncodedView> {
    ds.partition()?;
    let train = ds.train_rows();
    let n = ds.n_rows();

    let mut column_map = Vec::new();
    let mut standardize: Vec<Option<(f64, f64)>> = Vec::new();
    let mut zero_variance = Vec::new();
    for (a, (attr, col)) in ds.attributes.iter().zip(&ds.columns).enumerate() {
        match col {
            Column::Numeric(v) => {
                let m = train.len() as f64;
                let mean = train.iter().map(|&i| v[i]).sum::<f64>() / m;
                let var = train.iter().map(|&i| (v[i] - mean).powi(2)).sum::<f64>() / m;
                let sd = var.sqrt();
                if sd <= 0.0 || !sd.is_finite() {
                    zero_variance.push(a);
                    log::warn!("attribute `{}` has zero training variance; encoded as 0", attr.name);
                }
                column_map.push(EncodedColumn {
                    attribute: a,
                    category: None,
                });
                standardize.push(Some((mean, sd)));
            }
            Column::Categorical(_) => {
                for c in 0..attr.categories().len() {
                    column_map.push(EncodedColumn {
                        attribute: a,
                        category: Some(c),
                    });
                    standardize.push(None);
                }
            }
        }
    }

    let d = column_map.len();
    let mut matrix = Matrix::zeros(n, d);
    for (j, (cm, st)) in column_map.iter().zip(&standardize).enumerate() {
        match (&ds.columns[cm.attribute], st) {
            (Column::Numeric(v), Some((mean, sd))) => {
                for (i, &x) in v.iter().enumerate() {
                    let z = if *sd > 0.0 { (x - mean) / sd } else { 0.0 };
                    matrix.set(i, j, z);
                }
            }
            (Column::Categorical(codes), None) => {
                let cat = cm.category.expect("categorical column has a category") as u32;
                for (i, &code) in codes.iter().enumerate() {
                    if code == cat {
                        matrix.set(i, j, 1.0);
                    }
                }
            }
            _ => unreachable!("column kind and encoding disagree"),
        }
    }
    debug_assert!(ds.columns.iter().all(|c| c.len() == n));

    Ok(EncodedView {
        matrix,
        column_map,
        zero_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, label: &str) -> Result<Dataset> {
        load_csv_reader(text.as_bytes(), label, &SchemaHints::default())
    }

    #[test]
    fn infers_kinds_and_class_order() {
        let ds = load("a,b,y\n1,x,no\n2,y,yes\n3,x,no\n", "y").unwrap();
        assert_eq!(ds.classes, vec!["no", "yes"]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert!(ds.attributes[0].is_numeric());
        assert_eq!(ds.attributes[1].categories(), &["x".to_string(), "y".to_string()]);
    }

    #[test]
    fn mixed_column_becomes_categorical() {
        let ds = load("v,y\n1,a\n2,b\nx,a\n", "y").unwrap();
        assert_eq!(ds.attributes[0].categories().len(), 3);
    }

    #[test]
    fn hints_override_inference() {
        let hints = SchemaHints {
            categorical: vec!["v".into()],
            numeric: vec![],
        };
        let ds = load_csv_reader("v,y\n1,a\n2,b\n".as_bytes(), "y", &hints).unwrap();
        assert!(!ds.attributes[0].is_numeric());

        let hints = SchemaHints {
            categorical: vec![],
            numeric: vec!["v".into()],
        };
        let err = load_csv_reader("v,y\n1,a\nq,b\n".as_bytes(), "y", &hints).unwrap_err();
        assert!(matches!(err, DataError::NotNumeric { .. }));
    }

    #[test]
    fn missing_values_drop_rows() {
        let ds = load("a,b,y\n1,?,p\n2,q,n\n,r,p\n4,s,p\n", "y").unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.dropped_rows, 2);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(load("y\na\nb\n", "y"), Err(DataError::NoAttributes)));
        assert!(matches!(load("a,y\n1,a\n", "z"), Err(DataError::MissingLabel(_))));
        assert!(matches!(load("a,y\n1,a\n2,a\n", "y"), Err(DataError::TooFewClasses(1))));
        assert!(matches!(load("a,y\n", "y"), Err(DataError::NoRows { .. })));
        assert!(matches!(
            load_csv("/nonexistent/file.csv", "y", &SchemaHints::default()),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn quoted_fields() {
        let ds = load("name,y\n\"a, b\",p\n\"c\",n\n", "y").unwrap();
        assert_eq!(ds.attributes[0].categories()[0], "a, b");
    }

    fn balanced(n: usize) -> Dataset {
        let mut text = String::from("x,y\n");
        for i in 0..n {
            text.push_str(&format!("{},{}\n", i, if i % 2 == 0 { "a" } else { "b" }));
        }
        load(&text, "y").unwrap()
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let a = split_and_fold(balanced(1000), 0.2, 5, 7).unwrap();
        let b = split_and_fold(balanced(1000), 0.2, 5, 7).unwrap();
        assert_eq!(a.partition, b.partition);
        let test = a.test_rows();
        assert_eq!(test.len(), 200);
        let pos = test.iter().filter(|&&i| a.labels[i] == 0).count();
        assert!((99..=101).contains(&pos));
        let c = split_and_fold(balanced(1000), 0.2, 5, 8).unwrap();
        assert_ne!(a.partition, c.partition);
    }

    #[test]
    fn folds_partition_training_rows() {
        let ds = split_and_fold(balanced(1000), 0.2, 5, 3).unwrap();
        let p = ds.partition().unwrap();
        let mut sizes = [0usize; 5];
        for (i, s) in p.split.iter().enumerate() {
            match s {
                Split::Train => sizes[p.folds[i].unwrap()] += 1,
                Split::Test => assert!(p.folds[i].is_none()),
            }
        }
        assert_eq!(sizes.iter().sum::<usize>(), 800);
        assert!(sizes.iter().all(|&s| (159..=161).contains(&s)));
    }

    #[test]
    fn tiny_class_rejected() {
        let mut text = String::from("x,y\n");
        for i in 0..50 {
            text.push_str(&format!("{i},a\n"));
        }
        text.push_str("1,b\n2,b\n3,b\n");
        let err = split_and_fold(load(&text, "y").unwrap(), 0.2, 5, 1).unwrap_err();
        assert!(matches!(err, DataError::ClassTooSmall { .. }));
    }

    #[test]
    fn encode_examples() {
        let text = "n,c,k,y\n8,a,5,p\n12,b,5,n\n10,c,5,p\n14,b,5,n\n6,a,5,p\n10,c,5,n\n";
        let ds = load(text, "y").unwrap();
        let mut ds = split_and_fold(ds, 0.34, 2, 0).unwrap();
        // pin the split so the standardization constants are known
        ds.partition = Some(Partition {
            split: vec![Split::Train, Split::Train, Split::Train, Split::Test, Split::Test, Split::Test],
            folds: vec![Some(0), Some(1), Some(0), None, None, None],
            n_folds: 2,
        });
        let view = encode(&ds).unwrap();
        assert_eq!(view.n_cols(), 1 + 3 + 1);
        // train mean of n = 10, population sd = sqrt(8/3)
        let sd = (8.0f64 / 3.0).sqrt();
        assert!((view.row(3)[0] - 4.0 / sd).abs() < 1e-12);
        assert_eq!(&view.row(1)[1..4], &[0.0, 1.0, 0.0]);
        assert_eq!(view.zero_variance, vec![2]);
        assert!(view.matrix.iter_rows().all(|r| r[4] == 0.0));
        assert_eq!(view.decode_category(1, 2), Some(2));
        assert_eq!(view.decode_category(0, 2), None);
    }

    #[test]
    fn standardization_uses_train_stats() {
        let text = "n,y\n8,a\n12,b\n14,a\n100,b\n";
        let mut ds = load(text, "y").unwrap();
        ds.partition = Some(Partition {
            split: vec![Split::Train, Split::Train, Split::Test, Split::Test],
            folds: vec![Some(0), Some(1), None, None],
            n_folds: 2,
        });
        let view = encode(&ds).unwrap();
        // train mean 10, sd 2
        assert_eq!(view.row(2)[0], 2.0);
        assert_eq!(view.row(3)[0], 45.0);
    }

    #[test]
    fn encode_requires_split() {
        let ds = load("a,y\n1,p\n2,n\n", "y").unwrap();
        assert!(matches!(encode(&ds), Err(DataError::NotSplit)));
    }

    #[test]
    fn fingerprint_tracks_split() {
        let a = split_and_fold(balanced(100), 0.2, 5, 1).unwrap();
        let b = split_and_fold(balanced(100), 0.2, 5, 2).unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
