//! Synthetic data generators, label noise injection, splitting and CSV ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DipsError, Result};
use crate::seed::rng;

/// A feature matrix with optional class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    /// Validating constructor. Requires at least one sample.
    pub fn new(features: Array2<f64>, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(invalid("dataset must contain at least one sample"));
        }
        Self::new_allow_empty(features, labels, class_count)
    }

    /// Same checks as [`Dataset::new`] but accepts zero rows; used for split parts.
    pub fn new_allow_empty(
        features: Array2<f64>,
        labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(invalid("class_count must be positive"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("features contain NaN or infinite values"));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.nrows() {
                return Err(DipsError::ShapeMismatch {
                    expected: format!("{} labels", features.nrows()),
                    got: format!("{} labels", labels.len()),
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
                return Err(invalid(format!("label {bad} >= class_count {class_count}")));
            }
        }
        Ok(Self {
            features,
            labels,
            class_count,
            feature_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Labels, or an error when the dataset is unlabeled.
    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| invalid("dataset has no labels"))
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Copy of the dataset with labels replaced.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        let mut d = Dataset::new_allow_empty(self.features.clone(), Some(labels), self.class_count)?;
        d.feature_names = self.feature_names.clone();
        Ok(d)
    }

    /// Copy of the dataset with labels dropped.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    /// Per-class counts of the labels (zero-filled to `class_count`).
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.class_count];
        for &l in self.labels()? {
            counts[l] += 1;
        }
        Ok(counts)
    }
}

/// Labeled, unlabeled and test parts of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub labeled: Dataset,
    /// Features only; ground truth lives in `hidden_labels`.
    pub unlabeled: Dataset,
    pub hidden_labels: Vec<usize>,
    pub test: Dataset,
    pub seed: u64,
}

impl Split {
    pub fn class_count(&self) -> usize {
        self.labeled.class_count
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.labeled.class_count;
        if self.unlabeled.class_count != c || self.test.class_count != c {
            return Err(invalid("split parts disagree on class_count"));
        }
        if self.hidden_labels.len() != self.unlabeled.len() {
            return Err(invalid("hidden ground truth length differs from unlabeled size"));
        }
        self.labeled.labels()?;
        if !self.test.is_empty() {
            self.test.labels()?;
        }
        let d = self.labeled.n_features();
        if self.unlabeled.n_features() != d || self.test.n_features() != d {
            return Err(invalid("split parts disagree on feature count"));
        }
        Ok(())
    }
}

/// Ground truth for an injected corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub flipped_indices: BTreeSet<usize>,
    /// Original label of every flipped index.
    pub original_labels: BTreeMap<usize, usize>,
    pub p_corrupt: f64,
    pub seed: u64,
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    // (0, 1): boundary-exact draws are regenerated
    loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            return v;
        }
    }
}

/// Two uniform square clusters: `[0,1]^2` labeled 1 and `[-1,0]^2` labeled 0.
///
/// Each sample picks a quadrant with probability 1/2. Coordinates exactly on a
/// quadrant boundary are redrawn so the classes stay strictly separated.
pub fn generate_two_quadrants(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(invalid("two-quadrant generator needs n >= 2"));
    }
    let mut rng = rng(seed);
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let upper = rng.random_bool(0.5);
        let sign = if upper { 1.0 } else { -1.0 };
        features[[i, 0]] = sign * open_unit(&mut rng);
        features[[i, 1]] = sign * open_unit(&mut rng);
        labels.push(usize::from(upper));
    }
    let mut d = Dataset::new(features, Some(labels), 2)?;
    d.feature_names = Some(vec!["x0".into(), "x1".into()]);
    Ok(d)
}

fn moon_point<R: Rng>(class: usize, noise: Option<&Normal<f64>>, rng: &mut R) -> [f64; 2] {
    let t = rng.random::<f64>() * std::f64::consts::PI;
    let (mut x, mut y) = if class == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    if let Some(n) = noise {
        x += n.sample(rng);
        y += n.sample(rng);
    }
    [x, y]
}

fn moons(classes: &[usize], noise: Option<&Normal<f64>>, rng: &mut impl Rng) -> Result<Dataset> {
    let mut features = Array2::zeros((classes.len(), 2));
    for (i, &c) in classes.iter().enumerate() {
        let [x, y] = moon_point(c, noise, rng);
        features[[i, 0]] = x;
        features[[i, 1]] = y;
    }
    Dataset::new_allow_empty(features, Some(classes.to_vec()), 2)
}

/// Two interleaving half circles with isotropic Gaussian perturbation.
///
/// The labeled part holds exactly `n_labeled_per_class` samples of each class;
/// unlabeled and test samples pick their class with probability 1/2.
pub fn generate_two_moons(
    n_labeled_per_class: usize,
    n_unlab: usize,
    n_test: usize,
    std: f64,
    seed: u64,
) -> Result<Split> {
    if n_labeled_per_class == 0 || n_unlab == 0 || n_test == 0 {
        return Err(invalid("two-moons counts must be >= 1"));
    }
    if !(std.is_finite() && std >= 0.0) {
        return Err(invalid("std must be finite and >= 0"));
    }
    let mut rng = rng(seed);
    let normal = if std > 0.0 {
        Some(Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?)
    } else {
        None
    };
    let mut lab_classes: Vec<usize> = (0..2 * n_labeled_per_class).map(|i| i % 2).collect();
    lab_classes.shuffle(&mut rng);
    let unlab_classes: Vec<usize> = (0..n_unlab).map(|_| usize::from(rng.random_bool(0.5))).collect();
    let test_classes: Vec<usize> = (0..n_test).map(|_| usize::from(rng.random_bool(0.5))).collect();

    let labeled = moons(&lab_classes, normal.as_ref(), &mut rng)?;
    let unlabeled = moons(&unlab_classes, normal.as_ref(), &mut rng)?;
    let test = moons(&test_classes, normal.as_ref(), &mut rng)?;
    Ok(Split {
        labeled,
        unlabeled: unlabeled.without_labels(),
        hidden_labels: unlab_classes,
        test,
        seed,
    })
}

/// Replace `round(p_corrupt * n)` labels, chosen uniformly without replacement,
/// by a different class drawn uniformly.
pub fn inject_symmetric_label_noise(
    labels: &[usize],
    p_corrupt: f64,
    class_count: usize,
    seed: u64,
) -> Result<(Vec<usize>, NoiseReport)> {
    if !(0.0..0.5).contains(&p_corrupt) {
        return Err(invalid(format!("p_corrupt {p_corrupt} outside [0, 0.5)")));
    }
    if class_count < 2 {
        return Err(invalid("label noise needs at least two classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(invalid(format!("label {bad} >= class_count {class_count}")));
    }
    let n = labels.len();
    let k = (p_corrupt * n as f64).round() as usize;
    let mut rng = rng(seed);
    let mut noisy = labels.to_vec();
    let mut flipped = BTreeSet::new();
    let mut original = BTreeMap::new();
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let old = labels[i];
        let mut new = rng.random_range(0..class_count - 1);
        if new >= old {
            new += 1;
        }
        noisy[i] = new;
        flipped.insert(i);
        original.insert(i, old);
    }
    Ok((
        noisy,
        NoiseReport {
            flipped_indices: flipped,
            original_labels: original,
            p_corrupt,
            seed,
        },
    ))
}

/// Largest-remainder allocation of `total` across groups proportional to `sizes`.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 * total as f64 / n as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = total - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &g in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if quota[g] < sizes[g] {
            quota[g] += 1;
            remaining -= 1;
        }
    }
    quota
}

/// Partition a dataset into labeled, unlabeled and test parts.
///
/// The labeled part is stratified by class when labels are present. The test
/// part receives whatever remains after the labeled and unlabeled fractions.
pub fn split_lab_unlab_test(
    dataset: &Dataset,
    lab_fraction: f64,
    unlab_fraction: f64,
    seed: u64,
) -> Result<Split> {
    let ok = |f: f64| f.is_finite() && (0.0..=1.0).contains(&f);
    if !ok(lab_fraction) || !ok(unlab_fraction) || lab_fraction + unlab_fraction > 1.0 + 1e-12 {
        return Err(invalid("fractions must lie in [0,1] and sum to at most 1"));
    }
    let labels = dataset.labels()?;
    let n = dataset.len();
    let n_lab = ((lab_fraction * n as f64).round() as usize).min(n);
    let n_unlab = ((unlab_fraction * n as f64).round() as usize).min(n - n_lab);
    let mut rng = rng(seed);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quota = apportion(&sizes, n_lab);

    let mut lab_idx = Vec::with_capacity(n_lab);
    let mut rest = Vec::with_capacity(n - n_lab);
    for (members, &q) in by_class.iter().zip(&quota) {
        lab_idx.extend_from_slice(&members[..q]);
        rest.extend_from_slice(&members[q..]);
    }
    lab_idx.sort_unstable();
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let mut unlab_idx = rest[..n_unlab].to_vec();
    let mut test_idx = rest[n_unlab..].to_vec();
    unlab_idx.sort_unstable();
    test_idx.sort_unstable();

    let unlabeled = dataset.subset(&unlab_idx);
    let hidden = unlabeled.labels.clone().unwrap_or_default();
    Ok(Split {
        labeled: dataset.subset(&lab_idx),
        unlabeled: unlabeled.without_labels(),
        hidden_labels: hidden,
        test: dataset.subset(&test_idx),
        seed,
    })
}

/// Stratified subset keeping `max(1, round(fraction * n_c))` members of every
/// class present. For a fixed seed the subsets are nested in `fraction`.
pub fn stratified_prefix(labels: &[usize], class_count: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut rng = crate::seed::rng(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_count {
            return Err(DipsError::IndexOutOfRange { index: y, len: class_count });
        }
        by_class[y].push(i);
    }
    let mut out = Vec::new();
    for members in &mut by_class {
        members.shuffle(&mut rng);
        if members.is_empty() {
            continue;
        }
        let keep = ((fraction * members.len() as f64).round() as usize).max(1);
        out.extend_from_slice(&members[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Two-quadrant experiment split: labeled and unlabeled parts come from one
/// draw, the test set is drawn independently from the clean distribution.
pub fn two_quadrant_split(n_lab: usize, n_unlab: usize, n_test: usize, seed: u64) -> Result<Split> {
    let n = n_lab + n_unlab;
    let pool = generate_two_quadrants(n, seed)?;
    let mut split = split_lab_unlab_test(&pool, n_lab as f64 / n as f64, n_unlab as f64 / n as f64, seed)?;
    split.test = generate_two_quadrants(n_test, seed ^ 0x5445_5354)?;
    Ok(split)
}

/// Which CSV column carries the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

/// Result of [`load_csv`]. `label_dictionary` is set when labels are not integers.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub label_dictionary: Option<BTreeMap<String, usize>>,
}

/// Load a comma-separated file. Rows and columns in errors are zero-based
/// indices into the data rows (header excluded) and the raw columns.
pub fn load_csv(path: impl AsRef<Path>, label_column: &LabelColumn, has_header: bool) -> Result<LoadedCsv> {
    let file = File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Option<Vec<String>> = if has_header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(invalid("csv file has no data rows"));
    }
    let width = header.as_ref().map_or(records[0].len(), Vec::len);
    let label_idx = match label_column {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| invalid(format!("label column {name:?} not found")))?,
    };
    if label_idx >= width {
        return Err(invalid(format!("label column {label_idx} out of range for {width} columns")));
    }
    if width < 2 {
        return Err(invalid("csv needs at least one feature column and a label column"));
    }

    let mut features = Array2::zeros((records.len(), width - 1));
    let mut raw_labels = Vec::with_capacity(records.len());
    for (row, record) in records.iter().enumerate() {
        if record.len() != width {
            return Err(DipsError::Parse {
                row,
                column: record.len().min(width),
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut j = 0;
        for (column, cell) in record.iter().enumerate() {
            if column == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| DipsError::Parse {
                row,
                column,
                message: format!("non-numeric feature cell {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(DipsError::Parse {
                    row,
                    column,
                    message: format!("non-finite feature cell {cell:?}"),
                });
            }
            features[[row, j]] = value;
            j += 1;
        }
    }

    let (labels, dictionary) = encode_labels(&raw_labels);
    let class_count = dictionary.len();
    if class_count < 2 {
        return Err(invalid("label column contains a single class"));
    }
    let all_integer_identity = dictionary
        .iter()
        .all(|(k, &v)| k.parse::<i64>().ok() == Some(v as i64));
    let mut dataset = Dataset::new(features, Some(labels), class_count)?;
    dataset.feature_names = header.map(|h| {
        h.into_iter()
            .enumerate()
            .filter(|(i, _)| *i != label_idx)
            .map(|(_, n)| n)
            .collect()
    });
    Ok(LoadedCsv {
        dataset,
        label_dictionary: (!all_integer_identity).then_some(dictionary),
    })
}

/// Map raw label strings to dense class indices. Integer labels are ordered
/// numerically, anything else lexicographically.
fn encode_labels(raw: &[String]) -> (Vec<usize>, BTreeMap<String, usize>) {
    let distinct: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
    let mut keys: Vec<&str> = distinct.into_iter().collect();
    if keys.iter().all(|k| k.parse::<i64>().is_ok()) {
        keys.sort_by_key(|k| k.parse::<i64>().unwrap_or_default());
    }
    let dict: BTreeMap<String, usize> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.to_string(), i))
        .collect();
    let labels = raw.iter().map(|r| dict[r.as_str()]).collect();
    (labels, dict)
}

/// Write a label dictionary as a JSON object mapping label string to index.
pub fn write_label_dictionary(path: impl AsRef<Path>, dict: &BTreeMap<String, usize>) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(file, dict)?;
    Ok(())
}
