//! Tabular binary-classification tasks: CSV ingestion with standardization,
//! stratified train/validation splits, and seeded synthetic generators with
//! known ground-truth weights.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Discrete,
}

/// Per-column bookkeeping. For continuous columns `mean`/`std` are the raw
/// statistics removed by standardization; discrete columns keep their
/// integer codes and record `mean = 0`, `std = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    pub kind: FeatureKind,
    pub mean: f64,
    pub std: f64,
    /// Category labels in code order, for string-valued discrete columns.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl FeatureMeta {
    fn identity(name: &str, kind: FeatureKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            mean: 0.0,
            std: 1.0,
            categories: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    features: Array2<f64>,
    labels: Vec<u8>,
    feature_meta: Vec<FeatureMeta>,
    subgroup_column: Option<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Vec<u8>,
        feature_meta: Vec<FeatureMeta>,
        subgroup_column: Option<usize>,
    ) -> Result<Self> {
        let (n, p) = features.dim();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 rows, got {n}")));
        }
        if p < 2 {
            return Err(Error::InvalidData(format!("need at least 2 features, got {p}")));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len(),
            });
        }
        if let Some((row, &v)) = labels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryLabel {
                row,
                value: v.to_string(),
            });
        }
        if feature_meta.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: feature_meta.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite feature value".into()));
        }
        if let Some(g) = subgroup_column {
            if g >= p {
                return Err(Error::InvalidData(format!("subgroup column {g} out of range")));
            }
            if !features.column(g).iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(Error::InvalidData(format!(
                    "subgroup column {:?} is not binary",
                    feature_meta[g].name
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            feature_meta,
            subgroup_column,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_meta(&self) -> &[FeatureMeta] {
        &self.feature_meta
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.feature_meta.iter().map(|m| m.name.clone()).collect()
    }

    pub fn subgroup_column(&self) -> Option<usize> {
        self.subgroup_column
    }

    /// Feature rows for the given indices, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), idx)
    }

    pub fn select_labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Rows whose subgroup column equals `group`.
    pub fn subgroup_rows(&self, rows: &[usize], group: u8) -> Result<Vec<usize>> {
        let col = self
            .subgroup_column
            .ok_or_else(|| Error::InvalidData("dataset has no subgroup column".into()))?;
        Ok(rows
            .iter()
            .copied()
            .filter(|&r| self.features[[r, col]] == group as f64)
            .collect())
    }

    /// Write feature columns followed by a `label` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.feature_names();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, &y) in self.features.rows().into_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read back a file produced by [`Dataset::write_csv`] without any
    /// further preprocessing.
    pub fn read_processed_csv<R: Read>(
        reader: R,
        name: &str,
        feature_meta: Vec<FeatureMeta>,
        subgroup_column: Option<usize>,
    ) -> Result<Self> {
        let table = RawTable::read(reader)?;
        let p = feature_meta.len();
        if table.header.len() != p + 1 || table.header[p] != "label" {
            return Err(Error::InvalidData(
                "processed CSV must hold the feature columns followed by `label`".into(),
            ));
        }
        let n = table.rows.len();
        let mut features = Array2::zeros((n, p));
        for (r, rec) in table.rows.iter().enumerate() {
            for c in 0..p {
                features[[r, c]] = parse_cell(&rec[c]).ok_or_else(|| Error::UnparseableCell {
                    row: r + 1,
                    column: table.header[c].clone(),
                    value: rec[c].clone(),
                })?;
            }
        }
        let labels = parse_labels(&table, p)?;
        Dataset::new(name, features, labels, feature_meta, subgroup_column)
    }
}

/// Load a raw CSV: continuous columns are standardized to mean 0 / std 1,
/// string-valued and 0/1 columns are kept as integer codes.
pub fn load_csv(path: &Path, label_column: &str, subgroup_column: Option<&str>) -> Result<Dataset> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let file = std::fs::File::open(path)?;
    read_csv(file, &name, label_column, subgroup_column)
}

pub fn read_csv<R: Read>(
    reader: R,
    name: &str,
    label_column: &str,
    subgroup_column: Option<&str>,
) -> Result<Dataset> {
    let table = RawTable::read(reader)?;
    let label_idx = table
        .header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::InvalidData(format!("missing label column {label_column:?}")))?;
    let labels = parse_labels(&table, label_idx)?;

    let n = table.rows.len();
    let feature_cols: Vec<usize> = (0..table.header.len()).filter(|&c| c != label_idx).collect();
    let mut features = Array2::zeros((n, feature_cols.len()));
    let mut meta = Vec::with_capacity(feature_cols.len());

    for (out_c, &c) in feature_cols.iter().enumerate() {
        let col_name = &table.header[c];
        let cells: Vec<&str> = table.rows.iter().map(|r| r[c].trim()).collect();
        let parsed: Vec<Option<f64>> = cells.iter().map(|s| parse_cell(s)).collect();
        let n_numeric = parsed.iter().filter(|v| v.is_some()).count();
        let any_empty = cells.iter().position(|s| s.is_empty());

        if n_numeric == n {
            let values: Vec<f64> = parsed.into_iter().map(Option::unwrap).collect();
            let binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
            if binary {
                if values.iter().all(|&v| v == values[0]) {
                    return Err(Error::ConstantColumn(col_name.clone()));
                }
                for (r, v) in values.iter().enumerate() {
                    features[[r, out_c]] = *v;
                }
                meta.push(FeatureMeta::identity(col_name, FeatureKind::Discrete));
            } else {
                let (mean, std) = mean_std(&values);
                if !(std > 0.0) {
                    return Err(Error::ConstantColumn(col_name.clone()));
                }
                for (r, v) in values.iter().enumerate() {
                    features[[r, out_c]] = (v - mean) / std;
                }
                meta.push(FeatureMeta {
                    name: col_name.clone(),
                    kind: FeatureKind::Continuous,
                    mean,
                    std,
                    categories: Vec::new(),
                });
            }
        } else if n_numeric == 0 && any_empty.is_none() {
            let categories: Vec<String> = cells
                .iter()
                .map(|s| s.to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if categories.len() < 2 {
                return Err(Error::ConstantColumn(col_name.clone()));
            }
            for (r, s) in cells.iter().enumerate() {
                features[[r, out_c]] = categories.binary_search_by(|c| c.as_str().cmp(s)).unwrap() as f64;
            }
            let mut m = FeatureMeta::identity(col_name, FeatureKind::Discrete);
            m.categories = categories;
            meta.push(m);
        } else {
            // Mixed numeric/non-numeric, or empty cells: report the first offender.
            let bad = if n_numeric == 0 {
                any_empty.unwrap()
            } else {
                parsed.iter().position(|v| v.is_none()).unwrap()
            };
            return Err(Error::UnparseableCell {
                row: bad + 1,
                column: col_name.clone(),
                value: cells[bad].to_string(),
            });
        }
    }

    let subgroup = match subgroup_column {
        None => None,
        Some(s) => {
            let idx = meta
                .iter()
                .position(|m| m.name == s)
                .ok_or_else(|| Error::InvalidData(format!("missing subgroup column {s:?}")))?;
            if meta[idx].kind != FeatureKind::Discrete || (!meta[idx].categories.is_empty() && meta[idx].categories.len() != 2) {
                return Err(Error::InvalidData(format!("subgroup column {s:?} is not binary")));
            }
            Some(idx)
        }
    };
    Dataset::new(name, features, labels, meta, subgroup)
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl RawTable {
    fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(Error::InvalidData("missing header row".into()));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows })
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_labels(table: &RawTable, col: usize) -> Result<Vec<u8>> {
    table
        .rows
        .iter()
        .enumerate()
        .map(|(r, rec)| match parse_cell(&rec[col]) {
            Some(v) if v == 0.0 => Ok(0),
            Some(v) if v == 1.0 => Ok(1),
            _ => Err(Error::NonBinaryLabel {
                row: r + 1,
                value: rec[col].clone(),
            }),
        })
        .collect()
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn standardize_columns(features: &mut Array2<f64>, cols: &[usize]) -> Vec<(f64, f64)> {
    cols.iter()
        .map(|&c| {
            let values: Vec<f64> = features.column(c).to_vec();
            let (mean, std) = mean_std(&values);
            let std = if std > 0.0 { std } else { 1.0 };
            features.column_mut(c).mapv_inplace(|v| (v - mean) / std);
            (mean, std)
        })
        .collect()
}

/// Parameters of the Gaussian logistic task; serialized as the sidecar
/// manifest written next to generated CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub weights: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 5000 rows × 20 features with a descending, sign-alternating weight
    /// profile.
    pub fn default_task(seed: u64) -> Self {
        Self {
            n: 5000,
            weights: default_weights(20),
            noise_std: 0.0,
            seed,
        }
    }
}

/// Weights with clearly separated magnitudes and alternating signs, except
/// that ranks 3 and 4 are close so their attribution ranges overlap.
pub fn default_weights(p: usize) -> Vec<f64> {
    (0..p)
        .map(|j| {
            let mag = match j {
                0 => 2.4,
                1 => 1.8,
                2 => 1.3,
                3 => 1.2,
                _ => 0.9 * 0.8f64.powi(j as i32 - 4),
            };
            if j % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Features i.i.d. N(0, 1) then standardized; `y ~ Bernoulli(sigmoid(w·x + e))`
/// with `e ~ N(0, noise_std²)`. Classes are balanced by per-class quotas
/// (rejection of draws whose class quota is full).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let p = spec.weights.len();
    if p < 2 {
        return Err(Error::InvalidArgument(format!("need p >= 2, got {p}")));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, labels) = balanced_draws(spec.n, p, &mut rng, |x, rng| {
        let noise = gaussian(rng, spec.noise_std);
        dot(&spec.weights, x) + noise
    })?;
    let mut features = Array2::from_shape_vec((spec.n, p), rows).unwrap();
    let cols: Vec<usize> = (0..p).collect();
    let stats = standardize_columns(&mut features, &cols);
    let meta = stats
        .into_iter()
        .enumerate()
        .map(|(j, (mean, std))| FeatureMeta {
            name: format!("gauss_{j}"),
            kind: FeatureKind::Continuous,
            mean,
            std,
            categories: Vec::new(),
        })
        .collect();
    Dataset::new("synthetic", features, labels, meta, None)
}

/// A task whose label rule depends on a binary `group` column (appended as
/// the last feature): rows with group 0 use `weights_majority`, rows with
/// group 1 use `weights_minority`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub n: usize,
    pub weights_majority: Vec<f64>,
    pub weights_minority: Vec<f64>,
    pub minority_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
}

pub fn generate_subgroup_task(spec: &SubgroupSpec) -> Result<Dataset> {
    let p = spec.weights_majority.len();
    if p < 2 || spec.weights_minority.len() != p {
        return Err(Error::InvalidArgument(
            "group weight vectors must share a length >= 2".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.minority_fraction) || spec.minority_fraction == 0.0 {
        return Err(Error::InvalidArgument("minority_fraction must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, labels) = balanced_draws(spec.n, p + 1, &mut rng, |x, rng| {
        let minority = rng.random::<f64>() < spec.minority_fraction;
        x[p] = if minority { 1.0 } else { 0.0 };
        let w = if minority {
            &spec.weights_minority
        } else {
            &spec.weights_majority
        };
        dot(w, &x[..p]) + gaussian(rng, spec.noise_std)
    })?;
    let mut features = Array2::from_shape_vec((spec.n, p + 1), rows).unwrap();
    let cols: Vec<usize> = (0..p).collect();
    let stats = standardize_columns(&mut features, &cols);
    let mut meta: Vec<FeatureMeta> = stats
        .into_iter()
        .enumerate()
        .map(|(j, (mean, std))| FeatureMeta {
            name: format!("gauss_{j}"),
            kind: FeatureKind::Continuous,
            mean,
            std,
            categories: Vec::new(),
        })
        .collect();
    meta.push(FeatureMeta::identity("group", FeatureKind::Discrete));
    Dataset::new("subgroup_synthetic", features, labels, meta, Some(p))
}

fn balanced_draws<F>(n: usize, width: usize, rng: &mut ChaCha8Rng, mut logit: F) -> Result<(Vec<f64>, Vec<u8>)>
where
    F: FnMut(&mut [f64], &mut ChaCha8Rng) -> f64,
{
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need n >= 2, got {n}")));
    }
    let quota = [n - n / 2, n / 2];
    let mut counts = [0usize; 2];
    let mut rows = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    let mut x = vec![0.0; width];
    let budget = 1000 * n;
    let mut draws = 0;
    while labels.len() < n {
        draws += 1;
        if draws > budget {
            return Err(Error::InvalidArgument(
                "could not balance classes within the draw budget".into(),
            ));
        }
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let z = logit(&mut x, rng);
        let y = u8::from(rng.random::<f64>() < sigmoid(z));
        if counts[y as usize] < quota[y as usize] {
            counts[y as usize] += 1;
            rows.extend_from_slice(&x);
            labels.push(y);
        }
    }
    Ok((rows, labels))
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        rng.sample(Normal::new(0.0, std).unwrap())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub seed: u64,
}

/// Label-stratified split; both sides must contain both classes.
pub fn split(ds: &Dataset, valid_fraction: f64, seed: u64) -> Result<TaskSplit> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "valid_fraction must lie in (0, 1), got {valid_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut valid_idx = Vec::new();
    for class in 0..=1u8 {
        let mut idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_valid = (idx.len() as f64 * valid_fraction).round() as usize;
        if n_valid == 0 || n_valid == idx.len() {
            return Err(Error::InvalidData(format!(
                "class {class} ({} rows) cannot appear on both sides of a {valid_fraction} split",
                idx.len()
            )));
        }
        valid_idx.extend_from_slice(&idx[..n_valid]);
        train_idx.extend_from_slice(&idx[n_valid..]);
    }
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    Ok(TaskSplit {
        train_idx,
        valid_idx,
        seed,
    })
}
