//! Feature attributions and rankings.
//!
//! Global attributions are averages over instances. Permutation importance
//! supplies magnitudes; its sign comes from the mean analytic input gradient
//! of the logit, with an exact zero resolved to `+`.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, Dataset, TaskSplit};
use crate::error::{check_len, Error, Result};
use crate::models::{log_loss, LinearModel, MaskedModel, Predictor};
use crate::rashomon::{read_matrix_csv, write_matrix_csv, RashomonSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub values: Vec<f64>,
    pub method: String,
    pub model_id: String,
}

impl AttributionVector {
    pub fn new(values: Vec<f64>, method: impl Into<String>, model_id: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("attribution values must be finite".into()));
        }
        Ok(Self {
            values,
            method: method.into(),
            model_id: model_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// −1, 0 or +1 per feature.
    pub fn signs(&self) -> Vec<i8> {
        self.values.iter().map(|&v| sign_of(v)).collect()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.abs()).collect()
    }
}

pub(crate) fn sign_of(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Per-feature ranks, 1 = most important. Ties are always broken by feature
/// index, so a ranking is a permutation of `1..=p`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ranking {
    ranks: Vec<usize>,
    /// Set when every magnitude was equal and the ranking is just the index
    /// order.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    degenerate: bool,
}

impl Ranking {
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        let p = ranks.len();
        let mut seen = vec![false; p];
        for &r in &ranks {
            if r == 0 || r > p || seen[r - 1] {
                return Err(Error::InvalidArgument(format!(
                    "ranks {ranks:?} are not a permutation of 1..={p}"
                )));
            }
            seen[r - 1] = true;
        }
        Ok(Self {
            ranks,
            degenerate: false,
        })
    }

    /// `order[k]` is the feature placed at rank `k + 1`.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        let p = order.len();
        let mut ranks = vec![0; p];
        for (pos, &f) in order.iter().enumerate() {
            if f >= p || ranks[f] != 0 {
                return Err(Error::InvalidArgument(format!(
                    "order {order:?} is not a permutation of 0..{p}"
                )));
            }
            ranks[f] = pos + 1;
        }
        Ok(Self {
            ranks,
            degenerate: false,
        })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            ranks: (1..=p).collect(),
            degenerate: false,
        }
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn rank(&self, feature: usize) -> usize {
        self.ranks[feature]
    }

    /// Features from most to least important.
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0; self.ranks.len()];
        for (f, &r) in self.ranks.iter().enumerate() {
            order[r - 1] = f;
        }
        order
    }

    /// The `k` most important features, most important first.
    pub fn top(&self, k: usize) -> Vec<usize> {
        self.order().into_iter().take(k).collect()
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.ranks.iter().map(|&r| r as f64).collect()
    }
}

/// Descending |value| with stable index tie-break.
pub fn rank_by_magnitude(values: &[f64]) -> Ranking {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut ranking = Ranking::from_order(&order).expect("sorted indices form a permutation");
    ranking.degenerate = values.len() > 1 && values.iter().all(|v| v.abs() == values[0].abs());
    ranking
}

pub fn rank_of(a: &AttributionVector) -> Ranking {
    rank_by_magnitude(&a.values)
}

/// Signed coefficients of a logistic model fitted on standardized features.
pub fn ground_truth_lr(model: &LinearModel) -> AttributionVector {
    AttributionVector {
        values: model.weights.clone(),
        method: "lr_coefficients".into(),
        model_id: "reference_lr".into(),
    }
}

pub fn permutation_fis<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    split: &TaskSplit,
    n_repeats: usize,
    seed: u64,
) -> Result<AttributionVector> {
    permutation_fis_on_rows(model, ds, &split.valid_idx, n_repeats, seed)
}

/// Permutation importance on `rows`: mean increase in log loss when one
/// column is shuffled, floored at zero, signed by the mean input gradient.
pub fn permutation_fis_on_rows<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    rows: &[usize],
    n_repeats: usize,
    seed: u64,
) -> Result<AttributionVector> {
    if n_repeats < 1 {
        return Err(Error::InvalidArgument("n_repeats must be >= 1".into()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to explain".into()));
    }
    check_len(ds.p(), model.n_features())?;
    let p = ds.p();
    let mut x = ds.select_rows(rows);
    let y = ds.select_labels(rows);
    let loss = |x: &Array2<f64>| -> f64 {
        let probs: Vec<f64> = model.logits(x.view()).into_iter().map(sigmoid).collect();
        log_loss(&probs, &y).expect("lengths agree")
    };
    let base = loss(&x);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = vec![0.0; p];
    let mut perm: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..n_repeats {
        for (j, delta) in deltas.iter_mut().enumerate() {
            perm.shuffle(&mut rng);
            let original = x.column(j).to_owned();
            for (r, &src) in perm.iter().enumerate() {
                x[[r, j]] = original[src];
            }
            *delta += loss(&x) - base;
            x.column_mut(j).assign(&original);
        }
    }

    let grad = mean_gradient(model, &x);
    let values = deltas
        .iter()
        .zip(&grad)
        .map(|(d, g)| {
            let magnitude = (d / n_repeats as f64).max(0.0);
            if *g < 0.0 {
                -magnitude
            } else {
                magnitude
            }
        })
        .collect();
    AttributionVector::new(values, "permutation_fis", "")
}

fn mean_gradient<P: Predictor + ?Sized>(model: &P, x: &Array2<f64>) -> Vec<f64> {
    let mut acc = vec![0.0; x.ncols()];
    for row in x.rows() {
        let g = model.logit_gradient(row.as_slice().expect("standard layout"));
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += gi;
        }
    }
    let n = x.nrows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    VanillaGrad,
    GradXInput,
    IntegratedGradients,
    Smoothgrad,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Random,
        BaselineKind::VanillaGrad,
        BaselineKind::GradXInput,
        BaselineKind::IntegratedGradients,
        BaselineKind::Smoothgrad,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::VanillaGrad => "vanilla_grad",
            BaselineKind::GradXInput => "grad_x_input",
            BaselineKind::IntegratedGradients => "integrated_gradients",
            BaselineKind::Smoothgrad => "smoothgrad",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown explainer {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// Left Riemann steps from the zero baseline.
    pub ig_steps: usize,
    pub smoothgrad_samples: usize,
    /// Noise scale as a fraction of each feature's standard deviation.
    pub smoothgrad_sigma: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            ig_steps: 50,
            smoothgrad_samples: 25,
            smoothgrad_sigma: 0.1,
        }
    }
}

pub fn explain_baseline<P: Predictor + ?Sized>(
    kind: BaselineKind,
    model: &P,
    ds: &Dataset,
    rows: &[usize],
    params: &BaselineParams,
    seed: u64,
) -> Result<AttributionVector> {
    check_len(ds.p(), model.n_features())?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to explain".into()));
    }
    let p = ds.p();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if kind == BaselineKind::Random {
        let values = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        return AttributionVector::new(values, kind.name(), "");
    }
    let x = ds.select_rows(rows);
    let stds: Vec<f64> = x.std_axis(Axis(0), 0.0).to_vec();
    let mut acc = vec![0.0; p];
    for row in x.rows() {
        let xi = row.to_vec();
        let local = local_attribution(kind, model, &xi, params, &stds, &mut rng);
        for (a, v) in acc.iter_mut().zip(local) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    AttributionVector::new(acc.into_iter().map(|a| a / n).collect(), kind.name(), "")
}

/// Per-instance attribution for one of the gradient-based explainers.
pub fn local_attribution<P: Predictor + ?Sized>(
    kind: BaselineKind,
    model: &P,
    x: &[f64],
    params: &BaselineParams,
    feature_std: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    match kind {
        BaselineKind::Random => (0..x.len()).map(|_| rng.sample(StandardNormal)).collect(),
        BaselineKind::VanillaGrad => model.logit_gradient(x),
        BaselineKind::GradXInput => model.logit_gradient(x).iter().zip(x).map(|(g, v)| g * v).collect(),
        BaselineKind::IntegratedGradients => {
            let steps = params.ig_steps.max(1);
            let mut sum = vec![0.0; x.len()];
            for s in 0..steps {
                let t = s as f64 / steps as f64;
                let point: Vec<f64> = x.iter().map(|v| t * v).collect();
                for (a, g) in sum.iter_mut().zip(model.logit_gradient(&point)) {
                    *a += g;
                }
            }
            sum.iter().zip(x).map(|(g, v)| v * g / steps as f64).collect()
        }
        BaselineKind::Smoothgrad => {
            let samples = params.smoothgrad_samples.max(1);
            let mut sum = vec![0.0; x.len()];
            for _ in 0..samples {
                let noisy: Vec<f64> = x
                    .iter()
                    .zip(feature_std)
                    .map(|(v, s)| {
                        let sd = params.smoothgrad_sigma * s;
                        if sd > 0.0 {
                            v + rng.sample(Normal::new(0.0, sd).unwrap())
                        } else {
                            *v
                        }
                    })
                    .collect();
                for (a, g) in sum.iter_mut().zip(model.logit_gradient(&noisy)) {
                    *a += g;
                }
            }
            sum.iter().map(|g| g / samples as f64).collect()
        }
    }
}

/// Masks of a Rashomon sample aligned row-by-row with their attributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionDataset {
    pub masks: Array2<f64>,
    pub attributions: Array2<f64>,
}

impl AttributionDataset {
    pub fn new(masks: Array2<f64>, attributions: Array2<f64>) -> Result<Self> {
        if masks.dim() != attributions.dim() {
            return Err(Error::InvalidData(format!(
                "mask matrix {:?} and attribution matrix {:?} differ in shape",
                masks.dim(),
                attributions.dim()
            )));
        }
        Ok(Self { masks, attributions })
    }

    pub fn rows(&self) -> usize {
        self.masks.nrows()
    }

    /// Writes `attributions.csv` into `dir`; the masks live in the sample's
    /// own `masks.csv`.
    pub fn save(&self, dir: &Path, feature_names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_matrix_csv(&dir.join("attributions.csv"), feature_names, &self.attributions)
    }

    /// Reads `masks.csv` and `attributions.csv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let (mh, masks) = read_matrix_csv(&dir.join("masks.csv"))?;
        let (ah, attributions) = read_matrix_csv(&dir.join("attributions.csv"))?;
        if mh != ah {
            return Err(Error::InvalidData("masks.csv and attributions.csv headers differ".into()));
        }
        Self::new(masks, attributions)
    }

    /// Per-feature (min, max) of the attributions across the sample.
    pub fn ranges(&self) -> Vec<(f64, f64)> {
        self.attributions
            .columns()
            .into_iter()
            .map(|c| c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
            .collect()
    }
}

/// Row `i` is the permutation importance of `base` masked by sample row
/// `i`. Every row shares `seed`, so all masks see the same column
/// permutations and the rows differ only through the mask.
pub fn build_attribution_dataset<P: Predictor + ?Sized>(
    sample: &RashomonSample,
    base: &P,
    ds: &Dataset,
    split: &TaskSplit,
    n_repeats: usize,
    seed: u64,
) -> Result<AttributionDataset> {
    let (s, p) = sample.masks.dim();
    check_len(ds.p(), p)?;
    let rows: Vec<Vec<f64>> = (0..s)
        .into_par_iter()
        .map(|i| {
            let mask = sample.masks.row(i).to_vec();
            let masked = MaskedModel::new(base, &mask)?;
            Ok(permutation_fis(&masked, ds, split, n_repeats, seed)?.values)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let attributions = Array2::from_shape_vec((s, p), flat).expect("row lengths equal p");
    AttributionDataset::new(sample.masks.clone(), attributions)
}
