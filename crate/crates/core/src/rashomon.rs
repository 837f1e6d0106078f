//! Mask-space Rashomon sets: every masked model whose validation log loss
//! stays within `(1 + ε)` of the reference model's.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskSplit};
use crate::error::{check_len, Error, Result};
use crate::models::{loss_on_rows, Mask, MaskedModel, Predictor};

/// Slack added to the bound in membership checks.
pub const MEMBERSHIP_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    /// Independent uniform proposals, kept when in bound.
    Rejection,
    /// Bisection from the all-ones mask along random unit directions.
    #[default]
    BoundaryLineSearch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RashomonConfig {
    pub epsilon: f64,
    pub n_samples: usize,
    pub mask_max: f64,
    pub seed: u64,
    pub exploration: Exploration,
    /// Proposal budget for rejection sampling.
    pub max_attempts: usize,
    /// Rejection proposals are uniform on `[1 - r, 1 + r] ∩ [0, mask_max]`
    /// per feature; `None` covers the whole `[0, mask_max]` box.
    #[serde(default)]
    pub proposal_radius: Option<f64>,
    pub bisection_steps: usize,
}

impl Default for RashomonConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            n_samples: 500,
            mask_max: 2.0,
            seed: 0,
            exploration: Exploration::BoundaryLineSearch,
            max_attempts: 50_000,
            proposal_radius: None,
            bisection_steps: 12,
        }
    }
}

impl RashomonConfig {
    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.n_samples < 1 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if !(self.mask_max >= 1.0) {
            return Err(Error::InvalidArgument("mask_max must be >= 1 so the identity mask is admissible".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RashomonSample {
    /// Row 0 is the all-ones mask.
    pub masks: Array2<f64>,
    pub losses: Vec<f64>,
    pub bound: f64,
    pub reference_loss: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub exploration: Exploration,
    /// Index in the proposal stream each row came from (`None` for row 0).
    pub proposal_index: Vec<Option<usize>>,
    pub attempts: usize,
    /// False when rejection sampling ran out of budget before filling
    /// `n_samples`.
    pub complete: bool,
}

impl RashomonSample {
    pub fn len(&self) -> usize {
        self.masks.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.nrows() == 0
    }

    pub fn mask(&self, i: usize) -> Vec<f64> {
        self.masks.row(i).to_vec()
    }

    /// Writes `masks.csv`, `losses.csv` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, feature_names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_matrix_csv(&dir.join("masks.csv"), feature_names, &self.masks)?;
        let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
        w.write_record(["loss"])?;
        for l in &self.losses {
            w.write_record([format!("{l:?}")])?;
        }
        w.flush()?;
        let manifest = SampleManifest {
            epsilon: self.epsilon,
            bound: self.bound,
            reference_loss: self.reference_loss,
            seed: self.seed,
            exploration: self.exploration,
            proposal_index: self.proposal_index.clone(),
            attempts: self.attempts,
            complete: self.complete,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (_, masks) = read_matrix_csv(&dir.join("masks.csv"))?;
        let mut r = csv::Reader::from_path(dir.join("losses.csv"))?;
        let losses = r
            .records()
            .map(|rec| {
                let rec = rec?;
                rec[0]
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("bad loss value {:?}", &rec[0])))
            })
            .collect::<Result<Vec<_>>>()?;
        let m: SampleManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        check_len(masks.nrows(), losses.len())?;
        Ok(Self {
            masks,
            losses,
            bound: m.bound,
            reference_loss: m.reference_loss,
            epsilon: m.epsilon,
            seed: m.seed,
            exploration: m.exploration,
            proposal_index: m.proposal_index,
            attempts: m.attempts,
            complete: m.complete,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SampleManifest {
    epsilon: f64,
    bound: f64,
    reference_loss: f64,
    seed: u64,
    exploration: Exploration,
    proposal_index: Vec<Option<usize>>,
    attempts: usize,
    complete: bool,
}

pub(crate) fn write_matrix_csv(path: &Path, header: &[String], m: &Array2<f64>) -> Result<()> {
    check_len(header.len(), m.ncols())?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        check_len(header.len(), rec.len())?;
        for cell in rec.iter() {
            flat.push(
                cell.parse::<f64>()
                    .map_err(|_| Error::InvalidData(format!("bad numeric cell {cell:?} in {}", path.display())))?,
            );
        }
        rows += 1;
    }
    let m = Array2::from_shape_vec((rows, header.len()), flat).expect("shape checked per row");
    Ok((header, m))
}

/// `(1 + ε) · L*`.
pub fn rashomon_bound(reference_loss: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if !(reference_loss >= 0.0) {
        return Err(Error::InvalidArgument(format!("reference loss must be >= 0, got {reference_loss}")));
    }
    Ok((1.0 + epsilon) * reference_loss)
}

/// Evaluates masked-model validation losses against a fixed bound.
#[derive(Clone, Copy)]
pub struct RashomonContext<'a, P: Predictor + ?Sized> {
    pub base: &'a P,
    pub ds: &'a Dataset,
    pub rows: &'a [usize],
    pub bound: f64,
}

impl<'a, P: Predictor + ?Sized> RashomonContext<'a, P> {
    pub fn new(base: &'a P, ds: &'a Dataset, split: &'a TaskSplit, bound: f64) -> Self {
        Self {
            base,
            ds,
            rows: &split.valid_idx,
            bound,
        }
    }

    pub fn loss(&self, mask: &[f64]) -> f64 {
        let masked = MaskedModel {
            base: self.base,
            mask,
        };
        loss_on_rows(&masked, self.ds, self.rows)
    }

    pub fn contains(&self, mask: &[f64]) -> bool {
        mask.len() == self.base.n_features()
            && mask.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.loss(mask) <= self.bound + MEMBERSHIP_SLACK
    }
}

/// Validation log loss of the masked model is within `bound` (plus
/// [`MEMBERSHIP_SLACK`]).
pub fn is_in_rashomon<P: Predictor + ?Sized>(mask: &Mask, base: &P, ds: &Dataset, split: &TaskSplit, bound: f64) -> bool {
    RashomonContext::new(base, ds, split, bound).contains(&mask.values)
}

/// The rejection proposal stream for a configuration: identical for any two
/// configurations sharing `seed`, `mask_max` and `proposal_radius`.
pub fn rejection_proposals(cfg: &RashomonConfig, p: usize, count: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = match cfg.proposal_radius {
        Some(r) => ((1.0 - r).max(0.0), (1.0 + r).min(cfg.mask_max)),
        None => (0.0, cfg.mask_max),
    };
    Array2::from_shape_fn((count, p), |_| rng.random_range(lo..=hi))
}

pub fn sample_masks<P: Predictor + ?Sized>(
    base: &P,
    ds: &Dataset,
    split: &TaskSplit,
    cfg: &RashomonConfig,
) -> Result<RashomonSample> {
    cfg.validate()?;
    check_len(ds.p(), base.n_features())?;
    let p = ds.p();
    let reference_loss = loss_on_rows(base, ds, &split.valid_idx);
    let bound = rashomon_bound(reference_loss, cfg.epsilon)?;
    let ctx = RashomonContext::new(base, ds, split, bound);

    let mut masks = vec![vec![1.0; p]];
    let mut losses = vec![reference_loss];
    let mut proposal_index = vec![None];
    let wanted = cfg.n_samples - 1;

    let (attempts, complete) = match cfg.exploration {
        Exploration::Rejection => {
            let proposals = rejection_proposals(cfg, p, cfg.max_attempts);
            let mut evaluated = 0;
            const BATCH: usize = 512;
            while masks.len() - 1 < wanted && evaluated < cfg.max_attempts {
                let end = (evaluated + BATCH).min(cfg.max_attempts);
                let batch: Vec<(usize, f64)> = (evaluated..end)
                    .into_par_iter()
                    .map(|i| (i, ctx.loss(proposals.row(i).as_slice().unwrap())))
                    .collect();
                for (i, loss) in batch {
                    evaluated = i + 1;
                    if loss <= bound + MEMBERSHIP_SLACK {
                        masks.push(proposals.row(i).to_vec());
                        losses.push(loss);
                        proposal_index.push(Some(i));
                        if masks.len() - 1 == wanted {
                            break;
                        }
                    }
                }
            }
            (evaluated, masks.len() - 1 == wanted)
        }
        Exploration::BoundaryLineSearch => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let directions: Vec<Vec<f64>> = (0..wanted)
                .map(|_| {
                    let d: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                    d.into_iter().map(|v| v / norm).collect()
                })
                .collect();
            let found: Vec<(Vec<f64>, f64)> = directions
                .par_iter()
                .map(|d| line_search(&ctx, d, cfg.mask_max, cfg.bisection_steps))
                .collect();
            for (i, (m, l)) in found.into_iter().enumerate() {
                masks.push(m);
                losses.push(l);
                proposal_index.push(Some(i));
            }
            (wanted, true)
        }
    };

    let s = masks.len();
    let flat: Vec<f64> = masks.into_iter().flatten().collect();
    Ok(RashomonSample {
        masks: Array2::from_shape_vec((s, p), flat).unwrap(),
        losses,
        bound,
        reference_loss,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        exploration: cfg.exploration,
        proposal_index,
        attempts,
        complete,
    })
}

/// Push `1 + t·d` out to the box edge if that stays in bound, otherwise
/// bisect on `t` keeping the last feasible point.
fn line_search<P: Predictor + ?Sized>(ctx: &RashomonContext<'_, P>, d: &[f64], mask_max: f64, steps: usize) -> (Vec<f64>, f64) {
    let t_max = d
        .iter()
        .map(|&dj| {
            if dj > 0.0 {
                (mask_max - 1.0) / dj
            } else if dj < 0.0 {
                1.0 / -dj
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min);
    let at = |t: f64| -> Vec<f64> { d.iter().map(|dj| (1.0 + t * dj).clamp(0.0, mask_max)).collect() };

    let edge = at(t_max);
    let edge_loss = ctx.loss(&edge);
    if edge_loss <= ctx.bound {
        return (edge, edge_loss);
    }
    let (mut lo, mut hi) = (0.0, t_max);
    let mut best = (vec![1.0; d.len()], ctx.loss(&vec![1.0; d.len()]));
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        let m = at(mid);
        let l = ctx.loss(&m);
        if l <= ctx.bound {
            lo = mid;
            best = (m, l);
            if l >= 0.95 * ctx.bound {
                break;
            }
        } else {
            hi = mid;
        }
    }
    best
}
