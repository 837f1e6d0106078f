//! Differentiable mask-to-attribution surrogate: a `[p, 100, 100, p]` ReLU
//! network trained with Adam on the attribution dataset, exposing analytic
//! Jacobians with respect to the input mask.
//!
//! Inputs and outputs are standardized per column with statistics taken from
//! the training rows; the affine maps are folded into forward and gradient
//! calls so callers only ever see mask space and attribution space.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionDataset;
use crate::error::{check_len, Error, Result};
use crate::models::{load_params, save_params};
use crate::nn::Dense;
use crate::optim::Adam;

const STD_FLOOR: f64 = 1e-8;
const MIN_ROWS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmanConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub valid_fraction: f64,
    /// Rows per Adam step; `None` trains full-batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// L2 penalty coefficient on all parameters.
    #[serde(default)]
    pub weight_decay: f64,
    /// Initial hidden bias. A positive offset starts most units active on
    /// the standardized inputs, which keeps the learned map smooth around
    /// the identity mask.
    #[serde(default)]
    pub hidden_bias_offset: f64,
    pub seed: u64,
    /// Minimum held-out R² before the surrogate may drive a search.
    pub min_r2: f64,
}

impl Default for DmanConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            lr: 1e-4,
            epochs: 2000,
            valid_fraction: 0.1,
            batch_size: Some(64),
            weight_decay: 0.0,
            hidden_bias_offset: 2.0,
            seed: 0,
            min_r2: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub train_mse: f64,
    pub valid_mse: f64,
    pub valid_r2: f64,
    pub epochs: usize,
    pub train_rows: usize,
    pub valid_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Affine {
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    output_mean: Vec<f64>,
    output_scale: Vec<f64>,
}

impl Affine {
    fn identity(p: usize) -> Self {
        Self {
            input_mean: vec![0.0; p],
            input_scale: vec![1.0; p],
            output_mean: vec![0.0; p],
            output_scale: vec![1.0; p],
        }
    }
}

#[derive(Clone, Debug)]
pub struct DmanModel {
    net: Dense,
    affine: Affine,
    pub report: TrainingReport,
}

fn column_stats(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let std = x.std_axis(Axis(0), 0.0);
    (mean.to_vec(), std.iter().map(|s| s.max(STD_FLOOR)).collect())
}

fn normalize(x: &Array2<f64>, mean: &[f64], scale: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    out
}

impl DmanModel {
    /// Zero-weight network with identity normalization.
    pub fn zeros(p: usize, hidden: &[usize]) -> Result<Self> {
        let sizes = layer_sizes(p, hidden);
        Ok(Self {
            net: Dense::zeros(&sizes)?,
            affine: Affine::identity(p),
            report: TrainingReport {
                train_mse: f64::NAN,
                valid_mse: f64::NAN,
                valid_r2: f64::NAN,
                epochs: 0,
                train_rows: 0,
                valid_rows: 0,
            },
        })
    }

    pub fn p(&self) -> usize {
        self.net.input_dim()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.net.layer_sizes()
    }

    pub fn params(&self) -> Vec<f64> {
        self.net.params()
    }

    fn scaled_input(&self, mask: &[f64]) -> Result<Vec<f64>> {
        check_len(self.p(), mask.len())?;
        if mask.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mask contains a non-finite value".into()));
        }
        Ok(mask
            .iter()
            .zip(&self.affine.input_mean)
            .zip(&self.affine.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn forward(&self, mask: &[f64]) -> Result<Vec<f64>> {
        let z = self.net.forward(&self.scaled_input(mask)?);
        Ok(z.iter()
            .zip(&self.affine.output_mean)
            .zip(&self.affine.output_scale)
            .map(|((v, m), s)| v * s + m)
            .collect())
    }

    pub fn forward_batch(&self, masks: &Array2<f64>) -> Array2<f64> {
        let x = normalize(masks, &self.affine.input_mean, &self.affine.input_scale);
        let mut y = self.net.forward_batch(x.view());
        for mut row in y.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.affine.output_mean).zip(&self.affine.output_scale) {
                *v = *v * s + m;
            }
        }
        y
    }

    /// Jacobian `J[[i, j]] = ∂ output_i / ∂ mask_j`.
    pub fn input_gradient(&self, mask: &[f64]) -> Result<Array2<f64>> {
        let mut jac = self.net.input_jacobian(&self.scaled_input(mask)?);
        for (i, mut row) in jac.rows_mut().into_iter().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= self.affine.output_scale[i] / self.affine.input_scale[j];
            }
        }
        Ok(jac)
    }

    /// Distance from `mask` to the nearest hidden ReLU kink, in
    /// pre-activation units. The surrogate is not differentiable at 0.
    pub fn kink_margin(&self, mask: &[f64]) -> Result<f64> {
        Ok(self.net.kink_margin(&self.scaled_input(mask)?))
    }

    /// `upstreamᵀ · J` without forming the Jacobian.
    pub fn vjp(&self, mask: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        check_len(self.p(), upstream.len())?;
        let x = self.scaled_input(mask)?;
        let u: Vec<f64> = upstream.iter().zip(&self.affine.output_scale).map(|(g, s)| g * s).collect();
        Ok(self
            .net
            .input_vjp(&x, &u)
            .iter()
            .zip(&self.affine.input_scale)
            .map(|(g, s)| g / s)
            .collect())
    }

    pub fn check_gate(&self, min_r2: f64) -> Result<()> {
        if self.report.valid_r2 >= min_r2 {
            Ok(())
        } else {
            Err(Error::SurrogateGate {
                r2: self.report.valid_r2,
                required: min_r2,
            })
        }
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let hyper = serde_json::json!({
            "affine": self.affine,
            "report": self.report,
        });
        save_params(dir, "dman", "dman", self.layer_sizes(), seed, hyper, &self.params())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = load_params(dir, "dman")?;
        if manifest.kind != "dman" {
            return Err(Error::InvalidData(format!("expected a dman manifest, found {}", manifest.kind)));
        }
        let net = Dense::from_params(&manifest.layer_sizes, &params)?;
        let affine: Affine = serde_json::from_value(manifest.hyperparameters["affine"].clone())?;
        let report: TrainingReport = serde_json::from_value(manifest.hyperparameters["report"].clone())?;
        Ok(Self { net, affine, report })
    }
}

fn layer_sizes(p: usize, hidden: &[usize]) -> Vec<usize> {
    let mut sizes = vec![p];
    sizes.extend_from_slice(hidden);
    sizes.push(p);
    sizes
}

fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred - target).mapv(|d| d * d).sum() / n
}

/// Pooled R²: `1 − Σ SSE / Σ SST` over all output columns.
pub fn r_squared(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let sse = (pred - target).mapv(|d| d * d).sum();
    let mean = target.mean_axis(Axis(0)).unwrap();
    let sst = (target - &mean).mapv(|d| d * d).sum();
    if sst <= 0.0 {
        return if sse <= 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - sse / sst
}

pub fn train_dman(datt: &AttributionDataset, cfg: &DmanConfig) -> Result<DmanModel> {
    let rows = datt.rows();
    if rows < MIN_ROWS {
        return Err(Error::InvalidArgument(format!(
            "surrogate training needs at least {MIN_ROWS} rows, got {rows}"
        )));
    }
    if !(0.0..1.0).contains(&cfg.valid_fraction) {
        return Err(Error::InvalidArgument("valid_fraction must be in [0, 1)".into()));
    }
    let p = datt.masks.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(&mut rng);
    let n_valid = ((rows as f64) * cfg.valid_fraction).round() as usize;
    let n_valid = if cfg.valid_fraction > 0.0 { n_valid.max(1) } else { 0 };
    let (valid_idx, train_idx) = idx.split_at(n_valid);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut valid_idx = valid_idx.to_vec();
    valid_idx.sort_unstable();

    let xt = datt.masks.select(Axis(0), &train_idx);
    let yt = datt.attributions.select(Axis(0), &train_idx);
    let (in_mean, in_scale) = column_stats(&xt);
    let (out_mean, out_scale) = column_stats(&yt);
    let xn = normalize(&xt, &in_mean, &in_scale);
    let yn = normalize(&yt, &out_mean, &out_scale);

    let sizes = layer_sizes(p, &cfg.hidden);
    let mut net = Dense::he_init(&sizes, &mut rng)?;
    net.offset_hidden_biases(cfg.hidden_bias_offset, &mut rng);
    let mut params = net.params();
    let mut adam = Adam::new(params.len());
    let n_train = train_idx.len();
    let batch = cfg.batch_size.unwrap_or(n_train).clamp(1, n_train);
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        if batch < n_train {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let xb = xn.select(Axis(0), chunk);
            let yb = yn.select(Axis(0), chunk);
            let n_out = yb.len() as f64;
            let (loss, mut grad) = net.loss_and_gradient(xb.view(), |out| {
                let diff = out - &yb;
                let loss = diff.mapv(|d| d * d).sum() / n_out;
                (loss, diff * (2.0 / n_out))
            });
            if cfg.weight_decay > 0.0 {
                for (g, w) in grad.iter_mut().zip(&params) {
                    *g += 2.0 * cfg.weight_decay * w;
                }
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut params, &grad, cfg.lr);
            net.set_params(&params)?;
        }
    }

    let mut model = DmanModel {
        net,
        affine: Affine {
            input_mean: in_mean,
            input_scale: in_scale,
            output_mean: out_mean,
            output_scale: out_scale,
        },
        report: TrainingReport {
            train_mse: 0.0,
            valid_mse: f64::NAN,
            valid_r2: f64::NAN,
            epochs: cfg.epochs,
            train_rows: train_idx.len(),
            valid_rows: valid_idx.len(),
        },
    };
    let pt = model.forward_batch(&xt);
    model.report.train_mse = mse(&pt, &yt);
    if !model.report.train_mse.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs });
    }
    if !valid_idx.is_empty() {
        let xv = datt.masks.select(Axis(0), &valid_idx);
        let yv = datt.attributions.select(Axis(0), &valid_idx);
        let pv = model.forward_batch(&xv);
        model.report.valid_mse = mse(&pv, &yv);
        model.report.valid_r2 = r_squared(&pv, &yv);
    }
    Ok(model)
}

pub fn dman_forward(model: &DmanModel, mask: &[f64]) -> Result<Vec<f64>> {
    model.forward(mask)
}

pub fn dman_input_gradient(model: &DmanModel, mask: &[f64]) -> Result<Array2<f64>> {
    model.input_gradient(mask)
}

pub fn dman_vjp(model: &DmanModel, mask: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    model.vjp(mask, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;

    fn identity_task(rows: usize, p: usize, seed: u64) -> AttributionDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = Array2::from_shape_fn((rows, p), |_| rng.random_range(0.0..2.0));
        AttributionDataset::new(masks.clone(), masks).unwrap()
    }

    #[test]
    fn identity_task_is_learned() {
        let datt = identity_task(1000, 6, 1);
        let cfg = DmanConfig {
            seed: 3,
            ..Default::default()
        };
        let model = train_dman(&datt, &cfg).unwrap();
        assert!(model.report.valid_r2 >= 0.99, "r2 {}", model.report.valid_r2);
        let out = model.forward(&[1.0; 6]).unwrap();
        assert!(out.iter().all(|v| (v - 1.0).abs() < 0.05), "{out:?}");
        let jac = model.input_gradient(&[1.0; 6]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((jac[[i, j]] - e).abs() < 0.1, "J[{i},{j}] = {}", jac[[i, j]]);
            }
        }
    }

    #[test]
    fn zero_epochs_reports_initial_fit() {
        let datt = identity_task(40, 3, 2);
        let cfg = DmanConfig {
            epochs: 0,
            ..Default::default()
        };
        let model = train_dman(&datt, &cfg).unwrap();
        assert_eq!(model.report.epochs, 0);
        assert!(model.report.train_mse.is_finite() && model.report.valid_mse.is_finite());
    }

    #[test]
    fn forward_is_pure_and_rejects_bad_masks() {
        let datt = identity_task(40, 3, 2);
        let model = train_dman(&datt, &DmanConfig { epochs: 5, ..Default::default() }).unwrap();
        let m = [0.9, 1.1, 1.3];
        assert_eq!(model.forward(&m).unwrap(), model.forward(&m).unwrap());
        assert!(model.forward(&[f64::NAN, 1.0, 1.0]).is_err());
        assert!(matches!(model.forward(&[1.0; 4]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_model_has_zero_jacobian() {
        let model = DmanModel::zeros(4, &[100, 100]).unwrap();
        let jac = model.input_gradient(&[1.0; 4]).unwrap();
        assert!(jac.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_rows_rejected() {
        let datt = identity_task(10, 3, 2);
        assert!(train_dman(&datt, &DmanConfig::default()).is_err());
    }

    #[test]
    fn jacobian_and_vjp_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let datt = identity_task(60, 5, 8);
        let mut checked = 0;
        for trial in 0..50u64 {
            let model = train_dman(
                &datt,
                &DmanConfig {
                    epochs: 3,
                    hidden: vec![12, 12],
                    seed: trial,
                    ..Default::default()
                },
            )
            .unwrap();
            let mask: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
            let jac = model.input_gradient(&mask).unwrap();
            let h = 1e-5;
            let mut ok = true;
            let mut fd = Array2::zeros((5, 5));
            for j in 0..5 {
                let mut mp = mask.clone();
                mp[j] += h;
                let mut mm = mask.clone();
                mm[j] -= h;
                let (yp, ym) = (model.forward(&mp).unwrap(), model.forward(&mm).unwrap());
                for i in 0..5 {
                    fd[[i, j]] = (yp[i] - ym[i]) / (2.0 * h);
                }
            }
            // Skip masks within h of a ReLU kink, where central differences straddle it.
            let mut probe = mask.clone();
            probe[0] += h / 3.0;
            let jac2 = model.input_gradient(&probe).unwrap();
            if (&jac2 - &jac).iter().any(|v| v.abs() > 1e-9) {
                ok = false;
            }
            if ok {
                for (a, b) in jac.iter().zip(fd.iter()) {
                    assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
                }
                let u: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v = model.vjp(&mask, &u).unwrap();
                let ua = Array1::from(u);
                let expect = ua.dot(&jac);
                for (a, b) in v.iter().zip(expect.iter()) {
                    assert!((a - b).abs() < 1e-10);
                }
                checked += 1;
            }
        }
        assert!(checked >= 40, "only {checked} kink-free trials");
    }

    #[test]
    fn save_load_round_trip() {
        let datt = identity_task(40, 3, 2);
        let model = train_dman(&datt, &DmanConfig { epochs: 10, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), 0).unwrap();
        let back = DmanModel::load(dir.path()).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.report, model.report);
        let m = [0.7, 1.2, 1.9];
        assert_eq!(back.forward(&m).unwrap(), model.forward(&m).unwrap());
    }
}
