//! Reference predictors, input masking, log loss and analytic input
//! gradients.
//!
//! Every predictor exposes its pre-sigmoid logit; probabilities are the
//! logistic sigmoid of it. A [`MaskedModel`] multiplies (standardized)
//! inputs element-wise by its mask before delegating to the base model, so
//! the all-ones mask reproduces the base model exactly.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, Dataset, TaskSplit};
use crate::error::{check_len, Error, Result};
use crate::nn::Dense;

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` inside [`log_loss`].
pub const CLIP: f64 = 1e-12;

pub trait Predictor: Sync {
    fn n_features(&self) -> usize;

    /// Pre-sigmoid logits, one per row.
    fn logits(&self, x: ArrayView2<f64>) -> Vec<f64>;

    /// Gradient of the logit with respect to the input row.
    fn logit_gradient(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(p: usize) -> Self {
        Self {
            weights: vec![0.0; p],
            bias: 0.0,
        }
    }
}

impl Predictor for LinearModel {
    fn n_features(&self) -> usize {
        self.weights.len()
    }

    fn logits(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let w = ndarray::ArrayView1::from(&self.weights[..]);
        (x.dot(&w) + self.bias).to_vec()
    }

    fn logit_gradient(&self, _x: &[f64]) -> Vec<f64> {
        self.weights.clone()
    }
}

/// ReLU feedforward network with a single logit output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub net: Dense,
}

impl MlpModel {
    /// All-zero parameters: a constant 0.5 predictor.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_mlp_sizes(layer_sizes)?;
        Ok(Self {
            net: Dense::zeros(layer_sizes)?,
        })
    }

    pub fn random(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        check_mlp_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: Dense::he_init(layer_sizes, &mut rng)?,
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.net.layer_sizes()
    }
}

impl Predictor for MlpModel {
    fn n_features(&self) -> usize {
        self.net.input_dim()
    }

    fn logits(&self, x: ArrayView2<f64>) -> Vec<f64> {
        self.net.forward_batch(x).column(0).to_vec()
    }

    fn logit_gradient(&self, x: &[f64]) -> Vec<f64> {
        self.net.input_vjp(x, &[1.0])
    }
}

fn check_mlp_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || *sizes.last().unwrap() != 1 {
        return Err(Error::InvalidArgument(format!(
            "MLP layer sizes must end in a single output, got {sizes:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Linear(LinearModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Linear(_) => "linear",
            Model::Mlp(_) => "mlp",
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        match self {
            Model::Linear(m) => vec![m.weights.len(), 1],
            Model::Mlp(m) => m.layer_sizes(),
        }
    }

    /// Flat parameter vector (linear: weights then bias).
    pub fn params(&self) -> Vec<f64> {
        match self {
            Model::Linear(m) => {
                let mut v = m.weights.clone();
                v.push(m.bias);
                v
            }
            Model::Mlp(m) => m.net.params(),
        }
    }

    pub fn from_params(kind: &str, layer_sizes: &[usize], params: &[f64]) -> Result<Self> {
        match kind {
            "linear" => {
                let p = layer_sizes[0];
                check_len(p + 1, params.len())?;
                Ok(Model::Linear(LinearModel {
                    weights: params[..p].to_vec(),
                    bias: params[p],
                }))
            }
            "mlp" => {
                check_mlp_sizes(layer_sizes)?;
                Ok(Model::Mlp(MlpModel {
                    net: Dense::from_params(layer_sizes, params)?,
                }))
            }
            other => Err(Error::InvalidData(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn as_linear(&self) -> Option<&LinearModel> {
        match self {
            Model::Linear(m) => Some(m),
            Model::Mlp(_) => None,
        }
    }
}

impl Predictor for Model {
    fn n_features(&self) -> usize {
        match self {
            Model::Linear(m) => m.n_features(),
            Model::Mlp(m) => m.n_features(),
        }
    }

    fn logits(&self, x: ArrayView2<f64>) -> Vec<f64> {
        match self {
            Model::Linear(m) => m.logits(x),
            Model::Mlp(m) => m.logits(x),
        }
    }

    fn logit_gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Model::Linear(m) => m.logit_gradient(x),
            Model::Mlp(m) => m.logit_gradient(x),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskState {
    #[default]
    Active,
    Frozen,
    Invalid,
}

/// Per-feature non-negative multipliers characterizing one model of the
/// Rashomon set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub values: Vec<f64>,
    #[serde(default)]
    pub state: MaskState,
}

impl Mask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "mask entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            values,
            state: MaskState::Active,
        })
    }

    pub fn ones(p: usize) -> Self {
        Self {
            values: vec![1.0; p],
            state: MaskState::Active,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn within(&self, mask_max: f64) -> bool {
        self.values.iter().all(|&v| (0.0..=mask_max).contains(&v))
    }
}

/// `M = m ∘ f_ref`: the base model applied to `x ⊙ m`.
#[derive(Clone, Copy, Debug)]
pub struct MaskedModel<'a, P: Predictor + ?Sized> {
    pub base: &'a P,
    pub mask: &'a [f64],
}

impl<'a, P: Predictor + ?Sized> MaskedModel<'a, P> {
    pub fn new(base: &'a P, mask: &'a [f64]) -> Result<Self> {
        check_len(base.n_features(), mask.len())?;
        if mask.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "mask entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { base, mask })
    }
}

impl<P: Predictor + ?Sized> Predictor for MaskedModel<'_, P> {
    fn n_features(&self) -> usize {
        self.mask.len()
    }

    fn logits(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let m = ndarray::ArrayView1::from(self.mask);
        let masked = &x * &m.insert_axis(Axis(0));
        self.base.logits(masked.view())
    }

    fn logit_gradient(&self, x: &[f64]) -> Vec<f64> {
        let masked: Vec<f64> = x.iter().zip(self.mask).map(|(a, m)| a * m).collect();
        self.base
            .logit_gradient(&masked)
            .into_iter()
            .zip(self.mask)
            .map(|(g, m)| g * m)
            .collect()
    }
}

pub fn predict_proba<P: Predictor + ?Sized>(model: &P, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_len(model.n_features(), x.ncols())?;
    Ok(model.logits(x).into_iter().map(sigmoid).collect())
}

/// Gradient of the pre-sigmoid logit with respect to the input.
pub fn input_gradient<P: Predictor + ?Sized>(model: &P, x: &[f64]) -> Result<Vec<f64>> {
    check_len(model.n_features(), x.len())?;
    Ok(model.logit_gradient(x))
}

/// Mean negative log-likelihood with probabilities clipped at [`CLIP`].
pub fn log_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty prediction vector".into()));
    }
    Ok(log_loss_unchecked(probs, labels))
}

fn log_loss_unchecked(probs: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CLIP, 1.0 - CLIP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Log loss of `model` on the given dataset rows.
pub fn loss_on_rows<P: Predictor + ?Sized>(model: &P, ds: &Dataset, rows: &[usize]) -> f64 {
    let x = ds.select_rows(rows);
    let y = ds.select_labels(rows);
    let probs: Vec<f64> = model.logits(x.view()).into_iter().map(sigmoid).collect();
    log_loss_unchecked(&probs, &y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Hidden widths; empty means logistic regression.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl TrainConfig {
    pub fn logistic(seed: u64) -> Self {
        Self {
            lr: 0.5,
            epochs: 300,
            seed,
            hidden: Vec::new(),
        }
    }

    pub fn mlp(seed: u64) -> Self {
        Self {
            lr: 0.1,
            epochs: 1500,
            seed,
            hidden: vec![16],
        }
    }

    pub fn train(&self, ds: &Dataset, split: &TaskSplit) -> Result<Model> {
        if self.hidden.is_empty() {
            train_logistic(ds, split, self.lr, self.epochs, self.seed).map(Model::Linear)
        } else {
            let mut sizes = vec![ds.p()];
            sizes.extend(&self.hidden);
            sizes.push(1);
            train_mlp(ds, split, &sizes, self.lr, self.epochs, self.seed).map(Model::Mlp)
        }
    }
}

/// Full-batch gradient descent on the training rows from an all-zero start.
/// `seed` is recorded for interface symmetry; the zero start is
/// deterministic on its own.
pub fn train_logistic(ds: &Dataset, split: &TaskSplit, lr: f64, epochs: usize, _seed: u64) -> Result<LinearModel> {
    check_lr(lr)?;
    let x = ds.select_rows(&split.train_idx);
    let y: Array1<f64> = split.train_idx.iter().map(|&i| ds.labels()[i] as f64).collect();
    let n = x.nrows() as f64;
    let mut model = LinearModel::zeros(ds.p());
    for epoch in 0..epochs {
        let logits = Array1::from(model.logits(x.view()));
        let resid = logits.mapv(sigmoid) - &y;
        let gw = x.t().dot(&resid) / n;
        let gb = resid.sum() / n;
        for (w, g) in model.weights.iter_mut().zip(gw.iter()) {
            *w -= lr * g;
        }
        model.bias -= lr * gb;
        if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
            return Err(Error::Diverged { epoch });
        }
    }
    Ok(model)
}

/// Full-batch gradient descent from a seeded He initialization.
pub fn train_mlp(
    ds: &Dataset,
    split: &TaskSplit,
    layer_sizes: &[usize],
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<MlpModel> {
    check_lr(lr)?;
    check_mlp_sizes(layer_sizes)?;
    check_len(ds.p(), layer_sizes[0])?;
    let x = ds.select_rows(&split.train_idx);
    let y: Array1<f64> = split.train_idx.iter().map(|&i| ds.labels()[i] as f64).collect();
    let n = x.nrows() as f64;
    let mut model = MlpModel::random(layer_sizes, seed)?;
    let mut params = model.net.params();
    for epoch in 0..epochs {
        let (loss, grad) = model.net.loss_and_gradient(x.view(), |out: &Array2<f64>| {
            let probs: Vec<f64> = out.column(0).iter().map(|&z| sigmoid(z)).collect();
            let y_u8: Vec<u8> = y.iter().map(|&v| v as u8).collect();
            let loss = log_loss_unchecked(&probs, &y_u8);
            let g = Array2::from_shape_fn(out.raw_dim(), |(r, _)| (probs[r] - y[r]) / n);
            (loss, g)
        });
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        model.net.set_params(&params)?;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Diverged { epoch: epochs });
    }
    Ok(model)
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

/// JSON half of the on-disk model format; the parameters live in a sibling
/// `.bin` file as little-endian f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: String,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    pub n_params: usize,
    pub params_file: String,
}

pub fn params_to_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn params_from_bytes(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::InvalidData(format!(
            "parameter file holds {} bytes, manifest declares {expected} values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write `<stem>.json` and `<stem>.bin` into `dir`.
pub fn save_params(
    dir: &Path,
    stem: &str,
    kind: &str,
    layer_sizes: Vec<usize>,
    seed: u64,
    hyperparameters: serde_json::Value,
    params: &[f64],
) -> Result<ModelManifest> {
    std::fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        kind: kind.to_string(),
        layer_sizes,
        seed,
        hyperparameters,
        n_params: params.len(),
        params_file: format!("{stem}.bin"),
    };
    std::fs::write(dir.join(&manifest.params_file), params_to_bytes(params))?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_params(dir: &Path, stem: &str) -> Result<(ModelManifest, Vec<f64>)> {
    let manifest: ModelManifest = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
    let bytes = std::fs::read(dir.join(&manifest.params_file))?;
    let params = params_from_bytes(&bytes, manifest.n_params)?;
    Ok((manifest, params))
}

pub fn save_model(dir: &Path, stem: &str, model: &Model, cfg: &TrainConfig) -> Result<ModelManifest> {
    save_params(
        dir,
        stem,
        model.kind(),
        model.layer_sizes(),
        cfg.seed,
        serde_json::to_value(cfg)?,
        &model.params(),
    )
}

pub fn load_model(dir: &Path, stem: &str) -> Result<(Model, ModelManifest)> {
    let (manifest, params) = load_params(dir, stem)?;
    let model = Model::from_params(&manifest.kind, &manifest.layer_sizes, &params)?;
    Ok((model, manifest))
}
