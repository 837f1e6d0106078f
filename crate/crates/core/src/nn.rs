//! Fully connected ReLU networks shared by the reference MLP and the
//! mask-to-attribution surrogate. Hidden layers use ReLU with the
//! subgradient at exactly zero taken as 0; the output layer is linear.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Shape (outputs, inputs).
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub layers: Vec<DenseLayer>,
}

impl Dense {
    /// He-normal weights, zero biases.
    pub fn he_init<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng));
                DenseLayer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Set hidden-layer biases to `offset` plus uniform jitter in
    /// `±1/√fan_in`.
    pub fn offset_hidden_biases<R: Rng>(&mut self, offset: f64, rng: &mut R) {
        let last = self.layers.len() - 1;
        for l in &mut self.layers[..last] {
            let bound = 1.0 / (l.weights.ncols() as f64).sqrt();
            l.bias.mapv_inplace(|_| offset + rng.random_range(-bound..bound));
        }
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    /// Rebuild from a flat parameter vector laid out as by [`Dense::params`].
    pub fn from_params(sizes: &[usize], params: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.bias.len()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().bias.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Per layer: weights in row-major order, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        crate::error::check_len(self.n_params(), params.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = Array1::from(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.weights.dot(&h) + &l.bias;
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        h.to_vec()
    }

    /// Row-wise forward pass; returns shape (rows, outputs).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.weights.t()) + &l.bias;
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        h
    }

    /// Vector-Jacobian product `upstreamᵀ · ∂f(x)/∂x`.
    pub fn input_vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let pre = self.pre_activations(x);
        let mut g = Array1::from(upstream.to_vec());
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                g.zip_mut_with(&pre[i], |gi, &z| {
                    if z <= 0.0 {
                        *gi = 0.0
                    }
                });
            }
            g = self.layers[i].weights.t().dot(&g);
        }
        g.to_vec()
    }

    /// Full Jacobian, shape (outputs, inputs).
    pub fn input_jacobian(&self, x: &[f64]) -> Array2<f64> {
        let pre = self.pre_activations(x);
        // Forward-mode accumulation of the Jacobian through each layer.
        let mut jac = Array2::<f64>::eye(self.input_dim());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            jac = l.weights.dot(&jac);
            if i < last {
                for (mut row, &z) in jac.axis_iter_mut(Axis(0)).zip(pre[i].iter()) {
                    if z <= 0.0 {
                        row.fill(0.0);
                    }
                }
            }
        }
        jac
    }

    /// Smallest |pre-activation| over the hidden units at `x`: the distance,
    /// in pre-activation units, to the nearest ReLU kink.
    pub fn kink_margin(&self, x: &[f64]) -> f64 {
        let pre = self.pre_activations(x);
        pre[..pre.len() - 1]
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    fn pre_activations(&self, x: &[f64]) -> Vec<Array1<f64>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = Array1::from(x.to_vec());
        for l in &self.layers {
            let z = l.weights.dot(&h) + &l.bias;
            h = z.mapv(relu);
            out.push(z);
        }
        out
    }

    /// One full-batch pass. `loss_grad` receives the network outputs and
    /// returns the loss and its gradient with respect to those outputs.
    /// Returns the loss and the flat parameter gradient.
    pub fn loss_and_gradient<F>(&self, x: ArrayView2<f64>, loss_grad: F) -> (f64, Vec<f64>)
    where
        F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    {
        let last = self.layers.len() - 1;
        let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut pres: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.weights.t()) + &l.bias;
            inputs.push(h);
            h = if i < last { z.mapv(relu) } else { z.clone() };
            pres.push(z);
        }
        let (loss, mut g) = loss_grad(&h);

        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i < last {
                g.zip_mut_with(&pres[i], |gi, &z| {
                    if z <= 0.0 {
                        *gi = 0.0
                    }
                });
            }
            let dw = g.t().dot(&inputs[i]);
            let db = g.sum_axis(Axis(0));
            if i > 0 {
                g = g.dot(&self.layers[i].weights);
            }
            grads.push((dw, db));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (dw, db) in grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        (loss, flat)
    }
}

#[inline]
pub(crate) fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes must list at least input and output widths, all positive; got {sizes:?}"
        )));
    }
    Ok(())
}
