//! Monotonic differentiable sorting network: a bitonic comparator schedule
//! whose swaps are relaxed with the Cauchy CDF, producing a row-stochastic
//! soft permutation and soft ranks (rank 1 = largest value), plus exact and
//! differentiable Spearman correlation.
//!
//! Inputs are padded to a power of two. Comparators that touch a padded
//! slot are resolved exactly (the pad behaves as −∞), so padding never leaks
//! probability mass into the real rows and the sliced `p × p` matrix stays
//! row-stochastic.

use std::collections::HashMap;
use std::f64::consts::FRAC_1_PI;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attribution::Ranking;
use crate::error::{check_len, Error, Result};

/// After a comparator fires, `upper` holds the larger value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparator {
    pub upper: usize,
    pub lower: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SortingNetworkPlan {
    pub p: usize,
    pub n_padded: usize,
    pub layers: Vec<Vec<Comparator>>,
    /// Value reported in padded slots.
    pub pad_sentinel: f64,
}

impl SortingNetworkPlan {
    pub fn n_comparators(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Apply the network with exact compare-and-swap.
    pub fn hard_sort(&self, values: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = values.to_vec();
        v.resize(self.n_padded, f64::NEG_INFINITY);
        for layer in &self.layers {
            for c in layer {
                if v[c.upper] < v[c.lower] {
                    v.swap(c.upper, c.lower);
                }
            }
        }
        v.truncate(self.p);
        v
    }
}

/// Bitonic schedule sorting `p` values into descending order.
pub fn build_plan(p: usize) -> Result<SortingNetworkPlan> {
    if p < 1 {
        return Err(Error::InvalidArgument("sorting network needs p >= 1".into()));
    }
    let n = p.next_power_of_two();
    let mut layers = Vec::new();
    let mut k = 2;
    while k <= n {
        let mut j = k / 2;
        while j >= 1 {
            let mut layer = Vec::with_capacity(n / 2);
            for i in 0..n {
                let l = i ^ j;
                if l > i {
                    layer.push(if i & k == 0 {
                        Comparator { upper: i, lower: l }
                    } else {
                        Comparator { upper: l, lower: i }
                    });
                }
            }
            layers.push(layer);
            j /= 2;
        }
        k *= 2;
    }
    Ok(SortingNetworkPlan {
        p,
        n_padded: n,
        layers,
        pad_sentinel: -1.0,
    })
}

/// Shared, cached plan for `p`.
pub fn plan_for(p: usize) -> Result<Arc<SortingNetworkPlan>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<SortingNetworkPlan>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(plan) = cache.lock().unwrap().get(&p) {
        return Ok(plan.clone());
    }
    let plan = Arc::new(build_plan(p)?);
    cache.lock().unwrap().insert(p, plan.clone());
    Ok(plan)
}

/// Cauchy-relaxed swap: `α = arctan(β(a − b))/π + 1/2`,
/// `top = αa + (1 − α)b`, `bottom = a + b − top`.
pub fn cauchy_swap(a: f64, b: f64, beta: f64) -> (f64, f64, f64) {
    let alpha = FRAC_1_PI * (beta * (a - b)).atan() + 0.5;
    let top = alpha * a + (1.0 - alpha) * b;
    let bottom = (a + b) - top;
    (top, bottom, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftPermutation {
    /// `matrix[[pos, i]]`: weight of input `i` at sorted position `pos`.
    pub matrix: Array2<f64>,
    pub soft_ranks: Vec<f64>,
    pub sorted_values: Vec<f64>,
    pub steepness: f64,
}

enum Step {
    Soft {
        upper: usize,
        lower: usize,
        alpha: f64,
        /// dα / d(a − b).
        dalpha: f64,
        a_minus_b: f64,
        /// Row `upper` minus row `lower` of the permutation before the swap.
        row_diff: Vec<f64>,
    },
    Swap {
        upper: usize,
        lower: usize,
    },
}

struct Forward {
    n: usize,
    values: Vec<f64>,
    perm: Vec<f64>,
    steps: Vec<Step>,
    layer_values: Vec<Vec<f64>>,
}

fn run_forward(values: &[f64], plan: &SortingNetworkPlan, beta: f64, keep_layers: bool) -> Result<Forward> {
    check_len(plan.p, values.len())?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("soft sort inputs must be finite".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("steepness must be positive, got {beta}")));
    }
    let n = plan.n_padded;
    let mut vals = values.to_vec();
    vals.resize(n, plan.pad_sentinel);
    let mut pad: Vec<bool> = (0..n).map(|i| i >= plan.p).collect();
    let mut perm = vec![0.0; n * n];
    for i in 0..n {
        perm[i * n + i] = 1.0;
    }
    let mut steps = Vec::with_capacity(plan.n_comparators());
    let mut layer_values = Vec::new();

    for layer in &plan.layers {
        for &Comparator { upper, lower } in layer {
            match (pad[upper], pad[lower]) {
                (false, false) => {
                    let (a, b) = (vals[upper], vals[lower]);
                    let x = beta * (a - b);
                    let (top, bottom, alpha) = cauchy_swap(a, b, beta);
                    let dalpha = FRAC_1_PI * beta / (1.0 + x * x);
                    let (ru, rl) = (upper * n, lower * n);
                    let mut row_diff = vec![0.0; n];
                    for c in 0..n {
                        let pu = perm[ru + c];
                        let pl = perm[rl + c];
                        row_diff[c] = pu - pl;
                        perm[ru + c] = alpha * pu + (1.0 - alpha) * pl;
                        perm[rl + c] = (1.0 - alpha) * pu + alpha * pl;
                    }
                    vals[upper] = top;
                    vals[lower] = bottom;
                    steps.push(Step::Soft {
                        upper,
                        lower,
                        alpha,
                        dalpha,
                        a_minus_b: a - b,
                        row_diff,
                    });
                }
                (true, false) => {
                    vals.swap(upper, lower);
                    pad.swap(upper, lower);
                    for c in 0..n {
                        perm.swap(upper * n + c, lower * n + c);
                    }
                    steps.push(Step::Swap { upper, lower });
                }
                _ => {}
            }
        }
        if keep_layers {
            layer_values.push(
                vals.iter()
                    .zip(&pad)
                    .filter(|(_, &pd)| !pd)
                    .map(|(v, _)| *v)
                    .collect(),
            );
        }
    }
    Ok(Forward {
        n,
        values: vals,
        perm,
        steps,
        layer_values,
    })
}

fn soft_ranks_of(fwd: &Forward, p: usize) -> Vec<f64> {
    let n = fwd.n;
    (0..p)
        .map(|i| (0..p).map(|pos| (pos + 1) as f64 * fwd.perm[pos * n + i]).sum())
        .collect()
}

pub fn soft_sort(values: &[f64], plan: &SortingNetworkPlan, beta: f64) -> Result<SoftPermutation> {
    let fwd = run_forward(values, plan, beta, false)?;
    let p = plan.p;
    let n = fwd.n;
    let matrix = Array2::from_shape_fn((p, p), |(pos, i)| fwd.perm[pos * n + i]);
    Ok(SoftPermutation {
        soft_ranks: soft_ranks_of(&fwd, p),
        sorted_values: fwd.values[..p].to_vec(),
        matrix,
        steepness: beta,
    })
}

/// Values held by the real (non-padded) slots after each layer.
pub fn layer_values(values: &[f64], plan: &SortingNetworkPlan, beta: f64) -> Result<Vec<Vec<f64>>> {
    Ok(run_forward(values, plan, beta, true)?.layer_values)
}

/// Soft ranks and the vector-Jacobian product `upstreamᵀ · ∂ranks/∂values`.
pub fn soft_ranks_vjp(values: &[f64], plan: &SortingNetworkPlan, beta: f64, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(plan.p, upstream.len())?;
    let fwd = run_forward(values, plan, beta, false)?;
    let ranks = soft_ranks_of(&fwd, plan.p);
    Ok((ranks, backward(&fwd, plan.p, upstream)))
}

fn backward(fwd: &Forward, p: usize, upstream: &[f64]) -> Vec<f64> {
    let n = fwd.n;
    let mut perm_bar = vec![0.0; n * n];
    for pos in 0..p {
        for i in 0..p {
            perm_bar[pos * n + i] = (pos + 1) as f64 * upstream[i];
        }
    }
    let mut val_bar = vec![0.0; n];
    for step in fwd.steps.iter().rev() {
        match step {
            Step::Swap { upper, lower } => {
                val_bar.swap(*upper, *lower);
                for c in 0..n {
                    perm_bar.swap(upper * n + c, lower * n + c);
                }
            }
            Step::Soft {
                upper,
                lower,
                alpha,
                dalpha,
                a_minus_b,
                row_diff,
            } => {
                let (ru, rl) = (upper * n, lower * n);
                let mut alpha_bar = 0.0;
                for c in 0..n {
                    let gu = perm_bar[ru + c];
                    let gl = perm_bar[rl + c];
                    alpha_bar += (gu - gl) * row_diff[c];
                    perm_bar[ru + c] = alpha * gu + (1.0 - alpha) * gl;
                    perm_bar[rl + c] = (1.0 - alpha) * gu + alpha * gl;
                }
                let (top_bar, bottom_bar) = (val_bar[*upper], val_bar[*lower]);
                let dtop_da = alpha + a_minus_b * dalpha;
                let dtop_db = (1.0 - alpha) - a_minus_b * dalpha;
                let diff = top_bar - bottom_bar;
                val_bar[*upper] = bottom_bar + diff * dtop_da + alpha_bar * dalpha;
                val_bar[*lower] = bottom_bar + diff * dtop_db - alpha_bar * dalpha;
            }
        }
    }
    val_bar.truncate(p);
    val_bar
}

/// Jacobian `J[[i, j]] = ∂ soft_rank_i / ∂ value_j`.
pub fn soft_sort_gradient(values: &[f64], plan: &SortingNetworkPlan, beta: f64) -> Result<Array2<f64>> {
    let fwd = run_forward(values, plan, beta, false)?;
    let p = plan.p;
    let mut jac = Array2::zeros((p, p));
    let mut e = vec![0.0; p];
    for i in 0..p {
        e[i] = 1.0;
        let row = backward(&fwd, p, &e);
        jac.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
        e[i] = 0.0;
    }
    Ok(jac)
}

/// `1 − 6 Σ d² / (n(n² − 1))` on exact integer ranks.
pub fn spearman_exact(r1: &Ranking, r2: &Ranking) -> Result<f64> {
    check_len(r1.len(), r2.len())?;
    let n = r1.len();
    if n < 2 {
        return Err(Error::DegenerateRanking);
    }
    let d2: f64 = r1
        .ranks()
        .iter()
        .zip(r2.ranks())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Pearson correlation between soft ranks and target rank values, and its
/// gradient with respect to the soft ranks.
pub fn spearman_soft(soft_ranks: &[f64], target: &Ranking) -> Result<(f64, Vec<f64>)> {
    check_len(target.len(), soft_ranks.len())?;
    let n = soft_ranks.len() as f64;
    let t = target.as_f64();
    let s_mean = soft_ranks.iter().sum::<f64>() / n;
    let t_mean = t.iter().sum::<f64>() / n;
    let sc: Vec<f64> = soft_ranks.iter().map(|s| s - s_mean).collect();
    let tc: Vec<f64> = t.iter().map(|v| v - t_mean).collect();
    let ss: f64 = sc.iter().map(|v| v * v).sum();
    let tt: f64 = tc.iter().map(|v| v * v).sum();
    if !(ss > 1e-18) || !(tt > 0.0) {
        return Err(Error::DegenerateRanking);
    }
    let cov: f64 = sc.iter().zip(&tc).map(|(a, b)| a * b).sum();
    let denom = (ss * tt).sqrt();
    let rho = cov / denom;
    let ratio = (tt / ss).sqrt();
    let grad = sc.iter().zip(&tc).map(|(s, t)| (t - rho * ratio * s) / denom).collect();
    Ok((rho, grad))
}
