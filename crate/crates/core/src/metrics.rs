//! Agreement, predictive-faithfulness and subgroup-fairness metrics.
//!
//! Top-K metrics compare the `K = topk_count(p, k)` most important features
//! of two attribution vectors. Rankings follow [`rank_of`]: rank 1 is the
//! largest magnitude.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::{rank_of, AttributionVector, Ranking};
use crate::data::{sigmoid, Dataset};
use crate::diffsort::spearman_exact;
use crate::error::{check_len, Error, Result};
use crate::models::Predictor;

pub const MIN_SUBGROUP_ROWS: usize = 10;

pub fn topk_count(p: usize, k: f64) -> Result<usize> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidArgument(format!("k must be in (0, 1], got {k}")));
    }
    Ok(((k * p as f64 + 0.5).floor() as usize).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKAgreement {
    pub fa: f64,
    pub ra: f64,
    pub sa: f64,
    pub sra: f64,
}

pub fn agreement_suite(exp: &AttributionVector, gt: &AttributionVector, k: f64) -> Result<TopKAgreement> {
    check_len(gt.len(), exp.len())?;
    let kk = topk_count(gt.len(), k)?;
    let (re, rg) = (rank_of(exp), rank_of(gt));
    let (se, sg) = (exp.signs(), gt.signs());
    let top_gt = rg.top(kk);
    let (mut fa, mut ra, mut sa, mut sra) = (0usize, 0usize, 0usize, 0usize);
    for &f in &top_gt {
        if re.rank(f) > kk {
            continue;
        }
        fa += 1;
        let same_rank = re.rank(f) == rg.rank(f);
        let same_sign = se[f] == sg[f];
        ra += same_rank as usize;
        sa += same_sign as usize;
        sra += (same_rank && same_sign) as usize;
    }
    let kf = kk as f64;
    Ok(TopKAgreement {
        fa: fa as f64 / kf,
        ra: ra as f64 / kf,
        sa: sa as f64 / kf,
        sra: sra as f64 / kf,
    })
}

/// Fraction of unordered feature pairs ordered the same way by both rankings.
pub fn pairwise_rank_agreement(r1: &Ranking, r2: &Ranking) -> Result<f64> {
    check_len(r1.len(), r2.len())?;
    let p = r1.len();
    if p < 2 {
        return Ok(1.0);
    }
    let (a, b) = (r1.ranks(), r2.ranks());
    let mut agree = 0usize;
    for i in 0..p {
        for j in i + 1..p {
            if (a[i] < a[j]) == (b[i] < b[j]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (p * (p - 1) / 2) as f64)
}

pub fn rank_correlation(r1: &Ranking, r2: &Ranking) -> Result<f64> {
    spearman_exact(r1, r2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMode {
    Important,
    Unimportant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub sigma: f64,
    pub n_perturb: usize,
    pub seed: u64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            n_perturb: 100,
            seed: 0,
        }
    }
}

/// Mean `|p̂(x) − p̂(x')|` where `x'` adds Gaussian noise to the top-K
/// features (`Important`) or to the rest (`Unimportant`).
pub fn prediction_gap<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    rows: &[usize],
    ranking: &Ranking,
    k: f64,
    mode: GapMode,
    cfg: &GapConfig,
) -> Result<f64> {
    check_len(ds.p(), ranking.len())?;
    if !(cfg.sigma > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    if rows.is_empty() || cfg.n_perturb == 0 {
        return Err(Error::InvalidArgument("prediction gap needs rows and draws".into()));
    }
    let p = ds.p();
    let kk = topk_count(p, k)?;
    let perturbed: Vec<usize> = (0..p)
        .filter(|&f| (ranking.rank(f) <= kk) == (mode == GapMode::Important))
        .collect();
    let x = ds.select_rows(rows);
    let base: Vec<f64> = model.logits(x.view()).into_iter().map(sigmoid).collect();
    if perturbed.is_empty() {
        return Ok(0.0);
    }
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = rows.len();
    let mut batch = Array2::zeros((n * cfg.n_perturb, p));
    for (r, xr) in x.rows().into_iter().enumerate() {
        for d in 0..cfg.n_perturb {
            let mut out = batch.row_mut(r * cfg.n_perturb + d);
            out.assign(&xr);
            for &f in &perturbed {
                out[f] += noise.sample(&mut rng);
            }
        }
    }
    let probs = model.logits(batch.view());
    let total: f64 = probs
        .iter()
        .enumerate()
        .map(|(i, z)| (sigmoid(*z) - base[i / cfg.n_perturb]).abs())
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub method: String,
    pub model_id: String,
    pub k: f64,
    pub top_k_count: usize,
    pub fa: f64,
    pub ra: f64,
    pub sa: f64,
    pub sra: f64,
    pub rc: f64,
    pub pra: f64,
    pub pgi: f64,
    pub pgu: f64,
}

impl AgreementReport {
    pub const METRICS: [&'static str; 8] = ["fa", "ra", "sa", "sra", "rc", "pra", "pgi", "pgu"];

    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "fa" => self.fa,
            "ra" => self.ra,
            "sa" => self.sa,
            "sra" => self.sra,
            "rc" => self.rc,
            "pra" => self.pra,
            "pgi" => self.pgi,
            "pgu" => self.pgu,
            _ => return None,
        })
    }

    fn values(&self) -> [f64; 8] {
        [self.fa, self.ra, self.sa, self.sra, self.rc, self.pra, self.pgi, self.pgu]
    }
}

/// Full metric row: agreement of `exp` with `gt`, plus PGI/PGU of `model`
/// under the ranking induced by `exp`.
#[allow(clippy::too_many_arguments)]
pub fn full_report<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
    rows: &[usize],
    exp: &AttributionVector,
    gt: &AttributionVector,
    k: f64,
    gap: &GapConfig,
) -> Result<AgreementReport> {
    let top = agreement_suite(exp, gt, k)?;
    let (re, rg) = (rank_of(exp), rank_of(gt));
    Ok(AgreementReport {
        method: exp.method.clone(),
        model_id: exp.model_id.clone(),
        k,
        top_k_count: topk_count(gt.len(), k)?,
        fa: top.fa,
        ra: top.ra,
        sa: top.sa,
        sra: top.sra,
        rc: rank_correlation(&re, &rg)?,
        pra: pairwise_rank_agreement(&re, &rg)?,
        pgi: prediction_gap(model, ds, rows, &re, k, GapMode::Important, gap)?,
        pgu: prediction_gap(model, ds, rows, &re, k, GapMode::Unimportant, gap)?,
    })
}

/// Number of metrics (of 8) on which each row attains the best value.
/// PGU is better when lower; ties all count.
pub fn best_count(rows: &[AgreementReport]) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("best_count needs at least one row".into()));
    }
    let mut counts = vec![0usize; rows.len()];
    for m in 0..8 {
        let lower_better = m == 7;
        let vals: Vec<f64> = rows.iter().map(|r| r.values()[m]).collect();
        let best = vals
            .iter()
            .copied()
            .fold(if lower_better { f64::INFINITY } else { f64::NEG_INFINITY }, |a, b| {
                if lower_better {
                    a.min(b)
                } else {
                    a.max(b)
                }
            });
        for (c, v) in counts.iter_mut().zip(&vals) {
            if *v == best {
                *c += 1;
            }
        }
    }
    Ok(counts)
}

/// Aligned text table: Method, FA, RA, SA, SRA, RC, PRA, PGI, PGU, #Best.
pub fn render_table(rows: &[AgreementReport]) -> Result<String> {
    let best = best_count(rows)?;
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    write!(out, "{:<width$}", "Method").unwrap();
    for h in ["FA", "RA", "SA", "SRA", "RC", "PRA", "PGI", "PGU", "#Best"] {
        write!(out, " {h:>7}").unwrap();
    }
    out.push('\n');
    for (r, b) in rows.iter().zip(best) {
        write!(out, "{:<width$}", r.method).unwrap();
        for v in r.values() {
            write!(out, " {v:>7.3}").unwrap();
        }
        writeln!(out, " {b:>7}").unwrap();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Subgroup 0.
    pub majority: AgreementReport,
    /// Subgroup 1.
    pub minority: AgreementReport,
    pub majority_rows: usize,
    pub minority_rows: usize,
    pub disparities: BTreeMap<String, f64>,
}

impl FairnessReport {
    pub fn from_pair(majority: AgreementReport, minority: AgreementReport, sizes: (usize, usize)) -> Self {
        let disparities = AgreementReport::METRICS
            .iter()
            .map(|m| {
                let gap = (majority.metric(m).unwrap() - minority.metric(m).unwrap()).abs();
                (m.to_string(), gap)
            })
            .collect();
        Self {
            majority,
            minority,
            majority_rows: sizes.0,
            minority_rows: sizes.1,
            disparities,
        }
    }
}

/// Per-subgroup metric rows. `explain` and `truth` compute global
/// attributions restricted to the rows they are given.
pub fn fairness_suite<P, E, G>(
    model: &P,
    ds: &Dataset,
    rows: &[usize],
    explain: E,
    truth: G,
    k: f64,
    gap: &GapConfig,
) -> Result<FairnessReport>
where
    P: Predictor + ?Sized,
    E: Fn(&[usize]) -> Result<AttributionVector>,
    G: Fn(&[usize]) -> Result<AttributionVector>,
{
    let mut reports = Vec::with_capacity(2);
    let mut sizes = [0usize; 2];
    for group in [0u8, 1] {
        let g_rows = ds.subgroup_rows(rows, group)?;
        if g_rows.len() < MIN_SUBGROUP_ROWS {
            return Err(Error::SubgroupTooSmall {
                group,
                rows: g_rows.len(),
                minimum: MIN_SUBGROUP_ROWS,
            });
        }
        sizes[group as usize] = g_rows.len();
        let exp = explain(&g_rows)?;
        let gt = truth(&g_rows)?;
        reports.push(full_report(model, ds, &g_rows, &exp, &gt, k, gap)?);
    }
    let minority = reports.pop().unwrap();
    let majority = reports.pop().unwrap();
    Ok(FairnessReport::from_pair(majority, minority, (sizes[0], sizes[1])))
}
