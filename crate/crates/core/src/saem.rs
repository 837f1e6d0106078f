//! Multi-head mask search for stakeholder-aligned explanation models.
//!
//! A batch of mask heads starts near the identity mask and is optimized
//! through the surrogate and the soft sorting network toward a target
//! ranking, with sign, sparsity and diversity terms. Heads that leave the
//! Rashomon bound are reverted to their last in-bound mask and frozen. The
//! final choice is made on permutation importances of the real masked model,
//! never on surrogate outputs.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{explain_baseline, permutation_fis, rank_of, AttributionVector, BaselineKind, BaselineParams, Ranking};
use crate::data::{Dataset, TaskSplit};
use crate::diffsort::{plan_for, soft_ranks_vjp, spearman_exact, spearman_soft, SortingNetworkPlan};
use crate::dman::DmanModel;
use crate::error::{check_len, Error, Result};
use crate::metrics::{best_count, full_report, AgreementReport, GapConfig};
use crate::models::{Mask, MaskState, MaskedModel, Predictor};
use crate::optim::{Adam, StepDecay};
use crate::rashomon::{RashomonContext, RashomonSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    Dsl,
    Ui,
    Raw,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StakeholderTarget {
    pub target_ranking: Ranking,
    /// Entries in {-1, 0, +1}; 0 leaves the sign free.
    pub target_signs: Option<Vec<i8>>,
    pub source: TargetSource,
    pub stakeholder_id: String,
}

impl StakeholderTarget {
    pub fn new(target_ranking: Ranking, target_signs: Option<Vec<i8>>, source: TargetSource) -> Result<Self> {
        if let Some(s) = &target_signs {
            check_len(target_ranking.len(), s.len())?;
            if s.iter().any(|v| !(-1..=1).contains(v)) {
                return Err(Error::InvalidArgument("target signs must be -1, 0 or +1".into()));
            }
        }
        Ok(Self {
            target_ranking,
            target_signs,
            source,
            stakeholder_id: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.target_ranking.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_ranking.is_empty()
    }

    /// Attribution vector realizing the target: magnitude `p + 1 − rank`,
    /// sign from the target or, when unspecified, from `fallback_signs`.
    pub fn as_attribution(&self, fallback_signs: &[i8]) -> Result<AttributionVector> {
        let p = self.len();
        check_len(p, fallback_signs.len())?;
        let values = (0..p)
            .map(|f| {
                let s = self.target_signs.as_ref().map(|s| s[f]).filter(|&s| s != 0).unwrap_or(fallback_signs[f]);
                let s = if s < 0 { -1.0 } else { 1.0 };
                s * (p + 1 - self.target_ranking.rank(f)) as f64
            })
            .collect();
        AttributionVector::new(values, "target", self.stakeholder_id.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhmnConfig {
    pub heads: usize,
    pub lr: f64,
    pub scheduler: StepDecay,
    pub lambda_sparsity: f64,
    pub lambda_diversity: f64,
    pub epochs: usize,
    /// Sorting-network steepness.
    pub beta: f64,
    /// Soft-sign temperature.
    pub tau: f64,
    /// Fraction of reference-top features that receive wide initial noise.
    pub init_k: f64,
    pub sigma_base: f64,
    pub sigma_focus: f64,
    pub mask_max: f64,
    /// Draws per head before initialization gives up.
    pub init_budget: usize,
    /// Permutation repeats and seed for the final true-attribution pass.
    pub fis_repeats: usize,
    pub fis_seed: u64,
    pub min_surrogate_r2: f64,
    /// Recorded for completeness; the plain Cauchy relaxation is used.
    pub art_lambda: f64,
    pub seed: u64,
}

impl Default for MhmnConfig {
    fn default() -> Self {
        Self {
            heads: 50,
            lr: 0.01,
            scheduler: StepDecay::default(),
            lambda_sparsity: 0.1,
            lambda_diversity: 0.1,
            epochs: 200,
            beta: 10.0,
            tau: 0.01,
            init_k: 0.25,
            sigma_base: 0.05,
            sigma_focus: 0.2,
            mask_max: 2.0,
            init_budget: 100,
            fis_repeats: 5,
            fis_seed: 0,
            min_surrogate_r2: 0.8,
            art_lambda: 0.25,
            seed: 0,
        }
    }
}

impl MhmnConfig {
    fn validate(&self) -> Result<()> {
        if self.heads < 1 {
            return Err(Error::InvalidArgument("at least one head is required".into()));
        }
        if !(self.lr > 0.0 && self.beta > 0.0 && self.tau > 0.0) {
            return Err(Error::InvalidArgument("lr, beta and tau must be positive".into()));
        }
        if !(self.init_k > 0.0 && self.init_k <= 1.0) {
            return Err(Error::InvalidArgument("init_k must be in (0, 1]".into()));
        }
        if self.sigma_base < 0.0 || self.sigma_focus < 0.0 {
            return Err(Error::InvalidArgument("initial noise scales must be >= 0".into()));
        }
        if self.fis_repeats < 1 {
            return Err(Error::InvalidArgument("fis_repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// Features that get wide initial noise: the reference top-⌈k·p⌉ and every
/// feature whose reference rank differs from its target rank.
pub fn focus_features(reference: &Ranking, target: &Ranking, k: f64) -> Result<Vec<bool>> {
    check_len(reference.len(), target.len())?;
    let p = reference.len();
    let top = ((k * p as f64).ceil() as usize).clamp(1, p);
    Ok((0..p)
        .map(|f| reference.rank(f) <= top || reference.rank(f) != target.rank(f))
        .collect())
}

/// Draw `cfg.heads` masks around the identity, each accepted by `in_bound`.
/// After every ten rejected draws for a head the noise shrinks by 30%.
pub fn initialize_heads<F>(reference: &Ranking, target: &StakeholderTarget, cfg: &MhmnConfig, in_bound: F) -> Result<Array2<f64>>
where
    F: Fn(&[f64]) -> bool,
{
    cfg.validate()?;
    let p = reference.len();
    let focus = focus_features(reference, &target.target_ranking, cfg.init_k)?;
    let sigma: Vec<f64> = focus.iter().map(|&f| if f { cfg.sigma_focus } else { cfg.sigma_base }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut heads = Array2::zeros((cfg.heads, p));
    for h in 0..cfg.heads {
        let mut scale = 1.0;
        let mut accepted = None;
        for attempt in 0..cfg.init_budget.max(1) {
            if attempt > 0 && attempt % 10 == 0 {
                scale *= 0.7;
            }
            let m: Vec<f64> = sigma
                .iter()
                .map(|s| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (1.0 + scale * s * z).clamp(0.0, cfg.mask_max)
                })
                .collect();
            if in_bound(&m) {
                accepted = Some(m);
                break;
            }
        }
        match accepted {
            Some(m) => heads.row_mut(h).assign(&ndarray::ArrayView1::from(&m[..])),
            None => {
                return Err(Error::HeadInitialization {
                    achieved: h,
                    requested: cfg.heads,
                })
            }
        }
    }
    Ok(heads)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLoss {
    pub rank_loss: f64,
    pub sign_loss: f64,
}

/// Rank and sign losses of one head and the gradient of their sum with
/// respect to the mask.
pub fn head_losses(
    mask: &[f64],
    dman: &DmanModel,
    plan: &SortingNetworkPlan,
    beta: f64,
    tau: f64,
    target: &StakeholderTarget,
) -> Result<(HeadLoss, Vec<f64>)> {
    let a = dman.forward(mask)?;
    let mag: Vec<f64> = a.iter().map(|v| v.abs()).collect();
    let fwd = soft_ranks_vjp(&mag, plan, beta, &vec![0.0; a.len()])?;
    let (rho, drho) = spearman_soft(&fwd.0, &target.target_ranking)?;
    let neg: Vec<f64> = drho.iter().map(|g| -g).collect();
    let (_, dmag) = soft_ranks_vjp(&mag, plan, beta, &neg)?;
    let mut da: Vec<f64> = dmag.iter().zip(&a).map(|(g, v)| if *v < 0.0 { -g } else { *g }).collect();

    let mut sign_loss = 0.0;
    if let Some(signs) = &target.target_signs {
        let n = signs.iter().filter(|&&s| s != 0).count();
        if n > 0 {
            for (j, &s) in signs.iter().enumerate() {
                if s == 0 {
                    continue;
                }
                let t = (a[j] / tau).tanh();
                let r = t - s as f64;
                sign_loss += r * r / n as f64;
                da[j] += 2.0 * r * (1.0 - t * t) / tau / n as f64;
            }
        }
    }
    let grad = dman.vjp(mask, &da)?;
    Ok((
        HeadLoss {
            rank_loss: -rho,
            sign_loss,
        },
        grad,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularizers {
    pub sparsity_loss: f64,
    pub diversity_loss: f64,
}

/// Sparsity (mean L1 deviation from the identity) and diversity (mean
/// pairwise cosine similarity of deviations) with their gradients.
pub fn batch_regularizers(masks: &Array2<f64>) -> Result<(Regularizers, Array2<f64>, Array2<f64>)> {
    let (m, p) = masks.dim();
    if m == 0 {
        return Err(Error::InvalidArgument("regularizers need at least one mask".into()));
    }
    let dev = masks.mapv(|v| v - 1.0);
    let scale = 1.0 / (m * p) as f64;
    let sparsity = dev.mapv(f64::abs).sum() * scale;
    let g_sparse = dev.mapv(|d| if d > 0.0 { scale } else if d < 0.0 { -scale } else { 0.0 });

    let norms: Vec<f64> = dev.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut g_div = Array2::zeros((m, p));
    let mut diversity = 0.0;
    if m > 1 {
        let pairs = (m * (m - 1) / 2) as f64;
        for i in 0..m {
            for j in i + 1..m {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    continue;
                }
                let (u, v) = (dev.row(i), dev.row(j));
                let cos = u.dot(&v) / (norms[i] * norms[j]);
                diversity += cos / pairs;
                let gu = (&v / (norms[i] * norms[j]) - &u * (cos / (norms[i] * norms[i]))) / pairs;
                let gv = (&u / (norms[i] * norms[j]) - &v * (cos / (norms[j] * norms[j]))) / pairs;
                {
                    let mut r = g_div.row_mut(i);
                    r += &gu;
                }
                let mut r = g_div.row_mut(j);
                r += &gv;
            }
        }
    }
    Ok((
        Regularizers {
            sparsity_loss: sparsity,
            diversity_loss: diversity,
        },
        g_sparse,
        g_div,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub heads: Vec<HeadLoss>,
    pub regularizers: Regularizers,
    /// Gradient with respect to each mask, same shape as the input.
    pub grad: Array2<f64>,
}

/// `mean_h(rank + sign) + λ₁·sparsity + λ₂·diversity` over the given masks.
pub fn total_loss(masks: &Array2<f64>, dman: &DmanModel, target: &StakeholderTarget, cfg: &MhmnConfig) -> Result<TotalLoss> {
    let (m, p) = masks.dim();
    let plan = plan_for(p)?;
    let per: Vec<(HeadLoss, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|h| head_losses(&masks.row(h).to_vec(), dman, &plan, cfg.beta, cfg.tau, target))
        .collect::<Result<_>>()?;
    let (reg, gs, gd) = batch_regularizers(masks)?;
    let mut grad = gs * cfg.lambda_sparsity + gd * cfg.lambda_diversity;
    let mut total = cfg.lambda_sparsity * reg.sparsity_loss + cfg.lambda_diversity * reg.diversity_loss;
    for (h, (l, g)) in per.iter().enumerate() {
        total += (l.rank_loss + l.sign_loss) / m as f64;
        for (dst, v) in grad.row_mut(h).iter_mut().zip(g) {
            *dst += v / m as f64;
        }
    }
    Ok(TotalLoss {
        total,
        heads: per.into_iter().map(|(l, _)| l).collect(),
        regularizers: reg,
        grad,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub head: usize,
    pub rank_loss: f64,
    pub sign_loss: f64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    /// 0 is the identity mask; `h + 1` is head `h`'s final in-bound mask.
    pub index: usize,
    pub spearman: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaemResult {
    pub best_mask: Mask,
    pub best_candidate: usize,
    pub true_attributions: AttributionVector,
    pub achieved_ranking: Ranking,
    pub spearman_vs_target: f64,
    /// Score of the identity mask under the same evaluation.
    pub identity_spearman: f64,
    pub validation_loss: f64,
    pub loss_in_bound: bool,
    pub head_states: Vec<MaskState>,
    pub candidates: Vec<CandidateScore>,
    pub epochs_run: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_head_trace: Vec<TraceRow>,
    pub metric_report: Option<AgreementReport>,
}

impl SaemResult {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.per_head_trace {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        self.write_trace_csv(std::fs::File::create(path)?)
    }
}

/// Score `candidates` on true permutation importances (shared seed) and pick
/// the best: highest exact Spearman, then lower validation loss, then lower
/// index.
pub fn select_candidate<P: Predictor + ?Sized>(
    candidates: &[Vec<f64>],
    ctx: &RashomonContext<'_, P>,
    split: &TaskSplit,
    target: &Ranking,
    repeats: usize,
    seed: u64,
) -> Result<(usize, Vec<CandidateScore>, Vec<AttributionVector>)> {
    let scored: Vec<(CandidateScore, AttributionVector)> = candidates
        .par_iter()
        .enumerate()
        .map(|(index, m)| {
            let masked = MaskedModel::new(ctx.base, m)?;
            let fis = permutation_fis(&masked, ctx.ds, split, repeats, seed)?;
            let spearman = spearman_exact(&rank_of(&fis), target)?;
            Ok((
                CandidateScore {
                    index,
                    spearman,
                    validation_loss: ctx.loss(m),
                },
                fis,
            ))
        })
        .collect::<Result<_>>()?;
    let best = scored
        .iter()
        .map(|(s, _)| s)
        .max_by(|a, b| {
            a.spearman
                .total_cmp(&b.spearman)
                .then(b.validation_loss.total_cmp(&a.validation_loss))
                .then(b.index.cmp(&a.index))
        })
        .map(|s| s.index)
        .expect("at least one candidate");
    let (scores, fis) = scored.into_iter().unzip();
    Ok((best, scores, fis))
}

#[allow(clippy::too_many_arguments)]
pub fn optimize_saem<P: Predictor + ?Sized>(
    base: &P,
    ds: &Dataset,
    split: &TaskSplit,
    sample: &RashomonSample,
    dman: &DmanModel,
    reference: &Ranking,
    target: &StakeholderTarget,
    cfg: &MhmnConfig,
) -> Result<SaemResult> {
    optimize_saem_with_progress(base, ds, split, sample, dman, reference, target, cfg, &|_, _| {})
}

/// Like [`optimize_saem`], calling `progress(done, total)` after each epoch
/// and once more after candidate selection.
#[allow(clippy::too_many_arguments)]
pub fn optimize_saem_with_progress<P: Predictor + ?Sized>(
    base: &P,
    ds: &Dataset,
    split: &TaskSplit,
    sample: &RashomonSample,
    dman: &DmanModel,
    reference: &Ranking,
    target: &StakeholderTarget,
    cfg: &MhmnConfig,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<SaemResult> {
    cfg.validate()?;
    let p = ds.p();
    check_len(p, target.len())?;
    check_len(p, dman.p())?;
    dman.check_gate(cfg.min_surrogate_r2)?;
    let ctx = RashomonContext::new(base, ds, split, sample.bound);

    let mut masks = initialize_heads(reference, target, cfg, |m| ctx.contains(m))?;
    let h = cfg.heads;
    let mut snapshots: Vec<Vec<f64>> = masks.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut states = vec![MaskState::Active; h];
    let mut last_loss = vec![f64::INFINITY; h];
    let mut adams: Vec<Adam> = (0..h).map(|_| Adam::new(p)).collect();
    let mut trace = Vec::new();
    let plan = plan_for(p)?;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        // Flag heads whose surrogate attributions are degenerate.
        for i in 0..h {
            if states[i] == MaskState::Active {
                let m = masks.row(i).to_vec();
                if let Err(Error::DegenerateRanking) = head_losses(&m, dman, &plan, cfg.beta, cfg.tau, target) {
                    states[i] = MaskState::Invalid;
                }
            }
        }
        let active: Vec<usize> = (0..h).filter(|&i| states[i] == MaskState::Active).collect();
        if active.is_empty() {
            break;
        }
        let batch = masks.select(ndarray::Axis(0), &active);
        let loss = total_loss(&batch, dman, target, cfg)?;
        if !loss.total.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let lr = cfg.scheduler.lr_at(cfg.lr, epoch);
        for (row, &i) in active.iter().enumerate() {
            let mut m = masks.row(i).to_vec();
            adams[i].step(&mut m, &loss.grad.row(row).to_vec(), lr);
            for v in m.iter_mut() {
                *v = v.clamp(0.0, cfg.mask_max);
            }
            masks.row_mut(i).assign(&ndarray::ArrayView1::from(&m[..]));
            last_loss[i] = loss.heads[row].rank_loss + loss.heads[row].sign_loss;
        }
        let inside: Vec<bool> = active.par_iter().map(|&i| ctx.contains(&masks.row(i).to_vec())).collect();
        for (row, (&i, ok)) in active.iter().zip(inside).enumerate() {
            if ok {
                snapshots[i] = masks.row(i).to_vec();
            } else {
                masks.row_mut(i).assign(&ndarray::ArrayView1::from(&snapshots[i][..]));
                states[i] = MaskState::Frozen;
            }
            trace.push(TraceRow {
                epoch,
                head: i,
                rank_loss: loss.heads[row].rank_loss,
                sign_loss: loss.heads[row].sign_loss,
                active: ok,
            });
        }
        epochs_run = epoch + 1;
        progress(epochs_run, cfg.epochs + 1);
    }

    if states.iter().all(|s| *s == MaskState::Invalid) {
        let best = (0..h).min_by(|&a, &b| last_loss[a].total_cmp(&last_loss[b]));
        return Err(Error::AllHeadsInvalid {
            best_snapshot: best.map(|i| snapshots[i].clone()),
        });
    }

    let mut candidates = vec![vec![1.0; p]];
    candidates.extend(snapshots.iter().cloned());
    let (best, scores, mut fis) = select_candidate(&candidates, &ctx, split, &target.target_ranking, cfg.fis_repeats, cfg.fis_seed)?;
    let best_mask = candidates[best].clone();
    let loss_in_bound = ctx.contains(&best_mask);
    let mut true_attributions = fis.swap_remove(best);
    true_attributions.method = "permutation_fis".into();
    true_attributions.model_id = format!("saem_candidate_{best}");
    let achieved_ranking = rank_of(&true_attributions);

    let masked = MaskedModel::new(base, &best_mask)?;
    let reference_signs = {
        let r = permutation_fis(base, ds, split, cfg.fis_repeats, cfg.fis_seed)?;
        r.signs()
    };
    let target_attr = target.as_attribution(&reference_signs)?;
    let metric_report = full_report(
        &masked,
        ds,
        &split.valid_idx,
        &true_attributions,
        &target_attr,
        cfg.init_k,
        &GapConfig {
            seed: cfg.seed,
            ..Default::default()
        },
    )
    .ok();

    progress(cfg.epochs + 1, cfg.epochs + 1);
    Ok(SaemResult {
        best_mask: Mask {
            values: best_mask,
            state: if best == 0 { MaskState::Active } else { states[best - 1] },
        },
        best_candidate: best,
        spearman_vs_target: scores[best].spearman,
        identity_spearman: scores[0].spearman,
        validation_loss: scores[best].validation_loss,
        true_attributions,
        achieved_ranking,
        loss_in_bound,
        head_states: states,
        candidates: scores,
        epochs_run,
        per_head_trace: trace,
        metric_report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "name")]
pub enum ExplainerKind {
    PermutationFis,
    Baseline(BaselineKind),
}

impl ExplainerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExplainerKind::PermutationFis => "permutation_fis",
            ExplainerKind::Baseline(b) => b.name(),
        }
    }

    pub fn all() -> Vec<ExplainerKind> {
        std::iter::once(ExplainerKind::PermutationFis)
            .chain(BaselineKind::ALL.into_iter().map(ExplainerKind::Baseline))
            .collect()
    }

    pub fn explain<P: Predictor + ?Sized>(&self, model: &P, ds: &Dataset, split: &TaskSplit, seed: u64) -> Result<AttributionVector> {
        match self {
            ExplainerKind::PermutationFis => permutation_fis(model, ds, split, 5, seed),
            ExplainerKind::Baseline(b) => explain_baseline(*b, model, ds, &split.valid_idx, &BaselineParams::default(), seed),
        }
    }
}

impl std::str::FromStr for ExplainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "permutation_fis" {
            return Ok(ExplainerKind::PermutationFis);
        }
        s.parse().map(ExplainerKind::Baseline)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditBlock {
    pub model_id: String,
    pub k: f64,
    pub rows: Vec<AgreementReport>,
    pub best: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub blocks: Vec<AuditBlock>,
}

/// Every (model, explainer) pair scored against `gt` at every `k`, with
/// best-value counts per model block.
pub fn audit_disagreement(
    models: &[(String, &dyn Predictor)],
    explainers: &[ExplainerKind],
    ds: &Dataset,
    split: &TaskSplit,
    gt: &AttributionVector,
    ks: &[f64],
    gap: &GapConfig,
    seed: u64,
) -> Result<AuditReport> {
    if models.is_empty() || explainers.is_empty() || ks.is_empty() {
        return Err(Error::InvalidArgument("audit needs models, explainers and k values".into()));
    }
    let mut blocks = Vec::new();
    for (id, model) in models {
        let exps: Vec<AttributionVector> = explainers
            .iter()
            .map(|e| {
                let mut a = e.explain(*model, ds, split, seed)?;
                a.model_id = id.clone();
                Ok(a)
            })
            .collect::<Result<_>>()?;
        for &k in ks {
            let rows: Vec<AgreementReport> = exps
                .iter()
                .map(|a| full_report(*model, ds, &split.valid_idx, a, gt, k, gap))
                .collect::<Result<_>>()?;
            let best = best_count(&rows)?;
            blocks.push(AuditBlock {
                model_id: id.clone(),
                k,
                rows,
                best,
            });
        }
    }
    Ok(AuditReport { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn regularizer_examples() {
        let ones = Array2::from_elem((3, 4), 1.0);
        let (r, _, _) = batch_regularizers(&ones).unwrap();
        assert_eq!((r.sparsity_loss, r.diversity_loss), (0.0, 0.0));

        let same = array![[1.5, 0.5, 1.0], [1.5, 0.5, 1.0]];
        let (r, _, _) = batch_regularizers(&same).unwrap();
        assert!((r.diversity_loss - 1.0).abs() < 1e-15);
        assert!((r.sparsity_loss - 1.0 / 3.0).abs() < 1e-15);

        let ortho = array![[1.5, 1.0], [1.0, 0.7]];
        let (r, _, _) = batch_regularizers(&ortho).unwrap();
        assert_eq!(r.diversity_loss, 0.0);

        let single = array![[1.2, 0.9]];
        assert_eq!(batch_regularizers(&single).unwrap().0.diversity_loss, 0.0);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let m = array![[1.3, 0.8, 1.1], [0.7, 1.25, 1.4], [1.05, 0.6, 0.9]];
        let (_, gs, gd) = batch_regularizers(&m).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut mp = m.clone();
                mp[[i, j]] += h;
                let mut mm = m.clone();
                mm[[i, j]] -= h;
                let (rp, _, _) = batch_regularizers(&mp).unwrap();
                let (rm, _, _) = batch_regularizers(&mm).unwrap();
                let fd_s = (rp.sparsity_loss - rm.sparsity_loss) / (2.0 * h);
                let fd_d = (rp.diversity_loss - rm.diversity_loss) / (2.0 * h);
                assert!((fd_s - gs[[i, j]]).abs() < 1e-8);
                assert!((fd_d - gd[[i, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn focus_set() {
        let reference = Ranking::identity(8);
        let f = focus_features(&reference, &reference, 0.25).unwrap();
        assert_eq!(f.iter().filter(|&&b| b).count(), 2);
        let target = Ranking::from_order(&[0, 1, 2, 3, 4, 6, 5, 7]).unwrap();
        let f = focus_features(&reference, &target, 0.25).unwrap();
        assert_eq!(f, vec![true, true, false, false, false, true, true, false]);
    }

    #[test]
    fn single_head_without_noise_is_identity() {
        let target = StakeholderTarget::new(Ranking::identity(4), None, TargetSource::Raw).unwrap();
        let cfg = MhmnConfig {
            heads: 1,
            sigma_base: 0.0,
            sigma_focus: 0.0,
            ..Default::default()
        };
        let heads = initialize_heads(&Ranking::identity(4), &target, &cfg, |_| true).unwrap();
        assert_eq!(heads, Array2::from_elem((1, 4), 1.0));
        let never = initialize_heads(&Ranking::identity(4), &target, &MhmnConfig { heads: 3, ..cfg }, |_| false);
        assert!(matches!(never, Err(Error::HeadInitialization { achieved: 0, requested: 3 })));
    }

    #[test]
    fn target_validation_and_attribution() {
        assert!(StakeholderTarget::new(Ranking::identity(3), Some(vec![1, 0]), TargetSource::Raw).is_err());
        assert!(StakeholderTarget::new(Ranking::identity(3), Some(vec![1, 0, 2]), TargetSource::Raw).is_err());
        let t = StakeholderTarget::new(Ranking::from_ranks(vec![2, 1, 3]).unwrap(), Some(vec![0, -1, 0]), TargetSource::Raw).unwrap();
        let a = t.as_attribution(&[-1, 1, 1]).unwrap();
        assert_eq!(a.values, vec![-2.0, -3.0, 1.0]);
        assert_eq!(rank_of(&a), t.target_ranking);
    }
}
