//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any of them fails.

use std::error::Error as StdError;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use exagree_cli::pipeline::{self, RunContext, SynthOptions, SynthTask, TargetInput};
use exagree_cli::RunDir;
use exagree_core::attribution::{permutation_fis_on_rows, rank_by_magnitude, Ranking};
use exagree_core::data::{default_weights, generate_synthetic, split, FeatureKind, FeatureMeta, SyntheticSpec};
use exagree_core::diffsort::{build_plan, layer_values, soft_sort, soft_sort_gradient, spearman_exact};
use exagree_core::dman::train_dman;
use exagree_core::metrics::{agreement_suite, fairness_suite, pairwise_rank_agreement, prediction_gap, GapConfig, GapMode};
use exagree_core::models::{loss_on_rows, LinearModel, MaskedModel, Model, TrainConfig};
use exagree_core::rashomon::sample_masks;
use exagree_core::saem::{total_loss, StakeholderTarget, TargetSource};
use exagree_core::{AttributionDataset, AttributionVector, Dataset, DmanConfig, Exploration, MhmnConfig, RashomonConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, Box<dyn StdError>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

const SLACK: f64 = 1e-12;

fn noop(_: usize, _: usize) {}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Array2<f64> {
    let p = x.len();
    let m = f(x).len();
    let mut jac = Array2::zeros((m, p));
    let mut xp = x.to_vec();
    for j in 0..p {
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let down = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[[i, j]] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    jac
}

fn random_ranking(p: usize, rng: &mut ChaCha8Rng) -> Ranking {
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(rng);
    Ranking::from_order(&order).unwrap()
}

// 1
fn spearman_examples() -> Outcome {
    let id = Ranking::from_ranks(vec![1, 2, 3, 4, 5])?;
    let a = spearman_exact(&Ranking::from_ranks(vec![1, 3, 2, 5, 4])?, &id)?;
    let b = spearman_exact(&Ranking::from_ranks(vec![2, 1, 3, 5, 4])?, &id)?;
    ensure!(a == 0.8 && b == 0.8, "got {a} and {b}");
    Ok(format!("rho = {a}, {b}"))
}

// 2
fn hard_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum = 0.0f64;
    for case in 0..1000 {
        let p = rng.random_range(2..=32);
        let mut grid: Vec<usize> = (1..=5000).collect();
        grid.shuffle(&mut rng);
        let values: Vec<f64> = grid[..p].iter().map(|&g| g as f64 * 1e-3).collect();
        let plan = build_plan(p)?;
        let sp = soft_sort(&values, &plan, 1e6)?;
        let rounded: Vec<usize> = sp.soft_ranks.iter().map(|r| r.round() as usize).collect();
        let exact = rank_by_magnitude(&values);
        ensure!(rounded == exact.ranks(), "case {case} (p = {p}): rounded {rounded:?} vs {:?}", exact.ranks());
        let total: f64 = values.iter().sum();
        for layer in layer_values(&values, &plan, 1e6)? {
            let drift = (layer.iter().sum::<f64>() - total).abs();
            worst_sum = worst_sum.max(drift);
            ensure!(drift <= 1e-12, "case {case}: layer sum drifted by {drift:e}");
        }
    }
    Ok(format!("1000 vectors, max layer-sum drift {worst_sum:.1e}"))
}

fn toy_surrogate(p: usize, seed: u64) -> Result<exagree_core::DmanModel, Box<dyn StdError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 300;
    let w: Vec<f64> = (0..p).map(|j| 1.0 + 0.3 * j as f64).collect();
    let masks = Array2::from_shape_fn((rows, p), |_| rng.random_range(0.5..1.5));
    let attributions = Array2::from_shape_fn((rows, p), |(i, j)| {
        let m = masks.row(i);
        (w[j] * m[j]).powi(2) + 0.2 * m.sum() - 0.5 * m[(j + 1) % p]
    });
    let cfg = DmanConfig {
        epochs: 200,
        lr: 1e-3,
        seed,
        min_r2: 0.0,
        ..Default::default()
    };
    Ok(train_dman(&AttributionDataset::new(masks, attributions)?, &cfg)?)
}

// 3
fn gradient_suites() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = 50;

    let mut sort_worst = 0.0f64;
    for _ in 0..cases {
        let p = rng.random_range(2..=16);
        let plan = build_plan(p)?;
        let x: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let analytic = soft_sort_gradient(&x, &plan, 10.0)?;
        let fd = central_diff(&x, 1e-6, |v| soft_sort(v, &plan, 10.0).unwrap().soft_ranks);
        sort_worst = sort_worst.max(rel_err(analytic.as_slice().unwrap(), fd.as_slice().unwrap()));
    }
    ensure!(sort_worst < 1e-4, "sorting network Jacobian rel. error {sort_worst:e}");

    let p = 8;
    let dman = toy_surrogate(p, 3)?;
    let mut dman_worst = 0.0f64;
    let mut done = 0;
    let mut skipped = 0;
    while done < cases {
        let m: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..1.5)).collect();
        if dman.kink_margin(&m)? < 1e-3 {
            skipped += 1;
            continue;
        }
        let analytic = dman.input_gradient(&m)?;
        let fd = central_diff(&m, 1e-6, |v| dman.forward(v).unwrap());
        dman_worst = dman_worst.max(rel_err(analytic.as_slice().unwrap(), fd.as_slice().unwrap()));
        done += 1;
    }
    ensure!(dman_worst < 1e-4, "surrogate Jacobian rel. error {dman_worst:e}");

    let cfg = MhmnConfig::default();
    let heads = 3;
    let mut total_worst = 0.0f64;
    done = 0;
    while done < cases {
        let masks = Array2::from_shape_fn((heads, p), |_| {
            let d: f64 = rng.random_range(0.01..0.5);
            if rng.random_bool(0.5) { 1.0 + d } else { 1.0 - d }
        });
        let mut margin = f64::INFINITY;
        for r in masks.rows() {
            margin = margin.min(dman.kink_margin(r.as_slice().unwrap())?);
        }
        if margin < 1e-3 {
            skipped += 1;
            continue;
        }
        let signs: Vec<i8> = (0..p).map(|_| rng.random_range(-1..=1)).collect();
        let target = StakeholderTarget::new(random_ranking(p, &mut rng), Some(signs), TargetSource::Raw)?;
        let loss = total_loss(&masks, &dman, &target, &cfg)?;
        let flat = masks.as_slice().unwrap().to_vec();
        let fd = central_diff(&flat, 1e-6, |v| {
            let m = Array2::from_shape_vec((heads, p), v.to_vec()).unwrap();
            vec![total_loss(&m, &dman, &target, &cfg).unwrap().total]
        });
        total_worst = total_worst.max(rel_err(loss.grad.as_slice().unwrap(), fd.as_slice().unwrap()));
        done += 1;
    }
    ensure!(total_worst < 1e-3, "total-loss gradient rel. error {total_worst:e}");
    Ok(format!(
        "{cases} cases each; max rel. error sort {sort_worst:.1e}, surrogate {dman_worst:.1e}, total {total_worst:.1e} ({skipped} kink draws skipped)"
    ))
}

fn synthetic(seed: u64) -> Result<(Dataset, exagree_core::TaskSplit, Model), Box<dyn StdError>> {
    let ds = generate_synthetic(&SyntheticSpec::default_task(seed))?;
    let s = split(&ds, 0.2, seed)?;
    let model = TrainConfig::logistic(seed).train(&ds, &s)?;
    Ok((ds, s, model))
}

// 4
fn rashomon_soundness() -> Outcome {
    let (ds, s, model) = synthetic(0)?;
    let reference_loss = loss_on_rows(&model, &ds, &s.valid_idx);
    let verify = |sample: &exagree_core::RashomonSample, eps: f64| -> Result<(), Box<dyn StdError>> {
        let bound = (1.0 + eps) * reference_loss;
        for m in sample.masks.rows() {
            let m = m.to_vec();
            let loss = loss_on_rows(&MaskedModel::new(&model, &m)?, &ds, &s.valid_idx);
            ensure!(loss <= bound + SLACK, "mask with loss {loss} above bound {bound} (eps {eps})");
        }
        Ok(())
    };
    let mut accepted: Vec<Vec<usize>> = Vec::new();
    let epsilons = [0.05, 0.1, 0.2];
    for &eps in &epsilons {
        let cfg = RashomonConfig {
            epsilon: eps,
            n_samples: 100_000,
            exploration: Exploration::Rejection,
            proposal_radius: Some(0.25),
            max_attempts: 4000,
            seed: 4,
            ..Default::default()
        };
        let sample = sample_masks(&model, &ds, &s, &cfg)?;
        verify(&sample, eps)?;
        accepted.push(sample.proposal_index.iter().flatten().copied().collect());
    }
    ensure!(!accepted[0].is_empty(), "no proposal accepted at eps = 0.05");
    for w in accepted.windows(2) {
        ensure!(w[0].iter().all(|i| w[1].contains(i)), "acceptance sets are not nested");
    }
    let line = sample_masks(&model, &ds, &s, &RashomonConfig::default())?;
    verify(&line, 0.05)?;
    let sizes: Vec<usize> = accepted.iter().map(Vec::len).collect();
    Ok(format!(
        "rejection accepted {sizes:?} of 4000 at eps {epsilons:?}, nested; {} line-search masks in bound",
        line.len()
    ))
}

fn oracle_ranks(v: &[f64]) -> Vec<usize> {
    (0..v.len())
        .map(|f| {
            1 + (0..v.len())
                .filter(|&g| v[g].abs() > v[f].abs() || (v[g].abs() == v[f].abs() && g < f))
                .count()
        })
        .collect()
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

// 5
fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let p = rng.random_range(2..=10);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            if case % 2 == 0 {
                (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            } else {
                (0..p).map(|_| rng.random_range(-3i32..=3) as f64).collect()
            }
        };
        let (e, g) = (draw(&mut rng), draw(&mut rng));
        let k: f64 = rng.random_range(0.01..=1.0);
        let kk = ((k * p as f64 + 0.5).floor() as usize).max(1);
        let (re, rg) = (oracle_ranks(&e), oracle_ranks(&g));
        let both: Vec<usize> = (0..p).filter(|&f| re[f] <= kk && rg[f] <= kk).collect();
        let frac = |n: usize| n as f64 / kk as f64;
        let fa = frac(both.len());
        let ra = frac(both.iter().filter(|&&f| re[f] == rg[f]).count());
        let sa = frac(both.iter().filter(|&&f| sign(e[f]) == sign(g[f])).count());
        let sra = frac(both.iter().filter(|&&f| re[f] == rg[f] && sign(e[f]) == sign(g[f])).count());
        let mut agree = 0;
        let mut pairs = 0;
        for i in 0..p {
            for j in i + 1..p {
                pairs += 1;
                agree += usize::from((re[i] < re[j]) == (rg[i] < rg[j]));
            }
        }
        let pra = agree as f64 / pairs as f64;

        let got = agreement_suite(&AttributionVector::new(e.clone(), "e", "m")?, &AttributionVector::new(g.clone(), "g", "m")?, k)?;
        let got_pra = pairwise_rank_agreement(&Ranking::from_ranks(re.clone())?, &Ranking::from_ranks(rg.clone())?)?;
        ensure!(
            (got.fa, got.ra, got.sa, got.sra, got_pra) == (fa, ra, sa, sra, pra),
            "case {case}: module {got:?}, pra {got_pra}; oracle fa {fa} ra {ra} sa {sa} sra {sra} pra {pra}"
        );
        ensure!(got.sra <= got.ra.min(got.sa) && got.ra.min(got.sa) <= got.fa, "case {case}: ordering violated {got:?}");
    }
    Ok("500 pairs match the enumeration oracle".into())
}

struct Shared {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn build_shared() -> Result<Shared, Box<dyn StdError>> {
    let dir = tempfile::tempdir()?;
    let root = dir.path().join("synthetic");
    pipeline::synth(&root, &SynthOptions::default(), false)?;
    let mut run = RunDir::open(&root)?;
    pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 5)?;
    pipeline::sample(&mut run, RashomonConfig::default())?;
    pipeline::dman(&mut run, DmanConfig::default())?;
    Ok(Shared { _dir: dir, root })
}

fn in_bound(ctx: &RunContext, mask: &[f64]) -> Result<bool, Box<dyn StdError>> {
    let (model, _) = ctx.reference()?;
    let sample = ctx.sample.as_ref().unwrap();
    let loss = loss_on_rows(&MaskedModel::new(model, mask)?, &ctx.ds, &ctx.split.valid_idx);
    Ok(loss <= sample.bound + SLACK)
}

fn search_ranking(root: &Path, ranks: Vec<usize>) -> Result<pipeline::SearchResult, Box<dyn StdError>> {
    let mut run = RunDir::open(root)?;
    let record = pipeline::target(
        &mut run,
        &TargetInput::Ranking {
            ranking: ranks,
            signs: None,
            stakeholder_id: None,
        },
        None,
        None,
    )?;
    Ok(pipeline::search(&mut run, Some(&record.target_id), MhmnConfig::default(), &noop)?)
}

// 6
fn identity_floor(shared: &Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ctx = RunContext::load(&RunDir::open(&shared.root)?)?;
    let (_, fis) = ctx.reference()?;
    let reference = rank_by_magnitude(&fis.values);
    let mut gains = Vec::new();
    for t in 0..10 {
        let target = random_ranking(20, &mut rng);
        let result = search_ranking(&shared.root, target.ranks().to_vec())?;
        let saem = &result.saem;
        let floor = spearman_exact(&reference, &target)?;
        ensure!(saem.identity_spearman == floor, "target {t}: identity scored {} but reference is {floor}", saem.identity_spearman);
        ensure!(saem.spearman_vs_target >= floor, "target {t}: SAEM {} below reference {floor}", saem.spearman_vs_target);
        ensure!(saem.loss_in_bound && in_bound(&ctx, &saem.best_mask.values)?, "target {t}: selected mask out of bound");
        gains.push(saem.spearman_vs_target - floor);
    }
    let improved = gains.iter().filter(|g| **g > 0.0).count();
    Ok(format!("10 targets, floor held, {improved} improved, max gain {:.4}", gains.iter().cloned().fold(0.0, f64::max)))
}

// 7
fn end_to_end(shared: &Shared) -> Outcome {
    let ctx = RunContext::load(&RunDir::open(&shared.root)?)?;
    let truth = rank_by_magnitude(&default_weights(20));
    let order = truth.order();
    let att = ctx.attributions.as_ref().unwrap();
    let mag = att.attributions.mapv(f64::abs);
    let range = |f: usize| {
        let c = mag.column(f);
        (c.fold(f64::INFINITY, |a, &b| a.min(b)), c.fold(0.0f64, |a, &b| a.max(b)))
    };
    let pos = (0..order.len() - 1)
        .find(|&i| {
            let ((lo_a, hi_a), (lo_b, hi_b)) = (range(order[i]), range(order[i + 1]));
            lo_a <= hi_b && lo_b <= hi_a
        })
        .ok_or("no adjacent pair with overlapping attribution ranges")?;
    let mut swapped = order.clone();
    swapped.swap(pos, pos + 1);
    let target = Ranking::from_order(&swapped)?;
    let result = search_ranking(&shared.root, target.ranks().to_vec())?;
    let saem = &result.saem;
    ensure!(
        saem.spearman_vs_target > saem.identity_spearman,
        "no improvement: SAEM {} vs reference {}",
        saem.spearman_vs_target,
        saem.identity_spearman
    );
    let row = result
        .comparison
        .iter()
        .find(|r| r.k == 0.25)
        .ok_or("no comparison row at k = 0.25")?;
    ensure!(
        row.saem.fa >= row.reference.fa && row.saem.ra >= row.reference.ra,
        "FA/RA decreased: reference ({}, {}), SAEM ({}, {})",
        row.reference.fa,
        row.reference.ra,
        row.saem.fa,
        row.saem.ra
    );
    ensure!(in_bound(&ctx, &saem.best_mask.values)?, "selected mask out of bound");
    Ok(format!(
        "swap of truth ranks {} and {}: Spearman {:.4} -> {:.4}; k=0.25 FA {} -> {}, RA {} -> {}",
        pos + 1,
        pos + 2,
        saem.identity_spearman,
        saem.spearman_vs_target,
        row.reference.fa,
        row.saem.fa,
        row.reference.ra,
        row.saem.ra
    ))
}

// 8
fn constrained_swap() -> Outcome {
    let dir = tempfile::tempdir()?;
    let root = dir.path().join("two");
    let opts = SynthOptions {
        task: SynthTask::TwoDominant,
        ..Default::default()
    };
    pipeline::synth(&root, &opts, false)?;
    let mut run = RunDir::open(&root)?;
    pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 5)?;
    pipeline::sample(
        &mut run,
        RashomonConfig {
            epsilon: 0.01,
            ..Default::default()
        },
    )?;
    pipeline::dman(&mut run, DmanConfig::default())?;
    let ctx = RunContext::load(&run)?;
    let (strong, weak) = (1usize, 2usize);
    let mag = ctx.attributions.as_ref().unwrap().attributions.mapv(f64::abs);
    let weak_max = mag.column(weak).fold(0.0f64, |a, &b| a.max(b));
    let strong_min = mag.column(strong).fold(f64::INFINITY, |a, &b| a.min(b));
    ensure!(weak_max < strong_min, "intervals overlap: weak max {weak_max}, strong min {strong_min}");
    for (i, row) in mag.rows().into_iter().enumerate() {
        let r = rank_by_magnitude(row.as_slice().unwrap());
        ensure!(r.rank(strong) < r.rank(weak), "sampled mask {i} ranks the weak feature first");
    }

    let (_, fis) = ctx.reference()?;
    let mut order = rank_by_magnitude(&fis.values).order();
    let (a, b) = (
        order.iter().position(|&f| f == strong).unwrap(),
        order.iter().position(|&f| f == weak).unwrap(),
    );
    order.swap(a, b);
    let result = search_ranking(&root, Ranking::from_order(&order)?.ranks().to_vec())?;
    let saem = &result.saem;
    let achieved = &saem.achieved_ranking;
    ensure!(achieved.rank(strong) < achieved.rank(weak), "optimized mask ranks the weak feature first");
    ensure!(saem.spearman_vs_target < 1.0, "reported a perfect match");
    Ok(format!(
        "weak max {weak_max:.4} < strong min {strong_min:.4}; {} masks and SAEM keep the order; spearman {:.4}",
        mag.nrows(),
        saem.spearman_vs_target
    ))
}

// 9
fn gap_sanity() -> Outcome {
    let p = 10;
    let mut w = vec![3.0, -2.0, 1.5];
    w.extend((3..p).map(|j| if j % 2 == 0 { 0.02 } else { -0.01 }));
    let ds = generate_synthetic(&SyntheticSpec {
        n: 1000,
        weights: w.clone(),
        noise_std: 0.0,
        seed: 9,
    })?;
    let model = LinearModel {
        weights: w.clone(),
        bias: 0.0,
    };
    let rows: Vec<usize> = (0..200).collect();
    let faithful = rank_by_magnitude(&w);
    let inverted = Ranking::from_ranks(faithful.ranks().iter().map(|r| p + 1 - r).collect())?;
    let k = 0.3;
    let mut table = Vec::new();
    for seed in [11, 22, 33] {
        let cfg = GapConfig {
            n_perturb: 100,
            seed,
            ..Default::default()
        };
        let pgi = prediction_gap(&model, &ds, &rows, &faithful, k, GapMode::Important, &cfg)?;
        let pgu = prediction_gap(&model, &ds, &rows, &faithful, k, GapMode::Unimportant, &cfg)?;
        let pgi_inv = prediction_gap(&model, &ds, &rows, &inverted, k, GapMode::Important, &cfg)?;
        ensure!(pgi > 0.0, "seed {seed}: PGI {pgi}");
        ensure!(pgu < 0.1 * pgi, "seed {seed}: PGU {pgu} vs PGI {pgi}");
        ensure!(pgi >= pgi_inv, "seed {seed}: inverted PGI {pgi_inv} above faithful {pgi}");
        table.push([pgi, pgu, pgi_inv]);
    }
    for m in 0..3 {
        let v: Vec<f64> = table.iter().map(|t| t[m]).collect();
        let mean = v.iter().sum::<f64>() / 3.0;
        let spread = v.iter().map(|x| (x - mean).abs() / mean).fold(0.0, f64::max);
        ensure!(spread <= 0.05, "seeds disagree by {:.1}% on {v:?}", spread * 100.0);
    }
    Ok(format!(
        "PGI {:.4}, PGU {:.5}, inverted PGI {:.4} (first seed)",
        table[0][0], table[0][1], table[0][2]
    ))
}

// 10
fn fairness_reporting() -> Outcome {
    let dir = tempfile::tempdir()?;
    let root = dir.path().join("groups");
    let opts = SynthOptions {
        task: SynthTask::Subgroup,
        ..Default::default()
    };
    pipeline::synth(&root, &opts, false)?;
    let mut run = RunDir::open(&root)?;
    pipeline::train_reference(&mut run, TrainConfig::logistic(0), 0, 5)?;
    let ctx = RunContext::load(&run)?;
    let entries = pipeline::fairness(&run, &ctx, &[0.25])?;
    let report = &entries[0].report;
    let bounded = ["fa", "ra", "sa", "sra", "pra", "pgi", "pgu"];
    for (m, v) in &report.disparities {
        let hi = if bounded.contains(&m.as_str()) { 1.0 } else { 2.0 };
        ensure!((0.0..=hi).contains(v), "{m} disparity {v} out of range");
    }
    let max = report.disparities.values().cloned().fold(0.0, f64::max);
    ensure!(max > 0.0, "reference shows no disparity");

    // Control: every row appears once in each group and the model ignores
    // the group column.
    let base = generate_synthetic(&SyntheticSpec {
        n: 1000,
        ..SyntheticSpec::default_task(10)
    })?;
    let (n, p) = (base.n(), base.p());
    let x = base.features();
    let features = Array2::from_shape_fn((2 * n, p + 1), |(i, j)| if j == p { (i >= n) as u8 as f64 } else { x[[i % n, j]] });
    let mut labels = base.labels().to_vec();
    labels.extend_from_slice(base.labels());
    let mut meta = base.feature_meta().to_vec();
    meta.push(FeatureMeta {
        name: "group".into(),
        kind: FeatureKind::Discrete,
        mean: 0.0,
        std: 1.0,
        categories: Vec::new(),
    });
    let twin = Dataset::new("twin", features, labels, meta, Some(p))?;
    let mut w = default_weights(p);
    w.push(0.0);
    let model = LinearModel {
        weights: w.clone(),
        bias: 0.0,
    };
    let rows: Vec<usize> = (0..2 * n).collect();
    let control = fairness_suite(
        &model,
        &twin,
        &rows,
        |r| permutation_fis_on_rows(&model, &twin, r, 5, 0),
        |_| AttributionVector::new(w.clone(), "truth", "twin"),
        0.25,
        &GapConfig::default(),
    )?;
    ensure!(
        control.disparities.values().all(|v| *v == 0.0),
        "control disparities {:?}",
        control.disparities
    );
    Ok(format!("reference max disparity {max:.4}; control all zero"))
}

// 11
fn reproducibility(shared: &Shared) -> Outcome {
    let dir = tempfile::tempdir()?;
    let checks = pipeline::replay(&shared.root, &dir.path().join("replay"))?;
    let paths: Vec<&str> = checks.iter().map(|c| c.path.as_str()).collect();
    for want in ["rashomon/masks.csv", "rashomon/attributions.csv"] {
        ensure!(paths.contains(&want), "{want} was not compared");
    }
    ensure!(paths.iter().any(|p| p.ends_with("/mask.csv")), "no SAEM mask was compared");
    let differing: Vec<&str> = checks.iter().filter(|c| !c.identical).map(|c| c.path.as_str()).collect();
    ensure!(differing.is_empty(), "differs after replay: {differing:?}");
    Ok(format!("{} files byte-identical", checks.len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg.into())
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.1?}, limit {l:?}").into()),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS {name}: {detail} [{:.1}s]", elapsed.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name}: {e} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    };
    let secs = |s: u64| Some(Duration::from_secs(s));

    report(1, "spearman examples", None, &mut spearman_examples);
    report(2, "sorting-network hard limit", secs(10), &mut hard_limit);
    report(3, "gradient suites", secs(60), &mut gradient_suites);
    report(4, "rashomon soundness and nesting", secs(120), &mut rashomon_soundness);
    report(5, "metric oracle", secs(10), &mut metric_oracle);

    let start = Instant::now();
    let shared = build_shared();
    println!("shared synthetic run built in {:.1}s", start.elapsed().as_secs_f64());
    match &shared {
        Ok(s) => {
            report(6, "identity floor", secs(600), &mut || identity_floor(s));
            report(7, "end-to-end improvement", secs(300), &mut || end_to_end(s));
        }
        Err(e) => {
            for (id, name) in [(6, "identity floor"), (7, "end-to-end improvement")] {
                report(id, name, None, &mut || Err(format!("shared run: {e}").into()));
            }
        }
    }
    report(8, "constrained swap", secs(120), &mut constrained_swap);
    report(9, "prediction-gap sanity", secs(30), &mut gap_sanity);
    report(10, "fairness reporting", secs(120), &mut fairness_reporting);
    match &shared {
        Ok(s) => report(11, "reproducibility", None, &mut || reproducibility(s)),
        Err(e) => report(11, "reproducibility", None, &mut || Err(format!("shared run: {e}").into())),
    }

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
