//! Pipeline stages over a run directory. Each stage checks its
//! prerequisites, writes its artifacts atomically and records their hashes
//! in the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use exagree_core::attribution::{build_attribution_dataset, ground_truth_lr, permutation_fis, permutation_fis_on_rows};
use exagree_core::data::{default_weights, generate_subgroup_task, generate_synthetic, load_csv, split, SubgroupSpec, SyntheticSpec};
use exagree_core::dman::{train_dman, TrainingReport};
use exagree_core::elicitation::{compile_target, llm_elicit, parse_preferences, PreferenceBackend};
use exagree_core::metrics::{best_count, fairness_suite, full_report, render_table, GapConfig};
use exagree_core::models::{load_model, save_model, TrainConfig};
use exagree_core::rashomon::sample_masks;
use exagree_core::saem::{audit_disagreement, optimize_saem_with_progress, AuditReport, ExplainerKind};
use exagree_core::{
    rank_of, AgreementReport, AttributionDataset, AttributionVector, Dataset, DmanConfig, DmanModel, FairnessReport,
    MaskedModel, MhmnConfig, Model, PreferenceProgram, Predictor, RashomonConfig, RashomonSample, Ranking, SaemResult,
    StakeholderTarget, TargetSource, TaskSplit,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::run::{atomic_write, sha256_bytes, DatasetRecord, DatasetSource, LockGuard, RunDir, Stage};

pub const REFERENCE_FIS: &str = "models/reference_fis.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTask {
    /// Sign-alternating descending weights; ranks 3 and 4 nearly tied.
    Default,
    /// Label rule differs between a majority and a minority group.
    Subgroup,
    /// Two features carry almost all of the signal.
    TwoDominant,
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub task: SynthTask,
    pub n: usize,
    pub p: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub valid_fraction: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            task: SynthTask::Default,
            n: 5000,
            p: 20,
            noise_std: 0.0,
            seed: 0,
            valid_fraction: 0.2,
        }
    }
}

pub fn two_dominant_weights(p: usize) -> Vec<f64> {
    (0..p)
        .map(|j| match j {
            0 => 3.0,
            1 => -2.5,
            _ => 0.2 * 0.9f64.powi(j as i32 - 2),
        })
        .collect()
}

/// Majority uses [`default_weights`]; the minority reverses which features
/// matter.
pub fn subgroup_spec(n: usize, p: usize, noise_std: f64, seed: u64) -> SubgroupSpec {
    let majority = default_weights(p);
    let mut minority = majority.clone();
    minority.reverse();
    SubgroupSpec {
        n,
        weights_majority: majority,
        weights_minority: minority,
        minority_fraction: 0.3,
        noise_std,
        seed,
    }
}

pub fn synth(root: &Path, opts: &SynthOptions, force: bool) -> Result<RunDir> {
    let (ds, source) = match opts.task {
        SynthTask::Default | SynthTask::TwoDominant => {
            let weights = if opts.task == SynthTask::Default {
                default_weights(opts.p)
            } else {
                two_dominant_weights(opts.p)
            };
            let spec = SyntheticSpec {
                n: opts.n,
                weights,
                noise_std: opts.noise_std,
                seed: opts.seed,
            };
            (generate_synthetic(&spec)?, DatasetSource::Synthetic { spec })
        }
        SynthTask::Subgroup => {
            let spec = subgroup_spec(opts.n, opts.p, opts.noise_std, opts.seed);
            (generate_subgroup_task(&spec)?, DatasetSource::Subgroup { spec })
        }
    };
    init_run(root, ds, source, opts.seed, opts.valid_fraction, force)
}

pub fn ingest(
    root: &Path,
    csv: &Path,
    label_column: &str,
    subgroup_column: Option<&str>,
    seed: u64,
    valid_fraction: f64,
    force: bool,
) -> Result<RunDir> {
    let ds = load_csv(csv, label_column, subgroup_column)?;
    let source = DatasetSource::Csv {
        path: csv.display().to_string(),
        label_column: label_column.to_string(),
        subgroup_column: subgroup_column.map(str::to_string),
    };
    init_run(root, ds, source, seed, valid_fraction, force)
}

fn init_run(root: &Path, ds: Dataset, source: DatasetSource, seed: u64, valid_fraction: f64, force: bool) -> Result<RunDir> {
    split(&ds, valid_fraction, seed)?;
    let mut run = RunDir::create(root, force)?;
    let _lock = run.lock()?;
    let mut bytes = Vec::new();
    ds.write_csv(&mut bytes)?;
    run.write_artifact("dataset.csv", &bytes)?;
    let m = &mut run.manifest;
    m.seeds.data = seed;
    m.seeds.split = seed;
    m.config.valid_fraction = valid_fraction;
    m.dataset = Some(DatasetRecord {
        name: ds.name().to_string(),
        source,
        file: "dataset.csv".into(),
        sha256: sha256_bytes(&bytes),
        n: ds.n(),
        p: ds.p(),
        feature_meta: ds.feature_meta().to_vec(),
        subgroup_column: ds.subgroup_column(),
    });
    run.complete(Stage::Data);
    run.save()?;
    Ok(run)
}

pub fn load_dataset(run: &RunDir) -> Result<(Dataset, TaskSplit)> {
    run.require(&[Stage::Data])?;
    let rec = run.manifest.dataset.as_ref().ok_or(CliError::StageMissing("data"))?;
    let file = fs::File::open(run.path(&rec.file))?;
    let ds = Dataset::read_processed_csv(file, &rec.name, rec.feature_meta.clone(), rec.subgroup_column)?;
    let s = split(&ds, run.manifest.config.valid_fraction, run.manifest.seeds.split)?;
    Ok((ds, s))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceSummary {
    pub kind: String,
    pub validation_loss: f64,
    pub ranking: Ranking,
}

pub fn train_reference(run: &mut RunDir, cfg: TrainConfig, fis_seed: u64, fis_repeats: usize) -> Result<ReferenceSummary> {
    run.require(&[Stage::Data])?;
    let _lock = run.lock()?;
    let (ds, s) = load_dataset(run)?;
    let model = cfg.train(&ds, &s)?;
    let fis = permutation_fis(&model, &ds, &s, fis_repeats, fis_seed)?;
    run.write_artifact_dir("models", |d| {
        save_model(d, "reference", &model, &cfg)?;
        Ok(())
    })?;
    run.write_artifact(REFERENCE_FIS, &serde_json::to_vec_pretty(&fis)?)?;
    run.manifest.seeds.reference = cfg.seed;
    run.manifest.seeds.fis = fis_seed;
    run.manifest.config.fis_repeats = fis_repeats;
    run.manifest.config.reference = Some(cfg);
    run.complete(Stage::Reference);
    run.save()?;
    Ok(ReferenceSummary {
        kind: model.kind().to_string(),
        validation_loss: exagree_core::models::loss_on_rows(&model, &ds, &s.valid_idx),
        ranking: rank_of(&fis),
    })
}

pub fn load_reference(run: &RunDir) -> Result<(Model, AttributionVector)> {
    run.require(&[Stage::Reference])?;
    let (model, _) = load_model(&run.path("models"), "reference")?;
    let fis: AttributionVector = serde_json::from_slice(&fs::read(run.path(REFERENCE_FIS))?)?;
    Ok((model, fis))
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleSummary {
    pub masks: usize,
    pub attempts: usize,
    pub complete: bool,
    pub reference_loss: f64,
    pub bound: f64,
}

pub fn sample(run: &mut RunDir, cfg: RashomonConfig) -> Result<SampleSummary> {
    run.require(&[Stage::Data, Stage::Reference])?;
    let _lock = run.lock()?;
    let (ds, s) = load_dataset(run)?;
    let (model, _) = load_reference(run)?;
    let sample = sample_masks(&model, &ds, &s, &cfg)?;
    let att = build_attribution_dataset(
        &sample,
        &model,
        &ds,
        &s,
        run.manifest.config.fis_repeats,
        run.manifest.seeds.fis,
    )?;
    let names = ds.feature_names();
    run.write_artifact_dir("rashomon", |d| {
        sample.save(d, &names)?;
        att.save(d, &names)?;
        Ok(())
    })?;
    run.manifest.seeds.rashomon = cfg.seed;
    run.manifest.config.rashomon = Some(cfg);
    run.complete(Stage::Rashomon);
    run.save()?;
    Ok(SampleSummary {
        masks: sample.len(),
        attempts: sample.attempts,
        complete: sample.complete,
        reference_loss: sample.reference_loss,
        bound: sample.bound,
    })
}

pub fn dman(run: &mut RunDir, cfg: DmanConfig) -> Result<TrainingReport> {
    run.require(&[Stage::Data, Stage::Reference, Stage::Rashomon])?;
    let _lock = run.lock()?;
    let att = AttributionDataset::load(&run.path("rashomon"))?;
    let model = train_dman(&att, &cfg)?;
    model.check_gate(cfg.min_r2)?;
    run.write_artifact_dir("dman", |d| Ok(model.save(d, cfg.seed)?))?;
    run.manifest.seeds.dman = cfg.seed;
    run.manifest.config.dman = Some(cfg);
    run.complete(Stage::Dman);
    run.save()?;
    Ok(model.report.clone())
}

/// Everything a search or a report needs, loaded once per run.
pub struct RunContext {
    pub ds: Dataset,
    pub split: TaskSplit,
    pub reference: Option<(Model, AttributionVector)>,
    pub sample: Option<RashomonSample>,
    pub attributions: Option<AttributionDataset>,
    pub dman: Option<DmanModel>,
    pub fis_repeats: usize,
    pub fis_seed: u64,
    pub ks: Vec<f64>,
    pub gap: GapConfig,
}

impl RunContext {
    /// Loads the artifacts of every completed stage.
    pub fn load(run: &RunDir) -> Result<Self> {
        let (ds, split) = load_dataset(run)?;
        let m = &run.manifest;
        let reference = if m.is_complete(Stage::Reference) { Some(load_reference(run)?) } else { None };
        let (sample, attributions) = if m.is_complete(Stage::Rashomon) {
            let dir = run.path("rashomon");
            (Some(RashomonSample::load(&dir)?), Some(AttributionDataset::load(&dir)?))
        } else {
            (None, None)
        };
        let dman = if m.is_complete(Stage::Dman) { Some(DmanModel::load(&run.path("dman"))?) } else { None };
        Ok(Self {
            ds,
            split,
            reference,
            sample,
            attributions,
            dman,
            fis_repeats: m.config.fis_repeats,
            fis_seed: m.seeds.fis,
            ks: m.config.ks.clone(),
            gap: m.config.gap,
        })
    }

    pub fn reference(&self) -> Result<(&Model, &AttributionVector)> {
        self.reference
            .as_ref()
            .map(|(m, a)| (m, a))
            .ok_or(CliError::StageMissing("reference"))
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.ds.feature_names()
    }
}

/// How a stakeholder states a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetInput {
    Text {
        text: String,
        #[serde(default)]
        stakeholder_id: Option<String>,
    },
    Ranking {
        /// 1-based rank of every feature, in feature order.
        ranking: Vec<usize>,
        #[serde(default)]
        signs: Option<Vec<i8>>,
        #[serde(default)]
        stakeholder_id: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub target_id: String,
    pub text: Option<String>,
    pub program: Option<PreferenceProgram>,
    pub target: StakeholderTarget,
    /// Feature names in target order, most important first.
    pub ordered_features: Vec<String>,
}

/// Compile `input` against the reference ranking. Text goes through the
/// preference language, or through `backend` when one is given.
pub fn compile_input(
    input: &TargetInput,
    names: &[String],
    reference: &Ranking,
    backend: Option<&dyn PreferenceBackend>,
) -> Result<TargetRecord> {
    let (text, program, mut target, who) = match input {
        TargetInput::Text { text, stakeholder_id } => {
            let (prog, source) = match backend {
                Some(b) => (llm_elicit(text, names, b)?, TargetSource::Llm),
                None => (parse_preferences(text, names)?, TargetSource::Dsl),
            };
            let mut t = compile_target(&prog, reference)?;
            t.source = source;
            (Some(text.clone()), Some(prog), t, stakeholder_id.clone())
        }
        TargetInput::Ranking {
            ranking,
            signs,
            stakeholder_id,
        } => {
            if ranking.len() != names.len() {
                return Err(CliError::Invalid(format!(
                    "ranking has {} entries but the run has {} features",
                    ranking.len(),
                    names.len()
                )));
            }
            let r = Ranking::from_ranks(ranking.clone())
                .map_err(|e| CliError::Invalid(format!("ranking is not a permutation of 1..{}: {e}", names.len())))?;
            let t = StakeholderTarget::new(r, signs.clone(), TargetSource::Ui)?;
            (None, None, t, stakeholder_id.clone())
        }
    };
    target.stakeholder_id = who.unwrap_or_default();
    let ordered_features = target.target_ranking.order().into_iter().map(|f| names[f].clone()).collect();
    let target_id = {
        let key = serde_json::to_vec(&(&target, &text))?;
        format!("t-{}", &sha256_bytes(&key)[..10])
    };
    Ok(TargetRecord {
        target_id,
        text,
        program,
        target,
        ordered_features,
    })
}

pub fn target_dir(root: &Path, tid: &str) -> PathBuf {
    root.join("targets").join(tid)
}

/// Target ids are generated by [`compile_input`] or supplied on the command
/// line; anything that could escape the targets directory is refused.
pub fn check_target_id(tid: &str) -> Result<()> {
    let ok = !tid.is_empty() && tid.len() <= 64 && tid.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("invalid target id {tid:?}")))
    }
}

/// Write `targets/{tid}/target.json`. An existing identical target is left
/// alone; a different one under the same id is refused.
pub fn write_target(root: &Path, record: &TargetRecord) -> Result<bool> {
    check_target_id(&record.target_id)?;
    let path = target_dir(root, &record.target_id).join("target.json");
    let bytes = serde_json::to_vec_pretty(record)?;
    if path.exists() {
        if fs::read(&path)? == bytes {
            return Ok(false);
        }
        return Err(CliError::Busy(format!("target {} already exists with different content", record.target_id)));
    }
    atomic_write(&path, &bytes)?;
    Ok(true)
}

pub fn read_target(root: &Path, tid: &str) -> Result<TargetRecord> {
    check_target_id(tid)?;
    let path = target_dir(root, tid).join("target.json");
    if !path.exists() {
        return Err(CliError::NotFound(format!("target {tid}")));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn list_targets(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("targets");
    let mut ids = Vec::new();
    if dir.exists() {
        for e in fs::read_dir(dir)? {
            let e = e?;
            if e.path().join("target.json").exists() {
                ids.push(e.file_name().to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn target(
    run: &mut RunDir,
    input: &TargetInput,
    id: Option<&str>,
    backend: Option<&dyn PreferenceBackend>,
) -> Result<TargetRecord> {
    run.require(&[Stage::Data, Stage::Reference, Stage::Rashomon, Stage::Dman])?;
    let _lock = run.lock()?;
    let (_, fis) = load_reference(run)?;
    let mut record = compile_input(input, &run.feature_names(), &rank_of(&fis), backend)?;
    if let Some(id) = id {
        record.target_id = id.to_string();
    }
    write_target(run.root(), &record)?;
    run.record_artifact(&format!("targets/{}/target.json", record.target_id))?;
    run.manifest.default_target = Some(record.target_id.clone());
    run.complete(Stage::Targets);
    run.save()?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub k: f64,
    pub reference: AgreementReport,
    pub saem: AgreementReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub target_id: String,
    pub config: MhmnConfig,
    pub target: StakeholderTarget,
    pub reference_ranking: Ranking,
    pub reference_attributions: AttributionVector,
    pub saem: SaemResult,
    /// Reference model and SAEM scored against the target at each k.
    pub comparison: Vec<ComparisonRow>,
}

impl SearchResult {
    pub fn mask_csv(&self, names: &[String]) -> String {
        let mut out = names.join(",");
        out.push('\n');
        let cells: Vec<String> = self.saem.best_mask.values.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
        out
    }
}

/// Reference and SAEM metric rows against the target at each `k`.
pub fn comparison_rows(
    ctx: &RunContext,
    target: &StakeholderTarget,
    mask: &[f64],
    saem_attr: &AttributionVector,
    ks: &[f64],
) -> Result<Vec<ComparisonRow>> {
    let (model, fis) = ctx.reference()?;
    let target_attr = target.as_attribution(&fis.signs())?;
    let masked = MaskedModel::new(model, mask)?;
    let mut reference_attr = fis.clone();
    reference_attr.method = "reference".into();
    let mut saem_attr = saem_attr.clone();
    saem_attr.method = "saem".into();
    let rows = &ctx.split.valid_idx;
    ks.iter()
        .map(|&k| {
            Ok(ComparisonRow {
                k,
                reference: full_report(model, &ctx.ds, rows, &reference_attr, &target_attr, k, &ctx.gap)?,
                saem: full_report(&masked, &ctx.ds, rows, &saem_attr, &target_attr, k, &ctx.gap)?,
            })
        })
        .collect()
}

/// Run the multi-head search for one target and write `result.json`,
/// `trace.csv` and `mask.csv` next to its `target.json`. The candidate
/// scoring uses the run's permutation-importance seed and repeat count.
pub fn search_target(
    root: &Path,
    ctx: &RunContext,
    tid: &str,
    mut cfg: MhmnConfig,
    overwrite: bool,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<SearchResult> {
    let record = read_target(root, tid)?;
    let dir = target_dir(root, tid);
    let _lock = LockGuard::acquire(&dir.join("search.lock"), "search")?;
    if !overwrite && dir.join("result.json").exists() {
        return Err(CliError::Busy(format!("target {tid} already has a result")));
    }
    let (model, fis) = ctx.reference()?;
    let sample = ctx.sample.as_ref().ok_or(CliError::StageMissing("rashomon"))?;
    let dman = ctx.dman.as_ref().ok_or(CliError::StageMissing("dman"))?;
    cfg.fis_seed = ctx.fis_seed;
    cfg.fis_repeats = ctx.fis_repeats;
    let reference_ranking = rank_of(fis);
    let mut saem = optimize_saem_with_progress(
        model,
        &ctx.ds,
        &ctx.split,
        sample,
        dman,
        &reference_ranking,
        &record.target,
        &cfg,
        progress,
    )?;
    let comparison = comparison_rows(ctx, &record.target, &saem.best_mask.values, &saem.true_attributions, &ctx.ks)?;
    let mut trace = Vec::new();
    saem.write_trace_csv(&mut trace)?;
    saem.per_head_trace.clear();
    let result = SearchResult {
        target_id: tid.to_string(),
        config: cfg,
        target: record.target,
        reference_ranking,
        reference_attributions: fis.clone(),
        saem,
        comparison,
    };
    atomic_write(&dir.join("trace.csv"), &trace)?;
    atomic_write(&dir.join("mask.csv"), result.mask_csv(&ctx.feature_names()).as_bytes())?;
    atomic_write(&dir.join("result.json"), &serde_json::to_vec_pretty(&result)?)?;
    Ok(result)
}

pub fn read_result(root: &Path, tid: &str) -> Result<SearchResult> {
    check_target_id(tid)?;
    let path = target_dir(root, tid).join("result.json");
    if !path.exists() {
        return Err(CliError::NotFound(format!("no result for target {tid}")));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn search(
    run: &mut RunDir,
    tid: Option<&str>,
    cfg: MhmnConfig,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<SearchResult> {
    run.require(&[Stage::Data, Stage::Reference, Stage::Rashomon, Stage::Dman, Stage::Targets])?;
    let tid = match tid {
        Some(t) => t.to_string(),
        None => run
            .manifest
            .default_target
            .clone()
            .ok_or_else(|| CliError::Invalid("no target given and the run has no default target".into()))?,
    };
    let _lock = run.lock()?;
    let ctx = RunContext::load(run)?;
    let result = search_target(run.root(), &ctx, &tid, cfg.clone(), true, progress)?;
    for f in ["result.json", "trace.csv", "mask.csv"] {
        run.record_artifact(&format!("targets/{tid}/{f}"))?;
    }
    run.manifest.seeds.saem = cfg.seed;
    run.manifest.config.mhmn = Some(cfg);
    run.complete(Stage::Saem);
    run.save()?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBlock {
    pub title: String,
    pub k: f64,
    pub rows: Vec<AgreementReport>,
    pub best: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub blocks: Vec<ReportBlock>,
}

pub fn render_blocks(blocks: &[ReportBlock]) -> Result<String> {
    let mut out = String::new();
    for b in blocks {
        writeln!(out, "## {} (k = {})", b.title, b.k).unwrap();
        out.push_str(&render_table(&b.rows)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reference model versus SAEM, scored against each searched target.
pub fn eval(run: &mut RunDir, ks: &[f64]) -> Result<EvalReport> {
    run.require(&[Stage::Data, Stage::Reference, Stage::Rashomon, Stage::Dman, Stage::Targets, Stage::Saem])?;
    let _lock = run.lock()?;
    let ctx = RunContext::load(run)?;
    let mut blocks = Vec::new();
    for tid in list_targets(run.root())? {
        let Ok(result) = read_result(run.root(), &tid) else { continue };
        for row in comparison_rows(&ctx, &result.target, &result.saem.best_mask.values, &result.saem.true_attributions, ks)? {
            let rows = vec![row.reference, row.saem];
            blocks.push(ReportBlock {
                title: format!("target {tid}"),
                k: row.k,
                best: best_count(&rows)?,
                rows,
            });
        }
    }
    let report = EvalReport { blocks };
    run.write_artifact("reports/eval.json", &serde_json::to_vec_pretty(&report)?)?;
    run.write_artifact("reports/eval.txt", render_blocks(&report.blocks)?.as_bytes())?;
    run.manifest.config.ks = ks.to_vec();
    run.complete(Stage::Reports);
    run.save()?;
    Ok(report)
}

/// Ground-truth attributions: the generating weights (in standardized
/// units) for synthetic runs, otherwise the coefficients of a linear
/// reference, otherwise the reference permutation importances.
pub fn ground_truth(run: &RunDir, ctx: &RunContext, group: Option<u8>) -> Result<AttributionVector> {
    let (model, fis) = ctx.reference()?;
    let meta = ctx.ds.feature_meta();
    let scaled = |w: &[f64]| -> Vec<f64> {
        let mut v: Vec<f64> = w.iter().zip(meta).map(|(w, m)| w * m.std).collect();
        v.resize(meta.len(), 0.0);
        v
    };
    let values = match run.manifest.dataset.as_ref().map(|d| &d.source) {
        Some(DatasetSource::Synthetic { spec }) => Some(scaled(&spec.weights)),
        Some(DatasetSource::Subgroup { spec }) => Some(scaled(if group == Some(1) {
            &spec.weights_minority
        } else {
            &spec.weights_majority
        })),
        _ => None,
    };
    match (values, model.as_linear()) {
        (Some(v), _) => Ok(AttributionVector::new(v, "ground_truth", "data")?),
        (None, Some(lin)) => Ok(ground_truth_lr(lin)),
        (None, None) => Ok(fis.clone()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessEntry {
    pub k: f64,
    pub report: FairnessReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOutput {
    pub audit: AuditReport,
    pub fairness: Vec<FairnessEntry>,
}

/// Fairness of the reference model's permutation importances, per k.
pub fn fairness(run: &RunDir, ctx: &RunContext, ks: &[f64]) -> Result<Vec<FairnessEntry>> {
    let (model, _) = ctx.reference()?;
    let col = ctx
        .ds
        .subgroup_column()
        .ok_or_else(|| CliError::Invalid("dataset has no subgroup column".into()))?;
    let group_of = |rows: &[usize]| rows.first().map(|&r| ctx.ds.row(r)[col] as u8);
    ks.iter()
        .map(|&k| {
            let report = fairness_suite(
                model,
                &ctx.ds,
                &ctx.split.valid_idx,
                |rows| permutation_fis_on_rows(model, &ctx.ds, rows, ctx.fis_repeats, ctx.fis_seed),
                |rows| ground_truth(run, ctx, group_of(rows)).map_err(|e| exagree_core::Error::InvalidData(e.to_string())),
                k,
                &ctx.gap,
            )?;
            Ok(FairnessEntry { k, report })
        })
        .collect()
}

/// Every explainer on the reference model and on each SAEM, scored against
/// the ground truth; plus subgroup fairness when the data has a group.
pub fn audit(run: &mut RunDir, ks: &[f64], explainers: &[ExplainerKind], seed: u64) -> Result<AuditOutput> {
    run.require(&[Stage::Data, Stage::Reference])?;
    let _lock = run.lock()?;
    let ctx = RunContext::load(run)?;
    let (model, _) = ctx.reference()?;
    let gt = ground_truth(run, &ctx, None)?;
    let masks: Vec<(String, Vec<f64>)> = list_targets(run.root())?
        .into_iter()
        .filter_map(|t| read_result(run.root(), &t).ok().map(|r| (format!("saem:{t}"), r.saem.best_mask.values)))
        .collect();
    let masked: Vec<(String, MaskedModel<'_, Model>)> = masks
        .iter()
        .map(|(id, m)| Ok((id.clone(), MaskedModel::new(model, m)?)))
        .collect::<Result<_>>()?;
    let mut models: Vec<(String, &dyn Predictor)> = vec![("reference".into(), model as &dyn Predictor)];
    models.extend(masked.iter().map(|(id, m)| (id.clone(), m as &dyn Predictor)));
    let report = audit_disagreement(&models, explainers, &ctx.ds, &ctx.split, &gt, ks, &ctx.gap, seed)?;
    let fairness = if ctx.ds.subgroup_column().is_some() { fairness(run, &ctx, ks)? } else { Vec::new() };
    let out = AuditOutput { audit: report, fairness };

    let blocks: Vec<ReportBlock> = out
        .audit
        .blocks
        .iter()
        .map(|b| ReportBlock {
            title: format!("model {}", b.model_id),
            k: b.k,
            rows: b.rows.clone(),
            best: b.best.clone(),
        })
        .collect();
    let mut text = render_blocks(&blocks)?;
    for f in &out.fairness {
        writeln!(text, "## subgroup disparity (k = {})", f.k).unwrap();
        for (m, v) in &f.report.disparities {
            writeln!(text, "{m:<4} {v:>8.4}").unwrap();
        }
        text.push('\n');
    }
    run.write_artifact("reports/audit.json", &serde_json::to_vec_pretty(&out)?)?;
    run.write_artifact("reports/audit.txt", text.as_bytes())?;
    run.save()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub epsilon: f64,
    pub k: f64,
    pub masks: usize,
    pub dman_r2: f64,
    pub spearman_vs_target: f64,
    pub identity_spearman: f64,
    pub fa: f64,
    pub ra: f64,
    pub sa: f64,
    pub sra: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub target_id: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut out = format!("target {}\n", self.target_id);
        writeln!(
            out,
            "{:>8} {:>6} {:>6} {:>7} {:>8} {:>8} {:>6} {:>6} {:>6} {:>6}",
            "epsilon", "k", "masks", "R2", "rho", "rho_ref", "FA", "RA", "SA", "SRA"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:>8} {:>6} {:>6} {:>7.3} {:>8.4} {:>8.4} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
                r.epsilon, r.k, r.masks, r.dman_r2, r.spearman_vs_target, r.identity_spearman, r.fa, r.ra, r.sa, r.sra
            )
            .unwrap();
        }
        out
    }
}

/// Re-run sampling, surrogate training and search for the default target
/// at each ε, each in its own child run under `ablation/`, sharing the
/// dataset, reference model and every seed with the parent.
pub fn ablate(run: &mut RunDir, epsilons: &[f64], ks: &[f64], progress: &(dyn Fn(&str) + Sync)) -> Result<AblationReport> {
    run.require(&[Stage::Data, Stage::Reference, Stage::Rashomon, Stage::Dman, Stage::Targets])?;
    if epsilons.is_empty() {
        return Err(CliError::Invalid("no epsilon values given".into()));
    }
    let tid = run
        .manifest
        .default_target
        .clone()
        .ok_or_else(|| CliError::Invalid("the run has no default target".into()))?;
    let record = read_target(run.root(), &tid)?;
    let base_rashomon = run.manifest.config.rashomon.clone().unwrap_or_default();
    let dman_cfg = run.manifest.config.dman.clone().unwrap_or_default();
    let mhmn = run.manifest.config.mhmn.clone().unwrap_or_default();
    let mut rows = Vec::new();
    for &eps in epsilons {
        progress(&format!("epsilon {eps}"));
        let child_root = run.path(&format!("ablation/eps_{eps}"));
        let mut child = fork_run(run, &child_root, Stage::Reference)?;
        sample(&mut child, RashomonConfig { epsilon: eps, ..base_rashomon.clone() })?;
        let report = dman(&mut child, dman_cfg.clone())?;
        write_target(child.root(), &record)?;
        child.record_artifact(&format!("targets/{tid}/target.json"))?;
        child.manifest.default_target = Some(tid.clone());
        child.complete(Stage::Targets);
        child.save()?;
        let result = search(&mut child, Some(&tid), mhmn.clone(), &|_, _| {})?;
        let ctx = RunContext::load(&child)?;
        let masks = ctx.sample.as_ref().map(|s| s.len()).unwrap_or(0);
        for c in comparison_rows(&ctx, &result.target, &result.saem.best_mask.values, &result.saem.true_attributions, ks)? {
            rows.push(AblationRow {
                epsilon: eps,
                k: c.k,
                masks,
                dman_r2: report.valid_r2,
                spearman_vs_target: result.saem.spearman_vs_target,
                identity_spearman: result.saem.identity_spearman,
                fa: c.saem.fa,
                ra: c.saem.ra,
                sa: c.saem.sa,
                sra: c.saem.sra,
            });
        }
    }
    let report = AblationReport { target_id: tid, rows };
    let _lock = run.lock()?;
    run.write_artifact("reports/ablation.json", &serde_json::to_vec_pretty(&report)?)?;
    run.write_artifact("reports/ablation.txt", report.render().as_bytes())?;
    run.save()?;
    Ok(report)
}

/// New run at `dest` holding copies of `src`'s artifacts up to and
/// including `upto`, with the same configuration and seeds.
pub fn fork_run(src: &RunDir, dest: &Path, upto: Stage) -> Result<RunDir> {
    let mut child = RunDir::create(dest, true)?;
    let run_id = child.manifest.run_id.clone();
    child.manifest = src.manifest.clone();
    child.manifest.run_id = run_id;
    child.manifest.stages.retain(|s, _| *s <= upto);
    child.manifest.default_target = None;
    let keep = |rel: &str| match upto {
        Stage::Data => rel == "dataset.csv",
        _ => rel == "dataset.csv" || rel.starts_with("models/"),
    };
    child.manifest.artifacts.retain(|rel, _| keep(rel));
    for rel in child.manifest.artifacts.keys() {
        let to = dest.join(rel);
        if let Some(d) = to.parent() {
            fs::create_dir_all(d)?;
        }
        fs::copy(src.path(rel), to)?;
    }
    child.verify()?;
    child.save()?;
    Ok(child)
}

/// Plain-text summary of everything the run has produced.
pub fn report(run: &mut RunDir) -> Result<String> {
    run.require(&[Stage::Data])?;
    let _lock = run.lock()?;
    let m = &run.manifest;
    let mut out = String::new();
    writeln!(out, "# run {}", m.run_id).unwrap();
    if let Some(d) = &m.dataset {
        writeln!(out, "dataset {} ({} rows, {} features)", d.name, d.n, d.p).unwrap();
    }
    for s in Stage::ALL {
        let state = m.stages.get(&s).map(String::as_str).unwrap_or("pending");
        writeln!(out, "stage {:<10} {state}", s.name()).unwrap();
    }
    let ctx = RunContext::load(run)?;
    if let Some(sample) = &ctx.sample {
        writeln!(
            out,
            "\nrashomon: {} masks, epsilon {}, reference loss {:.6}, bound {:.6}",
            sample.len(),
            sample.epsilon,
            sample.reference_loss,
            sample.bound
        )
        .unwrap();
    }
    if let Some(d) = &ctx.dman {
        writeln!(out, "surrogate: held-out R2 {:.4}", d.report.valid_r2).unwrap();
    }
    for tid in list_targets(run.root())? {
        let rec = read_target(run.root(), &tid)?;
        writeln!(out, "\ntarget {tid}: {}", rec.ordered_features.join(" > ")).unwrap();
        if let Ok(r) = read_result(run.root(), &tid) {
            writeln!(
                out,
                "  spearman vs target: reference {:.4}, saem {:.4} (candidate {})",
                r.saem.identity_spearman, r.saem.spearman_vs_target, r.saem.best_candidate
            )
            .unwrap();
        }
    }
    for name in ["eval.txt", "audit.txt", "ablation.txt"] {
        let p = run.path(&format!("reports/{name}"));
        if p.exists() {
            writeln!(out, "\n{}", fs::read_to_string(p)?).unwrap();
        }
    }
    run.write_artifact("reports/report.txt", out.as_bytes())?;
    if run.manifest.is_complete(Stage::Saem) {
        run.complete(Stage::Reports);
    }
    run.save()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub path: String,
    pub identical: bool,
}

/// Rebuild `src` from its manifest into `dest`: regenerate or copy the
/// data, then re-run every completed stage with the recorded configuration
/// and seeds. Returns a byte comparison of the sampled masks, their
/// attributions and each selected SAEM mask.
pub fn replay(src_root: &Path, dest: &Path) -> Result<Vec<ReplayCheck>> {
    let src = RunDir::open(src_root)?;
    let m = &src.manifest;
    let rec = m.dataset.as_ref().ok_or(CliError::StageMissing("data"))?;
    let mut run = match &rec.source {
        DatasetSource::Synthetic { spec } => {
            init_run(dest, generate_synthetic(spec)?, rec.source.clone(), m.seeds.split, m.config.valid_fraction, true)?
        }
        DatasetSource::Subgroup { spec } => init_run(
            dest,
            generate_subgroup_task(spec)?,
            rec.source.clone(),
            m.seeds.split,
            m.config.valid_fraction,
            true,
        )?,
        DatasetSource::Csv { .. } => fork_run(&src, dest, Stage::Data)?,
    };
    run.manifest.seeds.data = m.seeds.data;
    run.manifest.config.ks = m.config.ks.clone();
    run.manifest.config.gap = m.config.gap;
    run.save()?;
    if let (true, Some(cfg)) = (m.is_complete(Stage::Reference), &m.config.reference) {
        train_reference(&mut run, cfg.clone(), m.seeds.fis, m.config.fis_repeats)?;
    }
    if let (true, Some(cfg)) = (m.is_complete(Stage::Rashomon), &m.config.rashomon) {
        sample(&mut run, cfg.clone())?;
    }
    if let (true, Some(cfg)) = (m.is_complete(Stage::Dman), &m.config.dman) {
        dman(&mut run, cfg.clone())?;
    }
    let mut checks = Vec::new();
    if m.is_complete(Stage::Rashomon) {
        checks.push(compare_files(&src, &run, "rashomon/masks.csv")?);
        checks.push(compare_files(&src, &run, "rashomon/attributions.csv")?);
    }
    if m.is_complete(Stage::Targets) {
        let mut searched = BTreeMap::new();
        for tid in list_targets(src.root())? {
            let record = read_target(src.root(), &tid)?;
            write_target(run.root(), &record)?;
            run.record_artifact(&format!("targets/{tid}/target.json"))?;
            if let Ok(r) = read_result(src.root(), &tid) {
                searched.insert(tid, r.config);
            }
        }
        run.manifest.default_target = m.default_target.clone();
        run.complete(Stage::Targets);
        run.save()?;
        for (tid, cfg) in searched {
            search(&mut run, Some(&tid), cfg, &|_, _| {})?;
            checks.push(compare_files(&src, &run, &format!("targets/{tid}/mask.csv"))?);
        }
    }
    Ok(checks)
}

fn compare_files(a: &RunDir, b: &RunDir, rel: &str) -> Result<ReplayCheck> {
    let (pa, pb) = (a.path(rel), b.path(rel));
    let identical = pa.exists() && pb.exists() && fs::read(pa)? == fs::read(pb)?;
    Ok(ReplayCheck {
        path: rel.to_string(),
        identical,
    })
}
